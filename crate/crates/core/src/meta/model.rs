use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cgib::{self, NoiseStats};
use crate::context::{build_context_graph, context_encode, property_embeddings, ContextConfig, ContextGraph, Topology};
use crate::cprl::{bce_terms, enumerate_relation_samples, relation_term, RelationSample};
use crate::data::Dataset;
use crate::encoder::{encode_batch, EncoderConfig, MoleculeBatch};
use crate::episodes::Episode;
use crate::error::{config_err, Error, Result};
use crate::nn;
use crate::tensor::{ParamView, ParameterSet, Tensor, Var};

use super::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub context_layers: usize,
    pub context_dim: usize,
    pub head_hidden: usize,
    pub num_properties: usize,
    pub include_unknown: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            context_layers: 2,
            context_dim: 32,
            head_hidden: 32,
            num_properties: 1,
            include_unknown: true,
        }
    }
}

impl ModelConfig {
    /// Vocabulary sizes and property count taken from `ds`.
    pub fn fit_to(&mut self, ds: &Dataset) {
        self.encoder.num_atom_types = ds.max_atom_type() + 1;
        self.encoder.num_bond_types = ds.max_bond_type() + 1;
        self.num_properties = ds.labels.num_properties();
    }

    pub fn context(&self) -> ContextConfig {
        ContextConfig {
            layers: self.context_layers,
            in_dim: self.encoder.dim,
            dim: self.context_dim,
            num_properties: self.num_properties,
            include_unknown: self.include_unknown,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.context().validate()?;
        if self.head_hidden == 0 {
            return Err(config_err!("head width must be >= 1"));
        }
        Ok(())
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterSet> {
        self.validate()?;
        let mut p = ParameterSet::new();
        self.encoder.init(&mut p, rng)?;
        self.context().init(&mut p, rng)?;
        let (d1, d2, hid) = (self.encoder.dim, self.context_dim, self.head_hidden);
        nn::init_mlp2(&mut p, "pred", (2 * d2, hid, 1), rng)?;
        nn::init_mlp2(&mut p, "rel", (2 * d2, hid, 1), rng)?;
        nn::init_mlp2(&mut p, "gate", (2 * d1, hid, 1), rng)?;
        Ok(p)
    }
}

/// Everything about an episode that does not depend on parameters.
#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    pub episode: Episode,
    pub graph: ContextGraph,
    topology: Topology,
    molecules: MoleculeBatch,
    support_labels: Vec<f64>,
    query_labels: Option<Vec<f64>>,
    relations: Vec<RelationSample>,
}

impl PreparedEpisode {
    /// With `with_query_labels` the query targets are read for the outer
    /// loss; evaluation leaves them unread.
    pub fn new(ds: &Dataset, episode: Episode, model: &ModelConfig, with_query_labels: bool) -> Result<Self> {
        let graph = build_context_graph(&episode, &ds.labels)?;
        let topology = graph.topology(model.include_unknown);
        let mols: Vec<_> = graph.molecules().iter().map(|&m| &ds.molecules[m]).collect();
        let molecules = MoleculeBatch::new(&mols, &model.encoder)?;
        let support_labels = episode.support.iter().map(|&(_, y)| y as u8 as f64).collect();
        let query_labels = if with_query_labels {
            let ys = episode
                .query
                .iter()
                .map(|&q| {
                    ds.labels.get(q, episode.target).value().ok_or_else(|| {
                        Error::Usage(format!("query molecule {q} lacks a target label"))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            Some(ys)
        } else {
            None
        };
        let relations = enumerate_relation_samples(&episode, &ds.labels);
        Ok(Self { episode, graph, topology, molecules, support_labels, query_labels, relations })
    }

    pub fn num_support(&self) -> usize {
        self.support_labels.len()
    }

    pub fn num_query(&self) -> usize {
        self.episode.query.len()
    }

    pub fn num_auxiliaries(&self) -> usize {
        self.episode.auxiliaries.len()
    }

    pub fn relations(&self) -> &[RelationSample] {
        &self.relations
    }

    pub fn support_labels(&self) -> &[f64] {
        &self.support_labels
    }

    pub fn query_labels(&self) -> Option<&[f64]> {
        self.query_labels.as_deref()
    }
}

/// Initial node features of one episode.
#[derive(Clone, Copy)]
pub struct Embeddings<'t> {
    pub molecules: Var<'t>,
    pub target: Var<'t>,
    pub auxiliaries: Option<Var<'t>>,
}

impl<'t> Embeddings<'t> {
    pub fn compute(view: &ParamView<'t>, model: &ModelConfig, prep: &PreparedEpisode) -> Result<Self> {
        let molecules = encode_batch(view, &model.encoder, &prep.molecules)?;
        Self::with_molecules(view, prep, molecules)
    }

    pub fn with_molecules(view: &ParamView<'t>, prep: &PreparedEpisode, molecules: Var<'t>) -> Result<Self> {
        let target = property_embeddings(view, &[prep.episode.target])?;
        let auxiliaries = if prep.episode.auxiliaries.is_empty() {
            None
        } else {
            Some(property_embeddings(view, &prep.episode.auxiliaries)?)
        };
        Ok(Self { molecules, target, auxiliaries })
    }

    pub fn properties(&self) -> Result<Var<'t>> {
        match self.auxiliaries {
            Some(a) => Var::concat(&[self.target, a], 0),
            None => Ok(self.target),
        }
    }

    pub fn with_auxiliaries(&self, aux: Var<'t>) -> Self {
        Self { auxiliaries: Some(aux), ..*self }
    }
}

/// Context representations for the whole graph.
pub fn encode_context<'t>(
    view: &ParamView<'t>,
    model: &ModelConfig,
    prep: &PreparedEpisode,
    emb: &Embeddings<'t>,
) -> Result<Var<'t>> {
    let x = prep.graph.node_features(emb.molecules, emb.properties()?)?;
    context_encode(view, &model.context(), &prep.topology, x)
}

/// Active probability for each molecule row, shape `[n, 1]`.
pub fn predict_property<'t>(view: &ParamView<'t>, h_mol: Var<'t>, h_target: Var<'t>) -> Result<Var<'t>> {
    let shape = h_mol.shape();
    let t = h_target.broadcast_to(&shape)?;
    Ok(nn::mlp2(view, "pred", Var::concat(&[h_mol, t], 1)?)?.sigmoid())
}

/// Probabilities for every molecule node of the episode, shape `[n_mol, 1]`.
pub fn molecule_probabilities<'t>(view: &ParamView<'t>, prep: &PreparedEpisode, h: Var<'t>) -> Result<Var<'t>> {
    let n_mol = prep.graph.num_molecules();
    let h_mol = h.slice(0, 0, n_mol)?;
    let h_target = h.slice(0, n_mol, 1)?;
    predict_property(view, h_mol, h_target)
}

/// `-sum [y log p + (1 - y) log(1 - p)]` with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_sum<'t>(p: Var<'t>, labels: &[f64]) -> Result<Var<'t>> {
    if p.numel() != labels.len() {
        return Err(Error::Usage(format!("{} probabilities for {} labels", p.numel(), labels.len())));
    }
    let y = p.tape().constant(Tensor::new(p.shape(), labels.to_vec())?);
    Ok(bce_terms(p, y)?.sum())
}

pub fn support_loss<'t>(probs: Var<'t>, prep: &PreparedEpisode) -> Result<Var<'t>> {
    bce_sum(probs.slice(0, 0, prep.num_support())?, &prep.support_labels)
}

fn query_rows<'t>(probs: Var<'t>, prep: &PreparedEpisode) -> Result<Option<Var<'t>>> {
    if prep.num_query() == 0 {
        return Ok(None);
    }
    probs.slice(0, prep.num_support(), prep.num_query()).map(Some)
}

/// Parameters after `cfg.inner_steps` gradient steps on the support loss,
/// together with the molecule embeddings when the encoder is not adapted.
/// `cached` supplies those embeddings instead of encoding the molecules.
pub fn inner_adapt<'t>(
    view: &ParamView<'t>,
    cfg: &TrainConfig,
    prep: &PreparedEpisode,
    second_order: bool,
    cached: Option<Var<'t>>,
) -> Result<(ParamView<'t>, Option<Var<'t>>)> {
    let frozen_mols = match (cfg.adapt_encoder, cached) {
        (true, _) => None,
        (false, Some(m)) => Some(m),
        (false, None) => Some(encode_batch(view, &cfg.model.encoder, &prep.molecules)?),
    };
    let mut current = view.clone();
    for _ in 0..cfg.inner_steps {
        let emb = match frozen_mols {
            Some(m) => Embeddings::with_molecules(&current, prep, m)?,
            None => Embeddings::compute(&current, &cfg.model, prep)?,
        };
        let h = encode_context(&current, &cfg.model, prep, &emb)?;
        let loss = support_loss(molecule_probabilities(&current, prep, h)?, prep)?;
        let mut grads = current.grads(loss, second_order)?;
        if !cfg.adapt_encoder {
            for (k, g) in grads.iter_mut() {
                if k.starts_with("enc.") {
                    *g = None;
                }
            }
        }
        current = current.adapted(&grads, cfg.inner_lr, !second_order)?;
    }
    Ok((current, frozen_mols))
}

/// Per-episode random draws for the gates: one uniform per auxiliary and
/// one noise row per auxiliary.
#[derive(Debug, Clone)]
pub struct GateDraws {
    pub uniforms: Vec<f64>,
    pub noise: Option<Tensor>,
}

impl GateDraws {
    pub fn sample<R: Rng + ?Sized>(n_aux: usize, stats: &NoiseStats, rng: &mut R) -> Self {
        if n_aux == 0 {
            return Self { uniforms: Vec::new(), noise: None };
        }
        let uniforms = cgib::uniform_open(n_aux, rng);
        let noise = Some(stats.sample(n_aux, rng));
        Self { uniforms, noise }
    }
}

/// The individual terms of one episode's outer objective.
pub struct OuterTerms<'t> {
    pub query: Var<'t>,
    pub relation: Option<Var<'t>>,
    pub mi: Option<Var<'t>>,
    pub perturbed: Option<Var<'t>>,
    pub total: Var<'t>,
    pub z_env: Var<'t>,
    pub z_task: Var<'t>,
    pub support_probs: Vec<f64>,
    pub query_probs: Vec<f64>,
    pub retain_probs: Vec<f64>,
}

pub fn outer_loss<'t>(
    adapted: &ParamView<'t>,
    cfg: &TrainConfig,
    prep: &PreparedEpisode,
    frozen_mols: Option<Var<'t>>,
    draws: &GateDraws,
    stats: &NoiseStats,
) -> Result<OuterTerms<'t>> {
    let tape = adapted.tape();
    let query_labels = prep
        .query_labels
        .as_deref()
        .ok_or_else(|| Error::Usage("outer loss needs query labels".into()))?;
    let emb = match frozen_mols {
        Some(m) => Embeddings::with_molecules(adapted, prep, m)?,
        None => Embeddings::compute(adapted, &cfg.model, prep)?,
    };
    let h = encode_context(adapted, &cfg.model, prep, &emb)?;
    let probs = molecule_probabilities(adapted, prep, h)?;
    let query_probs_var = query_rows(probs, prep)?;
    let query = match query_probs_var {
        Some(q) => bce_sum(q, query_labels)?,
        None => tape.scalar(0.0),
    };
    let mut total = query;

    let relation = if cfg.no_cprl {
        None
    } else {
        let l = relation_term(adapted, h, prep.graph.num_molecules(), &prep.relations, cfg.rel_loss)?;
        total = total.add(l)?;
        Some(l)
    };

    let z_task = cgib::task_readout(emb.molecules, emb.target)?;
    let mut z_env = emb.molecules.mean_rows()?;
    let mut retain_probs = Vec::new();
    let (mut mi, mut perturbed) = (None, None);
    if !cfg.no_cgib {
        let mut perturbed_emb = emb;
        if let (Some(x_aux), Some(noise)) = (emb.auxiliaries, draws.noise.as_ref()) {
            let p = cgib::gate_probability(adapted, x_aux, z_task)?;
            retain_probs = p.value().data().to_vec();
            let lambda = cgib::gumbel_sigmoid(p, cfg.temperature, &draws.uniforms)?;
            let x_tilde = cgib::perturb_environment(x_aux, lambda, noise)?;
            let penalty = cgib::mi_penalty(lambda, x_aux, stats)?;
            total = total.add(penalty.scale(cfg.beta))?;
            mi = Some(penalty);
            perturbed_emb = emb.with_auxiliaries(x_tilde);
            z_env = Var::concat(&[emb.molecules, x_tilde], 0)?.mean_rows()?;
        }
        let h_tilde = encode_context(adapted, &cfg.model, prep, &perturbed_emb)?;
        let l = match query_rows(molecule_probabilities(adapted, prep, h_tilde)?, prep)? {
            Some(q) => bce_sum(q, query_labels)?,
            None => tape.scalar(0.0),
        };
        total = total.add(l)?;
        perturbed = Some(l);
    }

    let all = probs.value();
    let ns = prep.num_support();
    Ok(OuterTerms {
        query,
        relation,
        mi,
        perturbed,
        total,
        z_env,
        z_task,
        support_probs: all.data()[..ns].to_vec(),
        query_probs: all.data()[ns..].to_vec(),
        retain_probs,
    })
}

/// Query probabilities with deterministic gates: `lambda = p` and the
/// noise replaced by its mean.
pub fn predict_query<'t>(
    adapted: &ParamView<'t>,
    cfg: &TrainConfig,
    prep: &PreparedEpisode,
    frozen_mols: Option<Var<'t>>,
    stats: Option<&NoiseStats>,
) -> Result<Vec<f64>> {
    let emb = match frozen_mols {
        Some(m) => Embeddings::with_molecules(adapted, prep, m)?,
        None => Embeddings::compute(adapted, &cfg.model, prep)?,
    };
    let emb = match (stats, emb.auxiliaries) {
        (Some(stats), Some(x_aux)) if !cfg.no_cgib => {
            let z_task = cgib::task_readout(emb.molecules, emb.target)?;
            let p = cgib::gate_probability(adapted, x_aux, z_task)?;
            let n = prep.num_auxiliaries();
            let mean = Tensor::new(vec![n, stats.dim()], stats.mean.repeat(n))?;
            emb.with_auxiliaries(cgib::perturb_environment(x_aux, p, &mean)?)
        }
        _ => emb,
    };
    let h = encode_context(adapted, &cfg.model, prep, &emb)?;
    let probs = molecule_probabilities(adapted, prep, h)?.value();
    Ok(probs.data()[prep.num_support()..].to_vec())
}

/// Embeddings of every molecule in `ds`, computed in blocks of `block`.
pub fn embed_all(params: &ParameterSet, model: &ModelConfig, ds: &Dataset, block: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ds.molecules.len() * model.encoder.dim);
    for chunk in ds.molecules.chunks(block.max(1)) {
        let tape = crate::tensor::Tape::new();
        let view = ParamView::constants(&tape, params);
        let refs: Vec<_> = chunk.iter().collect();
        let batch = MoleculeBatch::new(&refs, &model.encoder)?;
        data.extend_from_slice(encode_batch(&view, &model.encoder, &batch)?.value().data());
    }
    Tensor::new(vec![ds.molecules.len(), model.encoder.dim], data)
}

/// Auxiliary embedding rows of the base parameters, one per auxiliary
/// occurrence across `episodes`.
pub fn batch_noise_stats(params: &ParameterSet, episodes: &[&Episode]) -> Result<NoiseStats> {
    let table = params
        .get("ctx.prop")
        .ok_or_else(|| Error::Usage("missing parameter `ctx.prop`".into()))?;
    let rows: Vec<&[f64]> = episodes
        .iter()
        .flat_map(|e| e.auxiliaries.iter().map(|&a| table.row(a)))
        .collect();
    Ok(NoiseStats::from_rows(&rows, table.cols()))
}

/// Retain probabilities of the base parameters for one episode, no
/// adaptation and no sampling.
pub fn retain_probabilities(params: &ParameterSet, model: &ModelConfig, prep: &PreparedEpisode) -> Result<Vec<f64>> {
    let tape = crate::tensor::Tape::new();
    let view = ParamView::constants(&tape, params);
    let emb = Embeddings::compute(&view, model, prep)?;
    let Some(x_aux) = emb.auxiliaries else { return Ok(Vec::new()) };
    let z_task = cgib::task_readout(emb.molecules, emb.target)?;
    Ok(cgib::gate_probability(&view, x_aux, z_task)?.value().data().to_vec())
}
