use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{batch_noise_stats, inner_adapt, outer_loss, retain_probabilities, GateDraws, PreparedEpisode};
use super::{OuterOptimizer, TrainConfig};
use crate::cgib::{contrastive_alignment, GateRecord, NoiseStats};
use crate::data::Dataset;
use crate::episodes::{sample_episode, AuxPolicy, Episode, EpisodeShape};
use crate::error::{config_err, Error, Result};
use crate::eval::roc_auc;
use crate::stats::mean;
use crate::tensor::{Gradients, ParamView, ParameterSet, Tape, Tensor, Var};

/// Independent random stream `stream` under `seed`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = 0;
const GATE_STREAM: u64 = u64::MAX;

/// Loss terms and diagnostics of one episode in an outer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeReport {
    pub target: usize,
    pub total: f64,
    pub query: f64,
    pub relation: Option<f64>,
    pub mi: Option<f64>,
    pub perturbed: Option<f64>,
    pub support_auc: Option<f64>,
    pub query_auc: Option<f64>,
}

/// One JSON-lines training log entry; loss terms are batch means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub total: f64,
    pub query: f64,
    pub relation: Option<f64>,
    pub mi: Option<f64>,
    pub perturbed: Option<f64>,
    pub contrastive: Option<f64>,
    pub support_auc: Option<f64>,
    pub query_auc: Option<f64>,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub params: ParameterSet,
    pub optimizer: OuterOptimizer,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ParameterSet::from_json(&ck.params.to_json()?)?;
        Ok(ck)
    }
}

fn labels_of(probs: &[f64], ys: &[f64]) -> Option<f64> {
    let y: Vec<bool> = ys.iter().map(|&v| v > 0.5).collect();
    roc_auc(probs, &y).ok()
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| mean(&v))
}

fn episode_forward<'t>(
    view: &ParamView<'t>,
    cfg: &TrainConfig,
    prep: &PreparedEpisode,
    draws: &GateDraws,
    stats: &NoiseStats,
) -> Result<(super::OuterTerms<'t>, EpisodeReport)> {
    let (adapted, frozen) = inner_adapt(view, cfg, prep, !cfg.first_order, None)?;
    let terms = outer_loss(&adapted, cfg, prep, frozen, draws, stats)?;
    let query_labels = prep.query_labels().unwrap_or(&[]);
    let report = EpisodeReport {
        target: prep.episode.target,
        total: terms.total.item(),
        query: terms.query.item(),
        relation: terms.relation.map(|v| v.item()),
        mi: terms.mi.map(|v| v.item()),
        perturbed: terms.perturbed.map(|v| v.item()),
        support_auc: labels_of(&terms.support_probs, prep.support_labels()),
        query_auc: labels_of(&terms.query_probs, query_labels),
    };
    Ok((terms, report))
}

fn episode_gradients(
    ds: &Dataset,
    cfg: &TrainConfig,
    params: &ParameterSet,
    ep: Episode,
    draws: &GateDraws,
    stats: &NoiseStats,
) -> Result<(Gradients, EpisodeReport)> {
    let prep = PreparedEpisode::new(ds, ep, &cfg.model, true)?;
    let tape = Tape::new();
    let view = ParamView::leaves(&tape, params);
    let (terms, report) = episode_forward(&view, cfg, &prep, draws, stats)?;
    Ok((view.gradient_values(terms.total)?, report))
}

fn all_finite(g: &Gradients) -> bool {
    g.values().all(Tensor::is_finite)
}

pub struct Trainer<'d> {
    cfg: TrainConfig,
    ds: &'d Dataset,
    aux_pool: Vec<usize>,
    targets: Vec<usize>,
    params: ParameterSet,
    optimizer: OuterOptimizer,
    step: u64,
    pool: rayon::ThreadPool,
}

impl<'d> Trainer<'d> {
    /// Trainer over the properties `train_props`; targets are the eligible
    /// ones, auxiliaries are drawn from all of them.
    pub fn new(cfg: TrainConfig, ds: &'d Dataset, train_props: &[usize]) -> Result<Self> {
        let mut cfg = cfg;
        cfg.model.fit_to(ds);
        cfg.validate()?;
        let params = cfg.model.init(&mut stream_rng(cfg.seed, INIT_STREAM))?;
        let optimizer = OuterOptimizer::new(cfg.optimizer, cfg.outer_lr);
        Self::assemble(cfg, ds, train_props, params, optimizer, 0)
    }

    pub fn resume(ck: Checkpoint, ds: &'d Dataset, train_props: &[usize]) -> Result<Self> {
        ck.config.validate()?;
        Self::assemble(ck.config, ds, train_props, ck.params, ck.optimizer, ck.step)
    }

    fn assemble(
        cfg: TrainConfig,
        ds: &'d Dataset,
        train_props: &[usize],
        params: ParameterSet,
        optimizer: OuterOptimizer,
        step: u64,
    ) -> Result<Self> {
        let mut aux_pool = train_props.to_vec();
        aux_pool.sort_unstable();
        aux_pool.dedup();
        if let Some(&p) = aux_pool.iter().find(|&&p| p >= ds.labels.num_properties()) {
            return Err(config_err!("training property index {p} out of range"));
        }
        if cfg.n_auxi + 1 > aux_pool.len() {
            return Err(config_err!(
                "N_auxi = {} needs at least {} training properties, found {}",
                cfg.n_auxi,
                cfg.n_auxi + 1,
                aux_pool.len()
            ));
        }
        let mut targets = Vec::new();
        for &p in &aux_pool {
            if ds.labels.is_eligible(p, cfg.k) {
                targets.push(p);
            } else {
                log::warn!("property {} is not {}-shot eligible; not used as a target", ds.labels.property_ids()[p], cfg.k);
            }
        }
        if targets.is_empty() {
            return Err(Error::Eligibility("no eligible training property".into()));
        }
        let mut builder = rayon::ThreadPoolBuilder::new();
        if cfg.threads > 0 {
            builder = builder.num_threads(cfg.threads);
        }
        let pool = builder.build().map_err(|e| config_err!("thread pool: {e}"))?;
        Ok(Self { cfg, ds, aux_pool, targets, params, optimizer, step, pool })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn aux_pool(&self) -> &[usize] {
        &self.aux_pool
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config: self.cfg.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Episodes and gate draws for outer step `step`, a pure function of
    /// the seed, the step and the current parameters.
    pub fn sample_batch(&self, step: u64) -> Result<(Vec<Episode>, Vec<GateDraws>, NoiseStats)> {
        let mut rng = stream_rng(self.cfg.seed, step + 1);
        let shape = EpisodeShape { k: self.cfg.k, m: self.cfg.m, n_auxi: self.cfg.n_auxi };
        let policy = AuxPolicy::Random(self.aux_pool.clone());
        let episodes = (0..self.cfg.batch_size)
            .map(|_| {
                let target = self.targets[rng.gen_range(0..self.targets.len())];
                sample_episode(&self.ds.labels, target, shape, &policy, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Episode> = episodes.iter().collect();
        let stats = batch_noise_stats(&self.params, &refs)?;
        let draws = episodes
            .iter()
            .map(|e| GateDraws::sample(e.auxiliaries.len(), &stats, &mut rng))
            .collect();
        Ok((episodes, draws, stats))
    }

    /// Batch-mean loss and gradient at the current parameters.
    pub fn batch_gradient(&self, step: u64) -> Result<(Gradients, Vec<EpisodeReport>, Option<f64>)> {
        let (episodes, draws, stats) = self.sample_batch(step)?;
        let b = episodes.len() as f64;
        if self.cfg.contrastive {
            let tape = Tape::new();
            let view = ParamView::leaves(&tape, &self.params);
            let mut totals = Vec::new();
            let (mut z_env, mut z_task, mut reports) = (Vec::new(), Vec::new(), Vec::new());
            for (ep, d) in episodes.into_iter().zip(&draws) {
                let prep = PreparedEpisode::new(self.ds, ep, &self.cfg.model, true)?;
                let (terms, report) = episode_forward(&view, &self.cfg, &prep, d, &stats)?;
                totals.push(terms.total);
                z_env.push(terms.z_env);
                z_task.push(terms.z_task);
                reports.push(report);
            }
            let mut loss = totals[0];
            for t in &totals[1..] {
                loss = loss.add(*t)?;
            }
            let cont = contrastive_alignment(Var::concat(&z_env, 0)?, Var::concat(&z_task, 0)?, self.cfg.temperature)?;
            let loss = loss.scale(1.0 / b).add(cont.scale(self.cfg.beta))?;
            Ok((view.gradient_values(loss)?, reports, Some(cont.item())))
        } else {
            let (ds, cfg, params) = (self.ds, &self.cfg, &self.params);
            let results: Vec<Result<(Gradients, EpisodeReport)>> = self.pool.install(|| {
                episodes
                    .into_par_iter()
                    .zip(draws.par_iter())
                    .map(|(ep, d)| episode_gradients(ds, cfg, params, ep, d, &stats))
                    .collect()
            });
            let mut sum: Option<Gradients> = None;
            let mut reports = Vec::new();
            for r in results {
                let (g, rep) = r?;
                reports.push(rep);
                sum = Some(match sum {
                    None => g,
                    Some(mut acc) => {
                        for (k, v) in acc.iter_mut() {
                            *v = v.zip_map(&g[k], |a, b| a + b);
                        }
                        acc
                    }
                });
            }
            let grads = sum
                .expect("batch is nonempty")
                .into_iter()
                .map(|(k, v)| (k, v.map(|x| x / b)))
                .collect();
            Ok((grads, reports, None))
        }
    }

    /// One outer update. A non-finite loss or gradient skips the update.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let (grads, reports, contrastive) = self.batch_gradient(step)?;
        let avg = |f: &dyn Fn(&EpisodeReport) -> Option<f64>| mean_of(reports.iter().map(f));
        let total = avg(&|r| Some(r.total)).unwrap_or(f64::NAN)
            + contrastive.map_or(0.0, |c| self.cfg.beta * c);
        let skipped = !(total.is_finite() && all_finite(&grads));
        if skipped {
            log::warn!("step {step}: non-finite loss or gradient, update skipped");
        } else {
            self.optimizer.step(&mut self.params, &grads)?;
        }
        self.step += 1;
        Ok(StepReport {
            step,
            total,
            query: avg(&|r| Some(r.query)).unwrap_or(f64::NAN),
            relation: avg(&|r| r.relation),
            mi: avg(&|r| r.mi),
            perturbed: avg(&|r| r.perturbed),
            contrastive,
            support_auc: avg(&|r| r.support_auc),
            query_auc: avg(&|r| r.query_auc),
            skipped,
        })
    }
}

/// Fixed reference episodes, one per training target with every other
/// training property as auxiliary, for tracking retain probabilities.
pub struct GateMonitor {
    episodes: Vec<PreparedEpisode>,
}

impl GateMonitor {
    pub fn new(ds: &Dataset, cfg: &TrainConfig, train_props: &[usize]) -> Result<Self> {
        let mut model = cfg.model.clone();
        model.fit_to(ds);
        let policy = AuxPolicy::All(train_props.to_vec());
        let shape = EpisodeShape { k: cfg.k, m: cfg.m, n_auxi: 0 };
        let mut episodes = Vec::new();
        let mut rng = stream_rng(cfg.seed, GATE_STREAM);
        for &t in train_props {
            if !ds.labels.is_eligible(t, cfg.k) {
                continue;
            }
            let ep = sample_episode(&ds.labels, t, shape, &policy, &mut rng)?;
            episodes.push(PreparedEpisode::new(ds, ep, &model, false)?);
        }
        Ok(Self { episodes })
    }

    pub fn snapshot(&self, ds: &Dataset, cfg: &TrainConfig, params: &ParameterSet, epoch: usize) -> Result<Vec<GateRecord>> {
        let mut model = cfg.model.clone();
        model.fit_to(ds);
        let ids = ds.labels.property_ids();
        let mut out = Vec::new();
        for prep in &self.episodes {
            let p = retain_probabilities(params, &model, prep)?;
            for (&aux, prob) in prep.episode.auxiliaries.iter().zip(p) {
                out.push(GateRecord {
                    epoch,
                    target: ids[prep.episode.target].clone(),
                    auxiliary: ids[aux].clone(),
                    retain_probability: prob,
                });
            }
        }
        Ok(out)
    }
}
