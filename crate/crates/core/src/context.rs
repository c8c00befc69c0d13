//! Bipartite molecule/property context graph and its relation-typed encoder.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Label, LabelMatrix};
use crate::episodes::Episode;
use crate::error::{config_err, Error, Result};
use crate::nn;
use crate::tensor::{ParamView, ParameterSet, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Active,
    Inactive,
    Unknown,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Active, Relation::Inactive, Relation::Unknown];

    pub fn index(self) -> usize {
        self as usize
    }

    fn from_label(l: Label) -> Self {
        match l {
            Label::Active => Relation::Active,
            Label::Inactive => Relation::Inactive,
            Label::Unknown => Relation::Unknown,
        }
    }
}

/// One episode's context graph. Node order is molecules (support then
/// query) followed by properties (target then auxiliaries). Every
/// molecule/property pair carries exactly one relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextGraph {
    molecules: Vec<usize>,
    properties: Vec<usize>,
    num_support: usize,
    relations: Vec<Relation>,
}

pub type Edge = (usize, usize, Relation);

pub fn build_context_graph(ep: &Episode, labels: &LabelMatrix) -> Result<ContextGraph> {
    let molecules = ep.molecules();
    let properties = ep.properties();
    let mut seen = molecules.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != molecules.len() {
        return Err(Error::Usage("episode repeats a molecule across support/query".into()));
    }
    if properties[1..].contains(&ep.target) {
        return Err(Error::Usage("auxiliary list contains the target property".into()));
    }
    let mut relations = Vec::with_capacity(molecules.len() * properties.len());
    for (i, &m) in molecules.iter().enumerate() {
        for (j, &p) in properties.iter().enumerate() {
            let r = match (j, i < ep.support.len()) {
                (0, true) => Relation::from_label(Label::from_bool(ep.support[i].1)),
                (0, false) => Relation::Unknown,
                _ => Relation::from_label(labels.get(m, p)),
            };
            relations.push(r);
        }
    }
    let g = ContextGraph { molecules, properties, num_support: ep.support.len(), relations };
    g.check_leakage_guard()?;
    Ok(g)
}

impl ContextGraph {
    pub fn molecules(&self) -> &[usize] {
        &self.molecules
    }

    pub fn properties(&self) -> &[usize] {
        &self.properties
    }

    pub fn num_molecules(&self) -> usize {
        self.molecules.len()
    }

    pub fn num_properties(&self) -> usize {
        self.properties.len()
    }

    pub fn num_support(&self) -> usize {
        self.num_support
    }

    pub fn num_nodes(&self) -> usize {
        self.molecules.len() + self.properties.len()
    }

    /// Relation between molecule node `i` and property node `j`.
    pub fn relation(&self, i: usize, j: usize) -> Relation {
        self.relations[i * self.properties.len() + j]
    }

    pub fn edges(&self) -> Vec<Edge> {
        let p = self.properties.len();
        self.relations
            .iter()
            .enumerate()
            .map(|(k, &r)| (k / p, k % p, r))
            .collect()
    }

    /// Fails if any query molecule carries a labelled relation to the target.
    pub fn check_leakage_guard(&self) -> Result<()> {
        for i in self.num_support..self.molecules.len() {
            if self.relation(i, 0) != Relation::Unknown {
                return Err(Error::Usage(format!(
                    "query molecule node {i} has a labelled edge to the target"
                )));
            }
        }
        Ok(())
    }

    /// Node feature matrix `[n_mol + n_prop, d1]` from molecule embeddings
    /// and property embedding rows.
    pub fn node_features<'t>(&self, mol_x: Var<'t>, prop_x: Var<'t>) -> Result<Var<'t>> {
        let (ms, ps) = (mol_x.shape(), prop_x.shape());
        if ms.len() != 2 || ms[0] != self.num_molecules() {
            return Err(Error::Usage(format!(
                "expected embeddings for {} molecules, got shape {ms:?}",
                self.num_molecules()
            )));
        }
        if ps.len() != 2 || ps[0] != self.num_properties() {
            return Err(Error::Usage(format!(
                "expected embeddings for {} properties, got shape {ps:?}",
                self.num_properties()
            )));
        }
        Var::concat(&[mol_x, prop_x], 0)
    }

    /// Message-passing index lists. With `include_unknown = false` the
    /// unknown relation contributes no edges.
    pub fn topology(&self, include_unknown: bool) -> Topology {
        let n_mol = self.num_molecules();
        let n = self.num_nodes();
        let mut src = [Vec::new(), Vec::new(), Vec::new()];
        let mut dst = [Vec::new(), Vec::new(), Vec::new()];
        let mut deg = vec![[0usize; 3]; n];
        for (i, j, r) in self.edges() {
            if r == Relation::Unknown && !include_unknown {
                continue;
            }
            let (a, b, k) = (i, n_mol + j, r.index());
            src[k].extend([a, b]);
            dst[k].extend([b, a]);
            deg[a][k] += 1;
            deg[b][k] += 1;
        }
        let relations = std::array::from_fn(|k| {
            let inv = deg.iter().map(|d| if d[k] > 0 { 1.0 / d[k] as f64 } else { 0.0 }).collect();
            RelationEdges {
                src: std::mem::take(&mut src[k]).into(),
                dst: std::mem::take(&mut dst[k]).into(),
                inv_degree: Tensor::new(vec![n, 1], inv).expect("n rows"),
            }
        });
        Topology { num_nodes: n, relations }
    }

    pub fn split_subgraphs(&self) -> SubgraphSplit {
        let (task_edges, env_edges) = self.edges().into_iter().partition(|e| e.1 == 0);
        SubgraphSplit {
            task_properties: vec![0],
            env_properties: (1..self.num_properties()).collect(),
            task_edges,
            env_edges,
        }
    }

    pub fn to_json(&self, labels: &LabelMatrix) -> Result<String> {
        #[derive(Serialize)]
        struct Dump<'a> {
            molecules: Vec<&'a str>,
            properties: Vec<&'a str>,
            num_support: usize,
            edges: Vec<Edge>,
        }
        let dump = Dump {
            molecules: self.molecules.iter().map(|&m| labels.molecule_ids()[m].as_str()).collect(),
            properties: self.properties.iter().map(|&p| labels.property_ids()[p].as_str()).collect(),
            num_support: self.num_support,
            edges: self.edges(),
        };
        Ok(serde_json::to_string(&dump)?)
    }
}

/// Task and environment halves of a context graph. Property indices are
/// context-graph positions, so the target is always 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgraphSplit {
    pub task_properties: Vec<usize>,
    pub env_properties: Vec<usize>,
    pub task_edges: Vec<Edge>,
    pub env_edges: Vec<Edge>,
}

#[derive(Debug, Clone)]
struct RelationEdges {
    src: Rc<[usize]>,
    dst: Rc<[usize]>,
    inv_degree: Tensor,
}

#[derive(Debug, Clone)]
pub struct Topology {
    num_nodes: usize,
    relations: [RelationEdges; 3],
}

impl Topology {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Directed `(sources, destinations)` carrying relation `r`.
    pub fn edges(&self, r: Relation) -> (&[usize], &[usize]) {
        let e = &self.relations[r.index()];
        (&e.src, &e.dst)
    }

    pub fn num_directed_edges(&self) -> usize {
        self.relations.iter().map(|r| r.src.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub layers: usize,
    /// Input width (molecule and property embeddings).
    pub in_dim: usize,
    /// Output width.
    pub dim: usize,
    pub num_properties: usize,
    pub include_unknown: bool,
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.dim == 0 {
            return Err(config_err!("context widths must be >= 1"));
        }
        if self.num_properties == 0 {
            return Err(config_err!("context encoder needs at least one property embedding"));
        }
        Ok(())
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) -> Result<()> {
        self.validate()?;
        params.insert("ctx.prop", nn::uniform(&[self.num_properties, self.in_dim], 1.0, rng))?;
        nn::init_linear(params, "ctx.in", self.in_dim, self.dim, rng)?;
        let bound = 1.0 / (self.dim as f64).sqrt();
        for l in 0..self.layers {
            nn::init_linear(params, &format!("ctx.l{l}.self"), self.dim, self.dim, rng)?;
            for r in Relation::ALL {
                params.insert(
                    format!("ctx.l{l}.rel{}", r.index()),
                    nn::uniform(&[self.dim, self.dim], bound, rng),
                )?;
            }
        }
        Ok(())
    }
}

/// Property embedding rows for the given global property indices.
pub fn property_embeddings<'t>(view: &ParamView<'t>, props: &[usize]) -> Result<Var<'t>> {
    let table = view.get("ctx.prop")?;
    let n = table.shape()[0];
    if let Some(p) = props.iter().find(|&&p| p >= n) {
        return Err(Error::Usage(format!("no embedding for property index {p}")));
    }
    table.gather_rows(props.into())
}

/// Node representations `[n_nodes, dim]`. Each layer computes
/// `H W_self + b + sum_r mean_{u in N_r(v)} H_u W_r` with ReLU between
/// layers.
pub fn context_encode<'t>(view: &ParamView<'t>, cfg: &ContextConfig, topo: &Topology, x: Var<'t>) -> Result<Var<'t>> {
    if x.shape().first() != Some(&topo.num_nodes) {
        return Err(Error::Usage(format!(
            "feature rows {:?} do not match {} graph nodes",
            x.shape(),
            topo.num_nodes
        )));
    }
    let tape = view.tape();
    let mut h = nn::linear(view, "ctx.in", x)?;
    for l in 0..cfg.layers {
        let mut out = nn::linear(view, &format!("ctx.l{l}.self"), h)?;
        for (k, rel) in topo.relations.iter().enumerate() {
            if rel.src.is_empty() {
                continue;
            }
            let msg = h.matmul(view.get(&format!("ctx.l{l}.rel{k}"))?)?;
            let agg = msg
                .gather_rows(Rc::clone(&rel.src))?
                .scatter_add_rows(Rc::clone(&rel.dst), topo.num_nodes)?;
            out = out.add(agg.mul(tape.constant(rel.inv_degree.clone()))?)?;
        }
        h = if l + 1 < cfg.layers { out.relu() } else { out };
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use Label::{Active as A, Inactive as I, Unknown as U};

    fn matrix(rows: &[&[Label]]) -> LabelMatrix {
        let p = rows[0].len();
        LabelMatrix::new(
            (0..rows.len()).map(|i| format!("m{i}")).collect(),
            (0..p).map(|j| format!("p{j}")).collect(),
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn counts_for_minimal_episode() {
        let l = matrix(&[&[A, I], &[I, A], &[A, U]]);
        let ep = Episode { target: 0, support: vec![(0, true), (1, false)], query: vec![2], auxiliaries: vec![1] };
        let g = build_context_graph(&ep, &l).unwrap();
        assert_eq!((g.num_molecules(), g.num_properties(), g.edges().len()), (3, 2, 6));
        assert_eq!(g.relation(2, 0), Relation::Unknown);
        assert_eq!(g.relation(2, 1), Relation::Unknown);
        assert_eq!(g.relation(0, 0), Relation::Active);
        assert_eq!(g.relation(1, 1), Relation::Active);
    }

    #[test]
    fn repeated_molecule_rejected() {
        let l = matrix(&[&[A], &[I]]);
        let ep = Episode { target: 0, support: vec![(0, true), (1, false)], query: vec![0], auxiliaries: vec![] };
        assert!(matches!(build_context_graph(&ep, &l), Err(Error::Usage(_))));
    }

    #[test]
    fn split_boundaries() {
        let l = matrix(&[&[A, I], &[I, A]]);
        let ep = Episode { target: 0, support: vec![(0, true), (1, false)], query: vec![], auxiliaries: vec![] };
        let s = build_context_graph(&ep, &l).unwrap().split_subgraphs();
        assert!(s.env_properties.is_empty() && s.env_edges.is_empty());
        let ep = Episode { auxiliaries: vec![1], ..ep };
        let g = build_context_graph(&ep, &l).unwrap();
        let s = g.split_subgraphs();
        assert_eq!(s.env_properties, vec![1]);
        let mut all: Vec<Edge> = s.task_edges.iter().chain(&s.env_edges).copied().collect();
        all.sort_by_key(|e| (e.0, e.1));
        assert_eq!(all, g.edges());
    }

    fn setup(layers: usize) -> (ContextConfig, ParameterSet) {
        let cfg = ContextConfig { layers, in_dim: 3, dim: 4, num_properties: 3, include_unknown: true };
        let mut p = ParameterSet::new();
        cfg.init(&mut p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (cfg, p)
    }

    #[test]
    fn zero_layers_is_projection() {
        let (cfg, p) = setup(0);
        let l = matrix(&[&[A, U], &[I, A]]);
        let ep = Episode { target: 0, support: vec![(0, true), (1, false)], query: vec![], auxiliaries: vec![1] };
        let g = build_context_graph(&ep, &l).unwrap();
        let tape = Tape::new();
        let view = ParamView::constants(&tape, &p);
        let x = tape.constant(nn::uniform(&[4, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(0)));
        let h = context_encode(&view, &cfg, &g.topology(true), x).unwrap();
        let proj = nn::linear(&view, "ctx.in", x).unwrap();
        assert_eq!(h.value().data(), proj.value().data());
    }

    #[test]
    fn feature_shape_mismatch_is_usage_error() {
        let l = matrix(&[&[A], &[I]]);
        let ep = Episode { target: 0, support: vec![(0, true), (1, false)], query: vec![], auxiliaries: vec![] };
        let g = build_context_graph(&ep, &l).unwrap();
        let tape = Tape::new();
        let mol = tape.constant(Tensor::zeros(&[1, 3]));
        let prop = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.node_features(mol, prop), Err(Error::Usage(_))));
        let (_, p) = setup(1);
        let view = ParamView::constants(&tape, &p);
        assert!(matches!(property_embeddings(&view, &[7]), Err(Error::Usage(_))));
    }
}
