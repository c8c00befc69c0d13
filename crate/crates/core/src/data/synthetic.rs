//! Planted-correlation multi-property generator.
//!
//! Each molecule draws independent Poisson counts per atom type (rejected
//! until the total falls in the atom range), is wired into a random
//! connected graph, and gets one label per property: the property's weight
//! vector dotted with the atom-type counts, thresholded at the property's
//! median score. Because counts are independent with equal variance, the
//! correlation of two properties' scores equals the cosine of their weight
//! vectors, which is the planted similarity.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{Dataset, Label, LabelMatrix, MoleculeGraph};
use crate::error::{Error, Result};
use crate::stats::spearman;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_molecules: usize,
    pub num_properties: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    /// Probability of each extra (non-tree) bond.
    pub edge_prob: f64,
    pub num_atom_types: usize,
    pub num_bond_types: usize,
    /// One weight vector over atom-type counts per property.
    pub weights: Vec<Vec<f64>>,
    pub label_noise: f64,
    pub unknown_rate: f64,
    /// Every property must end up with this many known labels per class.
    pub min_per_class: usize,
    pub seed: u64,
}

/// Generated data plus the planted ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub planted_similarity: Vec<Vec<f64>>,
    /// Spearman correlation between planted and empirical label similarity
    /// over property pairs; `None` with fewer than three properties.
    pub similarity_rank_correlation: Option<f64>,
}

impl SyntheticSpec {
    /// Properties grouped into `num_clusters` families: each weight vector is
    /// its family's random direction plus isotropic noise of scale `spread`.
    /// Family directions live on disjoint blocks of atom types, so distinct
    /// families are near-orthogonal. Families are assigned round-robin, so
    /// property `j` is in family `j % num_clusters`.
    pub fn clustered(
        num_molecules: usize,
        num_properties: usize,
        num_clusters: usize,
        spread: f64,
        seed: u64,
    ) -> Self {
        let num_atom_types = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_c1a55);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let k = num_clusters.max(1);
        let centers: Vec<Vec<f64>> = (0..k)
            .map(|c| {
                (0..num_atom_types)
                    .map(|t| {
                        let x: f64 = normal.sample(&mut rng);
                        if t % k == c { x.signum() * (1.0 + x.abs()) } else { 0.0 }
                    })
                    .collect()
            })
            .collect();
        let weights = (0..num_properties)
            .map(|j| {
                let c = &centers[j % centers.len()];
                c.iter().map(|&x| x + spread * normal.sample(&mut rng)).collect()
            })
            .collect();
        Self {
            num_molecules,
            num_properties,
            min_atoms: 6,
            max_atoms: 20,
            edge_prob: 0.05,
            num_atom_types,
            num_bond_types: 3,
            weights,
            label_noise: 0.0,
            unknown_rate: 0.0,
            min_per_class: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.num_molecules == 0 || self.num_properties == 0 {
            return bad("need at least one molecule and one property");
        }
        if self.min_atoms == 0 || self.min_atoms > self.max_atoms {
            return bad("atom range must satisfy 1 <= min <= max");
        }
        if self.num_atom_types == 0 || self.num_bond_types == 0 {
            return bad("vocabularies must be nonempty");
        }
        if self.weights.len() != self.num_properties
            || self.weights.iter().any(|w| w.len() != self.num_atom_types)
        {
            return bad("weights must be num_properties x num_atom_types");
        }
        if self.weights.iter().any(|w| w.iter().all(|&x| x == 0.0)) {
            return bad("zero weight vector has no direction");
        }
        for (name, v) in [
            ("edge_prob", self.edge_prob),
            ("label_noise", self.label_noise),
            ("unknown_rate", self.unknown_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Cosine similarity of the weight vectors.
    pub fn planted_similarity(&self) -> Vec<Vec<f64>> {
        cosine_matrix(&self.weights)
    }
}

/// Pairwise cosine similarity of row vectors; a zero row has similarity 0
/// with everything except itself.
pub fn cosine_matrix(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let n = rows.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        out[i][i] = 1.0;
        for j in i + 1..n {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let d = norms[i] * norms[j];
            let c = if d > 0.0 { dot / d } else { 0.0 };
            out[i][j] = c;
            out[j][i] = c;
        }
    }
    out
}

fn sample_counts(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mean_total = (spec.min_atoms + spec.max_atoms) as f64 / 2.0;
    let poisson = Poisson::new(mean_total / spec.num_atom_types as f64).expect("positive rate");
    for _ in 0..10_000 {
        let counts: Vec<usize> = (0..spec.num_atom_types)
            .map(|_| poisson.sample(rng) as usize)
            .collect();
        let total: usize = counts.iter().sum();
        if (spec.min_atoms..=spec.max_atoms).contains(&total) {
            return counts;
        }
    }
    // Degenerate ranges (e.g. min == max far from the mean): fill uniformly.
    let mut counts = vec![0; spec.num_atom_types];
    for _ in 0..spec.min_atoms {
        counts[rng.gen_range(0..spec.num_atom_types)] += 1;
    }
    counts
}

fn build_molecule(id: String, counts: &[usize], spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> MoleculeGraph {
    let mut atoms: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(t, &c)| std::iter::repeat(t).take(c))
        .collect();
    atoms.shuffle(rng);
    let n = atoms.len();
    let mut bonds = Vec::new();
    let mut linked = std::collections::HashSet::new();
    for v in 1..n {
        let u = rng.gen_range(0..v);
        linked.insert((u, v));
        bonds.push((u, v, rng.gen_range(0..spec.num_bond_types)));
    }
    for u in 0..n {
        for v in u + 1..n {
            if !linked.contains(&(u, v)) && rng.gen_bool(spec.edge_prob) {
                bonds.push((u, v, rng.gen_range(0..spec.num_bond_types)));
            }
        }
    }
    bonds.sort_unstable();
    MoleculeGraph { id, atoms, bonds }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.num_molecules.to_string().len();

    let mut molecules = Vec::with_capacity(spec.num_molecules);
    let mut counts_all = Vec::with_capacity(spec.num_molecules);
    for i in 0..spec.num_molecules {
        let counts = sample_counts(spec, &mut rng);
        molecules.push(build_molecule(format!("mol{i:0width$}"), &counts, spec, &mut rng));
        counts_all.push(counts);
    }

    let p = spec.num_properties;
    let mut entries = vec![Label::Unknown; spec.num_molecules * p];
    for (j, w) in spec.weights.iter().enumerate() {
        let scores: Vec<f64> = counts_all
            .iter()
            .map(|c| c.iter().zip(w).map(|(&n, &wt)| n as f64 * wt).sum())
            .collect();
        let thr = median(&scores);
        for (i, &s) in scores.iter().enumerate() {
            entries[i * p + j] = Label::from_bool(s > thr);
        }
    }
    // noise and masking draw in a fixed cell order for determinism
    for cell in entries.iter_mut() {
        if spec.label_noise > 0.0 && rng.gen_bool(spec.label_noise) {
            *cell = match *cell {
                Label::Active => Label::Inactive,
                _ => Label::Active,
            };
        }
        if spec.unknown_rate > 0.0 && rng.gen_bool(spec.unknown_rate) {
            *cell = Label::Unknown;
        }
    }

    let ids = molecules.iter().map(|m| m.id.clone()).collect();
    let props = (0..p).map(|j| format!("prop{j}")).collect();
    let labels = LabelMatrix::new(ids, props, entries)?;
    for j in 0..p {
        if !labels.is_eligible(j, spec.min_per_class) {
            let (a, i) = labels.class_counts(j);
            return Err(Error::Generation(format!(
                "property prop{j} has {a} actives / {i} inactives, below {} per class",
                spec.min_per_class
            )));
        }
    }

    let planted = spec.planted_similarity();
    let empirical = labels.label_cosine_similarity();
    let rho = pair_rank_correlation(&planted, &empirical);
    if let Some(r) = rho {
        if spec.label_noise <= 0.05 && r < 0.7 {
            log::warn!("synthetic self-check: planted/empirical similarity Spearman {r:.3} < 0.7");
        }
    }
    Ok(SyntheticDataset {
        dataset: Dataset::new(molecules, labels)?,
        planted_similarity: planted,
        similarity_rank_correlation: rho,
    })
}

/// Spearman correlation over the strict upper triangles of two matrices.
pub(crate) fn pair_rank_correlation(a: &[Vec<f64>], b: &[Vec<f64>]) -> Option<f64> {
    let n = a.len();
    if n < 3 {
        return None;
    }
    let mut xa = Vec::new();
    let mut xb = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            xa.push(a[i][j]);
            xb.push(b[i][j]);
        }
    }
    spearman(&xa, &xb)
}
