//! 2-way K-shot episode construction with auxiliary-property selection.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::data::{Label, LabelMatrix};
use crate::error::{config_err, Error, Result};

/// One few-shot task instance. Molecule and property fields are row/column
/// indices into the label matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub target: usize,
    /// `(molecule, label)` pairs: K actives then K inactives.
    pub support: Vec<(usize, bool)>,
    pub query: Vec<usize>,
    pub auxiliaries: Vec<usize>,
}

impl Episode {
    pub fn k_shot(&self) -> usize {
        self.support.len() / 2
    }

    /// Support molecules followed by query molecules, the molecule-node order
    /// of the context graph.
    pub fn molecules(&self) -> Vec<usize> {
        self.support
            .iter()
            .map(|&(m, _)| m)
            .chain(self.query.iter().copied())
            .collect()
    }

    /// Target first, then auxiliaries, the property-node order of the
    /// context graph.
    pub fn properties(&self) -> Vec<usize> {
        std::iter::once(self.target)
            .chain(self.auxiliaries.iter().copied())
            .collect()
    }

    /// JSON dump with molecule and property ids, for debugging.
    pub fn to_json(&self, labels: &LabelMatrix) -> Result<String> {
        #[derive(Serialize)]
        struct Dump<'a> {
            target: &'a str,
            support: Vec<(&'a str, u8)>,
            query: Vec<&'a str>,
            auxiliaries: Vec<&'a str>,
        }
        let mol = |m: usize| labels.molecule_ids()[m].as_str();
        let prop = |p: usize| labels.property_ids()[p].as_str();
        let dump = Dump {
            target: prop(self.target),
            support: self.support.iter().map(|&(m, y)| (mol(m), y as u8)).collect(),
            query: self.query.iter().map(|&m| mol(m)).collect(),
            auxiliaries: self.auxiliaries.iter().map(|&p| prop(p)).collect(),
        };
        Ok(serde_json::to_string(&dump)?)
    }
}

/// How auxiliary properties are chosen for an episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuxPolicy {
    /// `n_auxi` distinct ids drawn uniformly from the pool minus the target.
    Random(Vec<usize>),
    /// Every pool member except the target.
    All(Vec<usize>),
    /// Exactly this list.
    Fixed(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeShape {
    pub k: usize,
    pub m: usize,
    pub n_auxi: usize,
}

pub fn select_auxiliaries<R: Rng + ?Sized>(
    labels: &LabelMatrix,
    target: usize,
    n_auxi: usize,
    policy: &AuxPolicy,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let p = labels.num_properties();
    let check = |ids: &[usize]| -> Result<()> {
        match ids.iter().find(|&&i| i >= p) {
            Some(i) => Err(config_err!("auxiliary property index {i} out of range")),
            None => Ok(()),
        }
    };
    match policy {
        AuxPolicy::Random(pool) => {
            check(pool)?;
            let mut cands: Vec<usize> = pool.iter().copied().filter(|&q| q != target).collect();
            cands.sort_unstable();
            cands.dedup();
            if n_auxi > cands.len() {
                return Err(config_err!(
                    "N_auxi = {n_auxi} exceeds the {} available auxiliary properties",
                    cands.len()
                ));
            }
            cands.shuffle(rng);
            cands.truncate(n_auxi);
            Ok(cands)
        }
        AuxPolicy::All(pool) => {
            check(pool)?;
            let mut out: Vec<usize> = Vec::new();
            for &q in pool {
                if q != target && !out.contains(&q) {
                    out.push(q);
                }
            }
            Ok(out)
        }
        AuxPolicy::Fixed(list) => {
            check(list)?;
            if list.contains(&target) {
                return Err(config_err!("fixed auxiliary list contains the target property"));
            }
            let mut seen = list.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != list.len() {
                return Err(config_err!("fixed auxiliary list has duplicates"));
            }
            Ok(list.clone())
        }
    }
}

/// K actives and K inactives drawn uniformly for `target`, plus the
/// remaining molecules with a known target label (shuffled).
pub fn sample_support<R: Rng + ?Sized>(
    labels: &LabelMatrix,
    target: usize,
    k: usize,
    rng: &mut R,
) -> Result<(Vec<(usize, bool)>, Vec<usize>)> {
    if target >= labels.num_properties() {
        return Err(config_err!("target property {target} out of range"));
    }
    if k == 0 {
        return Err(config_err!("K must be at least 1"));
    }
    let mut actives = labels.molecules_with(target, Label::Active);
    let mut inactives = labels.molecules_with(target, Label::Inactive);
    if actives.len() < k || inactives.len() < k {
        return Err(Error::Eligibility(format!(
            "property {} has {} actives / {} inactives, needs {k} of each",
            labels.property_ids()[target],
            actives.len(),
            inactives.len()
        )));
    }
    let (a, a_rest) = actives.partial_shuffle(rng, k);
    let (a, a_rest) = (a.to_vec(), a_rest.to_vec());
    let (i, i_rest) = inactives.partial_shuffle(rng, k);
    let support: Vec<(usize, bool)> = a
        .iter()
        .map(|&m| (m, true))
        .chain(i.iter().map(|&m| (m, false)))
        .collect();
    let mut rest: Vec<usize> = a_rest.iter().chain(i_rest.iter()).copied().collect();
    rest.sort_unstable();
    rest.shuffle(rng);
    Ok((support, rest))
}

pub fn sample_episode<R: Rng + ?Sized>(
    labels: &LabelMatrix,
    target: usize,
    shape: EpisodeShape,
    policy: &AuxPolicy,
    rng: &mut R,
) -> Result<Episode> {
    let (support, mut rest) = sample_support(labels, target, shape.k, rng)?;
    rest.truncate(shape.m);
    let auxiliaries = select_auxiliaries(labels, target, shape.n_auxi, policy, rng)?;
    Ok(Episode { target, support, query: rest, auxiliaries })
}
