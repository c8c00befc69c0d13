//! Meta-test protocol, ranking metrics and gate/similarity analysis.

mod harness;
mod metrics;

pub use harness::{
    ablate, sweep_configs, sweep_csv, train_and_evaluate, AblationReport, AblationRow, AblationSummary, RunOutcome,
    SweepAxis, SweepRow,
};

pub use metrics::{pr_auc, roc_auc};

use std::fmt::Write as _;

use serde::Serialize;

use crate::cgib::{GateRecord, NoiseStats};
use crate::data::Dataset;
use crate::episodes::{sample_support, select_auxiliaries, AuxPolicy, Episode};
use crate::error::{Error, Result};
use crate::meta::{batch_noise_stats, embed_all, inner_adapt, predict_query, PreparedEpisode, TrainConfig};
use crate::stats::{mean, spearman, std_dev};
use crate::tensor::{ParamView, ParameterSet, Tape, Tensor};

const EVAL_STREAM_BASE: u64 = 1 << 62;

fn gather_rows(table: &Tensor, rows: &[usize]) -> Tensor {
    let d = table.cols();
    let data = rows.iter().flat_map(|&r| table.row(r).iter().copied()).collect();
    Tensor::new(vec![rows.len(), d], data).expect("rows * d entries")
}

/// Scores of every molecule outside the support set for one resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub molecules: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub property: String,
    pub roc_auc_mean: f64,
    pub roc_auc_std: f64,
    pub pr_auc_mean: f64,
    pub pr_auc_std: f64,
    pub roc_auc: Vec<f64>,
    pub pr_auc: Vec<f64>,
    #[serde(skip)]
    pub scored: Vec<Scored>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub properties: Vec<PropertyResult>,
    /// `(property, reason)` for test properties that could not be evaluated.
    pub skipped: Vec<(String, String)>,
    pub mean_roc_auc: f64,
    pub mean_pr_auc: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per property plus a closing mean row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("property,roc_auc_mean,roc_auc_std,pr_auc_mean,pr_auc_std\n");
        for p in &self.properties {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                p.property, p.roc_auc_mean, p.roc_auc_std, p.pr_auc_mean, p.pr_auc_std
            );
        }
        let _ = writeln!(s, "mean,{},,{},", self.mean_roc_auc, self.mean_pr_auc);
        s
    }
}

/// Scores the molecules left after one support draw for `target`.
///
/// Query molecules are processed `cfg.eval_chunk` at a time, each chunk
/// sharing the support set in its own context graph. Query target labels
/// are never read.
pub fn score_remaining(
    params: &ParameterSet,
    cfg: &TrainConfig,
    ds: &Dataset,
    target: usize,
    aux_pool: &[usize],
    stats: Option<&NoiseStats>,
    cache: Option<&Tensor>,
    repeat: u64,
) -> Result<Scored> {
    let mut rng = crate::meta::stream_rng(cfg.seed, EVAL_STREAM_BASE + ((target as u64) << 20) + repeat);
    let (support, mut rest) = sample_support(&ds.labels, target, cfg.k, &mut rng)?;
    let auxiliaries = select_auxiliaries(&ds.labels, target, cfg.n_auxi, &AuxPolicy::Random(aux_pool.to_vec()), &mut rng)?;
    rest.sort_unstable();
    let mut scores = Vec::with_capacity(rest.len());
    for chunk in rest.chunks(cfg.eval_chunk) {
        let ep = Episode { target, support: support.clone(), query: chunk.to_vec(), auxiliaries: auxiliaries.clone() };
        let prep = PreparedEpisode::new(ds, ep, &cfg.model, false)?;
        let tape = Tape::new();
        let view = ParamView::leaves(&tape, params);
        let cached = match cache {
            Some(table) => Some(tape.constant(gather_rows(table, prep.graph.molecules()))),
            None => None,
        };
        let (adapted, frozen) = inner_adapt(&view, cfg, &prep, false, cached)?;
        scores.extend(predict_query(&adapted, cfg, &prep, frozen, stats)?);
    }
    Ok(Scored { molecules: rest, scores })
}

/// Resampled support sets per test property, adapted and scored without
/// any outer update. `cfg.model` must already match the dataset.
pub fn meta_test(
    params: &ParameterSet,
    cfg: &TrainConfig,
    ds: &Dataset,
    aux_pool: &[usize],
    test_props: &[usize],
) -> Result<EvalReport> {
    let stats = if cfg.no_cgib || aux_pool.is_empty() {
        None
    } else {
        let pool = Episode { target: usize::MAX, support: vec![], query: vec![], auxiliaries: aux_pool.to_vec() };
        Some(batch_noise_stats(params, &[&pool])?)
    };
    let cache = if cfg.adapt_encoder { None } else { Some(embed_all(params, &cfg.model, ds, 256)?) };
    let ids = ds.labels.property_ids();
    let mut properties = Vec::new();
    let mut skipped = Vec::new();
    for &t in test_props {
        if !ds.labels.is_eligible(t, cfg.k) {
            log::warn!("test property {} is not {}-shot eligible; skipped", ids[t], cfg.k);
            skipped.push((ids[t].clone(), format!("fewer than {} molecules in a class", cfg.k)));
            continue;
        }
        let pool: Vec<usize> = aux_pool.iter().copied().filter(|&p| p != t).collect();
        let (mut rocs, mut prs, mut scored) = (Vec::new(), Vec::new(), Vec::new());
        let mut failure = None;
        for r in 0..cfg.eval_repeats as u64 {
            let s = score_remaining(params, cfg, ds, t, &pool, stats.as_ref(), cache.as_ref(), r)?;
            let labels: Vec<bool> = s
                .molecules
                .iter()
                .map(|&m| ds.labels.get(m, t).value() == Some(1.0))
                .collect();
            match (roc_auc(&s.scores, &labels), pr_auc(&s.scores, &labels)) {
                (Ok(a), Ok(b)) => {
                    rocs.push(a);
                    prs.push(b);
                }
                (Err(e), _) | (_, Err(e)) => failure = Some(e),
            }
            scored.push(s);
        }
        if rocs.is_empty() {
            let why = failure.map_or_else(|| "no scores".to_string(), |e| e.to_string());
            skipped.push((ids[t].clone(), why));
            continue;
        }
        properties.push(PropertyResult {
            property: ids[t].clone(),
            roc_auc_mean: mean(&rocs),
            roc_auc_std: std_dev(&rocs),
            pr_auc_mean: mean(&prs),
            pr_auc_std: std_dev(&prs),
            roc_auc: rocs,
            pr_auc: prs,
            scored,
        });
    }
    if properties.is_empty() {
        return Err(Error::Eligibility("no test property could be evaluated".into()));
    }
    let mean_roc_auc = mean(&properties.iter().map(|p| p.roc_auc_mean).collect::<Vec<_>>());
    let mean_pr_auc = mean(&properties.iter().map(|p| p.pr_auc_mean).collect::<Vec<_>>());
    Ok(EvalReport { properties, skipped, mean_roc_auc, mean_pr_auc })
}

/// Rank correlation between retain probabilities and property similarity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateSimilarity {
    pub epoch: usize,
    /// `(target, rho)`; `None` when either vector is constant.
    pub per_target: Vec<(String, Option<f64>)>,
    /// Mean over targets with a defined correlation.
    pub mean: Option<f64>,
}

/// Spearman correlation, per target property, between the retain
/// probabilities logged at `epoch` (the last epoch when `None`) and that
/// target's row of `similarity`.
pub fn gate_similarity_analysis(
    records: &[GateRecord],
    property_ids: &[String],
    similarity: &[Vec<f64>],
    epoch: Option<usize>,
) -> Result<GateSimilarity> {
    let epoch = match epoch.or_else(|| records.iter().map(|r| r.epoch).max()) {
        Some(e) => e,
        None => return Err(Error::Usage("gate log is empty".into())),
    };
    if similarity.len() != property_ids.len() || similarity.iter().any(|r| r.len() != property_ids.len()) {
        return Err(Error::Usage("similarity matrix does not cover every property".into()));
    }
    let index = |id: &str| {
        property_ids
            .iter()
            .position(|p| p == id)
            .ok_or_else(|| Error::Usage(format!("property `{id}` missing from similarity matrix")))
    };
    let mut targets: Vec<&str> = Vec::new();
    for r in records.iter().filter(|r| r.epoch == epoch) {
        if !targets.contains(&r.target.as_str()) {
            targets.push(&r.target);
        }
    }
    let mut per_target = Vec::new();
    for t in targets {
        let ti = index(t)?;
        let (mut gates, mut sims) = (Vec::new(), Vec::new());
        for r in records.iter().filter(|r| r.epoch == epoch && r.target == t) {
            gates.push(r.retain_probability);
            sims.push(similarity[ti][index(&r.auxiliary)?]);
        }
        per_target.push((t.to_string(), spearman(&gates, &sims)));
    }
    let defined: Vec<f64> = per_target.iter().filter_map(|(_, r)| *r).collect();
    let mean = (!defined.is_empty()).then(|| crate::stats::mean(&defined));
    Ok(GateSimilarity { epoch, per_target, mean })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(probs: &[f64]) -> Vec<GateRecord> {
        probs
            .iter()
            .enumerate()
            .map(|(i, &p)| GateRecord { epoch: 1, target: "t".into(), auxiliary: format!("a{i}"), retain_probability: p })
            .collect()
    }

    fn sim() -> (Vec<String>, Vec<Vec<f64>>) {
        let ids: Vec<String> = ["t", "a0", "a1", "a2"].iter().map(|s| s.to_string()).collect();
        let row = vec![1.0, 0.1, 0.5, 0.9];
        let mut m = vec![vec![0.0; 4]; 4];
        m[0] = row;
        (ids, m)
    }

    #[test]
    fn monotone_and_reversed_gates() {
        let (ids, m) = sim();
        let r = gate_similarity_analysis(&recs(&[0.2, 0.4, 0.8]), &ids, &m, None).unwrap();
        assert!((r.mean.unwrap() - 1.0).abs() < 1e-12);
        let r = gate_similarity_analysis(&recs(&[0.8, 0.4, 0.2]), &ids, &m, None).unwrap();
        assert!((r.mean.unwrap() + 1.0).abs() < 1e-12);
        let r = gate_similarity_analysis(&recs(&[0.5, 0.5, 0.5]), &ids, &m, None).unwrap();
        assert_eq!(r.per_target[0].1, None);
        assert_eq!(r.mean, None);
    }
}
