//! Cross-property relation targets, the relation head and its loss.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::data::LabelMatrix;
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{ParamView, Var};

/// `y_rel = (y_a - y_b)^2` for one molecule under two properties.
/// Indices are context-graph positions; `prop_a < prop_b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelationSample {
    pub molecule: usize,
    pub prop_a: usize,
    pub prop_b: usize,
    pub target: f64,
    pub from_query: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationLossMode {
    #[default]
    Mse,
    Bce,
}

pub fn relation_target(a: f64, b: f64) -> f64 {
    (a - b) * (a - b)
}

/// Support molecules pair over every property including the target; query
/// molecules pair over auxiliaries only. Pairs with an unknown label are
/// skipped.
pub fn enumerate_relation_samples(ep: &Episode, labels: &LabelMatrix) -> Vec<RelationSample> {
    let props = ep.properties();
    let mut out = Vec::new();
    for (i, m) in ep.molecules().into_iter().enumerate() {
        let from_query = i >= ep.support.len();
        let y: Vec<Option<f64>> = props
            .iter()
            .enumerate()
            .map(|(j, &p)| match (j, from_query) {
                (0, true) => None,
                (0, false) => Some(if ep.support[i].1 { 1.0 } else { 0.0 }),
                _ => labels.get(m, p).value(),
            })
            .collect();
        for a in 0..props.len() {
            for b in a + 1..props.len() {
                if let (Some(ya), Some(yb)) = (y[a], y[b]) {
                    out.push(RelationSample {
                        molecule: i,
                        prop_a: a,
                        prop_b: b,
                        target: relation_target(ya, yb),
                        from_query,
                    });
                }
            }
        }
    }
    debug_assert!(out.iter().all(|s| !s.from_query || s.prop_a != 0));
    out
}

/// Relation head on `[h_i || h_a] * [h_i || h_b]`, one output per row.
pub fn predict_relation<'t>(view: &ParamView<'t>, h_mol: Var<'t>, h_a: Var<'t>, h_b: Var<'t>) -> Result<Var<'t>> {
    let left = Var::concat(&[h_mol, h_a], 1)?;
    let right = Var::concat(&[h_mol, h_b], 1)?;
    nn::mlp2(view, "rel", left.mul(right)?)
}

/// Half the summed per-sample error. MSE mode compares raw head outputs;
/// BCE mode squashes them with a sigmoid first.
pub fn relation_loss<'t>(pred: Var<'t>, targets: &[f64], mode: RelationLossMode) -> Result<Var<'t>> {
    if pred.numel() != targets.len() {
        return Err(Error::Usage(format!(
            "{} relation predictions for {} samples",
            pred.numel(),
            targets.len()
        )));
    }
    let tape = pred.tape();
    let y = tape.constant(crate::tensor::Tensor::new(pred.shape(), targets.to_vec())?);
    let per = match mode {
        RelationLossMode::Mse => pred.sub(y)?.square(),
        RelationLossMode::Bce => bce_terms(pred.sigmoid(), y)?,
    };
    Ok(per.sum().scale(0.5))
}

pub(crate) fn bce_terms<'t>(p: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    const EPS: f64 = 1e-7;
    let p = p.clamp(EPS, 1.0 - EPS);
    let pos = y.mul(p.log()?)?;
    let neg = y.neg().add_scalar(1.0).mul(p.neg().add_scalar(1.0).log()?)?;
    Ok(pos.add(neg)?.neg())
}

/// `L_rel` for one episode from context representations `h`, whose first
/// `n_mol` rows are molecules.
pub fn relation_term<'t>(
    view: &ParamView<'t>,
    h: Var<'t>,
    n_mol: usize,
    samples: &[RelationSample],
    mode: RelationLossMode,
) -> Result<Var<'t>> {
    if samples.is_empty() {
        log::warn!("episode has no relation samples; relation loss is 0");
        return Ok(view.tape().scalar(0.0));
    }
    let idx = |f: &dyn Fn(&RelationSample) -> usize| -> Rc<[usize]> { samples.iter().map(f).collect() };
    let hm = h.gather_rows(idx(&|s| s.molecule))?;
    let ha = h.gather_rows(idx(&|s| n_mol + s.prop_a))?;
    let hb = h.gather_rows(idx(&|s| n_mol + s.prop_b))?;
    let pred = predict_relation(view, hm, ha, hb)?;
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    relation_loss(pred, &targets, mode)
}
