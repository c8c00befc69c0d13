//! Gated information bottleneck over auxiliary property features.
//!
//! Each auxiliary node gets a retain probability from a small MLP, a
//! relaxed Bernoulli gate via logistic noise, and a perturbed feature row
//! `lambda * x + (1 - lambda) * noise`. The penalty is the closed-form
//! Gaussian KL bound on what the perturbed rows still carry.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::nn;
use crate::tensor::{sigmoid, ParamView, Tensor, Var};

pub const PROB_CLAMP: f64 = 1e-6;
pub const VARIANCE_FLOOR: f64 = 1e-8;
pub const NOISE_MASS_FLOOR: f64 = 1e-6;

/// Mean of the task-subgraph features: every molecule row plus the target row.
pub fn task_readout<'t>(mol_x: Var<'t>, target_x: Var<'t>) -> Result<Var<'t>> {
    Var::concat(&[mol_x, target_x], 0)?.mean_rows()
}

/// Retain probability per auxiliary row, shape `[n_aux, 1]`.
pub fn gate_probability<'t>(view: &ParamView<'t>, x_aux: Var<'t>, z_task: Var<'t>) -> Result<Var<'t>> {
    let shape = x_aux.shape();
    let z = z_task.broadcast_to(&[shape[0], z_task.shape()[1]])?;
    let logits = nn::mlp2(view, "gate", Var::concat(&[x_aux, z], 1)?)?;
    Ok(logits.sigmoid().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(config_err!("gate temperature must be positive, got {t}"));
    }
    Ok(())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Relaxed gate `sigmoid((logit p + logit u) / t)`, clamped away from 0 and 1.
pub fn gumbel_sigmoid<'t>(p: Var<'t>, t: f64, u: &[f64]) -> Result<Var<'t>> {
    check_temperature(t)?;
    if u.len() != p.numel() {
        return Err(Error::Usage(format!("{} uniform draws for {} gates", u.len(), p.numel())));
    }
    if let Some(&bad) = u.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Usage(format!("uniform draw {bad} outside (0, 1)")));
    }
    let noise = p.tape().constant(Tensor::new(p.shape(), u.iter().map(|&v| logit(v)).collect())?);
    let logit_p = p.log()?.sub(p.neg().add_scalar(1.0).log()?)?;
    Ok(logit_p.add(noise)?.scale(1.0 / t).sigmoid().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
}

/// Scalar form of [`gumbel_sigmoid`].
pub fn gumbel_sigmoid_value(p: f64, t: f64, u: f64) -> Result<f64> {
    check_temperature(t)?;
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    Ok(sigmoid((logit(p) + logit(u)) / t).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
}

/// Draws in the open interval (0, 1).
pub fn uniform_open<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let u: f64 = rng.gen();
            if u > 0.0 {
                break u;
            }
        })
        .collect()
}

/// Per-dimension mean and variance of auxiliary feature rows across a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NoiseStats {
    /// Population statistics over `rows`. Fewer than two rows fall back to
    /// the variance floor.
    pub fn from_rows(rows: &[&[f64]], dim: usize) -> Self {
        let n = rows.len();
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, &v) in mean.iter_mut().zip(r.iter()) {
                *m += v / n as f64;
            }
        }
        if n < 2 {
            log::warn!("fewer than two auxiliary rows in batch; noise variance set to floor");
            return Self { mean, var: vec![VARIANCE_FLOOR; dim] };
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, &v), &m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        for v in &mut var {
            *v = v.max(VARIANCE_FLOOR);
        }
        Self { mean, var }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.dim()], self.mean.clone()).expect("dim entries")
    }

    pub fn std_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.dim()], self.var.iter().map(|v| v.sqrt()).collect()).expect("dim entries")
    }

    /// `n` rows drawn from `N(mean, var)` independently per dimension.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for k in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                data.push(self.mean[k] + self.var[k].sqrt() * z);
            }
        }
        Tensor::new(vec![n, d], data).expect("n * d entries")
    }
}

/// `lambda * x + (1 - lambda) * noise`, row-wise gates of shape `[n, 1]`.
pub fn perturb_environment<'t>(x_aux: Var<'t>, lambda: Var<'t>, noise: &Tensor) -> Result<Var<'t>> {
    if noise.shape() != x_aux.shape().as_slice() {
        return Err(Error::Usage(format!(
            "noise shape {:?} does not match features {:?}",
            noise.shape(),
            x_aux.shape()
        )));
    }
    let eps = x_aux.tape().constant(noise.clone());
    let closed = lambda.neg().add_scalar(1.0);
    x_aux.mul(lambda)?.add(eps.mul(closed)?)
}

/// `-(d/2) log A + (d / 2N) A + |B|^2 / 2N` with
/// `A = sum (1 - lambda)^2` and `B = sum lambda (x - mean) / std`.
pub fn mi_penalty<'t>(lambda: Var<'t>, x_aux: Var<'t>, stats: &NoiseStats) -> Result<Var<'t>> {
    let tape = x_aux.tape();
    let shape = x_aux.shape();
    let n = shape[0];
    if n == 0 {
        return Ok(tape.scalar(0.0));
    }
    let d = shape[1] as f64;
    let nf = n as f64;
    let a = lambda.neg().add_scalar(1.0).square().sum().clamp(NOISE_MASS_FLOOR, nf);
    let z = x_aux
        .sub(tape.constant(stats.mean_tensor()))?
        .div(tape.constant(stats.std_tensor()))?;
    let b = z.mul(lambda)?.sum_rows()?;
    let log_term = a.log()?.scale(-d / 2.0);
    let lin_term = a.scale(d / (2.0 * nf));
    let dev_term = b.square().sum().scale(1.0 / (2.0 * nf));
    log_term.add(lin_term)?.add(dev_term)
}

/// `mi_penalty` on plain numbers, for diagnostics.
pub fn mi_penalty_value(lambda: &[f64], x_aux: &[Vec<f64>], stats: &NoiseStats) -> f64 {
    let n = lambda.len();
    if n == 0 {
        return 0.0;
    }
    let d = stats.dim();
    let nf = n as f64;
    let a = lambda.iter().map(|l| (1.0 - l) * (1.0 - l)).sum::<f64>().clamp(NOISE_MASS_FLOOR, nf);
    let mut b = vec![0.0; d];
    for (l, row) in lambda.iter().zip(x_aux) {
        for k in 0..d {
            b[k] += l * (row[k] - stats.mean[k]) / stats.var[k].sqrt();
        }
    }
    let b2: f64 = b.iter().map(|v| v * v).sum();
    -(d as f64) / 2.0 * a.ln() + d as f64 / (2.0 * nf) * a + b2 / (2.0 * nf)
}

fn cosine_rows<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let dot = a.mul(b)?.t()?.sum_rows()?;
    let na = a.square().t()?.sum_rows()?.add_scalar(1e-12).sqrt()?;
    let nb = b.square().t()?.sum_rows()?.add_scalar(1e-12).sqrt()?;
    dot.div(na.mul(nb)?)
}

/// `-(1/B) sum_i log( exp(s_i/t) / sum_{j != i} exp(s_j/t) )` where `s_i`
/// is the cosine similarity between row `i` of the two readout matrices.
pub fn contrastive_alignment<'t>(z_env: Var<'t>, z_task: Var<'t>, t: f64) -> Result<Var<'t>> {
    check_temperature(t)?;
    let b = z_env.shape()[0];
    if b < 2 {
        return Err(config_err!("contrastive term needs a batch of at least 2 episodes"));
    }
    if z_task.shape() != z_env.shape() {
        return Err(Error::Usage("readout batches differ in shape".into()));
    }
    let s = cosine_rows(z_env, z_task)?.scale(1.0 / t);
    let e = s.exp();
    let total = e.sum();
    let others = total.broadcast_to(&[1, b])?.sub(e)?;
    Ok(others.log()?.sub(s)?.mean())
}

/// One retain probability observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub epoch: usize,
    pub target: String,
    pub auxiliary: String,
    pub retain_probability: f64,
}

pub fn write_gate_log(path: &Path, records: &[GateRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "epoch,target,auxiliary,retain_probability")?;
    for r in records {
        writeln!(f, "{},{},{},{}", r.epoch, r.target, r.auxiliary, r.retain_probability)?;
    }
    Ok(())
}

pub fn read_gate_log(path: &Path) -> Result<Vec<GateRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Ingestion(format!("gate log line {}: {what}", n + 1));
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 {
            return Err(bad("expected 4 cells"));
        }
        out.push(GateRecord {
            epoch: cells[0].parse().map_err(|_| bad("bad epoch"))?,
            target: cells[1].to_string(),
            auxiliary: cells[2].to_string(),
            retain_probability: cells[3].parse().map_err(|_| bad("bad probability"))?,
        });
    }
    Ok(out)
}
