use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParameterSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Outer-loop update rule. Adam moments are kept per parameter path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterOptimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub steps: u64,
    first: Gradients,
    second: Gradients,
}

impl OuterOptimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, steps: 0, first: Gradients::new(), second: Gradients::new() }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<()> {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => params.sgd_step(grads, self.lr),
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
                for (path, g) in grads {
                    let m = self.first.entry(path.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.second.entry(path.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let p = params
                        .entry_mut(path)
                        .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter `{path}`")))?;
                    let (m, v, w) = (m.data_mut(), v.data_mut(), p.data_mut());
                    for (i, &gi) in g.data().iter().enumerate() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                        w[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                    }
                }
                Ok(())
            }
        }
    }
}
