use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::value::Tensor;
use crate::error::{config_err, usage_err, Result};

/// Gradient per parameter path, as plain values.
pub type Gradients = BTreeMap<String, Tensor>;

/// Named model parameters. Serializes to the checkpoint format: a JSON map
/// from parameter path to `{shape, data}` with row-major data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(config_err!("duplicate parameter `{path}`"));
        }
        self.entries.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path)
    }

    /// Replaces an existing entry; the shape must not change.
    pub fn set(&mut self, path: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(path)
            .ok_or_else(|| usage_err!("unknown parameter `{path}`"))?;
        if slot.shape() != value.shape() {
            return Err(config_err!(
                "shape change for `{path}`: {:?} -> {:?}",
                slot.shape(),
                value.shape()
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// `theta <- theta - lr * g` for every entry present in `grads`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        for (path, g) in grads {
            let p = self
                .entries
                .get_mut(path)
                .ok_or_else(|| usage_err!("gradient for unknown parameter `{path}`"))?;
            if p.shape() != g.shape() {
                return Err(config_err!("gradient shape mismatch for `{path}`"));
            }
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
        Ok(())
    }

    pub(crate) fn entry_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(path)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: ParameterSet = serde_json::from_str(s)?;
        for (k, t) in &p.entries {
            // re-validate: serde bypasses the constructor
            Tensor::new(t.shape().to_vec(), t.data().to_vec())
                .map_err(|e| config_err!("checkpoint entry `{k}`: {e}"))?;
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Parameters placed on a tape. A *functional* view holds derived nodes
/// (e.g. `theta - lr * g`) rather than leaves, so differentiating through it
/// reaches the base parameters.
#[derive(Clone)]
pub struct ParamView<'t> {
    tape: &'t Tape,
    vars: BTreeMap<String, Var<'t>>,
    functional: bool,
}

impl<'t> ParamView<'t> {
    /// Differentiable leaves for every parameter.
    pub fn leaves(tape: &'t Tape, params: &ParameterSet) -> Self {
        let vars = params
            .iter()
            .map(|(k, t)| (k.clone(), tape.var(t.clone())))
            .collect();
        Self { tape, vars, functional: false }
    }

    /// Non-differentiable view, for inference.
    pub fn constants(tape: &'t Tape, params: &ParameterSet) -> Self {
        let vars = params
            .iter()
            .map(|(k, t)| (k.clone(), tape.constant(t.clone())))
            .collect();
        Self { tape, vars, functional: false }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_functional(&self) -> bool {
        self.functional
    }

    pub fn get(&self, path: &str) -> Result<Var<'t>> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| usage_err!("missing parameter `{path}`"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Gradient of `loss` for every entry; `None` where the loss does not
    /// depend on it.
    pub fn grads(
        &self,
        loss: Var<'t>,
        create_graph: bool,
    ) -> Result<BTreeMap<String, Option<Var<'t>>>> {
        let (names, vars): (Vec<&String>, Vec<Var<'t>>) =
            self.vars.iter().map(|(k, v)| (k, *v)).unzip();
        let gs = self.tape.gradients(loss, &vars, create_graph)?;
        Ok(names.into_iter().cloned().zip(gs).collect())
    }

    /// Gradients as plain tensors, zeros where unreachable.
    pub fn gradient_values(&self, loss: Var<'t>) -> Result<Gradients> {
        let gs = self.grads(loss, false)?;
        Ok(gs
            .into_iter()
            .map(|(k, g)| {
                let t = match g {
                    Some(g) => (*g.value()).clone(),
                    None => Tensor::zeros(&self.vars[&k].shape()),
                };
                (k, t)
            })
            .collect())
    }

    /// One gradient step expressed on the tape: `theta' = theta - lr * g`.
    ///
    /// `grads` must carry a key for every parameter (`None` = zero gradient).
    /// With `first_order` the gradients are detached, so an outer backward
    /// treats them as constants.
    pub fn adapted(
        &self,
        grads: &BTreeMap<String, Option<Var<'t>>>,
        lr: f64,
        first_order: bool,
    ) -> Result<ParamView<'t>> {
        let mut vars = BTreeMap::new();
        for (k, theta) in &self.vars {
            let g = grads
                .get(k)
                .ok_or_else(|| usage_err!("no gradient supplied for `{k}`"))?;
            let next = match g {
                Some(g) if lr != 0.0 => {
                    let g = if first_order { g.detach() } else { *g };
                    theta.sub(g.scale(lr))?
                }
                _ => *theta,
            };
            vars.insert(k.clone(), next);
        }
        Ok(Self { tape: self.tape, vars, functional: true })
    }

    /// Current values as a plain parameter set.
    pub fn snapshot(&self) -> ParameterSet {
        ParameterSet {
            entries: self
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), (*v.value()).clone()))
                .collect(),
        }
    }
}
