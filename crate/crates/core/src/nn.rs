//! Linear layers and two-layer MLPs addressed by parameter path prefix.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamView, ParameterSet, Tensor, Var};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias.
pub fn init_linear<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    params.insert(format!("{prefix}.w"), uniform(&[fan_in, fan_out], bound, rng))?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

/// `in -> hidden -> ReLU -> out`.
pub fn init_mlp2<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    prefix: &str,
    dims: (usize, usize, usize),
    rng: &mut R,
) -> Result<()> {
    init_linear(params, &format!("{prefix}.0"), dims.0, dims.1, rng)?;
    init_linear(params, &format!("{prefix}.1"), dims.1, dims.2, rng)
}

pub fn linear<'t>(view: &ParamView<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let w = view.get(&format!("{prefix}.w"))?;
    let b = view.get(&format!("{prefix}.b"))?;
    x.matmul(w)?.add(b)
}

pub fn mlp2<'t>(view: &ParamView<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let h = linear(view, &format!("{prefix}.0"), x)?.relu();
    linear(view, &format!("{prefix}.1"), h)
}

/// Zeroes the output layer of an MLP so it emits constant zero logits.
pub fn zero_output_layer(params: &mut ParameterSet, prefix: &str) -> Result<()> {
    for suffix in ["w", "b"] {
        let key = format!("{prefix}.1.{suffix}");
        let shape = params
            .get(&key)
            .map(|t| t.shape().to_vec())
            .ok_or_else(|| crate::error::Error::Usage(format!("missing parameter `{key}`")))?;
        params.set(&key, Tensor::zeros(&shape))?;
    }
    Ok(())
}
