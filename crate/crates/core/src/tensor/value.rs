use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Dense row-major array of `f64`. Plain value type: no tape handle, cheap to
/// clone across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(config_err!("zero-sized dimension in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(config_err!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    /// Builds a `rows x cols` matrix from row slices.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(config_err!("ragged matrix rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Broadcast result shape under right-aligned (numpy) rules.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each flat index of `out_shape`, the flat index in `in_shape` it reads
/// from when broadcasting. `in_shape` must be broadcast-compatible.
fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n_out: usize = out_shape.iter().product();
    let offset = out_shape.len() - in_shape.len();
    let in_strides = strides_for(in_shape);
    let out_strides = strides_for(out_shape);
    let mut map = Vec::with_capacity(n_out);
    for flat in 0..n_out {
        let mut rem = flat;
        let mut src = 0;
        for (d, &os) in out_strides.iter().enumerate() {
            let coord = rem / os;
            rem %= os;
            if d >= offset {
                let id = d - offset;
                if in_shape[id] != 1 {
                    src += coord * in_strides[id];
                }
            }
        }
        map.push(src);
    }
    map
}

/// Splits a broadcast of `in_shape` to `out_shape` into `(outer, inner)`
/// repetition counts when `in_shape` is a contiguous block of `out_shape`
/// padded with ones on one side: `[d] -> [n, d]` tiles, `[n, 1] -> [n, d]`
/// repeats each element.
fn simple_broadcast(in_shape: &[usize], out_shape: &[usize]) -> Option<(usize, usize)> {
    let offset = out_shape.len() - in_shape.len();
    let padded: Vec<usize> = std::iter::repeat(1).take(offset).chain(in_shape.iter().copied()).collect();
    let first = padded.iter().zip(out_shape).position(|(a, b)| a == b && *a != 1);
    let Some(first) = first else { return None };
    let last = padded.len() - padded.iter().zip(out_shape).rev().position(|(a, b)| a == b && *a != 1)?;
    let block_ok = padded[first..last] == out_shape[first..last];
    let ones_outside = padded[..first].iter().chain(&padded[last..]).all(|&d| d == 1);
    if !(block_ok && ones_outside) {
        return None;
    }
    let outer = out_shape[..first].iter().product();
    let inner = out_shape[last..].iter().product();
    Some((outer, inner))
}

pub(crate) fn broadcast_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    if t.numel() == 1 {
        return Tensor::full(shape, t.data[0]);
    }
    if let Some((outer, inner)) = simple_broadcast(&t.shape, shape) {
        let mut out = Vec::with_capacity(outer * t.numel() * inner);
        for _ in 0..outer {
            for &v in &t.data {
                out.extend(std::iter::repeat(v).take(inner));
            }
        }
        return Tensor::from_parts(shape.to_vec(), out);
    }
    let map = broadcast_index_map(&t.shape, shape);
    Tensor::from_parts(shape.to_vec(), map.iter().map(|&i| t.data[i]).collect())
}

/// Reverse of `broadcast_to`: sums over broadcast dimensions.
pub(crate) fn sum_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let n: usize = shape.iter().product();
    if n == 1 {
        return Tensor::from_parts(shape.to_vec(), vec![t.sum()]);
    }
    if let Some((outer, inner)) = simple_broadcast(shape, &t.shape) {
        let mut out = vec![0.0; n];
        let mut it = t.data.iter();
        for _ in 0..outer {
            for o in out.iter_mut() {
                for v in it.by_ref().take(inner) {
                    *o += v;
                }
            }
        }
        return Tensor::from_parts(shape.to_vec(), out);
    }
    let map = broadcast_index_map(shape, &t.shape);
    let mut out = vec![0.0; n];
    for (v, &i) in t.data.iter().zip(&map) {
        out[i] += v;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

/// (outer, dim, inner) decomposition of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    let mut shape = parts[0].shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    let (outer, total, inner) = axis_split(&shape, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let d = p.shape[axis];
            out.extend_from_slice(&p.data[o * d * inner..(o + 1) * d * inner]);
        }
    }
    Tensor::from_parts(shape, out)
}

pub(crate) fn slice(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, dim, inner) = axis_split(&t.shape, axis);
    let mut shape = t.shape.clone();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * dim * inner + start * inner;
        out.extend_from_slice(&t.data[base..base + len * inner]);
    }
    Tensor::from_parts(shape, out)
}

pub(crate) fn pad(t: &Tensor, axis: usize, start: usize, total: usize) -> Tensor {
    let (outer, len, inner) = axis_split(&t.shape, axis);
    let mut shape = t.shape.clone();
    shape[axis] = total;
    let mut out = vec![0.0; outer * total * inner];
    for o in 0..outer {
        let dst = o * total * inner + start * inner;
        out[dst..dst + len * inner].copy_from_slice(&t.data[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(shape, out)
}

pub(crate) fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut shape = t.shape.clone();
    shape[0] = idx.len();
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(&t.data[i * c..(i + 1) * c]);
    }
    Tensor::from_parts(shape, out)
}

pub(crate) fn scatter_add_rows(t: &Tensor, idx: &[usize], n_out: usize) -> Tensor {
    let c = t.cols();
    let mut shape = t.shape.clone();
    shape[0] = n_out;
    let mut out = vec![0.0; n_out * c];
    for (r, &i) in idx.iter().enumerate() {
        let src = &t.data[r * c..(r + 1) * c];
        for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(src) {
            *o += v;
        }
    }
    Tensor::from_parts(shape, out)
}
