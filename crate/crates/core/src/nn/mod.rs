//! Minimal transformer building blocks with hand-written backward passes.
//!
//! Sequences of different lengths are packed row-wise into one matrix and
//! described by an offsets vector (`offsets[i]..offsets[i + 1]` is sequence
//! `i`). Row-wise layers run on the whole packed matrix at once; attention
//! runs per sequence, so tokens never attend across sequences.

mod attention;
mod block;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use attention::{Attention, AttentionCache};
pub use block::{Block, BlockCache};

/// Named flat parameter slices, visited in a fixed order.
///
/// The order is the contract for optimizer state, EMA and checkpoints.
pub trait Parameters {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>);
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>);

    fn named_params(&self, prefix: &str) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.collect_params(prefix, &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.collect_params_mut(&mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named_params("").iter().map(|(_, p)| p.len()).sum()
    }

    /// A structurally identical value with every parameter set to zero.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.fill(0.0);
        }
        z
    }
}

pub(crate) fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

pub(crate) fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

pub(crate) fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

pub(crate) fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub const INIT_STD: f64 = 0.02;

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let dist = Normal::new(0.0, std).expect("positive std");
    loop {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Affine map `y = x W + b`, with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || trunc_normal(rng, INIT_STD));
        Self {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        self.accumulate(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    /// Parameter gradients only, for layers whose input is data.
    pub fn accumulate(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

impl Parameters for Linear {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((join(prefix, "weight"), slice2(&self.weight)));
        out.push((join(prefix, "bias"), slice1(&self.bias)));
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(slice2_mut(&mut self.weight));
        out.push(slice1_mut(&mut self.bias));
    }
}

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.dot(&row) / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row *= is;
            *s = is;
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        let d = dy.ncols() as f64;
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let mut dx = dy * &self.gamma;
        for ((mut row, xh), &is) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = row.sum() / d;
            let mean_gx = row.dot(&xh) / d;
            Zip::from(&mut row)
                .and(&xh)
                .for_each(|g, &xv| *g = is * (*g - mean_g - xv * mean_gx));
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((join(prefix, "gamma"), slice1(&self.gamma)));
        out.push((join(prefix, "beta"), slice1(&self.beta)));
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(slice1_mut(&mut self.gamma));
        out.push(slice1_mut(&mut self.beta));
    }
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximated GELU.
// tanh through a single exp; libm's tanh dominated the MLP cost
fn gelu_tanh(v: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (v + GELU_C * v * v * v);
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + gelu_tanh(v)))
}

pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|g, &v| {
        let t = gelu_tanh(v);
        let dt = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v) * (1.0 - t * t);
        *g *= 0.5 * (1.0 + t) + 0.5 * v * dt;
    });
    dx
}

/// Row ranges of a packed matrix.
pub fn segments(offsets: &[usize]) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
    offsets.windows(2).map(|w| w[0]..w[1])
}
