//! Differentiable building blocks operating on row-major token matrices.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x W + b` with `b` stored as a `1 × out` matrix.
pub fn linear(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + &b.row(0)
}

/// Accumulates `dW += xᵀ dy`, `db += Σ_rows dy` and returns `dx = dy Wᵀ`.
pub fn linear_backward(
    x: &ArrayView2<f64>,
    w: &Array2<f64>,
    dy: &ArrayView2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, dw);
    db.row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    dy.dot(&w.t())
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm(x: &ArrayView2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let is = *s;
        row.mapv_inplace(|v| v * is);
    }
    let y = &xhat * &gain.row(0) + &bias.row(0);
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Array2<f64>,
    dy: &ArrayView2<f64>,
    dgain: &mut Array2<f64>,
    dbias: &mut Array2<f64>,
) -> Array2<f64> {
    let d = cache.xhat.ncols() as f64;
    dgain.row_mut(0).scaled_add(1.0, &(dy * &cache.xhat).sum_axis(Axis(0)));
    dbias.row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    let dxhat = dy * &gain.row(0);
    let mut dx = Array2::zeros(dxhat.raw_dim());
    for (((mut out, g), xh), &is) in dx
        .axis_iter_mut(Axis(0))
        .zip(dxhat.axis_iter(Axis(0)))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(cache.inv_std.iter())
    {
        let sum_g = g.sum();
        let sum_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
        Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
            *o = is / d * (d * gi - sum_g - xi * sum_gx);
        });
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax; `-inf` logits map to exactly zero.
pub fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() };
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

/// Given probabilities `p` and `dL/dp`, returns `dL/dlogits`.
pub fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = p * dp;
    for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
        let s = row.sum();
        Zip::from(&mut row).and(&prow).for_each(|d, &pi| *d -= pi * s);
    }
    ds
}

/// Inverted-dropout mask: entries are 0 or `1 / (1 − rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < rate { 0.0 } else { keep })
}
