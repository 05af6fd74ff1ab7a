//! Dense math kernels with matching backward passes.
//!
//! Every forward returns the cache its backward needs; backwards accumulate
//! into caller-provided gradient buffers so one buffer can collect a whole
//! batch.

use ndarray::{Array1, Array2, Axis};

use crate::nn::params::{LinearP, MlpP};
use crate::nn::real::Real;

pub fn silu<F: Real>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

/// d silu(x) / dx = s(x) (1 + x (1 - s(x))) with s the logistic function.
pub fn silu_prime<F: Real>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s * (F::one() + x * (F::one() - s))
}

/// y = x W + b, rows are tokens.
pub fn linear_fwd<F: Real>(x: &Array2<F>, p: &LinearP<F>) -> Array2<F> {
    let mut y = x.dot(&p.w);
    y += &p.b;
    y
}

/// Accumulates dW, db; returns dx.
pub fn linear_bwd<F: Real>(
    x: &Array2<F>,
    dy: &Array2<F>,
    p: &LinearP<F>,
    grad: &mut LinearP<F>,
) -> Array2<F> {
    grad.w += &x.t().dot(dy);
    grad.b += &dy.sum_axis(Axis(0));
    dy.dot(&p.w.t())
}

/// Hidden pre-activation of a 2-layer SiLU MLP; the input is cached by the
/// caller.
pub struct MlpCache<F> {
    pub pre1: Array2<F>,
}

pub fn mlp_fwd<F: Real>(x: &Array2<F>, p: &MlpP<F>) -> (Array2<F>, MlpCache<F>) {
    let pre1 = linear_fwd(x, &p.l1);
    let act = pre1.mapv(silu);
    let y = linear_fwd(&act, &p.l2);
    (y, MlpCache { pre1 })
}

pub fn mlp_bwd<F: Real>(
    x: &Array2<F>,
    cache: &MlpCache<F>,
    dy: &Array2<F>,
    p: &MlpP<F>,
    grad: &mut MlpP<F>,
) -> Array2<F> {
    let act = cache.pre1.mapv(silu);
    let dact = linear_bwd(&act, dy, &p.l2, &mut grad.l2);
    let dpre1 = &dact * &cache.pre1.mapv(silu_prime);
    linear_bwd(x, &dpre1, &p.l1, &mut grad.l1)
}

const LN_EPS: f64 = 1e-5;

/// Non-affine layer norm over the feature axis; scale and shift come from
/// the modulation pathway instead of per-feature weights.
pub struct LnCache<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

pub fn layernorm_fwd<F: Real>(x: &Array2<F>) -> (Array2<F>, LnCache<F>) {
    let n = x.nrows();
    let d = x.ncols();
    let dim = F::from_f64(d as f64);
    let eps = F::from_f64(LN_EPS);
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / dim;
        let mut var = F::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var / dim;
        let istd = F::one() / (var + eps).sqrt();
        inv_std[i] = istd;
        for (j, &v) in row.iter().enumerate() {
            xhat[(i, j)] = (v - mean) * istd;
        }
    }
    (xhat.clone(), LnCache { xhat, inv_std })
}

/// dx for non-affine layer norm:
/// dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
pub fn layernorm_bwd<F: Real>(cache: &LnCache<F>, dxhat: &Array2<F>) -> Array2<F> {
    let n = dxhat.nrows();
    let d = dxhat.ncols();
    let dim = F::from_f64(d as f64);
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let mut mean_d = F::zero();
        let mut mean_dx = F::zero();
        for j in 0..d {
            mean_d = mean_d + dxhat[(i, j)];
            mean_dx = mean_dx + dxhat[(i, j)] * cache.xhat[(i, j)];
        }
        mean_d = mean_d / dim;
        mean_dx = mean_dx / dim;
        let istd = cache.inv_std[i];
        for j in 0..d {
            dx[(i, j)] = istd * (dxhat[(i, j)] - mean_d - cache.xhat[(i, j)] * mean_dx);
        }
    }
    dx
}

/// Sinusoidal embedding of an integer position into d dimensions, values in
/// [-1, 1]: even components sin(t / 10000^(2i/d)), odd components the cosine.
pub fn sinusoid<F: Real>(t: usize, d: usize) -> Array1<F> {
    let mut out = Array1::zeros(d);
    let t = t as f64;
    for i in 0..d / 2 {
        let divisor = 10000f64.powf(2.0 * i as f64 / d as f64);
        let angle = t / divisor;
        out[2 * i] = F::from_f64(angle.sin());
        out[2 * i + 1] = F::from_f64(angle.cos());
    }
    out
}
