//! Row-wise building blocks shared by the forward and reverse passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Normalized inputs and reciprocal standard deviations of one layer norm.
#[derive(Clone, Debug)]
pub(crate) struct LnCache<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

pub(crate) fn layer_norm<F: Real>(
    x: ArrayView2<F>,
    gamma: ArrayView1<F>,
    beta: ArrayView1<F>,
) -> (Array2<F>, LnCache<F>) {
    let d = F::from_f64(x.ncols() as f64);
    let eps = F::from_f64(LN_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        *r = F::one() / (var + eps).sqrt();
        let s = *r;
        row.mapv_inplace(|v| v * s);
    }
    let mut y = xhat.clone();
    Zip::from(y.rows_mut()).for_each(|mut row| {
        Zip::from(&mut row)
            .and(&gamma)
            .and(&beta)
            .for_each(|v, &g, &b| *v = *v * g + b);
    });
    (y, LnCache { xhat, rstd })
}

/// Returns dL/dx; accumulates dL/dgamma and dL/dbeta when given.
pub(crate) fn layer_norm_backward<F: Real>(
    dy: ArrayView2<F>,
    cache: &LnCache<F>,
    gamma: ArrayView1<F>,
    grads: Option<(&mut Array1<F>, &mut Array1<F>)>,
) -> Array2<F> {
    if let Some((dg, db)) = grads {
        *dg += &(&dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let d = F::from_f64(dy.ncols() as f64);
    let mut dx = &dy * &gamma;
    for ((mut row, xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / d;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|v, &x| *v = r * (*v - mean_d - x * mean_dx));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu<F: Real>(u: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    half * u * (F::one() + (c * (u + a * u * u * u)).tanh())
}

pub(crate) fn gelu_grad<F: Real>(u: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (F::one() + t) + half * u * (F::one() - t * t) * c * (F::one() + F::from_f64(3.0) * a * u * u)
}

/// In-place causal softmax over `scores` rows. Row `r` may attend to the
/// first `prefix + q0 + r + 1` columns; the rest are set to zero.
pub(crate) fn causal_softmax<F: Real>(scores: &mut Array2<F>, prefix: usize, q0: usize) {
    for (r, mut row) in scores.rows_mut().into_iter().enumerate() {
        let allowed = (prefix + q0 + r + 1).min(row.len());
        let mut max = F::neg_infinity();
        for &v in row.iter().take(allowed) {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j < allowed {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = F::zero();
            }
        }
        let inv = F::one() / sum;
        row.iter_mut().take(allowed).for_each(|v| *v = *v * inv);
    }
}

/// Numerically stable softmax of a single vector.
pub fn softmax<F: Real>(logits: ArrayView1<F>) -> Array1<F> {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    e.mapv_inplace(|v| v / s);
    e
}

/// Inverted-dropout mask: entries are 0 with probability `p`, else `1/(1-p)`.
pub(crate) fn dropout_mask<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Array2<F> {
    let keep = F::from_f64(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < p {
            F::zero()
        } else {
            keep
        }
    })
}
