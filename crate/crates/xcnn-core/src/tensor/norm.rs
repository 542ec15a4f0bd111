//! Batch normalisation over the channel axis.
//!
//! Tensors are viewed as `[N, C, S]` where `S` is the product of any trailing
//! spatial dims (1 for fully connected features), so the same code normalises
//! conv maps and dense features.  Training mode normalises with biased batch
//! statistics; inference mode uses externally tracked running statistics.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

/// Per-channel mean and biased variance over the `N` and `S` axes.
pub fn batch_stats<F: Scalar>(x: &[F], n: usize, c: usize, s: usize) -> (Vec<F>, Vec<F>) {
    let m = F::from_f64((n * s) as f64);
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let plane = &x[(i * c + ch) * s..(i * c + ch + 1) * s];
            let mut acc = F::zero();
            for &v in plane {
                acc += v;
            }
            mean[ch] += acc;
        }
    }
    for v in mean.iter_mut() {
        *v = *v / m;
    }
    for i in 0..n {
        for ch in 0..c {
            let plane = &x[(i * c + ch) * s..(i * c + ch + 1) * s];
            let mu = mean[ch];
            let mut acc = F::zero();
            for &v in plane {
                let d = v - mu;
                acc = d.mul_add(d, acc);
            }
            var[ch] += acc;
        }
    }
    for v in var.iter_mut() {
        *v = *v / m;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta`, one (mean, inv_std) per channel.
pub fn normalize<F: Scalar>(
    x: &[F],
    n: usize,
    c: usize,
    s: usize,
    mean: &[F],
    inv_std: &[F],
    gamma: &[F],
    beta: &[F],
) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let at = (i * c + ch) * s;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for (y, &v) in out[at..at + s].iter_mut().zip(&x[at..at + s]) {
                *y = ((v - mu) * is).mul_add(g, b);
            }
        }
    }
    out
}

pub struct BnGrads<F> {
    pub input: Option<Vec<F>>,
    pub gamma: Option<Vec<F>>,
    pub beta: Option<Vec<F>>,
}

/// Backward pass for training mode, where mean/inv_std are functions of the
/// batch.  `m = N * S` samples contribute to each channel's statistics.
#[allow(clippy::too_many_arguments)]
pub fn backward_train<F: Scalar>(
    x: &[F],
    dout: &[F],
    n: usize,
    c: usize,
    s: usize,
    mean: &[F],
    inv_std: &[F],
    gamma: &[F],
    need_input: bool,
    need_gamma: bool,
    need_beta: bool,
) -> BnGrads<F> {
    let m = F::from_f64((n * s) as f64);
    // Channel reductions: sum of dxhat and sum of dxhat * xhat.
    let mut sum_dxh = vec![F::zero(); c];
    let mut sum_dxh_xh = vec![F::zero(); c];
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let at = (i * c + ch) * s;
            let (mu, is, g) = (mean[ch], inv_std[ch], gamma[ch]);
            let mut a = F::zero();
            let mut b = F::zero();
            let mut dg = F::zero();
            let mut db = F::zero();
            for (&go, &v) in dout[at..at + s].iter().zip(&x[at..at + s]) {
                let xh = (v - mu) * is;
                let dxh = go * g;
                a += dxh;
                b = dxh.mul_add(xh, b);
                dg = go.mul_add(xh, dg);
                db += go;
            }
            sum_dxh[ch] += a;
            sum_dxh_xh[ch] += b;
            dgamma[ch] += dg;
            dbeta[ch] += db;
        }
    }
    let input = need_input.then(|| {
        let mut din = vec![F::zero(); x.len()];
        for i in 0..n {
            for ch in 0..c {
                let at = (i * c + ch) * s;
                let (mu, is, g) = (mean[ch], inv_std[ch], gamma[ch]);
                let (sa, sb) = (sum_dxh[ch], sum_dxh_xh[ch]);
                for (dx, (&go, &v)) in din[at..at + s]
                    .iter_mut()
                    .zip(dout[at..at + s].iter().zip(&x[at..at + s]))
                {
                    let xh = (v - mu) * is;
                    let dxh = go * g;
                    *dx = is * (dxh - (sa + xh * sb) / m);
                }
            }
        }
        din
    });
    BnGrads {
        input,
        gamma: need_gamma.then_some(dgamma),
        beta: need_beta.then_some(dbeta),
    }
}

/// Backward pass for inference mode, where the statistics are constants.
#[allow(clippy::too_many_arguments)]
pub fn backward_infer<F: Scalar>(
    x: &[F],
    dout: &[F],
    n: usize,
    c: usize,
    s: usize,
    mean: &[F],
    inv_std: &[F],
    gamma: &[F],
    need_input: bool,
    need_gamma: bool,
    need_beta: bool,
) -> BnGrads<F> {
    let mut din = need_input.then(|| vec![F::zero(); x.len()]);
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let at = (i * c + ch) * s;
            let (mu, is, g) = (mean[ch], inv_std[ch], gamma[ch]);
            for p in 0..s {
                let go = dout[at + p];
                let xh = (x[at + p] - mu) * is;
                dgamma[ch] = go.mul_add(xh, dgamma[ch]);
                dbeta[ch] += go;
                if let Some(d) = din.as_deref_mut() {
                    d[at + p] = go * g * is;
                }
            }
        }
    }
    BnGrads {
        input: din,
        gamma: need_gamma.then_some(dgamma),
        beta: need_beta.then_some(dbeta),
    }
}
