//! Fully connected layer: `y = x W + b` with `x: [N, D]`, `W: [D, K]`.

use alloc::vec;
use alloc::vec::Vec;

use super::matmul::{matmul, matmul_abt, matmul_atb};
use crate::scalar::Scalar;

pub fn forward<F: Scalar>(x: &[F], w: &[F], b: &[F], n: usize, d: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * k];
    matmul(n, d, k, x, w, &mut out);
    for row in out.chunks_exact_mut(k) {
        for (y, &bv) in row.iter_mut().zip(b) {
            *y += bv;
        }
    }
    out
}

pub struct DenseGrads<F> {
    pub input: Option<Vec<F>>,
    pub weight: Option<Vec<F>>,
    pub bias: Option<Vec<F>>,
}

pub fn backward<F: Scalar>(
    x: &[F],
    w: &[F],
    dout: &[F],
    n: usize,
    d: usize,
    k: usize,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> DenseGrads<F> {
    let input = need_input.then(|| {
        let mut dx = vec![F::zero(); n * d];
        // dx[n,d] = sum_k dout[n,k] * w[d,k]
        matmul_abt(n, k, d, dout, w, &mut dx);
        dx
    });
    let weight = need_weight.then(|| {
        let mut dw = vec![F::zero(); d * k];
        matmul_atb(n, d, k, x, dout, &mut dw);
        dw
    });
    let bias = need_bias.then(|| {
        let mut db = vec![F::zero(); k];
        for row in dout.chunks_exact(k) {
            for (s, &g) in db.iter_mut().zip(row) {
                *s += g;
            }
        }
        db
    });
    DenseGrads { input, weight, bias }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_matches_triple_loop() {
        let (n, d, k) = (3, 4, 5);
        let x: Vec<f64> = (0..n * d).map(|i| i as f64 * 0.1).collect();
        let w: Vec<f64> = (0..d * k).map(|i| (i as f64 - 7.0) * 0.05).collect();
        let b: Vec<f64> = (0..k).map(|i| i as f64).collect();
        let got = forward(&x, &w, &b, n, d, k);
        for i in 0..n {
            for j in 0..k {
                let mut want = b[j];
                for dd in 0..d {
                    want += x[i * d + dd] * w[dd * k + j];
                }
                assert!((got[i * k + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_weight_passes_input_through() {
        let mut w = vec![0.0f64; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let x = vec![5.0, -2.0, 0.5];
        let out = forward(&x, &w, &[0.0; 3], 1, 3, 3);
        assert_eq!(out, x);
    }

    #[test]
    fn bias_gradient_sums_rows() {
        let dout = vec![1.0f64, 2.0, 3.0, 4.0];
        let g = backward(&[0.0; 2], &[0.0; 4], &dout, 2, 1, 2, false, false, true);
        assert_eq!(g.bias.unwrap(), vec![4.0, 6.0]);
    }
}
