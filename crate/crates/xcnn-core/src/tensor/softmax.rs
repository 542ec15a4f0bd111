//! Row-wise softmax and the fused softmax + cross-entropy head.
//!
//! The fused form works in log-space (shift by the row max, log-sum-exp) so
//! confident wrong predictions cannot overflow and probabilities that
//! underflow to zero cannot produce infinite losses prematurely.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

/// Softmax of each row of a `[N, K]` matrix.
pub fn softmax_rows<F: Scalar>(z: &[F], n: usize, k: usize) -> Vec<F> {
    debug_assert_eq!(z.len(), n * k);
    let mut p = vec![F::zero(); n * k];
    for (zrow, prow) in z.chunks_exact(k).zip(p.chunks_exact_mut(k)) {
        let mut mx = zrow[0];
        for &v in zrow {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = F::zero();
        for (pv, &v) in prow.iter_mut().zip(zrow) {
            *pv = (v - mx).exp();
            denom += *pv;
        }
        for pv in prow.iter_mut() {
            *pv = *pv / denom;
        }
    }
    p
}

/// Mean cross-entropy of labels under row-wise softmax, plus the
/// probabilities (saved for the backward pass and for callers that want
/// them).  `loss_i = logsumexp(z_i) - z_i[label_i]`.
pub fn softmax_cross_entropy<F: Scalar>(
    z: &[F],
    n: usize,
    k: usize,
    labels: &[u32],
) -> (F, Vec<F>) {
    let mut probs = vec![F::zero(); n * k];
    let mut loss = F::zero();
    for ((zrow, prow), &y) in z.chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(labels) {
        let mut mx = zrow[0];
        for &v in zrow {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = F::zero();
        for (pv, &v) in prow.iter_mut().zip(zrow) {
            *pv = (v - mx).exp();
            denom += *pv;
        }
        for pv in prow.iter_mut() {
            *pv = *pv / denom;
        }
        let lse = mx + denom.ln();
        loss += lse - zrow[y as usize];
    }
    (loss / F::from_f64(n as f64), probs)
}

/// d loss / d logits for the fused head: `(p - onehot) * upstream / N`.
pub fn cross_entropy_backward<F: Scalar>(
    probs: &[F],
    n: usize,
    k: usize,
    labels: &[u32],
    upstream: F,
) -> Vec<F> {
    let scale = upstream / F::from_f64(n as f64);
    let mut dz = probs.to_vec();
    for (row, &y) in dz.chunks_exact_mut(k).zip(labels) {
        row[y as usize] -= F::one();
        for g in row.iter_mut() {
            *g *= scale;
        }
    }
    dz
}

/// Backward for a standalone softmax: `dz = p  (dout - <dout, p>)` per row.
pub fn softmax_backward<F: Scalar>(probs: &[F], dout: &[F], k: usize) -> Vec<F> {
    let mut dz = vec![F::zero(); probs.len()];
    for ((prow, gout), grow) in probs
        .chunks_exact(k)
        .zip(dout.chunks_exact(k))
        .zip(dz.chunks_exact_mut(k))
    {
        let mut inner = F::zero();
        for (&p, &g) in prow.iter().zip(gout) {
            inner = p.mul_add(g, inner);
        }
        for ((d, &p), &g) in grow.iter_mut().zip(prow).zip(gout) {
            *d = p * (g - inner);
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one_and_order_is_preserved() {
        let z = vec![1.0f64, 3.0, 2.0, -5.0, 0.0, 5.0];
        let p = softmax_rows(&z, 2, 3);
        for row in p.chunks_exact(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(p[1] > p[2] && p[2] > p[0]);
    }

    #[test]
    fn shift_invariance() {
        let z = vec![0.2f64, -1.0, 3.5, 0.9];
        let zs: Vec<f64> = z.iter().map(|v| v + 100.0).collect();
        let a = softmax_rows(&z, 1, 4);
        let b = softmax_rows(&zs, 1, 4);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_log_k_loss() {
        let z = vec![0.0f64; 10];
        let (loss, probs) = softmax_cross_entropy(&z, 1, 10, &[3]);
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
        for &p in &probs {
            assert!((p - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let z = vec![1000.0f32, -1000.0, 0.0];
        let (loss, probs) = softmax_cross_entropy(&z, 1, 3, &[1]);
        assert!(loss.is_finite());
        assert!(probs.iter().all(|p| p.is_finite()));
        // The true label has essentially zero probability: loss ~ 2000.
        assert!(loss > 1000.0);
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let z = vec![50.0f64, 0.0, 0.0, 0.0];
        let (loss, _) = softmax_cross_entropy(&z, 1, 4, &[0]);
        assert!(loss >= 0.0 && loss < 1e-12);
    }
}
