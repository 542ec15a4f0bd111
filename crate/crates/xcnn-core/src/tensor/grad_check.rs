//! Central-difference verification of tape gradients.
//!
//! The program under test is a closure that rebuilds its computation on a
//! fresh tape from the given leaves.  It must be deterministic: anything
//! stochastic (dropout) has to take a fixed mask, otherwise the two
//! perturbed evaluations measure different functions.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, TensorId};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error across every checked coordinate.
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Number of coordinates compared.
    pub checked: usize,
}

/// Relative error with an absolute fallback for near-zero pairs, so a
/// gradient that is legitimately zero does not divide by zero.
pub(crate) fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-6 {
        diff
    } else {
        diff / scale
    }
}

fn eval<F, P>(program: &P, inputs: &[Tensor<F>]) -> Result<F>
where
    F: Scalar,
    P: Fn(&mut Tape<F>, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = program(&mut tape, &ids)?;
    if !tape.shape(loss)?.is_empty() {
        return Err(Error::NotScalar { op: "grad_check", got: tape.shape(loss)?.to_vec() });
    }
    Ok(tape.value(loss)?[0])
}

fn run<F, P>(
    program: &P,
    inputs: &[Tensor<F>],
    eps: F,
    coords: impl Fn(usize, usize) -> Vec<usize>,
) -> Result<GradCheckReport>
where
    F: Scalar,
    P: Fn(&mut Tape<F>, &[TensorId]) -> Result<TensorId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = program(&mut tape, &ids)?;
    if !tape.shape(loss)?.is_empty() {
        return Err(Error::NotScalar { op: "grad_check", got: tape.shape(loss)?.to_vec() });
    }
    tape.backward(loss)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0 };
    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        if !t.tracks_grad() {
            continue;
        }
        let analytic = tape.grad(ids[i])?.to_vec();
        for c in coords(i, t.numel()) {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + eps;
            let f_plus = eval(program, &work)?;
            work[i].data_mut()[c] = orig - eps;
            let f_minus = eval(program, &work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (f_plus - f_minus).to_f64() / (F::from_f64(2.0) * eps).to_f64();
            let err = rel_err(analytic[c].to_f64(), numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, c));
            }
        }
    }
    Ok(report)
}

/// Check every coordinate of every gradient-tracking input.
pub fn grad_check<F, P>(program: P, inputs: &[Tensor<F>], eps: F) -> Result<GradCheckReport>
where
    F: Scalar,
    P: Fn(&mut Tape<F>, &[TensorId]) -> Result<TensorId>,
{
    run(&program, inputs, eps, |_, numel| (0..numel).collect())
}

/// Check a seeded random subset of coordinates per input — the only
/// affordable option for whole-network parameter tensors.
pub fn grad_check_sampled<F, P>(
    program: P,
    inputs: &[Tensor<F>],
    eps: F,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Scalar,
    P: Fn(&mut Tape<F>, &[TensorId]) -> Result<TensorId>,
{
    run(&program, inputs, eps, |i, numel| {
        let take = per_tensor.min(numel);
        if take == numel {
            return (0..numel).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        rand::seq::index::sample(&mut rng, numel, take).into_vec()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn quadratic_loss_checks_cleanly() {
        let x = Tensor::from_vec(&[4], vec![0.3f64, -1.2, 2.0, 0.7])
            .unwrap()
            .requires_grad(true);
        let report = grad_check(
            |tape, ids| tape.sum_sq(ids[0]),
            &[x],
            1e-6,
        )
        .unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_err < 1e-9, "{}", report.max_rel_err);
    }

    #[test]
    fn detects_the_relu_kink() {
        // At exactly zero the subgradient (0) and the central difference
        // (~0.5) disagree; the checker must notice, not paper over it.
        let x = Tensor::from_vec(&[3], vec![1.0f64, 0.0, -1.0])
            .unwrap()
            .requires_grad(true);
        let report = grad_check(
            |tape, ids| {
                let y = tape.relu(ids[0])?;
                tape.sum(y)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.4, "kink should be flagged, got {}", report.max_rel_err);
        assert_eq!(report.worst, Some((0, 1)));
    }

    #[test]
    fn constants_are_skipped() {
        let x = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap().requires_grad(true);
        let w = Tensor::from_vec(&[2], vec![3.0f64, 4.0]).unwrap();
        let report = grad_check(
            |tape, ids| {
                let y = tape.add(ids[0], ids[1])?;
                tape.sum_sq(y)
            },
            &[x, w],
            1e-6,
        )
        .unwrap();
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn sampled_subset_checks_fewer_coordinates() {
        let x = Tensor::from_vec(&[100], (0..100).map(|i| i as f64 * 0.01).collect())
            .unwrap()
            .requires_grad(true);
        let report = grad_check_sampled(
            |tape, ids| tape.sum_sq(ids[0]),
            &[x],
            1e-6,
            10,
            42,
        )
        .unwrap();
        assert_eq!(report.checked, 10);
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn non_scalar_program_is_rejected() {
        let x = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap().requires_grad(true);
        let err = grad_check(|tape, ids| tape.relu(ids[0]), &[x], 1e-6).unwrap_err();
        assert!(matches!(err, Error::NotScalar { .. }));
    }
}
