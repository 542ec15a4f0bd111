//! Central-difference oracles for every differentiable op, in f64.
//!
//! Each test wires one op (or a short chain) into a scalar loss and compares
//! the tape gradients of every input against `(f(x+h) - f(x-h)) / 2h`.  All
//! fixtures are drawn at generic points — away from relu kinks and pooling
//! ties — so the true tolerance is dominated by the difference quotient
//! itself; the asserted bound of 1e-4 is deliberately loose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xcnn_core::tensor::{grad_check, GradCheckReport, Tensor};
use xcnn_core::Scalar;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn filled(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| f64::sample_uniform(rng, lo, hi)).collect();
    Tensor::from_vec(shape, data).unwrap().requires_grad(true)
}

/// Magnitudes in [0.2, 1] with random signs: nothing sits near a relu kink.
fn signed(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = f64::sample_uniform(rng, 0.2, 1.0);
            if f64::sample_uniform(rng, -1.0, 1.0) < 0.0 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap().requires_grad(true)
}

fn assert_tight(r: &GradCheckReport) {
    assert!(r.checked > 0);
    assert!(r.max_rel_err < TOL, "worst {:?} err {:.3e}", r.worst, r.max_rel_err);
}

#[test]
fn conv_3x3_same_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = filled(&[2, 3, 6, 6], -1.0, 1.0, &mut rng);
    let k = filled(&[4, 3, 3, 3], -0.5, 0.5, &mut rng);
    let b = filled(&[4], -0.3, 0.3, &mut rng);
    let r = grad_check(
        |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
            tape.sum_sq(y)
        },
        &[x, k, b],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

#[test]
fn conv_5x5_stride_2() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = filled(&[1, 2, 9, 9], -1.0, 1.0, &mut rng);
    let k = filled(&[3, 2, 5, 5], -0.4, 0.4, &mut rng);
    let b = filled(&[3], -0.3, 0.3, &mut rng);
    let r = grad_check(
        |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], 2, 2)?;
            tape.sum_sq(y)
        },
        &[x, k, b],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

#[test]
fn conv_1x1_fast_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = filled(&[2, 5, 4, 4], -1.0, 1.0, &mut rng);
    let k = filled(&[3, 5, 1, 1], -0.6, 0.6, &mut rng);
    let b = filled(&[3], -0.3, 0.3, &mut rng);
    let r = grad_check(
        |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], 1, 0)?;
            tape.sum_sq(y)
        },
        &[x, k, b],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

#[test]
fn conv_rectangular_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = filled(&[1, 2, 5, 7], -1.0, 1.0, &mut rng);
    let k = filled(&[2, 2, 3, 3], -0.5, 0.5, &mut rng);
    let b = filled(&[2], -0.2, 0.2, &mut rng);
    let r = grad_check(
        |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
            tape.sum_sq(y)
        },
        &[x, k, b],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

#[test]
fn conv_unpadded_valid_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = filled(&[2, 3, 6, 6], -1.0, 1.0, &mut rng);
    let k = filled(&[4, 3, 3, 3], -0.5, 0.5, &mut rng);
    let b = filled(&[4], -0.3, 0.3, &mut rng);
    let r = grad_check(
        |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], 1, 0)?;
            tape.sum_sq(y)
        },
        &[x, k, b],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

#[test]
fn dense_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = filled(&[3, 7], -1.0, 1.0, &mut rng);
    let w = filled(&[7, 4], -0.5, 0.5, &mut rng);
    let b = filled(&[4], -0.3, 0.3, &mut rng);
    let r = grad_check(
        |tape, ids| {
            let y = tape.dense(ids[0], ids[1], ids[2])?;
            tape.sum_sq(y)
        },
        &[x, w, b],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

#[test]
fn relu_away_from_the_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = signed(&[2, 3, 4, 4], &mut rng);
    let r = grad_check(
        |tape, ids| {
            let y = tape.relu(ids[0])?;
            tape.sum_sq(y)
        },
        &[x],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

#[test]
fn maxout_two_and_three_pieces() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for pieces in [2usize, 3] {
        let x = filled(&[2, 6, 3, 3], -1.0, 1.0, &mut rng);
        let r = grad_check(
            |tape, ids| {
                let y = tape.maxout(ids[0], pieces)?;
                tape.sum_sq(y)
            },
            &[x],
            EPS,
        )
        .unwrap();
        assert_tight(&r);
    }
}

#[test]
fn maxpool_window_2_and_3() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for (window, side) in [(2usize, 6usize), (3, 9)] {
        let x = filled(&[2, 2, side, side], -1.0, 1.0, &mut rng);
        let r = grad_check(
            |tape, ids| {
                let y = tape.maxpool2d(ids[0], window)?;
                tape.sum_sq(y)
            },
            &[x],
            EPS,
        )
        .unwrap();
        assert_tight(&r);
    }
}

#[test]
fn global_maxpool_via_full_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = filled(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
    let r = grad_check(
        |tape, ids| {
            let y = tape.maxpool2d(ids[0], 4)?;
            tape.sum_sq(y)
        },
        &[x],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

#[test]
fn batchnorm_training_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = filled(&[4, 3, 2, 2], -1.0, 1.0, &mut rng);
    let g = filled(&[3], 0.5, 1.5, &mut rng);
    let b = filled(&[3], -0.5, 0.5, &mut rng);
    // A plain sum (or sum of squares) of the output is nearly invariant to
    // the input — the channel re-standardises — leaving an O(eps) gradient
    // that differences cannot resolve.  Weight positions unevenly instead.
    let weights: Vec<f64> = (0..x.numel()).map(|_| f64::sample_uniform(&mut rng, 0.5, 1.5)).collect();
    let r = grad_check(
        |tape, ids| {
            let (y, _, _) = tape.batchnorm_train(ids[0], ids[1], ids[2], 1e-5)?;
            let weighted = tape.dropout_mask(y, weights.clone())?;
            tape.sum(weighted)
        },
        &[x, g, b],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

#[test]
fn batchnorm_fixed_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = filled(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
    let g = filled(&[3], 0.5, 1.5, &mut rng);
    let b = filled(&[3], -0.5, 0.5, &mut rng);
    let mean = [0.1, -0.2, 0.05];
    let var = [0.9, 1.3, 0.4];
    let r = grad_check(
        |tape, ids| {
            let y = tape.batchnorm_infer(ids[0], ids[1], ids[2], &mean, &var, 1e-5)?;
            tape.sum_sq(y)
        },
        &[x, g, b],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

#[test]
fn dropout_with_a_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = filled(&[2, 4, 3, 3], -1.0, 1.0, &mut rng);
    // Keep 3 of every 4 positions, rescaled as inverted dropout would.
    let mask: Vec<f64> =
        (0..x.numel()).map(|i| if i % 4 == 0 { 0.0 } else { 1.0 / 0.75 }).collect();
    let r = grad_check(
        |tape, ids| {
            let y = tape.dropout_mask(ids[0], mask.clone())?;
            tape.sum_sq(y)
        },
        &[x],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

#[test]
fn softmax_cross_entropy_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let logits = filled(&[4, 6], -2.0, 2.0, &mut rng);
    let labels = [1u32, 0, 5, 3];
    let r = grad_check(
        |tape, ids| tape.softmax_cross_entropy(ids[0], &labels),
        &[logits],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

/// The cross-entropy gradient has a closed form, `(softmax - onehot) / n`;
/// check the tape against it exactly rather than through differences.
#[test]
fn cross_entropy_gradient_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let logits = filled(&[3, 5], -2.0, 2.0, &mut rng);
    let labels = [4u32, 0, 2];
    let mut tape = xcnn_core::Tape::new();
    let id = tape.leaf(&logits);
    let loss = tape.softmax_cross_entropy(id, &labels).unwrap();
    tape.backward(loss).unwrap();
    let grad = tape.grad(id).unwrap();
    for (i, row) in logits.data().chunks(5).enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, |a, b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..5 {
            let onehot = if labels[i] as usize == j { 1.0 } else { 0.0 };
            let want = (exps[j] / z - onehot) / 3.0;
            assert!((grad[i * 5 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let logits = filled(&[3, 4], -2.0, 2.0, &mut rng);
    let r = grad_check(
        |tape, ids| {
            let p = tape.softmax(ids[0])?;
            tape.sum_sq(p)
        },
        &[logits],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

#[test]
fn channel_slice_and_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let a = filled(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    let b = filled(&[2, 2, 4, 4], -1.0, 1.0, &mut rng);
    let r = grad_check(
        |tape, ids| {
            let mid = tape.slice_channels(ids[0], 1, 2)?;
            let cat = tape.concat_channels(&[mid, ids[1]])?;
            tape.sum_sq(cat)
        },
        &[a, b],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

#[test]
fn concat_with_a_repeated_part() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    // The same tensor used twice must receive both gradient contributions.
    let a = filled(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
    let r = grad_check(
        |tape, ids| {
            let cat = tape.concat_channels(&[ids[0], ids[0]])?;
            tape.sum_sq(cat)
        },
        &[a],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

#[test]
fn scalar_arithmetic_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let a = filled(&[3, 3], -1.0, 1.0, &mut rng);
    let b = filled(&[2, 5], -1.0, 1.0, &mut rng);
    let r = grad_check(
        |tape, ids| {
            let sa = tape.sum_sq(ids[0])?;
            let sb = tape.sum(ids[1])?;
            let s = tape.add(sa, sb)?;
            tape.scale(s, 2.5)
        },
        &[a, b],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

#[test]
fn channel_mean_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x = filled(&[2, 5, 3, 3], -1.0, 1.0, &mut rng);
    let r = grad_check(
        |tape, ids| tape.channel_mean(ids[0], 2),
        &[x],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

#[test]
fn l2_penalty_over_two_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let a = filled(&[4, 3], -1.0, 1.0, &mut rng);
    let b = filled(&[6], -1.0, 1.0, &mut rng);
    let r = grad_check(
        |tape, ids| tape.l2_penalty(&[ids[0], ids[1]], 0.01),
        &[a, b],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}

/// One of everything, chained: conv, relu, pool, batch norm, 1x1 conv,
/// maxout, flatten, dense, cross-entropy.  Biases are drawn nonzero so the
/// relu pre-activations sit at a generic point.
#[test]
fn composite_network_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x = filled(&[2, 3, 8, 8], -1.0, 1.0, &mut rng);
    let k1 = filled(&[4, 3, 3, 3], -0.4, 0.4, &mut rng);
    let b1 = signed(&[4], &mut rng);
    let g = filled(&[4], 0.5, 1.5, &mut rng);
    let bt = filled(&[4], -0.5, 0.5, &mut rng);
    let k2 = filled(&[6, 4, 1, 1], -0.6, 0.6, &mut rng);
    let b2 = signed(&[6], &mut rng);
    let w = filled(&[48, 5], -0.3, 0.3, &mut rng);
    let bw = filled(&[5], -0.2, 0.2, &mut rng);
    let labels = [1u32, 4];
    let r = grad_check(
        |tape, ids| {
            let c1 = tape.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
            let a1 = tape.relu(c1)?;
            let p1 = tape.maxpool2d(a1, 2)?;
            let (n1, _, _) = tape.batchnorm_train(p1, ids[3], ids[4], 1e-5)?;
            let c2 = tape.conv2d(n1, ids[5], ids[6], 1, 0)?;
            let m = tape.maxout(c2, 2)?;
            let f = tape.flatten(m)?;
            let d = tape.dense(f, ids[7], ids[8])?;
            tape.softmax_cross_entropy(d, &labels)
        },
        &[x, k1, b1, g, bt, k2, b2, w, bw],
        EPS,
    )
    .unwrap();
    assert_tight(&r);
}
