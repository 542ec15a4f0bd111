//! Max pooling with window == stride, the only geometry the architectures
//! here use (2x2 stage pooling and whole-plane global pooling).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug)]
pub struct PoolOut<F> {
    pub value: Vec<F>,
    /// Flat index into the input buffer of each output's winning element.
    pub argmax: Vec<u32>,
    pub oh: usize,
    pub ow: usize,
}

pub fn forward<F: Scalar>(
    input: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
) -> Result<PoolOut<F>> {
    if window == 0 {
        return Err(Error::invalid("maxpool2d", "window must be positive"));
    }
    if h % window != 0 || w % window != 0 {
        return Err(Error::invalid(
            "maxpool2d",
            format!("input {h}x{w} is not divisible by window {window}"),
        ));
    }
    debug_assert!(input.len() < u32::MAX as usize);
    let (oh, ow) = (h / window, w / window);
    let mut value = vec![F::zero(); n * c * oh * ow];
    let mut argmax = vec![0u32; value.len()];
    for img in 0..n * c {
        let plane = &input[img * h * w..(img + 1) * h * w];
        let base = img * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = plane[oy * window * w + ox * window];
                let mut best_at = oy * window * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let at = (oy * window + dy) * w + ox * window + dx;
                        let v = plane[at];
                        if v > best {
                            best = v;
                            best_at = at;
                        }
                    }
                }
                let o = img * oh * ow + oy * ow + ox;
                value[o] = best;
                argmax[o] = (base + best_at) as u32;
            }
        }
    }
    Ok(PoolOut { value, argmax, oh, ow })
}

/// Routes each output gradient to the input element that won the max.
pub fn backward<F: Scalar>(dout: &[F], argmax: &[u32], input_len: usize) -> Vec<F> {
    let mut din = vec![F::zero(); input_len];
    for (&g, &at) in dout.iter().zip(argmax) {
        din[at as usize] += g;
    }
    din
}
