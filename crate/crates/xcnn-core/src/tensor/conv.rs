//! 2-D convolution via im2col + matmul, with a direct path for 1x1 kernels.
//!
//! Layouts: input `[N, C, H, W]`, kernel `[F, C, KH, KW]`, output
//! `[N, F, OH, OW]`, all row-major.  The kernel tensor viewed as a
//! `[F, C*KH*KW]` matrix needs no copying, which is why the column matrix is
//! laid out patch-major.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::matmul::{matmul, matmul_abt};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad: usize,
    pub stride: usize,
}

pub fn conv_dims(
    input_shape: &[usize],
    kernel_shape: &[usize],
    bias_len: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    let (n, c, h, w, f, kc, kh, kw) = match (input_shape, kernel_shape) {
        (&[n, c, h, w], &[f, kc, kh, kw]) => (n, c, h, w, f, kc, kh, kw),
        _ => {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "expected rank-4 input and kernel, got {:?} and {:?}",
                    input_shape, kernel_shape
                ),
            ))
        }
    };
    if kc != c {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel expects {kc} input channels, input has {c}"),
        ));
    }
    if bias_len != f {
        return Err(Error::invalid(
            "conv2d",
            format!("bias has {bias_len} entries for {f} filters"),
        ));
    }
    if stride == 0 || kh == 0 || kw == 0 {
        return Err(Error::invalid("conv2d", "stride and kernel size must be positive"));
    }
    let span_h = h + 2 * pad;
    let span_w = w + 2 * pad;
    if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
        return Err(Error::invalid(
            "conv2d",
            format!(
                "geometry {h}x{w} (pad {pad}, stride {stride}) does not tile with a {kh}x{kw} kernel"
            ),
        ));
    }
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        oh: (span_h - kh) / stride + 1,
        ow: (span_w - kw) / stride + 1,
        pad,
        stride,
    })
}

/// Patch matrix, `[C*KH*KW, OH*OW]`: row (c,ki,kj), column (oy,ox).
fn im2col<F: Scalar>(d: &ConvDims, img: &[F], cols: &mut [F]) {
    let (h, w, ow, oh) = (d.h, d.w, d.ow, d.oh);
    cols.fill(F::zero());
    for c in 0..d.c {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let out_row = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut out_row[oy * ow..(oy + 1) * ow];
                    if d.stride == 1 {
                        // Valid ox range: 0 <= ox + kj - pad < w.
                        let lo = d.pad.saturating_sub(kj);
                        let hi = (w + d.pad).saturating_sub(kj).min(ow);
                        if lo < hi {
                            let src_lo = lo + kj - d.pad;
                            dst[lo..hi].copy_from_slice(&src_row[src_lo..src_lo + (hi - lo)]);
                        }
                    } else {
                        for (ox, slot) in dst.iter_mut().enumerate() {
                            let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *slot = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transposed patch matrix, `[OH*OW, C*KH*KW]`; used so the weight-gradient
/// product runs with the reduction on the outer axis.
fn im2col_t<F: Scalar>(d: &ConvDims, img: &[F], cols: &mut [F]) {
    let ck = d.c * d.kh * d.kw;
    cols.fill(F::zero());
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let out_row = &mut cols[(oy * d.ow + ox) * ck..(oy * d.ow + ox + 1) * ck];
            for c in 0..d.c {
                let plane = &img[c * d.h * d.w..(c + 1) * d.h * d.w];
                for ki in 0..d.kh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for kj in 0..d.kw {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            out_row[(c * d.kh + ki) * d.kw + kj] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of a `[C*KH*KW, OH*OW]` column-gradient back onto the image.
fn col2im_add<F: Scalar>(d: &ConvDims, cols: &[F], img: &mut [F]) {
    for c in 0..d.c {
        let plane = &mut img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let col_row = &cols[row * d.oh * d.ow..(row + 1) * d.oh * d.ow];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let src = &col_row[oy * d.ow..(oy + 1) * d.ow];
                    if d.stride == 1 {
                        let lo = d.pad.saturating_sub(kj);
                        let hi = (d.w + d.pad).saturating_sub(kj).min(d.ow);
                        if lo < hi {
                            let dst_lo = lo + kj - d.pad;
                            for (x, &g) in dst_row[dst_lo..dst_lo + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *x += g;
                            }
                        }
                    } else {
                        for (ox, &g) in src.iter().enumerate() {
                            let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                            if ix >= 0 && ix < d.w as isize {
                                dst_row[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(d: &ConvDims) -> bool {
    d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad == 0
}

pub fn forward<F: Scalar>(d: &ConvDims, input: &[F], kernel: &[F], bias: &[F]) -> Vec<F> {
    let (ck, ohw) = (d.c * d.kh * d.kw, d.oh * d.ow);
    let mut out = vec![F::zero(); d.n * d.f * ohw];
    let mut cols = if is_pointwise(d) { Vec::new() } else { vec![F::zero(); ck * ohw] };
    for i in 0..d.n {
        let img = &input[i * d.c * d.h * d.w..(i + 1) * d.c * d.h * d.w];
        let dst = &mut out[i * d.f * ohw..(i + 1) * d.f * ohw];
        if is_pointwise(d) {
            // A 1x1 conv is a channel mix: [F,C] x [C,HW].
            matmul(d.f, d.c, ohw, kernel, img, dst);
        } else {
            im2col(d, img, &mut cols);
            matmul(d.f, ck, ohw, kernel, &cols, dst);
        }
        for (f, row) in dst.chunks_exact_mut(ohw).enumerate() {
            let b = bias[f];
            for x in row.iter_mut() {
                *x += b;
            }
        }
    }
    out
}

pub struct ConvGrads<F> {
    pub input: Option<Vec<F>>,
    pub kernel: Option<Vec<F>>,
    pub bias: Option<Vec<F>>,
}

pub fn backward<F: Scalar>(
    d: &ConvDims,
    input: &[F],
    kernel: &[F],
    dout: &[F],
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> ConvGrads<F> {
    let (ck, ohw) = (d.c * d.kh * d.kw, d.oh * d.ow);
    let mut d_input = need_input.then(|| vec![F::zero(); d.n * d.c * d.h * d.w]);
    let mut d_kernel = need_kernel.then(|| vec![F::zero(); d.f * ck]);
    let mut d_bias = need_bias.then(|| vec![F::zero(); d.f]);

    // Kernel transposed to [C*KH*KW, F] once, so the input gradient is a
    // plain row-major product.
    let kt = if need_input {
        let mut kt = vec![F::zero(); ck * d.f];
        for f in 0..d.f {
            for r in 0..ck {
                kt[r * d.f + f] = kernel[f * ck + r];
            }
        }
        kt
    } else {
        Vec::new()
    };

    let pointwise = is_pointwise(d);
    let mut cols_t = if need_kernel && !pointwise { vec![F::zero(); ohw * ck] } else { Vec::new() };
    let mut dcols = if need_input && !pointwise { vec![F::zero(); ck * ohw] } else { Vec::new() };

    for i in 0..d.n {
        let img = &input[i * d.c * d.h * d.w..(i + 1) * d.c * d.h * d.w];
        let gout = &dout[i * d.f * ohw..(i + 1) * d.f * ohw];

        if let Some(db) = d_bias.as_deref_mut() {
            for (f, row) in gout.chunks_exact(ohw).enumerate() {
                let mut s = F::zero();
                for &g in row {
                    s += g;
                }
                db[f] += s;
            }
        }
        if let Some(dk) = d_kernel.as_deref_mut() {
            if pointwise {
                matmul_abt(d.f, ohw, d.c, gout, img, dk);
            } else {
                im2col_t(d, img, &mut cols_t);
                matmul(d.f, ohw, ck, gout, &cols_t, dk);
            }
        }
        if let Some(di) = d_input.as_deref_mut() {
            let dst = &mut di[i * d.c * d.h * d.w..(i + 1) * d.c * d.h * d.w];
            if pointwise {
                matmul(d.c, d.f, ohw, &kt, gout, dst);
            } else {
                dcols.fill(F::zero());
                matmul(ck, d.f, ohw, &kt, gout, &mut dcols);
                col2im_add(d, &dcols, dst);
            }
        }
    }

    ConvGrads { input: d_input, kernel: d_kernel, bias: d_bias }
}
