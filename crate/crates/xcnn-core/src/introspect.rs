//! Looking inside a trained network: cross-connection weight heatmaps,
//! gradient-ascent activation maximisation, and RGB renderings of feature
//! maps.  Everything returns plain pixel buffers; file encoding is the
//! companion crate's job.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;


use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Row-major 8-bit RGB pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, pixels: vec![255; width * height * 3] }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

// ---- cross-connection heatmaps ------------------------------------------

/// Colour of one weight cell: green tint for positive, blue for negative,
/// with intensity proportional to `|w| / max|w|`.  Any nonzero maximum gets
/// at least one intensity step so small weights stay visible.
fn cell_colour(w: f64, max_abs: f64) -> [u8; 3] {
    let t = if max_abs > 0.0 {
        let raw = (255.0 * w.abs() / max_abs).round() as u8;
        raw.max(1)
    } else {
        1
    };
    let faint = 255 - t;
    if w >= 0.0 {
        [faint, 255, faint]
    } else {
        [faint, faint, 255]
    }
}

/// Render a 1x1 conv kernel `[out, in, 1, 1]` as a heatmap: one square cell
/// per weight, output maps as rows, input maps as columns.
pub fn kernel_heatmap<F: Scalar>(kernel: &Tensor<F>, cell: usize) -> Result<RgbImage> {
    let (out_maps, in_maps, kh, kw) = kernel.dims4()?;
    if (kh, kw) != (1, 1) {
        return Err(Error::invalid(
            "heatmap",
            format!("expected a 1x1 kernel, got {kh}x{kw}"),
        ));
    }
    if cell == 0 {
        return Err(Error::invalid("heatmap", "cell size 0"));
    }
    let data = kernel.data();
    let max_abs = data.iter().fold(0.0f64, |m, &v| m.max(v.to_f64().abs()));
    let mut img = RgbImage::new(in_maps * cell, out_maps * cell);
    for r in 0..out_maps {
        for c in 0..in_maps {
            let colour = cell_colour(data[r * in_maps + c].to_f64(), max_abs);
            for y in 0..cell {
                for x in 0..cell {
                    img.put(c * cell + x, r * cell + y, colour);
                }
            }
        }
    }
    Ok(img)
}

/// Read back a heatmap produced by [`kernel_heatmap`]: `(rows, cols,
/// values)` with values in `[-1, 1]` as fractions of the original maximum.
/// Signs are exact; magnitudes are quantised to 1/255.
pub fn decode_heatmap(img: &RgbImage, cell: usize) -> Result<(usize, usize, Vec<f64>)> {
    if cell == 0 || img.width % cell != 0 || img.height % cell != 0 {
        return Err(Error::invalid(
            "heatmap",
            format!("{}x{} image does not tile into {cell}px cells", img.width, img.height),
        ));
    }
    let cols = img.width / cell;
    let rows = img.height / cell;
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let [red, g, b] = img.get(c * cell + cell / 2, r * cell + cell / 2);
            let v = if g == 255 && red == b {
                (255 - red) as f64 / 255.0
            } else if b == 255 && red == g {
                -((255 - red) as f64) / 255.0
            } else {
                return Err(Error::invalid(
                    "heatmap",
                    format!("cell ({r}, {c}) has colour ({red}, {g}, {b}), not a green/blue tint"),
                ));
            };
            values.push(v);
        }
    }
    Ok((rows, cols, values))
}

// ---- activation maximisation --------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AscentConfig {
    /// L2 pull toward zero in the objective.
    pub lambda: f64,
    /// Accepted gradient steps before stopping.
    pub steps: usize,
    /// Initial step size; halved until a step improves the objective.
    pub step_size: f64,
    /// Standard deviation of the random starting image.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        AscentConfig { lambda: 0.05, steps: 200, step_size: 1.0, init_scale: 0.1, seed: 0 }
    }
}

pub struct AscentResult<F> {
    /// The optimised input, shape `[1, c, h, w]`.
    pub image: Tensor<F>,
    /// Objective after initialisation and after each accepted step;
    /// non-decreasing by construction.
    pub trace: Vec<f64>,
}

/// What input most excites one channel of a layer?  Maximises
/// `mean(activation[channel]) - lambda * sum(x^2)` by gradient ascent with
/// backtracking (step halving), in inference mode.
pub fn maximize_channel<F: Scalar>(
    graph: &NetworkGraph<F>,
    layer: &str,
    channel: usize,
    cfg: &AscentConfig,
) -> Result<AscentResult<F>> {
    let spec = graph.spec();
    let shape = [1, spec.input_channels(), spec.input_height, spec.input_width];
    let mut rng = stream_rng(cfg.seed, Stream::Ascent, 0, 0);
    let scale = F::from_f64(cfg.init_scale);
    let data: Vec<F> = (0..shape.iter().product::<usize>())
        .map(|_| F::sample_normal(&mut rng) * scale)
        .collect();
    let mut x = Tensor::from_vec(&shape, data)?.requires_grad(true);
    let lambda = F::from_f64(-cfg.lambda);

    // Objective and, when requested, its gradient with respect to the input.
    let evaluate = |x: &Tensor<F>, want_grad: bool, at_step: usize| -> Result<(f64, Option<Vec<F>>)> {
        let mut tape = Tape::new();
        let (act, input_id) = graph.forward_to_traced(&mut tape, x, layer)?;
        let mean = tape.channel_mean(act, channel)?;
        let norm = tape.sum_sq(input_id)?;
        let pull = tape.scale(norm, lambda)?;
        let obj = tape.add(mean, pull)?;
        let value = tape.value(obj)?[0].to_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("ascent objective at layer {layer}, step {at_step}"),
            });
        }
        if !want_grad {
            return Ok((value, None));
        }
        tape.backward(obj)?;
        Ok((value, Some(tape.grad(input_id)?.to_vec())))
    };

    let (mut best, grad) = evaluate(&x, true, 0)?;
    let mut grad = grad.expect("gradient requested");
    let mut trace = vec![best];
    let mut step = cfg.step_size;
    'steps: for i in 0..cfg.steps {
        loop {
            if step < 1e-10 {
                break 'steps; // no ascent direction left at any usable scale
            }
            let s = F::from_f64(step);
            let candidate_data: Vec<F> =
                x.data().iter().zip(&grad).map(|(&v, &g)| v + s * g).collect();
            let candidate = Tensor::from_vec(&shape, candidate_data)?.requires_grad(true);
            let (value, _) = evaluate(&candidate, false, i + 1)?;
            if value > best {
                x = candidate;
                best = value;
                trace.push(value);
                let (_, g) = evaluate(&x, true, i + 1)?;
                grad = g.expect("gradient requested");
                break;
            }
            step /= 2.0;
        }
    }
    Ok(AscentResult { image: x.requires_grad(false), trace })
}

// ---- feature-map rendering ----------------------------------------------

/// Render one image's activation volume `[c, h, w]` as RGB.
///
/// Three channels map straight to RGB; one channel becomes grey; anything
/// else goes through a seeded random projection to three channels (rows
/// L2-normalised, drawn from the projection stream).  Each output channel is
/// then min-max scaled to `[0, 255]`; a constant channel renders mid-grey.
pub fn feature_map_rgb<F: Scalar>(
    maps: &[F],
    c: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<RgbImage> {
    if c == 0 || h == 0 || w == 0 || maps.len() != c * h * w {
        return Err(Error::invalid(
            "feature_map",
            format!("{} values do not fill {c}x{h}x{w}", maps.len()),
        ));
    }
    let plane = h * w;
    let projection: Vec<Vec<f64>> = match c {
        3 => (0..3).map(|i| (0..3).map(|j| f64::from(u8::from(i == j))).collect()).collect(),
        1 => (0..3).map(|_| vec![1.0]).collect(),
        _ => {
            let mut rng = stream_rng(seed, Stream::Projection, c as u64, 0);
            (0..3)
                .map(|_| {
                    let row: Vec<f64> = (0..c).map(|_| f64::sample_normal(&mut rng)).collect();
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        row.into_iter().map(|v| v / norm).collect()
                    } else {
                        row
                    }
                })
                .collect()
        }
    };

    let mut img = RgbImage::new(w, h);
    for (ch, weights) in projection.iter().enumerate() {
        let mut values = vec![0.0f64; plane];
        for (ci, &wt) in weights.iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            for (v, &m) in values.iter_mut().zip(&maps[ci * plane..(ci + 1) * plane]) {
                *v += wt * m.to_f64();
            }
        }
        let lo = values.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let span = hi - lo;
        for (i, &v) in values.iter().enumerate() {
            let byte = if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                128
            };
            img.pixels[i * 3 + ch] = byte;
        }
    }
    Ok(img)
}
