//! In-memory image datasets and the transforms the training protocol needs:
//! YUV conversion, per-channel normalisation, stratified sub-sampling and
//! shift/flip augmentation.
//!
//! Images are stored planar (`[channel][row][col]`), one `f` per component,
//! nominally in `[0, 1]` until normalisation.  File formats live in the
//! companion crate; here a dataset is just numbers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset<F> {
    images: Vec<F>,
    labels: Vec<u32>,
    num_classes: usize,
    channels: usize,
    height: usize,
    width: usize,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(
        images: Vec<F>,
        labels: Vec<u32>,
        num_classes: usize,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let image_len = channels * height * width;
        if image_len == 0 || num_classes < 2 {
            return Err(Error::invalid("dataset", "empty geometry or fewer than two classes"));
        }
        if images.len() != labels.len() * image_len {
            return Err(Error::invalid(
                "dataset",
                format!(
                    "{} pixel values do not tile into {} images of {}",
                    images.len(),
                    labels.len(),
                    image_len
                ),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::invalid(
                "dataset",
                format!("label {bad} outside 0..{num_classes}"),
            ));
        }
        Ok(Dataset { images, labels, num_classes, channels, height, width })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[F] {
        let l = self.image_len();
        &self.images[i * l..(i + 1) * l]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Gather `indices` into a `[n, c, h, w]` batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<F>, Vec<u32>)> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset { context: "batch".into() });
        }
        let l = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * l);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid("batch", format!("index {i} beyond {} images", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::from_vec(&[indices.len(), self.channels, self.height, self.width], data)?;
        Ok((t, labels))
    }

    /// The first `n` images, keeping order.
    pub fn take_prefix(&self, n: usize) -> Result<Dataset<F>> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid("take_prefix", format!("{n} of {}", self.len())));
        }
        Ok(Dataset {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        })
    }

    /// The deterministic `percent`% subset: the first `ceil(len * p / 100)`
    /// images in canonical order.  This is the default subsetting mode; a
    /// smaller percentage is literally a prefix of a larger one.
    pub fn subset_prefix(&self, percent: f64) -> Result<Dataset<F>> {
        if !(percent > 0.0 && percent <= 100.0) {
            return Err(Error::invalid("subset", format!("percent {percent} outside (0, 100]")));
        }
        let take = ((self.len() as f64) * percent / 100.0).ceil() as usize;
        self.take_prefix(take.clamp(1, self.len()))
    }

    /// A class-stratified `percent`% sample; the optional alternative to
    /// [`Dataset::subset_prefix`] for heavily imbalanced label sets.
    ///
    /// Each class's indices are shuffled once with the subset stream (keyed
    /// by the class, not the requested size), then the first
    /// `round(count * percent / 100)` are taken.  Because the per-class order
    /// is fixed, a smaller percentage is always a subset of a larger one —
    /// growing the training set never swaps out images already in it.
    pub fn subset_percent(&self, percent: f64, seed: u64) -> Result<Dataset<F>> {
        if !(percent > 0.0 && percent <= 100.0) {
            return Err(Error::invalid("subset", format!("percent {percent} outside (0, 100]")));
        }
        let mut picked: Vec<usize> = Vec::new();
        for class in 0..self.num_classes {
            let mut idx: Vec<usize> =
                (0..self.len()).filter(|&i| self.labels[i] as usize == class).collect();
            let total = idx.len();
            let mut rng = stream_rng(seed, Stream::Subset, class as u64, 0);
            idx.shuffle(&mut rng);
            let take = ((total as f64) * percent / 100.0).round() as usize;
            let take = take.clamp(usize::from(total > 0), total);
            idx.truncate(take);
            picked.extend(idx);
        }
        if picked.is_empty() {
            return Err(Error::EmptyDataset { context: "subset".into() });
        }
        picked.sort_unstable();
        let l = self.image_len();
        let mut images = Vec::with_capacity(picked.len() * l);
        let mut labels = Vec::with_capacity(picked.len());
        for &i in &picked {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok(Dataset { images, labels, ..self.clone() })
    }

    /// RGB -> YUV (BT.601), channel count must be 3.
    pub fn to_yuv(&self) -> Result<Dataset<F>> {
        if self.channels != 3 {
            return Err(Error::invalid("to_yuv", format!("{} channels, expected 3", self.channels)));
        }
        let plane = self.height * self.width;
        let mut images = self.images.clone();
        for img in images.chunks_mut(3 * plane) {
            let (r_plane, rest) = img.split_at_mut(plane);
            let (g_plane, b_plane) = rest.split_at_mut(plane);
            for ((r, g), b) in r_plane.iter_mut().zip(g_plane).zip(b_plane) {
                let (y, u, v) = rgb_to_yuv(r.to_f64(), g.to_f64(), b.to_f64());
                *r = F::from_f64(y);
                *g = F::from_f64(u);
                *b = F::from_f64(v);
            }
        }
        Ok(Dataset { images, ..self.clone() })
    }
}

/// BT.601 luma plus scaled colour differences; RGB in `[0, 1]`.
pub fn rgb_to_yuv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let u = 0.492 * (b - y);
    let v = 0.877 * (r - y);
    (y, u, v)
}

pub fn yuv_to_rgb(y: f64, u: f64, v: f64) -> (f64, f64, f64) {
    let b = u / 0.492 + y;
    let r = v / 0.877 + y;
    let g = (y - 0.299 * r - 0.114 * b) / 0.587;
    (r, g, b)
}

/// Per-channel mean and standard deviation over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats<F> {
    pub mean: Vec<F>,
    pub std: Vec<F>,
}

impl<F: Scalar> NormStats<F> {
    /// Population statistics per channel.  Channels with (near-)zero spread
    /// get a unit divisor so normalisation stays finite.
    pub fn compute(ds: &Dataset<F>) -> Result<NormStats<F>> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset { context: "norm_stats".into() });
        }
        let plane = ds.height() * ds.width();
        let per_channel = ds.len() * plane;
        let mut mean = vec![0.0f64; ds.channels()];
        let mut sq = vec![0.0f64; ds.channels()];
        for img in ds.images.chunks(ds.image_len()) {
            for (c, p) in img.chunks(plane).enumerate() {
                for &v in p {
                    let v = v.to_f64();
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = per_channel as f64;
        let mut std = Vec::with_capacity(ds.channels());
        for c in 0..ds.channels() {
            mean[c] /= n;
            let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
            let s = var.sqrt();
            std.push(F::from_f64(if s < 1e-5 { 1.0 } else { s }));
        }
        Ok(NormStats { mean: mean.into_iter().map(F::from_f64).collect(), std })
    }

    /// `(x - mean) / std` in place, channel-wise.
    pub fn apply(&self, ds: &mut Dataset<F>) -> Result<()> {
        if self.mean.len() != ds.channels() || self.std.len() != ds.channels() {
            return Err(Error::shapes("normalize", &[ds.channels()], &[self.mean.len()]));
        }
        let plane = ds.height() * ds.width();
        let image_len = ds.image_len();
        for img in ds.images.chunks_mut(image_len) {
            for (c, p) in img.chunks_mut(plane).enumerate() {
                let (m, s) = (self.mean[c], self.std[c]);
                for v in p {
                    *v = (*v - m) / s;
                }
            }
        }
        Ok(())
    }
}

/// Random shift (zero-padded) and horizontal flip, applied per image to a
/// `[n, c, h, w]` batch in place.  Draw order per image is fixed — dx, dy,
/// flip — so augmentation replays exactly for a given stream.
pub fn augment_batch<F: Scalar, R: Rng + ?Sized>(
    batch: &mut Tensor<F>,
    max_shift: usize,
    hflip: bool,
    rng: &mut R,
) -> Result<()> {
    let (n, c, h, w) = batch.dims4()?;
    if max_shift >= w || max_shift >= h {
        return Err(Error::invalid("augment", format!("shift {max_shift} too large for {h}x{w}")));
    }
    let s = max_shift as i64;
    let mut plane = vec![F::zero(); h * w];
    let data = batch.data_mut();
    for i in 0..n {
        let dx = if s > 0 { rng.random_range(-s..=s) } else { 0 };
        let dy = if s > 0 { rng.random_range(-s..=s) } else { 0 };
        let flip = hflip && rng.random_bool(0.5);
        if dx == 0 && dy == 0 && !flip {
            continue;
        }
        for ch in 0..c {
            let off = (i * c + ch) * h * w;
            let src = &data[off..off + h * w];
            for (yy, row) in plane.chunks_mut(w).enumerate() {
                let sy = yy as i64 - dy;
                for (xx, out) in row.iter_mut().enumerate() {
                    let sx0 = if flip { (w - 1 - xx) as i64 } else { xx as i64 };
                    let sx = sx0 - dx;
                    *out = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        src[sy as usize * w + sx as usize]
                    } else {
                        F::zero()
                    };
                }
            }
            data[off..off + h * w].copy_from_slice(&plane);
        }
    }
    Ok(())
}

/// Pure-noise images with round-robin labels; useful for shape and
/// throughput tests where content is irrelevant.
pub fn synthetic_random<F: Scalar>(
    n: usize,
    num_classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Dataset<F>> {
    let image_len = channels * height * width;
    let mut images = Vec::with_capacity(n * image_len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream_rng(seed, Stream::Synthetic, i as u64, 0);
        for _ in 0..image_len {
            images.push(F::sample_uniform(&mut rng, F::zero(), F::one()));
        }
        labels.push((i % num_classes) as u32);
    }
    Dataset::new(images, labels, num_classes, channels, height, width)
}

/// A learnable classification task: each class owns a smooth random template
/// (low-resolution noise, bilinearly upsampled) and samples are the template
/// plus Gaussian pixel noise, clamped to `[0, 1]`.  Labels are round-robin,
/// and sample `i` is generated from its own stream, so the first `k` images
/// are identical regardless of `n` — callers can split train/test by prefix.
pub fn synthetic_learnable<F: Scalar>(
    n: usize,
    num_classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
    noise_sigma: f64,
) -> Result<Dataset<F>> {
    let grid = 4usize; // template resolution per axis
    let mut templates: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut rng = stream_rng(seed, Stream::Synthetic, u64::MAX, class as u64);
        let coarse: Vec<f64> = (0..channels * grid * grid)
            .map(|_| f64::sample_uniform(&mut rng, 0.1, 0.9))
            .collect();
        let mut full = Vec::with_capacity(channels * height * width);
        for ch in 0..channels {
            let base = &coarse[ch * grid * grid..(ch + 1) * grid * grid];
            for y in 0..height {
                let fy = (y as f64 + 0.5) / height as f64 * grid as f64 - 0.5;
                let y0 = fy.floor().max(0.0).min((grid - 1) as f64) as usize;
                let y1 = Ord::min(y0 + 1, grid - 1);
                let ty = (fy - y0 as f64).max(0.0).min(1.0);
                for x in 0..width {
                    let fx = (x as f64 + 0.5) / width as f64 * grid as f64 - 0.5;
                    let x0 = fx.floor().max(0.0).min((grid - 1) as f64) as usize;
                    let x1 = Ord::min(x0 + 1, grid - 1);
                    let tx = (fx - x0 as f64).max(0.0).min(1.0);
                    let top = base[y0 * grid + x0] * (1.0 - tx) + base[y0 * grid + x1] * tx;
                    let bot = base[y1 * grid + x0] * (1.0 - tx) + base[y1 * grid + x1] * tx;
                    full.push(top * (1.0 - ty) + bot * ty);
                }
            }
        }
        templates.push(full);
    }

    let image_len = channels * height * width;
    let mut images = Vec::with_capacity(n * image_len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let mut rng = stream_rng(seed, Stream::Synthetic, i as u64, 1);
        for &t in &templates[class] {
            let v = t + noise_sigma * f64::sample_normal(&mut rng);
            images.push(F::from_f64(v.max(0.0).min(1.0)));
        }
        labels.push(class as u32);
    }
    Dataset::new(images, labels, num_classes, channels, height, width)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset<f32> {
        // 6 images, 3 channels, 2x2, labels 0..2 round-robin.
        synthetic_random(6, 3, 3, 2, 2, 9).unwrap()
    }

    #[test]
    fn construction_validates_sizes_and_labels() {
        assert!(Dataset::<f32>::new(vec![0.0; 12], vec![0], 2, 3, 2, 2).is_ok());
        assert!(Dataset::<f32>::new(vec![0.0; 11], vec![0], 2, 3, 2, 2).is_err());
        assert!(Dataset::<f32>::new(vec![0.0; 12], vec![5], 2, 3, 2, 2).is_err());
    }

    #[test]
    fn batch_gathers_rows_in_order() {
        let ds = tiny();
        let (t, labels) = ds.batch(&[2, 0]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 2]);
        assert_eq!(labels, vec![ds.label(2), ds.label(0)]);
        assert_eq!(&t.data()[..12], ds.image(2));
        assert!(ds.batch(&[99]).is_err());
    }

    #[test]
    fn yuv_conversion_inverts() {
        let (r, g, b) = (0.25, 0.5, 0.75);
        let (y, u, v) = rgb_to_yuv(r, g, b);
        let (r2, g2, b2) = yuv_to_rgb(y, u, v);
        assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        // Grey maps to zero chroma.
        let (_, u0, v0) = rgb_to_yuv(0.4, 0.4, 0.4);
        assert!(u0.abs() < 1e-12 && v0.abs() < 1e-12);
    }

    #[test]
    fn dataset_yuv_matches_pixel_formula() {
        let ds = tiny();
        let yuv = ds.to_yuv().unwrap();
        let img = ds.image(1);
        let out = yuv.image(1);
        let plane = 4;
        let (y, u, v) = rgb_to_yuv(img[0] as f64, img[plane] as f64, img[2 * plane] as f64);
        assert!((out[0] as f64 - y).abs() < 1e-6);
        assert!((out[plane] as f64 - u).abs() < 1e-6);
        assert!((out[2 * plane] as f64 - v).abs() < 1e-6);
    }

    #[test]
    fn normalisation_zeroes_mean_and_units_variance() {
        let mut ds = synthetic_random::<f64>(32, 2, 3, 4, 4, 3).unwrap();
        let stats = NormStats::compute(&ds).unwrap();
        stats.apply(&mut ds).unwrap();
        let after = NormStats::compute(&ds).unwrap();
        for c in 0..3 {
            assert!(after.mean[c].abs() < 1e-10);
            assert!((after.std[c] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn prefix_subsets_round_up_and_nest() {
        let ds = synthetic_random::<f32>(7, 3, 1, 2, 2, 4).unwrap();
        assert_eq!(ds.subset_prefix(100.0).unwrap().len(), 7);
        assert_eq!(ds.subset_prefix(30.0).unwrap().len(), 3); // ceil(2.1)
        assert_eq!(ds.subset_prefix(1.0).unwrap().len(), 1);
        let small = ds.subset_prefix(30.0).unwrap();
        let big = ds.subset_prefix(60.0).unwrap();
        for i in 0..small.len() {
            assert_eq!(small.image(i), big.image(i));
            assert_eq!(small.label(i), big.label(i));
        }
        assert!(ds.subset_prefix(0.0).is_err());
        assert!(ds.subset_prefix(100.5).is_err());
    }

    #[test]
    fn subsets_are_stratified_and_nested() {
        let ds = synthetic_random::<f32>(200, 4, 1, 2, 2, 1).unwrap();
        let small = ds.subset_percent(10.0, 42).unwrap();
        let large = ds.subset_percent(30.0, 42).unwrap();
        assert_eq!(small.len(), 20);
        assert_eq!(large.len(), 60);
        for class in 0..4u32 {
            assert_eq!(small.labels().iter().filter(|&&l| l == class).count(), 5);
        }
        // Nesting: every image of the small subset appears in the large one.
        let l = ds.image_len();
        for i in 0..small.len() {
            let img = small.image(i);
            assert!(
                (0..large.len()).any(|j| large.image(j) == img && large.label(j) == small.label(i)),
                "image {i} of the 10% subset missing from the 30% subset (image_len {l})"
            );
        }
    }

    #[test]
    fn augmentation_shifts_and_flips_deterministically() {
        let ds = synthetic_random::<f32>(4, 2, 3, 8, 8, 7).unwrap();
        let (mut a, _) = ds.batch(&[0, 1, 2, 3]).unwrap();
        let (mut b, _) = ds.batch(&[0, 1, 2, 3]).unwrap();
        let mut r1 = stream_rng(11, Stream::Augment, 0, 0);
        let mut r2 = stream_rng(11, Stream::Augment, 0, 0);
        augment_batch(&mut a, 2, true, &mut r1).unwrap();
        augment_batch(&mut b, 2, true, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
        let mut r3 = stream_rng(12, Stream::Augment, 0, 0);
        augment_batch(&mut b, 2, true, &mut r3).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn augmentation_with_no_freedom_is_identity() {
        let ds = synthetic_random::<f32>(2, 2, 1, 4, 4, 0).unwrap();
        let (mut batch, _) = ds.batch(&[0, 1]).unwrap();
        let before = batch.data().to_vec();
        let mut rng = stream_rng(0, Stream::Augment, 0, 0);
        augment_batch(&mut batch, 0, false, &mut rng).unwrap();
        assert_eq!(batch.data(), &before[..]);
    }

    #[test]
    fn shifts_translate_without_losing_interior_pixels() {
        // A lone pixel at (1, 1) stays in bounds under any +-1 shift, so the
        // augmented plane must contain exactly one lit pixel, wherever the
        // draw put it.
        let mut img = vec![0.0f32; 16];
        img[5] = 1.0;
        let mut t = Tensor::from_vec(&[1, 1, 4, 4], img).unwrap();
        let mut rng = stream_rng(3, Stream::Augment, 0, 0);
        augment_batch(&mut t, 1, false, &mut rng).unwrap();
        let lit = t.data().iter().filter(|&&v| v == 1.0).count();
        let dark = t.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!((lit, dark), (1, 15));
    }

    #[test]
    fn learnable_synthetic_is_prefix_stable_and_classy() {
        let a = synthetic_learnable::<f32>(12, 3, 3, 8, 8, 5, 0.1).unwrap();
        let b = synthetic_learnable::<f32>(24, 3, 3, 8, 8, 5, 0.1).unwrap();
        for i in 0..12 {
            assert_eq!(a.image(i), b.image(i));
            assert_eq!(a.label(i), b.label(i));
        }
        // Same-class images correlate more than cross-class ones.
        let dist = |x: &[f32], y: &[f32]| -> f32 {
            x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        let same = dist(a.image(0), a.image(3));
        let cross = dist(a.image(0), a.image(1));
        assert!(same < cross, "same-class distance {same} should beat cross-class {cross}");
    }
}
