use core::fmt;
use core::iter::Sum;

use num_traits::{Float, NumAssignOps};
use rand::Rng;
use rand_distr::StandardNormal;

/// Element type the engine is generic over.
///
/// Training runs in `f32`; gradient checking re-runs the same code in `f64`
/// where central differences are meaningful.  The `from_f64` escape hatch is
/// how literals and accumulated statistics cross the type boundary.
pub trait Scalar:
    Float + NumAssignOps + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Uniform draw from `[lo, hi)`.
    fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self;

    /// Standard normal draw.
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Uniform draw from `[0, 1)`, used for dropout masks and flip decisions.
    /// Always draws in `f64` so the mask pattern is identical for every
    /// element type under the same seed.
    fn sample_unit_f64<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        rng.random_range(0.0..1.0)
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        // Draw in f64 and narrow, so f32 and f64 models see the same stream.
        rng.random_range(lo as f64..hi as f64) as f32
    }

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let x: f64 = rng.sample(StandardNormal);
        x as f32
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn sample_uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        rng.random_range(lo..hi)
    }

    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x = <f32 as Scalar>::sample_uniform(&mut rng, -0.25, 0.25);
            assert!((-0.25..0.25).contains(&x));
        }
    }

    #[test]
    fn same_seed_same_stream_across_types() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..64 {
            let x = <f32 as Scalar>::sample_uniform(&mut a, -1.0, 1.0);
            let y = <f64 as Scalar>::sample_uniform(&mut b, -1.0, 1.0);
            assert_eq!(x, y as f32);
        }
    }
}
