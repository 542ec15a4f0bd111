//! Two-sample t-tests over run accuracies.  Welch's unequal-variance test is
//! the default; the pooled-variance Student's test sits behind a flag for
//! comparison.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKind {
    Welch,
    Student,
}

#[derive(Debug, Clone, Copy)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    /// `p_value < 0.05`.
    pub significant: bool,
}

fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    // Sample variance (n - 1 denominator).
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's t-test: the default.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    t_test_kind(a, b, TestKind::Welch)
}

pub fn t_test_kind(a: &[f64], b: &[f64], kind: TestKind) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(format!(
            "t-test needs at least 2 samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_and_var(a);
    let (mb, vb) = mean_and_var(b);

    if va == 0.0 && vb == 0.0 {
        // No spread at all: equal means are indistinguishable, unequal means
        // are trivially separated.
        return Ok(if ma == mb {
            TTest { t: 0.0, df: na + nb - 2.0, p_value: 1.0, significant: false }
        } else {
            TTest {
                t: f64::INFINITY * (ma - mb).signum(),
                df: na + nb - 2.0,
                p_value: 0.0,
                significant: true,
            }
        });
    }

    let (t, df) = match kind {
        TestKind::Welch => {
            let (sa, sb) = (va / na, vb / nb);
            let se = (sa + sb).sqrt();
            let df = (sa + sb) * (sa + sb)
                / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
            ((ma - mb) / se, df)
        }
        TestKind::Student => {
            let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
            let se = (pooled * (1.0 / na + 1.0 / nb)).sqrt();
            ((ma - mb) / se, na + nb - 2.0)
        }
    };

    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::invalid(format!("t distribution with df {df}: {e}")))?;
    // Two-sided; the lower tail keeps precision for large |t|.
    let p_value = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t, df, p_value, significant: p_value < SIGNIFICANCE_LEVEL })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    // Reference numbers computed with an independent statistics package.
    const WIDE_A: [f64; 5] = [0.40, 0.41, 0.39, 0.40, 0.41];
    const WIDE_B: [f64; 5] = [0.45, 0.46, 0.44, 0.45, 0.46];
    const CLOSE_A: [f64; 3] = [0.61, 0.63, 0.60];
    const CLOSE_B: [f64; 3] = [0.60, 0.59, 0.62];
    const UNEVEN_A: [f64; 4] = [0.20, 0.35, 0.28, 0.25];
    const UNEVEN_B: [f64; 4] = [0.55, 0.52, 0.58, 0.54];

    #[test]
    fn welch_matches_reference_values() {
        let r = t_test(&WIDE_A, &WIDE_B).unwrap();
        assert_abs_diff_eq!(r.t, -9.4491118252, epsilon = 1e-4);
        assert_abs_diff_eq!(r.df, 8.0, epsilon = 1e-4);
        assert_abs_diff_eq!(r.p_value, 0.0000129369, epsilon = 1e-4);
        assert!(r.significant);

        let r = t_test(&CLOSE_A, &CLOSE_B).unwrap();
        assert_abs_diff_eq!(r.t, 0.8017837257, epsilon = 1e-4);
        assert_abs_diff_eq!(r.df, 4.0, epsilon = 1e-4);
        assert_abs_diff_eq!(r.p_value, 0.4676047546, epsilon = 1e-4);
        assert!(!r.significant);

        let r = t_test(&UNEVEN_A, &UNEVEN_B).unwrap();
        assert_abs_diff_eq!(r.t, -8.2203430719, epsilon = 1e-4);
        assert_abs_diff_eq!(r.df, 3.9299108179, epsilon = 1e-4);
        assert_abs_diff_eq!(r.p_value, 0.0012874963, epsilon = 1e-4);
        assert!(r.significant);
    }

    #[test]
    fn identical_samples_are_not_distinguishable() {
        let r = t_test(&WIDE_A, &WIDE_A).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(!r.significant);
    }

    #[test]
    fn swapping_sides_flips_t_and_keeps_p() {
        let ab = t_test(&WIDE_A, &WIDE_B).unwrap();
        let ba = t_test(&WIDE_B, &WIDE_A).unwrap();
        assert_abs_diff_eq!(ab.t, -ba.t, epsilon = 1e-12);
        assert_abs_diff_eq!(ab.p_value, ba.p_value, epsilon = 1e-12);
    }

    #[test]
    fn shifting_both_samples_changes_nothing() {
        let base = t_test(&UNEVEN_A, &UNEVEN_B).unwrap();
        let shift = |xs: &[f64]| xs.iter().map(|x| x + 0.173).collect::<Vec<_>>();
        let moved = t_test(&shift(&UNEVEN_A), &shift(&UNEVEN_B)).unwrap();
        assert_abs_diff_eq!(base.t, moved.t, epsilon = 1e-9);
        assert_abs_diff_eq!(base.p_value, moved.p_value, epsilon = 1e-9);
    }

    #[test]
    fn student_pools_variance_and_uses_integer_df() {
        // Equal sizes and equal variances: same t as Welch, df from the pool.
        let r = t_test_kind(&WIDE_A, &WIDE_B, TestKind::Student).unwrap();
        let w = t_test(&WIDE_A, &WIDE_B).unwrap();
        assert_abs_diff_eq!(r.t, w.t, epsilon = 1e-9);
        assert_eq!(r.df, 8.0);
    }

    #[test]
    fn degenerate_inputs_are_rejected_or_flagged() {
        assert!(t_test(&[0.5], &WIDE_B[..]).is_err());
        let r = t_test(&[0.3, 0.3], &[0.4, 0.4]).unwrap();
        assert!(r.t.is_infinite() && r.t < 0.0);
        assert_eq!(r.p_value, 0.0);
        let r = t_test(&[0.3, 0.3], &[0.3, 0.3]).unwrap();
        assert_eq!(r.p_value, 1.0);
    }
}
