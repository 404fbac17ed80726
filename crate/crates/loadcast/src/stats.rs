//! Small numeric helpers shared across modules: standard-normal functions,
//! tail probabilities, and quartile summaries.

use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, Normal};
use statrs::function::erf::erfc;

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal upper tail P(Z > x), computed via erfc for accuracy in the tails.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Standard normal hazard rate phi(x) / (1 - Phi(x)).
pub fn norm_hazard(x: f64) -> f64 {
    norm_pdf(x) / norm_sf(x)
}

/// Two-sided central interval quantile: z such that P(-z <= Z <= z) = level.
pub fn norm_interval_z(level: f64) -> f64 {
    let n = Normal::standard();
    n.inverse_cdf(0.5 + level / 2.0)
}

/// Upper tail probability of a chi-square distribution.
pub fn chi2_sf(stat: f64, df: f64) -> f64 {
    if stat <= 0.0 {
        return 1.0;
    }
    let d = ChiSquared::new(df).expect("df > 0");
    1.0 - d.cdf(stat)
}

/// Upper tail probability of an F distribution.
pub fn f_sf(stat: f64, df1: f64, df2: f64) -> f64 {
    if stat <= 0.0 {
        return 1.0;
    }
    let d = FisherSnedecor::new(df1, df2).expect("df > 0");
    1.0 - d.cdf(stat)
}

/// Quartile summary of a sample: (q1, median, mean, q3).
///
/// Quartiles use the linear-interpolation convention (R type 7). Returns
/// `None` for an empty sample. NaNs are excluded before summarizing.
pub fn quartiles(values: &[f64]) -> Option<QuartileSummary> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| -> f64 {
        let h = p * (v.len() as f64 - 1.0);
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    Some(QuartileSummary {
        q1: q(0.25),
        median: q(0.5),
        mean,
        q3: q(0.75),
        n: v.len(),
    })
}

/// Five-number-ish summary used in evaluation reports.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuartileSummary {
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub n: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normal_tail_matches_symmetry() {
        assert_abs_diff_eq!(norm_sf(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(norm_sf(1.0) + norm_sf(-1.0), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn interval_z_hits_reference_points() {
        assert_abs_diff_eq!(norm_interval_z(0.95), 1.959963985, epsilon = 1e-8);
        assert_abs_diff_eq!(norm_interval_z(0.90), 1.644853627, epsilon = 1e-8);
    }

    #[test]
    fn hazard_is_positive_and_increasing_far_right() {
        // h(x) ~ x for large x; spot-check monotonicity on a grid.
        let mut prev = norm_hazard(-3.0);
        for i in -29..=30 {
            let h = norm_hazard(i as f64 / 10.0);
            assert!(h > prev);
            prev = h;
        }
    }

    #[test]
    fn quartiles_linear_interpolation() {
        let s = quartiles(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(s.q1, 1.75, epsilon = 1e-12);
        assert_abs_diff_eq!(s.median, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.q3, 3.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s.mean, 2.5, epsilon = 1e-12);
        assert!(quartiles(&[]).is_none());
    }
}
