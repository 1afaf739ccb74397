//! Two-sample Kolmogorov-Smirnov test, used to compare weight distributions.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    /// Largest gap between the two empirical CDFs.
    pub statistic: f64,
    /// Asymptotic p-value.
    pub p_value: f64,
}

/// Two-sample KS test. The p-value uses the Kolmogorov limit distribution with
/// the Stephens small-sample correction.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::config("KS test needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::numeric("ks_two_sample", "non-finite sample"));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let p_value = kolmogorov_q((en + 0.12 + 0.11 / en) * d);
    Ok(KsResult { statistic: d, p_value })
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let a2 = -2.0 * lambda * lambda;
    let (mut sum, mut sign, mut prev) = (0.0, 2.0, 0.0f64);
    for k in 1..=100 {
        let k = k as f64;
        let term = sign * (a2 * k * k).exp();
        sum += term;
        if term.abs() <= 1e-3 * prev || term.abs() <= 1e-12 * sum.abs() {
            return sum.clamp(0.0, 1.0);
        }
        sign = -sign;
        prev = term.abs();
    }
    1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn kolmogorov_known_values() {
        // Tabulated critical values: Q(1.358) = 0.05, Q(1.628) = 0.01.
        assert!((kolmogorov_q(1.3581) - 0.05).abs() < 5e-4);
        assert!((kolmogorov_q(1.6276) - 0.01).abs() < 2e-4);
        assert_eq!(kolmogorov_q(0.0), 1.0);
    }

    #[test]
    fn statistic_by_hand() {
        // CDF gaps: after 1 -> 1/3 vs 0, after 2 -> 2/3 vs 0, after 3 -> 2/3 vs 1/2 ...
        let r = ks_two_sample(&[1.0, 2.0, 5.0], &[3.0, 4.0]).unwrap();
        assert!((r.statistic - 2.0 / 3.0).abs() < 1e-12);
        let same = ks_two_sample(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(same.statistic, 0.0);
        assert_eq!(same.p_value, 1.0);
    }

    #[test]
    fn same_distribution_usually_not_rejected_shifted_is() {
        let mut rng = SplitMix64::new(3);
        let a: Vec<f64> = (0..2000).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..2000).map(|_| rng.normal()).collect();
        assert!(ks_two_sample(&a, &b).unwrap().p_value > 0.01);
        let c: Vec<f64> = b.iter().map(|v| v + 0.3).collect();
        assert!(ks_two_sample(&a, &c).unwrap().p_value < 1e-6);
    }
}
