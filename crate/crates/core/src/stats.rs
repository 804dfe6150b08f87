//! Goodness-of-fit helpers used by the statistical self-checks.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// One-sample Kolmogorov–Smirnov test against the standard normal.
///
/// Returns `(D, p)` with the asymptotic Kolmogorov p-value.
pub fn ks_standard_normal(samples: &[f64]) -> (f64, f64) {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    ks_test(samples, |x| normal.cdf(x))
}

/// One-sample Kolmogorov–Smirnov test against an arbitrary CDF.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut xs: Vec<f64> = samples.iter().copied().filter(|x| x.is_finite()).collect();
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    xs.sort_by(f64::total_cmp);
    let nf = n as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / nf).max((i + 1) as f64 / nf - f)
        })
        .fold(0.0, f64::max);
    let sqrt_n = nf.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    (d, kolmogorov_sf(lambda))
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = sign * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Upper tail probability of a chi-square statistic.
pub fn chi2_sf(chi2: f64, dof: usize) -> f64 {
    let dist = ChiSquared::new(dof as f64).expect("positive dof");
    1.0 - dist.cdf(chi2)
}

/// Pearson chi-square of observed counts against expected counts.
///
/// Bins with expectation below `min_expected` are pooled into their neighbour.
/// Returns `(chi2, dof)` with `dof = pooled_bins − 1`.
pub fn pearson_chi2(observed: &[u64], expected: &[f64], min_expected: f64) -> (f64, usize) {
    assert_eq!(observed.len(), expected.len());
    let mut chi2 = 0.0;
    let mut bins = 0usize;
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        o_acc += o as f64;
        e_acc += e;
        if e_acc >= min_expected {
            chi2 += (o_acc - e_acc).powi(2) / e_acc;
            bins += 1;
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 {
        chi2 += (o_acc - e_acc).powi(2) / e_acc;
        bins += 1;
    }
    (chi2, bins.saturating_sub(1))
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    #[test]
    fn ks_accepts_normal_and_rejects_uniform() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(ks_standard_normal(&xs).1 > 0.01);
        let u = Uniform::new(-2.0, 2.0).unwrap();
        let ys: Vec<f64> = (0..5000).map(|_| u.sample(&mut rng)).collect();
        assert!(ks_standard_normal(&ys).1 < 1e-6);
    }

    #[test]
    fn kolmogorov_tail_reference_values() {
        // Q(1.36) ≈ 0.049, Q(1.63) ≈ 0.0098
        assert!((kolmogorov_sf(1.36) - 0.0494).abs() < 1e-3);
        assert!((kolmogorov_sf(1.628) - 0.0100).abs() < 5e-4);
    }

    #[test]
    fn chi2_tail() {
        assert!((chi2_sf(3.841, 1) - 0.05).abs() < 1e-3);
    }
}
