//! Small summary statistics used by the diagnostics.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{MpdError, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn variance(xs: &[f64]) -> f64 {
    sd(xs).powi(2)
}

/// `mean / (sd / √n)`.
pub fn z_statistic(xs: &[f64]) -> f64 {
    let se = sd(xs) / (xs.len() as f64).sqrt();
    mean(xs) / se
}

pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// One-sample Kolmogorov–Smirnov statistic `D` and its asymptotic p-value.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(MpdError::Precondition("K–S test needs at least two samples".into()));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    Ok((d, kolmogorov_p(d, n)))
}

/// Survival function of the Kolmogorov distribution with the usual
/// finite-sample correction of the argument.
pub fn kolmogorov_p(d: f64, n: f64) -> f64 {
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

pub fn normal_cdf(mean: f64, sd: f64) -> impl Fn(f64) -> f64 {
    let n = Normal::new(mean, sd).expect("positive sd");
    move |x| n.cdf(x)
}

/// Least-squares slope of `y` on `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((sd(&xs) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(sd(&[7.0]), 0.0);
        assert_eq!(quantile(&xs, 0.5), 2.5);
    }

    #[test]
    fn ks_accepts_the_truth_and_rejects_a_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (_, p) = ks_test(&xs, normal_cdf(0.0, 1.0)).unwrap();
        assert!(p > 0.01);
        let (_, p) = ks_test(&xs, normal_cdf(0.1, 1.0)).unwrap();
        assert!(p < 1e-4);
    }

    #[test]
    fn kolmogorov_reference_values() {
        // Q(λ) at λ = 1.36 is the classic 5% point.
        let p = kolmogorov_p(1.36 / 1e4f64.sqrt(), 1e4);
        assert!((p - 0.05).abs() < 2e-3, "{p}");
    }

    #[test]
    fn slope_of_a_line() {
        assert!((slope(&[1.0, 2.0, 3.0], &[2.0, 4.5, 7.0]) - 2.5).abs() < 1e-15);
    }
}
