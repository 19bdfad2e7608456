//! Gaussian kernel density estimates of replication terminals.

use serde::{Deserialize, Serialize};

use super::stats::{quantile, sd};
use crate::error::{MpdError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// `0.9 · min(sd, IQR/1.34) · n^{-1/5}`.
    #[default]
    Silverman,
    Fixed(f64),
}

pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(MpdError::Precondition("KDE needs at least two samples".into()));
    }
    let s = sd(samples);
    if s == 0.0 {
        return Err(MpdError::DegenerateSample);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { s.min(iqr / 1.34) } else { s };
    Ok(0.9 * spread * (samples.len() as f64).powf(-0.2))
}

pub fn kde(samples: &[f64], bandwidth: Bandwidth, grid: &[f64]) -> Result<Vec<f64>> {
    let h = match bandwidth {
        Bandwidth::Silverman => silverman_bandwidth(samples)?,
        Bandwidth::Fixed(h) if h > 0.0 => {
            if samples.len() < 2 {
                return Err(MpdError::Precondition("KDE needs at least two samples".into()));
            }
            h
        }
        Bandwidth::Fixed(h) => return Err(MpdError::Precondition(format!("bandwidth {h} must be positive"))),
    };
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .iter()
        .map(|&g| {
            samples
                .iter()
                .map(|&s| {
                    let z = (g - s) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect())
}

/// Evenly spaced grid covering the samples with `pad` bandwidths either side.
pub fn default_grid(samples: &[f64], n_points: usize) -> Result<Vec<f64>> {
    let h = silverman_bandwidth(samples)?;
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min) - 4.0 * h;
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 4.0 * h;
    let n = n_points.max(2);
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}
