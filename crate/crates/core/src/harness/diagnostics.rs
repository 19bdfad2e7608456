//! Statistical checks: martingale null, discretisation rate, variance contrast.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::{ou_bridge, slv_bridge};
use super::series::{generate_data, ObservationSeries};
use super::stats::{mean, sd, slope};
use crate::bridge::{naive_score_estimator, AuxiliaryModel, GuidedBridge};
use crate::error::{MpdError, Result};
use crate::models::ModelId;
use crate::mpd::{purpose, run_mpd, score_increment, MpdSettings, Stepper};
use crate::rng::StreamFactory;
use crate::sampler::{SamplerConfig, SamplerStats};
use crate::sde::{make_grid, BridgeGrid, SdeModel};

/// Draws per worker task. Fixed so results do not depend on the thread count.
const CHUNK: usize = 250;
pub const MIN_MARTINGALE_DRAWS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub n_draws: usize,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub z: Vec<f64>,
    pub stats: SamplerStats,
}

impl MartingaleReport {
    pub fn max_abs_z(&self) -> f64 {
        self.z.iter().fold(0.0, |m, z| m.max(z.abs()))
    }
}

/// Faults injected to check that the diagnostic has power.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// The next-state sampler runs one sub-step past the interval end.
    NextStateOffByOne,
}

fn chunks(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(CHUNK))
        .map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(n)))
        .collect()
}

/// Monte Carlo mean of phase-2 score increments at fixed `θ` and `x`.
#[allow(clippy::too_many_arguments)]
pub fn martingale_test<M, A, const D: usize, const P: usize>(
    bridge: &GuidedBridge<M, A, D, P>,
    theta: &[f64; P],
    x: &[f64; D],
    grid: &BridgeGrid,
    n_draws: usize,
    sampler: SamplerConfig,
    streams: StreamFactory,
    mutation: Option<Mutation>,
) -> Result<MartingaleReport>
where
    M: SdeModel<D, P>,
    A: AuxiliaryModel<D, P>,
{
    if n_draws < MIN_MARTINGALE_DRAWS {
        return Err(MpdError::Precondition(format!(
            "martingale test needs at least {MIN_MARTINGALE_DRAWS} draws, got {n_draws}"
        )));
    }
    let next_grid = match mutation {
        None => *grid,
        Some(Mutation::NextStateOffByOne) => {
            BridgeGrid::new(grid.t_start, grid.t_end + grid.delta(), grid.n_substeps + 1)?
        }
    };
    let parts: Vec<(Vec<[f64; P]>, SamplerStats)> = chunks(n_draws)
        .into_par_iter()
        .map(|(lo, hi)| -> Result<_> {
            let mut stepper = Stepper::new(bridge, sampler, streams);
            let mut out = Vec::with_capacity(hi - lo);
            for i in lo..hi {
                let k = i as u64;
                let x_next = stepper.next_state(k, u64::MAX, theta, x, &next_grid)?;
                let w = stepper.conditioned(k, k + 1, theta, x, &x_next, grid)?;
                let v = stepper.joint(k, purpose::JOINT, 0, theta, x, grid)?;
                out.push(score_increment(&w, &v));
            }
            Ok((out, stepper.stats))
        })
        .collect::<Result<_>>()?;
    let mut stats = SamplerStats::default();
    let mut draws = Vec::with_capacity(n_draws);
    for (d, s) in parts {
        draws.extend(d);
        stats.merge(&s);
    }
    let n = draws.len() as f64;
    let col = |p: usize| draws.iter().map(|d| d[p]).collect::<Vec<_>>();
    let mean: Vec<f64> = (0..P).map(|p| mean(&col(p))).collect();
    let se: Vec<f64> = (0..P).map(|p| sd(&col(p)) / n.sqrt()).collect();
    let z = mean
        .iter()
        .zip(&se)
        .map(|(m, s)| if *s > 0.0 { m / s } else { 0.0 })
        .collect();
    Ok(MartingaleReport {
        n_draws,
        mean,
        se,
        z,
        stats,
    })
}

/// Runs the martingale test at `θ` (default `theta_true`) and `x` (default
/// `x0`) over one interval of length `data.gap`.
pub fn diagnose_martingale(
    config: &ExperimentConfig,
    theta: Option<&[f64]>,
    x: Option<&[f64]>,
    n_draws: usize,
) -> Result<MartingaleReport> {
    diagnose_martingale_with(config, theta, x, n_draws, None)
}

#[doc(hidden)]
pub fn diagnose_martingale_with(
    config: &ExperimentConfig,
    theta: Option<&[f64]>,
    x: Option<&[f64]>,
    n_draws: usize,
    mutation: Option<Mutation>,
) -> Result<MartingaleReport> {
    config.validate()?;
    let theta = theta.unwrap_or(&config.model.theta_true);
    let x = x.unwrap_or(&config.model.x0);
    let grid = make_grid(0.0, config.data.gap, config.grid.substeps)?;
    let streams = StreamFactory::new(config.seed);
    match config.model_id()? {
        ModelId::Ou => martingale_test(
            &ou_bridge(config, config.data.gap)?,
            &fixed(theta)?,
            &fixed(x)?,
            &grid,
            n_draws,
            config.sampler,
            streams,
            mutation,
        ),
        ModelId::Slv => martingale_test(
            &slv_bridge(config, config.data.gap)?,
            &fixed(theta)?,
            &fixed(x)?,
            &grid,
            n_draws,
            config.sampler,
            streams,
            mutation,
        ),
    }
}

fn fixed<const N: usize>(v: &[f64]) -> Result<[f64; N]> {
    v.try_into()
        .map_err(|_| MpdError::Config(format!("expected {N} values, got {}", v.len())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub level: u32,
    pub n_substeps: usize,
    /// Mean over replications of `‖θ^l − θ^{ref}‖²` at the final iterate.
    pub mean_sq_gap: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub reference: u32,
    pub rows: Vec<RateRow>,
    /// Slope of `log₂ gap` on `log₂ Δ_l`.
    pub slope: f64,
    pub monotone: bool,
    pub replications: usize,
    pub aborted: usize,
}

/// Coupled runs of the whole recursion at each level against `reference`.
/// Every level sums the reference level's Wiener increments, so only the
/// grid differs between the runs of one replication.
#[allow(clippy::too_many_arguments)]
pub fn rate_study<M, A, const D: usize, const P: usize>(
    bridge: &GuidedBridge<M, A, D, P>,
    settings: &MpdSettings<P>,
    times: &[f64],
    states: &[[f64; D]],
    levels: &[u32],
    reference: u32,
    replications: usize,
    streams: StreamFactory,
) -> Result<RateReport>
where
    M: SdeModel<D, P>,
    A: AuxiliaryModel<D, P>,
{
    if levels.is_empty() || levels.iter().any(|&l| l > reference) {
        return Err(MpdError::Precondition(format!(
            "levels must be non-empty and at most the reference {reference}"
        )));
    }
    if replications == 0 {
        return Err(MpdError::Precondition(
            "rate study needs at least one replication".into(),
        ));
    }
    let at_level = |level: u32| MpdSettings {
        substeps: 1 << level,
        sampler: SamplerConfig {
            fine_factor: settings.sampler.fine_factor << (reference - level),
            ..settings.sampler
        },
        ..*settings
    };
    let per_rep: Vec<Option<Vec<f64>>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let s = streams.child(rep as u64);
            let reference_run = run_mpd(bridge, &at_level(reference), times, states, s).ok()?;
            let target = reference_run.terminal();
            let mut gaps = Vec::with_capacity(levels.len());
            for &l in levels {
                let t = run_mpd(bridge, &at_level(l), times, states, s).ok()?.terminal();
                gaps.push((0..P).map(|p| (t[p] - target[p]).powi(2)).sum());
            }
            Some(gaps)
        })
        .collect();
    let done: Vec<&Vec<f64>> = per_rep.iter().flatten().collect();
    if done.is_empty() {
        return Err(MpdError::TooManyAborts {
            aborted: replications,
            total: replications,
        });
    }
    let rows: Vec<RateRow> = levels
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            let g: Vec<f64> = done.iter().map(|d| d[i]).collect();
            RateRow {
                level,
                n_substeps: 1 << level,
                mean_sq_gap: mean(&g),
                se: sd(&g) / (g.len() as f64).sqrt(),
            }
        })
        .collect();
    let gap = times[1] - times[0];
    let (lx, ly): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.mean_sq_gap > 0.0)
        .map(|r| ((gap / r.n_substeps as f64).log2(), r.mean_sq_gap.log2()))
        .unzip();
    let slope = if lx.len() >= 2 { slope(&lx, &ly) } else { f64::NAN };
    let monotone = rows.windows(2).all(|w| w[1].mean_sq_gap <= w[0].mean_sq_gap);
    Ok(RateReport {
        reference,
        rows,
        slope,
        monotone,
        replications,
        aborted: replications - done.len(),
    })
}

/// Data for the rate and variance studies: the configured model simulated
/// at spacing `diagnostics.rate_gap`.
pub fn study_data(config: &ExperimentConfig, n_obs: usize) -> Result<ObservationSeries> {
    let mut spec = config.generate_spec()?;
    spec.gap = config.diagnostics.rate_gap;
    spec.n_obs = n_obs;
    generate_data(&spec)
}

pub fn diagnose_rate(config: &ExperimentConfig) -> Result<RateReport> {
    config.validate()?;
    let d = &config.diagnostics;
    let series = study_data(config, d.rate_n_obs)?;
    let mut settings_cfg = config.clone();
    settings_cfg.phase2.steps = d.rate_phase2_steps;
    let streams = StreamFactory::new(config.seed);
    match config.model_id()? {
        ModelId::Ou => rate_study(
            &ou_bridge(config, d.rate_gap)?,
            &settings_cfg.settings()?,
            &series.times,
            &series.states_as()?,
            &d.rate_levels,
            d.rate_reference,
            d.rate_replications,
            streams,
        ),
        ModelId::Slv => rate_study(
            &slv_bridge(config, d.rate_gap)?,
            &settings_cfg.settings()?,
            &series.times,
            &series.states_as()?,
            &d.rate_levels,
            d.rate_reference,
            d.rate_replications,
            streams,
        ),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub level: u32,
    pub n_substeps: usize,
    /// Per-draw variance of the naive estimator (delta method times the
    /// sample count); `None` when its weights degenerate.
    pub naive_variance: Option<Vec<f64>>,
    pub naive_ess: Option<f64>,
    pub naive_error: Option<String>,
    /// Per-draw variance of the bridge score under the conditioned sampler.
    pub bridge_variance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub n_samples: usize,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub rows: Vec<VarianceRow>,
}

impl VarianceReport {
    /// Naive column non-decreasing in every coordinate, degenerate levels
    /// counting as infinite.
    pub fn naive_non_decreasing(&self) -> bool {
        let col = |r: &VarianceRow, p: usize| r.naive_variance.as_ref().map_or(f64::INFINITY, |v| v[p]);
        let p = self.rows.first().map_or(0, |r| r.bridge_variance.len());
        self.rows
            .windows(2)
            .all(|w| (0..p).all(|j| col(&w[1], j) >= col(&w[0], j)))
    }

    /// Largest ratio, either way, of a bridge entry to the first level's.
    pub fn bridge_max_ratio(&self) -> f64 {
        let Some(first) = self.rows.first() else { return 1.0 };
        self.rows
            .iter()
            .flat_map(|r| {
                r.bridge_variance
                    .iter()
                    .zip(&first.bridge_variance)
                    .map(|(v, f)| (v / f).max(f / v))
            })
            .fold(1.0, f64::max)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn variance_study<M, A, const D: usize, const P: usize>(
    bridge: &GuidedBridge<M, A, D, P>,
    theta: &[f64; P],
    x: &[f64; D],
    x_end: &[f64; D],
    gap: f64,
    levels: &[u32],
    n_samples: usize,
    sampler: SamplerConfig,
    streams: StreamFactory,
) -> Result<VarianceReport>
where
    M: SdeModel<D, P>,
    A: AuxiliaryModel<D, P>,
{
    if n_samples < 2 {
        return Err(MpdError::Precondition(
            "variance study needs at least two samples".into(),
        ));
    }
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let grid = make_grid(0.0, gap, 1 << level)?;
        let level_streams = streams.child(level as u64);
        let mut rng = level_streams.stream(&[u64::MAX]);
        let (naive_variance, naive_ess, naive_error) =
            match naive_score_estimator(&bridge.model, theta, x, x_end, &grid, n_samples, &mut rng) {
                Ok(s) => (
                    Some(s.variance.iter().map(|v| v * n_samples as f64).collect()),
                    Some(s.ess),
                    None,
                ),
                Err(e @ MpdError::DegenerateWeights { .. }) => (None, None, Some(e.to_string())),
                Err(e) => return Err(e),
            };
        let scores: Vec<[f64; P]> = chunks(n_samples)
            .into_par_iter()
            .map(|(lo, hi)| -> Result<Vec<[f64; P]>> {
                let mut stepper = Stepper::new(bridge, sampler, level_streams);
                (lo..hi)
                    .map(|i| Ok(stepper.conditioned(i as u64, 0, theta, x, x_end, &grid)?.weight.score))
                    .collect()
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let bridge_variance = (0..P)
            .map(|p| sd(&scores.iter().map(|s| s[p]).collect::<Vec<_>>()).powi(2))
            .collect();
        rows.push(VarianceRow {
            level,
            n_substeps: 1 << level,
            naive_variance,
            naive_ess,
            naive_error,
            bridge_variance,
        });
    }
    Ok(VarianceReport {
        n_samples,
        start: x.to_vec(),
        end: x_end.to_vec(),
        rows,
    })
}

/// Variance contrast at `theta_true` on the first interval of the study data.
pub fn diagnose_variance(config: &ExperimentConfig) -> Result<VarianceReport> {
    config.validate()?;
    let d = &config.diagnostics;
    let series = study_data(config, 1)?;
    let streams = StreamFactory::new(config.seed);
    let theta = &config.model.theta_true;
    match config.model_id()? {
        ModelId::Ou => {
            let s = series.states_as::<1>()?;
            variance_study(
                &ou_bridge(config, d.rate_gap)?,
                &fixed(theta)?,
                &s[0],
                &s[1],
                d.rate_gap,
                &d.variance_levels,
                d.variance_samples,
                config.sampler,
                streams,
            )
        }
        ModelId::Slv => {
            let s = series.states_as::<2>()?;
            variance_study(
                &slv_bridge(config, d.rate_gap)?,
                &fixed(theta)?,
                &s[0],
                &s[1],
                d.rate_gap,
                &d.variance_levels,
                d.variance_samples,
                config.sampler,
                streams,
            )
        }
    }
}
