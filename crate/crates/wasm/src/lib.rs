//! Browser bindings. Everything runs on the calling thread.

use mpd_core::bridge::GuidedBridge;
use mpd_core::harness::config::ExperimentConfig;
use mpd_core::harness::experiment::ou_bridge;
use mpd_core::harness::kde::{default_grid, kde, Bandwidth};
use mpd_core::harness::resolve_data;
use mpd_core::models::{OuAuxiliary, OuModel};
use mpd_core::mpd::run_mpd;
use mpd_core::rng::StreamFactory;
use mpd_core::sampler::{calibrate_envelope, sample_conditioned_noise, SamplerConfig, SamplerStats};
use mpd_core::sde::make_grid;
use mpd_core::{MpdError, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_PATHS: usize = 2000;
const MAX_REPLICATIONS: usize = 64;

/// Conditioned OU paths, row-major `n_paths × (substeps + 1)`, plus the acceptance rate.
pub fn ou_bridge_paths(
    theta: f64,
    theta_aux: Option<f64>,
    x_start: f64,
    x_end: f64,
    horizon: f64,
    substeps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    if n_paths == 0 || n_paths > MAX_PATHS {
        return Err(MpdError::Config(format!("n_paths must be in 1..={MAX_PATHS}")));
    }
    let m = OuModel::benchmark();
    let aux = theta_aux.map_or(OuAuxiliary::tied(&m), |r| OuAuxiliary::fixed(&m, r));
    let bridge = GuidedBridge::new(m, aux, &[theta], horizon)?;
    let grid = make_grid(0.0, horizon, substeps)?;
    let config = SamplerConfig::default();
    let streams = StreamFactory::new(seed);
    let mut env = calibrate_envelope(
        &bridge,
        &[theta],
        &[x_start],
        Some(&[x_end]),
        &grid,
        &config,
        &mut streams.stream(&[0]),
    )?;
    let mut stats = SamplerStats::default();
    let mut rng = streams.stream(&[1]);
    let mut out = Vec::with_capacity(n_paths * (substeps + 1));
    for _ in 0..n_paths {
        let d = sample_conditioned_noise(
            &bridge,
            &[theta],
            &[x_start],
            &[x_end],
            &grid,
            &config,
            &mut env,
            &mut stats,
            &mut rng,
        )?;
        out.extend(d.draw.path.iter().map(|x| x[0]));
    }
    Ok((out, stats.acceptance_rate()))
}

#[derive(Debug, Serialize)]
pub struct FitResult {
    pub times: Vec<f64>,
    pub data: Vec<f64>,
    pub phase1_end: usize,
    /// θ_k per completed replication.
    pub trajectories: Vec<Vec<f64>>,
    pub terminals: Vec<f64>,
    pub aborted: usize,
}

/// A few OU replications on freshly simulated data.
pub fn ou_fit(
    theta_true: f64,
    theta0: f64,
    n_obs: usize,
    replications: usize,
    phase2_steps: usize,
    seed: u64,
) -> Result<FitResult> {
    if replications == 0 || replications > MAX_REPLICATIONS {
        return Err(MpdError::Config(format!(
            "replications must be in 1..={MAX_REPLICATIONS}"
        )));
    }
    let mut c = ExperimentConfig::ou_benchmark();
    c.model.theta_true = vec![theta_true];
    c.model.theta0 = vec![theta0];
    c.data.n_obs = n_obs;
    c.data.seed = seed;
    c.phase2.steps = phase2_steps;
    c.replications = replications;
    c.seed = seed;
    c.validate()?;
    let series = resolve_data(&c)?;
    let bridge = ou_bridge(&c, c.data.gap)?;
    let settings = c.settings::<1>()?;
    let states = series.states_as::<1>()?;
    let root = StreamFactory::new(seed);
    let mut res = FitResult {
        data: states.iter().map(|x| x[0]).collect(),
        times: series.times.clone(),
        phase1_end: 0,
        trajectories: Vec::new(),
        terminals: Vec::new(),
        aborted: 0,
    };
    for rep in 0..replications {
        match run_mpd(&bridge, &settings, &series.times, &states, root.child(rep as u64)) {
            Ok(t) => {
                res.phase1_end = t.phase1_end;
                res.terminals.push(t.terminal()[0]);
                res.trajectories.push(t.iterates.iter().map(|it| it.theta[0]).collect());
            }
            Err(_) => res.aborted += 1,
        }
    }
    Ok(res)
}

/// Silverman-bandwidth Gaussian KDE: `[grid.., density..]`.
pub fn density(samples: &[f64], n_points: usize) -> Result<Vec<f64>> {
    let grid = default_grid(samples, n_points)?;
    let f = kde(samples, Bandwidth::Silverman, &grid)?;
    Ok(grid.into_iter().chain(f).collect())
}

fn js(e: MpdError) -> JsError {
    JsError::new(&e.to_string())
}

/// Flat path matrix with the acceptance rate appended.
#[wasm_bindgen(js_name = bridgePaths)]
#[allow(clippy::too_many_arguments)]
pub fn bridge_paths_js(
    theta: f64,
    theta_aux: Option<f64>,
    x_start: f64,
    x_end: f64,
    horizon: f64,
    substeps: usize,
    n_paths: usize,
    seed: u32,
) -> std::result::Result<Vec<f64>, JsError> {
    let (mut out, rate) = ou_bridge_paths(
        theta,
        theta_aux,
        x_start,
        x_end,
        horizon,
        substeps,
        n_paths,
        seed as u64,
    )
    .map_err(js)?;
    out.push(rate);
    Ok(out)
}

/// JSON-encoded [`FitResult`].
#[wasm_bindgen(js_name = fitOu)]
pub fn fit_ou_js(
    theta_true: f64,
    theta0: f64,
    n_obs: usize,
    replications: usize,
    phase2_steps: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    let r = ou_fit(theta_true, theta0, n_obs, replications, phase2_steps, seed as u64).map_err(js)?;
    serde_json::to_string(&r).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = kde)]
pub fn kde_js(samples: &[f64], n_points: usize) -> std::result::Result<Vec<f64>, JsError> {
    density(samples, n_points).map_err(js)
}
