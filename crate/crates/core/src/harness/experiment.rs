//! Replicated MPD runs over one shared data set.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::kde::{default_grid, kde, Bandwidth};
use super::series::{generate_data, ObservationSeries};
use super::stats::{mean, sd};
use crate::bridge::{AuxiliaryModel, GuidedBridge};
use crate::error::{MpdError, Result};
use crate::models::{ModelId, OuAuxiliary, OuModel, SlvAuxiliary, SlvModel};
use crate::mpd::run_mpd;
use crate::rng::StreamFactory;
use crate::sampler::SamplerStats;
use crate::sde::SdeModel;

/// Replications may abort up to this fraction before the run fails.
pub const ABORT_LIMIT: f64 = 0.2;
/// Iterates averaged for the tail summary.
pub const TAIL_WINDOW: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub replication: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub replication: usize,
    pub phase1: Vec<f64>,
    pub terminal: Vec<f64>,
    pub tail_mean: Vec<f64>,
    pub acceptance_rate: f64,
    pub violations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Moments {
    fn of(rows: &[Vec<f64>], p: usize) -> Self {
        let col = |j: usize| rows.iter().map(|r| r[j]).collect::<Vec<_>>();
        Moments {
            mean: (0..p)
                .map(|j| if rows.is_empty() { 0.0 } else { mean(&col(j)) })
                .collect(),
            sd: (0..p).map(|j| sd(&col(j))).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceSummary {
    pub totals: SamplerStats,
    pub rate: f64,
    pub min_replication_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub config: ExperimentConfig,
    pub param_names: Vec<String>,
    pub n_replications: usize,
    pub completed: usize,
    pub aborted: Vec<AbortRecord>,
    pub replications: Vec<ReplicationSummary>,
    pub terminal: Moments,
    pub phase1: Moments,
    pub tail: Moments,
    pub tail_window: usize,
    pub acceptance: AcceptanceSummary,
    pub envelope_violations: u64,
    /// Coordinates whose terminal KDE was skipped as degenerate.
    pub kde_skipped: Vec<String>,
}

impl EnsembleSummary {
    pub fn abort_fraction(&self) -> f64 {
        self.aborted.len() as f64 / self.n_replications as f64
    }

    pub fn terminals(&self, j: usize) -> Vec<f64> {
        self.replications.iter().map(|r| r.terminal[j]).collect()
    }

    pub fn phase1_terminals(&self, j: usize) -> Vec<f64> {
        self.replications.iter().map(|r| r.phase1[j]).collect()
    }
}

/// Kept out of the summary so that the summary is reproducible bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
    pub threads: usize,
}

/// One iterate row of the trajectory file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub replication: usize,
    pub k: usize,
    pub phase: u8,
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub summary: EnsembleSummary,
    pub timing: Timing,
    pub trajectories: Vec<TrajectoryRow>,
    pub series: ObservationSeries,
}

/// The configured series: loaded from `data.source` or synthesised.
pub fn resolve_data(config: &ExperimentConfig) -> Result<ObservationSeries> {
    if config.data.source == "generate" {
        generate_data(&config.generate_spec()?)
    } else {
        let s = ObservationSeries::load(Path::new(&config.data.source))?;
        if s.dim() != config.model_id()?.state_dim() {
            return Err(MpdError::Config(format!(
                "data has dimension {} but model {} needs {}",
                s.dim(),
                config.model.id,
                config.model_id()?.state_dim()
            )));
        }
        Ok(s)
    }
}

struct Runs {
    outcomes: Vec<std::result::Result<(Vec<TrajectoryRow>, ReplicationSummary, SamplerStats), AbortRecord>>,
    param_names: Vec<String>,
}

fn run_all<M, A, const D: usize, const P: usize>(
    bridge: &GuidedBridge<M, A, D, P>,
    config: &ExperimentConfig,
    series: &ObservationSeries,
) -> Result<Runs>
where
    M: SdeModel<D, P>,
    A: AuxiliaryModel<D, P>,
{
    let settings = config.settings::<P>()?;
    let states = series.states_as::<D>()?;
    let root = StreamFactory::new(config.seed);
    let outcomes = (0..config.replications)
        .into_par_iter()
        .map(|rep| {
            let streams = root.child(rep as u64);
            match run_mpd(bridge, &settings, &series.times, &states, streams) {
                Ok(traj) => {
                    let rows = traj
                        .iterates
                        .iter()
                        .map(|it| TrajectoryRow {
                            replication: rep,
                            k: it.k,
                            phase: it.phase.tag(),
                            theta: it.theta.to_vec(),
                        })
                        .collect();
                    let summary = ReplicationSummary {
                        replication: rep,
                        phase1: traj.phase1_terminal().to_vec(),
                        terminal: traj.terminal().to_vec(),
                        tail_mean: traj.tail_mean(TAIL_WINDOW).to_vec(),
                        acceptance_rate: traj.stats.acceptance_rate(),
                        violations: traj.stats.violations,
                    };
                    Ok((rows, summary, traj.stats))
                }
                Err(e) => {
                    warn!("replication {rep} aborted: {e}");
                    Err(AbortRecord {
                        replication: rep,
                        error: e.to_string(),
                    })
                }
            }
        })
        .collect();
    Ok(Runs {
        outcomes,
        param_names: bridge.model.param_names().iter().map(|s| s.to_string()).collect(),
    })
}

pub fn ou_bridge(config: &ExperimentConfig, gap: f64) -> Result<GuidedBridge<OuModel, OuAuxiliary, 1, 1>> {
    let theta0 = config.settings::<1>()?.theta0;
    GuidedBridge::new(config.ou_model()?, config.ou_aux()?, &theta0, gap).map_err(|e| MpdError::Config(e.to_string()))
}

pub fn slv_bridge(config: &ExperimentConfig, gap: f64) -> Result<GuidedBridge<SlvModel, SlvAuxiliary, 2, 4>> {
    let model = config.slv_model()?;
    let theta0 = config.settings::<4>()?.theta0;
    GuidedBridge::new(model, SlvAuxiliary::new(&model), &theta0, gap).map_err(|e| MpdError::Config(e.to_string()))
}

fn build_and_run(config: &ExperimentConfig, series: &ObservationSeries) -> Result<Runs> {
    let gap = series.times.get(1).map_or(config.data.gap, |t1| t1 - series.times[0]);
    match config.model_id()? {
        ModelId::Ou => run_all(&ou_bridge(config, gap)?, config, series),
        ModelId::Slv => run_all(&slv_bridge(config, gap)?, config, series),
    }
}

/// Runs every replication; fails only when more than [`ABORT_LIMIT`] abort.
/// Artifacts are not written here; see [`write_artifacts`].
pub fn run_experiment(config: &ExperimentConfig, series: &ObservationSeries) -> Result<ExperimentOutcome> {
    config.validate()?;
    series.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| MpdError::Config(format!("thread pool: {e}")))?;
    let threads = pool.current_num_threads();
    let runs = pool.install(|| build_and_run(config, series))?;
    let wall = start.elapsed().as_secs_f64();

    let p = runs.param_names.len();
    let mut aborted = Vec::new();
    let mut reps = Vec::new();
    let mut rows = Vec::new();
    let mut totals = SamplerStats::default();
    for outcome in runs.outcomes {
        match outcome {
            Ok((r, s, stats)) => {
                rows.extend(r);
                reps.push(s);
                totals.merge(&stats);
            }
            Err(a) => aborted.push(a),
        }
    }
    let terminals: Vec<Vec<f64>> = reps.iter().map(|r| r.terminal.clone()).collect();
    let phase1: Vec<Vec<f64>> = reps.iter().map(|r| r.phase1.clone()).collect();
    let tails: Vec<Vec<f64>> = reps.iter().map(|r| r.tail_mean.clone()).collect();
    let names: Vec<String> = (1..=p).map(|j| format!("theta_{j}")).collect();
    let kde_skipped = names
        .iter()
        .enumerate()
        .filter(|(j, _)| reps.len() < 2 || sd(&terminals.iter().map(|t| t[*j]).collect::<Vec<_>>()) == 0.0)
        .map(|(_, n)| n.clone())
        .collect();
    let summary = EnsembleSummary {
        config: config.clone(),
        param_names: runs.param_names,
        n_replications: config.replications,
        completed: reps.len(),
        aborted,
        terminal: Moments::of(&terminals, p),
        phase1: Moments::of(&phase1, p),
        tail: Moments::of(&tails, p),
        tail_window: TAIL_WINDOW,
        acceptance: AcceptanceSummary {
            rate: totals.acceptance_rate(),
            min_replication_rate: reps.iter().map(|r| r.acceptance_rate).fold(1.0, f64::min),
            totals,
        },
        envelope_violations: totals.violations,
        replications: reps,
        kde_skipped,
    };
    info!(
        "{} of {} replications completed in {wall:.1}s; terminal mean {:?}",
        summary.completed, summary.n_replications, summary.terminal.mean
    );
    Ok(ExperimentOutcome {
        summary,
        timing: Timing {
            wall_clock_seconds: wall,
            threads,
        },
        trajectories: rows,
        series: series.clone(),
    })
}

pub fn check_aborts(summary: &EnsembleSummary) -> Result<()> {
    if summary.abort_fraction() > ABORT_LIMIT {
        return Err(MpdError::TooManyAborts {
            aborted: summary.aborted.len(),
            total: summary.n_replications,
        });
    }
    Ok(())
}

fn theta_header(first: &[&str], p: usize) -> Vec<String> {
    first
        .iter()
        .map(|s| s.to_string())
        .chain((1..=p).map(|j| format!("theta_{j}")))
        .collect()
}

pub fn trajectories_to_csv(rows: &[TrajectoryRow], p: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| MpdError::Invariant(e.to_string());
    w.write_record(theta_header(&["replication", "k", "phase"], p))
        .map_err(io)?;
    for r in rows {
        let mut rec = vec![r.replication.to_string(), r.k.to_string(), r.phase.to_string()];
        rec.extend(r.theta.iter().map(f64::to_string));
        w.write_record(&rec).map_err(io)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| MpdError::Invariant(e.to_string()))?).expect("utf-8"))
}

pub fn trajectories_from_csv(text: &str) -> Result<Vec<TrajectoryRow>> {
    let rows = read_numeric_table(text, &["replication", "k", "phase"])?;
    Ok(rows
        .into_iter()
        .map(|(lead, theta)| TrajectoryRow {
            replication: lead[0] as usize,
            k: lead[1] as usize,
            phase: lead[2] as u8,
            theta,
        })
        .collect())
}

/// Terminal values, one row per completed replication.
pub fn terminals_to_csv(reps: &[ReplicationSummary], p: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| MpdError::Invariant(e.to_string());
    w.write_record(theta_header(&["replication"], p)).map_err(io)?;
    for r in reps {
        let mut rec = vec![r.replication.to_string()];
        rec.extend(r.terminal.iter().map(f64::to_string));
        w.write_record(&rec).map_err(io)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| MpdError::Invariant(e.to_string()))?).expect("utf-8"))
}

/// `(replication, θ)` pairs from a terminals file.
pub fn terminals_from_csv(text: &str) -> Result<Vec<(usize, Vec<f64>)>> {
    Ok(read_numeric_table(text, &["replication"])?
        .into_iter()
        .map(|(lead, theta)| (lead[0] as usize, theta))
        .collect())
}

/// Reads a table whose header is `lead.., theta_1..theta_p`.
fn read_numeric_table(text: &str, lead: &[&str]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| MpdError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut lead_cols = Vec::new();
    for name in lead {
        lead_cols.push(headers.iter().position(|h| h == *name).ok_or(MpdError::Schema {
            column: name.to_string(),
        })?);
    }
    let p = headers.iter().filter(|h| h.starts_with("theta_")).count();
    if p == 0 {
        return Err(MpdError::Schema {
            column: "theta_1".into(),
        });
    }
    let mut theta_cols = Vec::new();
    for j in 1..=p {
        let name = format!("theta_{j}");
        theta_cols.push(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or(MpdError::Schema { column: name })?,
        );
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| MpdError::Parse {
            line,
            message: e.to_string(),
        })?;
        let num = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("");
            raw.parse().map_err(|e| MpdError::Parse {
                line,
                message: format!("`{raw}`: {e}"),
            })
        };
        out.push((
            lead_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?,
            theta_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?,
        ));
    }
    Ok(out)
}

/// Density curves for one coordinate, on a shared grid.
pub fn kde_table(columns: &[(&str, Vec<f64>)], n_points: usize) -> Result<String> {
    let all: Vec<f64> = columns.iter().flat_map(|(_, v)| v.iter().cloned()).collect();
    let grid = default_grid(&all, n_points)?;
    let mut curves = Vec::new();
    for (_, v) in columns {
        curves.push(kde(v, Bandwidth::Silverman, &grid)?);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| MpdError::Invariant(e.to_string());
    let mut header = vec!["x".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header).map_err(io)?;
    for (i, x) in grid.iter().enumerate() {
        let mut rec = vec![x.to_string()];
        rec.extend(curves.iter().map(|c| c[i].to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| MpdError::Invariant(e.to_string()))?).expect("utf-8"))
}

/// Writes `data.csv`, `trajectories.csv`, `terminals.csv`, `summary.json`,
/// `timing.json` and one `kde_theta_j.csv` per coordinate into `dir`.
pub fn write_artifacts(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let s = &outcome.summary;
    let p = s.param_names.len();
    outcome.series.save(&dir.join("data.csv"))?;
    fs::write(
        dir.join("trajectories.csv"),
        trajectories_to_csv(&outcome.trajectories, p)?,
    )?;
    fs::write(dir.join("terminals.csv"), terminals_to_csv(&s.replications, p)?)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(s)?)?;
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&outcome.timing)?)?;
    for j in 0..p {
        let name = format!("theta_{}", j + 1);
        if s.kde_skipped.contains(&name) {
            continue;
        }
        let cols = [("phase1", s.phase1_terminals(j)), ("terminal", s.terminals(j))];
        match kde_table(&cols, s.config.output.kde_points) {
            Ok(table) => fs::write(dir.join(format!("kde_{name}.csv")), table)?,
            Err(MpdError::DegenerateSample) => warn!("{name}: phase-1 terminals are degenerate, KDE skipped"),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}
