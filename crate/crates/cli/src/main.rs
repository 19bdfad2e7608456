use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use mpd_core::harness::config::ExperimentConfig;
use mpd_core::harness::diagnostics::{diagnose_martingale, diagnose_rate, diagnose_variance, MIN_MARTINGALE_DRAWS};
use mpd_core::harness::experiment::{
    check_aborts, kde_table, resolve_data, run_experiment, terminals_from_csv, write_artifacts,
};
use mpd_core::MpdError;
use serde::Serialize;

/// Martingale posterior estimation for discretely observed diffusions.
#[derive(Parser, Debug)]
#[command(name = "mpd", version)]
struct Cli {
    /// TOML config; omitted keys fall back to the model's preset.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Flags override the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// `ou` or `slv`.
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    replications: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    substeps: Option<usize>,
    #[arg(long, global = true)]
    phase2_steps: Option<usize>,
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long, global = true)]
    offset: Option<f64>,
    /// Comma-separated starting parameters.
    #[arg(long, global = true)]
    theta0: Option<String>,
    #[arg(long, global = true)]
    theta_true: Option<String>,
    /// A number, or `tied` to track θ.
    #[arg(long, global = true)]
    theta_aux: Option<String>,
    #[arg(long, global = true)]
    safety_log: Option<f64>,
    #[arg(long, global = true)]
    max_proposals: Option<u64>,
    /// `generate` or a series CSV.
    #[arg(long, global = true)]
    data: Option<String>,
    #[arg(long, global = true)]
    n_obs: Option<usize>,
    #[arg(long, global = true)]
    gap: Option<f64>,
    #[arg(long, global = true)]
    data_seed: Option<u64>,
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,
    /// Any config key, e.g. `--set sampler.n_pilot=128`. Applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

impl Overrides {
    fn pairs(&self) -> Result<Vec<(String, String)>, MpdError> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("model.id", self.model.clone());
        push("replications", self.replications.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("threads", self.threads.map(|v| v.to_string()));
        push("grid.substeps", self.substeps.map(|v| v.to_string()));
        push("phase2.steps", self.phase2_steps.map(|v| v.to_string()));
        push("schedule.eta", self.eta.map(|v| format!("{v:?}")));
        push("schedule.offset", self.offset.map(|v| format!("{v:?}")));
        push("model.theta0", self.theta0.clone());
        push("model.theta_true", self.theta_true.clone());
        push("model.theta_aux", self.theta_aux.clone());
        push("sampler.safety_log", self.safety_log.map(|v| format!("{v:?}")));
        push("sampler.max_proposals", self.max_proposals.map(|v| v.to_string()));
        push("data.source", self.data.as_ref().map(|v| format!("\"{v}\"")));
        push("data.n_obs", self.n_obs.map(|v| v.to_string()));
        push("data.gap", self.gap.map(|v| format!("{v:?}")));
        push("data.seed", self.data_seed.map(|v| v.to_string()));
        push(
            "output.dir",
            self.output_dir.as_ref().map(|v| format!("\"{}\"", v.display())),
        );
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| MpdError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate an observation series.
    Generate {
        /// Defaults to `<output.dir>/data.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the replicated experiment and write its artifacts.
    Fit,
    /// Kernel density estimates from a terminals CSV.
    Kde {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `output.dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Statistical diagnostics.
    #[command(subcommand)]
    Diagnose(Diagnose),
}

#[derive(Subcommand, Debug)]
enum Diagnose {
    /// Mean of phase-2 score increments at fixed θ; |z| ≤ 4 expected.
    Martingale {
        #[arg(long)]
        draws: Option<usize>,
        /// Comma-separated; defaults to `model.theta_true`.
        #[arg(long)]
        theta: Option<String>,
        /// Comma-separated; defaults to `model.x0`.
        #[arg(long)]
        x: Option<String>,
    },
    /// Coupled discretisation study against a fine reference level.
    Rate,
    /// Naive versus bridge score variance across levels.
    Variance,
}

fn floats(s: &str) -> Result<Vec<f64>, MpdError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| MpdError::Config(format!("`{p}`: {e}")))
        })
        .collect()
}

fn emit<T: Serialize>(value: &T, dir: &Path, name: &str) -> Result<(), MpdError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), &text)?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn run(cli: Cli) -> Result<(), MpdError> {
    let config = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides.pairs()?)?;
    let out = config.output.dir.clone();
    match cli.command {
        Command::Generate { out: path } => {
            let series = resolve_data(&config)?;
            let path = path.unwrap_or_else(|| out.join("data.csv"));
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            series.save(&path)?;
            println!("wrote {} observations to {}", series.len(), path.display());
        }
        Command::Fit => {
            let series = resolve_data(&config)?;
            let outcome = run_experiment(&config, &series)?;
            write_artifacts(&outcome, &out)?;
            let s = &outcome.summary;
            for (j, name) in s.param_names.iter().enumerate().filter(|_| s.completed > 0) {
                println!(
                    "{name}: terminal mean {:.4} sd {:.4}, phase-1 mean {:.4}",
                    s.terminal.mean[j], s.terminal.sd[j], s.phase1.mean[j]
                );
            }
            if s.completed > 0 {
                println!(
                    "acceptance {:.3}, lowest replication {:.3}",
                    s.acceptance.rate, s.acceptance.min_replication_rate
                );
            }
            println!(
                "{} of {} replications completed, {} envelope violations, {:.1}s",
                s.completed, s.n_replications, s.envelope_violations, outcome.timing.wall_clock_seconds
            );
            info!("artifacts in {}", out.display());
            check_aborts(s)?;
        }
        Command::Kde { input, out_dir, points } => {
            let rows = terminals_from_csv(&fs::read_to_string(&input)?)?;
            let dir = out_dir.unwrap_or(out);
            fs::create_dir_all(&dir)?;
            let p = rows.first().map_or(0, |r| r.1.len());
            for j in 0..p {
                let name = format!("theta_{}", j + 1);
                let col: Vec<f64> = rows.iter().map(|r| r.1[j]).collect();
                let table = kde_table(&[(name.as_str(), col)], points.unwrap_or(config.output.kde_points))?;
                let path = dir.join(format!("kde_{name}.csv"));
                fs::write(&path, table)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Diagnose(d) => match d {
            Diagnose::Martingale { draws, theta, x } => {
                let theta = theta.as_deref().map(floats).transpose()?;
                let x = x.as_deref().map(floats).transpose()?;
                let n = draws.unwrap_or(config.diagnostics.martingale_draws);
                if n < MIN_MARTINGALE_DRAWS {
                    return Err(MpdError::Config(format!(
                        "--draws must be at least {MIN_MARTINGALE_DRAWS}"
                    )));
                }
                let report = diagnose_martingale(&config, theta.as_deref(), x.as_deref(), n)?;
                emit(&report, &out, "diagnose_martingale.json")?;
            }
            Diagnose::Rate => emit(&diagnose_rate(&config)?, &out, "diagnose_rate.json")?,
            Diagnose::Variance => emit(&diagnose_variance(&config)?, &out, "diagnose_variance.json")?,
        },
    }
    Ok(())
}

fn exit_code(e: &MpdError) -> u8 {
    match e.root() {
        MpdError::Config(_) | MpdError::Parse { .. } | MpdError::Schema { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
