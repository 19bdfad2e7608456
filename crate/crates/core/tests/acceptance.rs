//! Acceptance suite: one PASS/FAIL line per criterion, then a single verdict.
//!
//! Run with `cargo test -p mpd-core --test acceptance -- --nocapture`.

use std::time::Instant;

use mpd_core::autodiff::grad_check;
use mpd_core::bridge::{BridgeSpan, Evaluated, GuidedBridge};
use mpd_core::harness::config::ExperimentConfig;
use mpd_core::harness::diagnostics::{diagnose_martingale, diagnose_rate, diagnose_variance};
use mpd_core::harness::experiment::{
    resolve_data, run_experiment, terminals_from_csv, trajectories_from_csv, write_artifacts,
};
use mpd_core::harness::stats::{ks_test, normal_cdf};
use mpd_core::harness::{EnsembleSummary, ObservationSeries};
use mpd_core::models::ou::ou_log_density;
use mpd_core::models::{ou_exact_transition, OuAuxiliary, OuModel, SlvAuxiliary, SlvModel};
use mpd_core::mpd::Stepper;
use mpd_core::rng::StreamFactory;
use mpd_core::sampler::{calibrate_envelope, sample_next_state, SamplerConfig, SamplerStats};
use mpd_core::sde::{make_grid, WienerIncrements};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn ou_end_to_end() -> Outcome {
    let c = ExperimentConfig::ou_benchmark();
    let series = resolve_data(&c).unwrap();
    let out = run_experiment(&c, &series).unwrap();
    let s = &out.summary;
    let mean = s.terminal.mean[0];
    let p1 = s.phase1_terminals(0);
    let inside = p1.iter().filter(|t| (2.5..=3.5).contains(*t)).count() as f64 / p1.len() as f64;
    verdict(
        (2.65..=3.05).contains(&mean) && inside >= 0.9 && s.completed == 100,
        format!(
            "mean terminal θ {mean:.4} (want [2.65, 3.05]), phase-1 within [2.5, 3.5]: {:.0}% (want ≥ 90%), {} of 100 completed",
            100.0 * inside,
            s.completed
        ),
    )
}

fn slv_end_to_end() -> Outcome {
    let c = ExperimentConfig::slv_benchmark();
    let series = resolve_data(&c).unwrap();
    let out = run_experiment(&c, &series).unwrap();
    let m = &out.summary.terminal.mean;
    let (a, b, z, g) = (m[0], m[1], m[2], m[3]);
    let pass =
        (a - 0.971).abs() <= 0.10 && (b - 0.498).abs() <= 0.07 && (z - 0.333).abs() <= 0.07 && g > 0.5 && g < 0.8;
    verdict(
        pass && out.summary.completed == 50,
        format!(
            "α {a:.3} (0.971 ± 0.10), β {b:.3} (0.498 ± 0.07), ζ {z:.3} (0.333 ± 0.07), γ {g:.3} (in (0.5, 0.8)), {} of 50 completed",
            out.summary.completed
        ),
    )
}

fn trivial_auxiliary() -> Outcome {
    let model = OuModel::benchmark();
    let bridge = GuidedBridge::new(model, OuAuxiliary::tied(&model), &[3.0], 0.2).unwrap();
    let grid = make_grid(0.0, 0.2, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_l, mut worst_w) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let x: f64 = 10.0 + rng.random_range(-1.0..1.0);
        let x_end: f64 = 10.0 + rng.random_range(-1.0..1.0);
        let span = BridgeSpan::new(&grid, [x], [x_end]);
        let noise = WienerIncrements::sample(&grid, 1, &mut rng);
        let e: Evaluated<f64, 1> = bridge.evaluate(&[3.0], &span, &grid, &noise).unwrap();
        for (j, xj) in e.path[..grid.n_substeps].iter().enumerate() {
            worst_l = worst_l.max(bridge.l_functional(&[3.0], &span, grid.time(j), xj).unwrap().abs());
        }
        worst_w = worst_w.max((e.log_weight - ou_log_density(3.0, 10.0, 0.5, 0.2, x, x_end)).abs());
    }
    let exact = SamplerConfig {
        safety_log: 0.0,
        ..SamplerConfig::default()
    };
    let mut stepper = Stepper::new(&bridge, exact, StreamFactory::new(1));
    for k in 0..500u64 {
        stepper.conditioned(k, 0, &[3.0], &[9.8], &[10.3], &grid).unwrap();
        stepper.joint(k, 2, 1, &[3.0], &[9.8], &grid).unwrap();
    }
    let rate = stepper.stats.acceptance_rate();
    verdict(
        worst_l <= 1e-12 && worst_w <= 1e-10 && rate == 1.0,
        format!("max |L| {worst_l:.1e} (≤ 1e-12), max log-weight error {worst_w:.1e} (≤ 1e-10), acceptance {rate}"),
    )
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst_ou = 0.0f64;
    let ou = OuModel::benchmark();
    let grid = make_grid(0.0, 0.2, 16).unwrap();
    for _ in 0..100 {
        let bridge = GuidedBridge::unchecked(ou, OuAuxiliary::fixed(&ou, rng.random_range(1.0..8.0)));
        let theta = [rng.random_range(0.5..8.0)];
        let span = BridgeSpan::new(&grid, [rng.random_range(8.5..11.5)], [rng.random_range(8.5..11.5)]);
        let noise = WienerIncrements::sample(&grid, 1, &mut rng);
        worst_ou = worst_ou.max(grad_check(
            |th| bridge.weight(th, &span, &grid, &noise).unwrap().1,
            |th| bridge.evaluate(th, &span, &grid, &noise).unwrap().log_weight,
            &theta,
            1e-5,
        ));
    }
    let slv = SlvModel::benchmark();
    let bridge = GuidedBridge::unchecked(slv, SlvAuxiliary::new(&slv));
    let grid = make_grid(0.0, 0.1, 8).unwrap();
    let (mut worst_slv, mut done) = (0.0f64, 0);
    while done < 100 {
        let theta: [f64; 4] = [1.0, 0.5, 0.3, 0.8].map(|t: f64| t * rng.random_range(0.6..1.4));
        let start = [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
        let end = start.map(|s: f64| s * rng.random_range(0.85..1.15));
        let span = BridgeSpan::new(&grid, start, end);
        let noise = WienerIncrements::sample(&grid, 1, &mut rng);
        let h = 1e-5;
        // Skip draws whose perturbed paths leave the positive orthant.
        let ok = (0..4).all(|j| {
            [h, -h].iter().all(|d| {
                let mut t = theta;
                t[j] += d;
                bridge.weight(&t, &span, &grid, &noise).is_ok()
            })
        });
        if !ok {
            continue;
        }
        done += 1;
        worst_slv = worst_slv.max(grad_check(
            |th| bridge.weight(th, &span, &grid, &noise).unwrap().1,
            |th| bridge.evaluate(th, &span, &grid, &noise).unwrap().log_weight,
            &theta,
            h,
        ));
    }
    verdict(
        worst_ou <= 1e-5 && worst_slv <= 1e-5,
        format!("worst relative error OU {worst_ou:.1e}, SLV {worst_slv:.1e} over 100 configurations each (≤ 1e-5)"),
    )
}

fn martingale() -> Outcome {
    let mut ou = ExperimentConfig::ou_benchmark();
    ou.model.theta_aux = None;
    let slv = ExperimentConfig::slv_benchmark();
    let a = diagnose_martingale(&ou, None, None, 10_000).unwrap();
    let b = diagnose_martingale(&slv, None, None, 10_000).unwrap();
    verdict(
        a.max_abs_z() <= 4.0 && b.max_abs_z() <= 4.0,
        format!("OU z {:?}, SLV z {:?} (|z| ≤ 4, 10^4 draws)", round(&a.z), round(&b.z)),
    )
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}

fn endpoint_law() -> Outcome {
    let model = OuModel::benchmark();
    let bridge = GuidedBridge::new(model, OuAuxiliary::fixed(&model, 5.0), &[3.0], 0.2).unwrap();
    let grid = make_grid(0.0, 0.2, 256).unwrap();
    let config = SamplerConfig::default();
    let x = [10.4];
    let mut pilot = ChaCha8Rng::seed_from_u64(13);
    let mut env = calibrate_envelope(&bridge, &[3.0], &x, None, &grid, &config, &mut pilot).unwrap();
    let mut stats = SamplerStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let draws: Vec<f64> = (0..10_000)
        .map(|_| sample_next_state(&bridge, &[3.0], &x, &grid, &config, &mut env, &mut stats, &mut rng).unwrap()[0])
        .collect();
    let (m, v) = ou_exact_transition(3.0, 10.0, 0.5, 0.2, x[0]).unwrap();
    let (d, p) = ks_test(&draws, normal_cdf(m, v.sqrt())).unwrap();
    verdict(
        p > 0.01,
        format!(
            "K–S D = {d:.4}, p = {p:.3} (want p > 0.01), acceptance {:.2}",
            stats.acceptance_rate()
        ),
    )
}

fn rate() -> Outcome {
    let r = diagnose_rate(&ExperimentConfig::ou_benchmark()).unwrap();
    let table: Vec<String> = r
        .rows
        .iter()
        .map(|row| format!("l{}: {:.2e}", row.level, row.mean_sq_gap))
        .collect();
    verdict(
        (0.7..=1.3).contains(&r.slope) && r.monotone,
        format!(
            "slope {:.3} (want [0.7, 1.3]), monotone {}, {}",
            r.slope,
            r.monotone,
            table.join(", ")
        ),
    )
}

fn variance() -> Outcome {
    let r = diagnose_variance(&ExperimentConfig::ou_benchmark()).unwrap();
    let naive: Vec<String> = r
        .rows
        .iter()
        .map(|row| {
            row.naive_variance
                .as_ref()
                .map_or("degenerate".into(), |v| format!("{:.3e}", v[0]))
        })
        .collect();
    let bridge: Vec<String> = r
        .rows
        .iter()
        .map(|row| format!("{:.3e}", row.bridge_variance[0]))
        .collect();
    verdict(
        r.naive_non_decreasing() && r.bridge_max_ratio() <= 3.0,
        format!(
            "naive [{}] non-decreasing {}; bridge [{}] max ratio {:.2} (≤ 3)",
            naive.join(", "),
            r.naive_non_decreasing(),
            bridge.join(", "),
            r.bridge_max_ratio()
        ),
    )
}

fn determinism() -> Outcome {
    let mut c = ExperimentConfig::slv_benchmark();
    c.replications = 4;
    c.data.n_obs = 20;
    c.phase2.steps = 10;
    let series = resolve_data(&c).unwrap();
    let a = run_experiment(&c, &series).unwrap();
    c.threads = 1;
    let b = run_experiment(&c, &series).unwrap();
    let same_json = serde_json::to_string(&a.summary.replications).unwrap()
        == serde_json::to_string(&b.summary.replications).unwrap()
        && a.trajectories == b.trajectories;

    let dir = tempfile::tempdir().unwrap();
    write_artifacts(&a, dir.path()).unwrap();
    let read = |n: &str| std::fs::read_to_string(dir.path().join(n)).unwrap();
    let summary: EnsembleSummary = serde_json::from_str(&read("summary.json")).unwrap();
    let trajectories = trajectories_from_csv(&read("trajectories.csv")).unwrap();
    let terminals = terminals_from_csv(&read("terminals.csv")).unwrap();
    let data = ObservationSeries::load(&dir.path().join("data.csv")).unwrap();
    let config = ExperimentConfig::from_toml_with_overrides(&c.to_toml().unwrap(), &[]).unwrap();
    let round_trip = summary == a.summary
        && trajectories == a.trajectories
        && terminals
            .iter()
            .zip(&a.summary.replications)
            .all(|(t, r)| t.1 == r.terminal)
        && data == series
        && config == c;

    let dir2 = tempfile::tempdir().unwrap();
    let c1 = ExperimentConfig {
        threads: 0,
        ..c.clone()
    };
    write_artifacts(&run_experiment(&c1, &series).unwrap(), dir2.path()).unwrap();
    let summaries_match = {
        let mut x: EnsembleSummary = serde_json::from_str(&read("summary.json")).unwrap();
        let y: EnsembleSummary =
            serde_json::from_str(&std::fs::read_to_string(dir2.path().join("summary.json")).unwrap()).unwrap();
        x.config.threads = y.config.threads;
        x == y
    };
    verdict(
        same_json && round_trip && summaries_match,
        format!("repeat runs bit-identical {same_json}, thread-count invariant {summaries_match}, all files round-trip {round_trip}"),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("OU end-to-end", ou_end_to_end),
        ("SLV end-to-end", slv_end_to_end),
        ("trivial-auxiliary exactness", trivial_auxiliary),
        ("gradient correctness", gradients),
        ("martingale property", martingale),
        ("endpoint law", endpoint_law),
        ("discretisation rate", rate),
        ("variance contrast", variance),
        ("determinism and round trip", determinism),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "{tag} {name}: {} [{:.1}s]",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        if !outcome.pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
