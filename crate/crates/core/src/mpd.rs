//! The martingale recursion `θ_k = θ_{k−1} + γ_k (∇log R(w) − ∇log R(v, u))`.
//!
//! Phase 1 walks the observed intervals once. Phase 2 continues from the last
//! observation, generating each new state from the model at the current θ.

use serde::{Deserialize, Serialize};

use crate::bridge::{AuxiliaryModel, GuidedBridge};
use crate::error::{MpdError, Result};
use crate::rng::StreamFactory;
use crate::sampler::{
    sample_conditioned_noise, sample_joint_endpoint, EnvelopeCache, SamplerConfig, SamplerStats, ScoredDraw,
};
use crate::sde::{make_grid, BridgeGrid, SdeModel};

/// Stream purposes within one `(replication, k)` cell.
pub mod purpose {
    pub const NEXT_STATE: u64 = 0;
    pub const CONDITIONED: u64 = 1;
    pub const JOINT: u64 = 2;
    pub const PILOT_CONDITIONED: u64 = 3;
    pub const PILOT_JOINT: u64 = 4;
}

/// `γ_k = η / (k + c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub eta: f64,
    pub offset: f64,
}

impl StepSchedule {
    pub fn new(eta: f64, offset: f64) -> Result<Self> {
        // η = 0 is allowed: it freezes θ, which tests rely on.
        if !(eta >= 0.0 && eta.is_finite() && offset > 0.0 && offset.is_finite()) {
            return Err(MpdError::Config(format!(
                "schedule needs eta >= 0 and offset > 0 (got {eta}, {offset})"
            )));
        }
        Ok(StepSchedule { eta, offset })
    }

    pub fn gamma(&self, k: usize) -> f64 {
        self.eta / (k as f64 + self.offset)
    }
}

pub fn step_size(schedule: &StepSchedule, k: usize) -> f64 {
    schedule.gamma(k)
}

/// Only the identity is implemented; the hook exists so configs can name it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preconditioner {
    #[default]
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MpdSettings<const P: usize> {
    pub theta0: [f64; P],
    pub schedule: StepSchedule,
    /// Euler sub-steps per observation interval.
    pub substeps: usize,
    pub phase2_steps: usize,
    pub sampler: SamplerConfig,
    pub preconditioner: Preconditioner,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Phase1,
    Phase2,
}

impl Phase {
    pub fn tag(&self) -> u8 {
        match self {
            Phase::Phase1 => 1,
            Phase::Phase2 => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Iterate<const P: usize> {
    pub k: usize,
    pub phase: Phase,
    pub theta: [f64; P],
    /// `θ_k − θ_{k−1}`; zero at `k = 0`.
    pub increment: [f64; P],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<const P: usize> {
    pub iterates: Vec<Iterate<P>>,
    /// Index into `iterates` of θ_T.
    pub phase1_end: usize,
    pub stats: SamplerStats,
}

impl<const P: usize> Trajectory<P> {
    pub fn terminal(&self) -> [f64; P] {
        self.iterates.last().map(|it| it.theta).unwrap_or([f64::NAN; P])
    }

    pub fn phase1_terminal(&self) -> [f64; P] {
        self.iterates[self.phase1_end].theta
    }

    /// Mean of the last `n` iterates.
    pub fn tail_mean(&self, n: usize) -> [f64; P] {
        let n = n.clamp(1, self.iterates.len());
        let tail = &self.iterates[self.iterates.len() - n..];
        std::array::from_fn(|p| tail.iter().map(|it| it.theta[p]).sum::<f64>() / n as f64)
    }
}

/// `S = ∇log R(w) − ∇log R(v, u)`.
pub fn score_increment<const D: usize, const P: usize>(w: &ScoredDraw<D, P>, v: &ScoredDraw<D, P>) -> [f64; P] {
    std::array::from_fn(|p| w.weight.score[p] - v.weight.score[p])
}

/// Draws for one replication: per-cell streams plus the envelope cache.
pub struct Stepper<'a, M, A, const D: usize, const P: usize> {
    pub bridge: &'a GuidedBridge<M, A, D, P>,
    pub config: SamplerConfig,
    pub streams: StreamFactory,
    pub cache: EnvelopeCache<P>,
    pub stats: SamplerStats,
}

impl<'a, M, A, const D: usize, const P: usize> Stepper<'a, M, A, D, P>
where
    M: SdeModel<D, P>,
    A: AuxiliaryModel<D, P>,
{
    pub fn new(bridge: &'a GuidedBridge<M, A, D, P>, config: SamplerConfig, streams: StreamFactory) -> Self {
        Stepper {
            bridge,
            config,
            streams,
            cache: EnvelopeCache::new(),
            stats: SamplerStats::default(),
        }
    }

    /// `w | x, x′` using the stream cell `(k, CONDITIONED)` and envelope slot `key`.
    pub fn conditioned(
        &mut self,
        k: u64,
        key: u64,
        theta: &[f64; P],
        x: &[f64; D],
        x_end: &[f64; D],
        grid: &BridgeGrid,
    ) -> Result<ScoredDraw<D, P>> {
        let streams = self.streams;
        let env = self.cache.get(
            key,
            self.bridge,
            theta,
            x,
            Some(x_end),
            grid,
            &self.config,
            &mut self.stats,
            || streams.stream(&[k, purpose::PILOT_CONDITIONED]),
        )?;
        let mut rng = streams.stream(&[k, purpose::CONDITIONED]);
        sample_conditioned_noise(
            self.bridge,
            theta,
            x,
            x_end,
            grid,
            &self.config,
            env,
            &mut self.stats,
            &mut rng,
        )
    }

    /// `(v, u) | x` drawn from stream `(k, tag)`.
    pub fn joint(
        &mut self,
        k: u64,
        tag: u64,
        key: u64,
        theta: &[f64; P],
        x: &[f64; D],
        grid: &BridgeGrid,
    ) -> Result<ScoredDraw<D, P>> {
        let streams = self.streams;
        let env = self.cache.get(
            key,
            self.bridge,
            theta,
            x,
            None,
            grid,
            &self.config,
            &mut self.stats,
            || streams.stream(&[k, purpose::PILOT_JOINT]),
        )?;
        let mut rng = streams.stream(&[k, tag]);
        sample_joint_endpoint(
            self.bridge,
            theta,
            x,
            grid,
            &self.config,
            env,
            &mut self.stats,
            &mut rng,
        )
    }

    pub fn next_state(
        &mut self,
        k: u64,
        key: u64,
        theta: &[f64; P],
        x: &[f64; D],
        grid: &BridgeGrid,
    ) -> Result<[f64; D]> {
        Ok(self.joint(k, purpose::NEXT_STATE, key, theta, x, grid)?.endpoint)
    }
}

fn apply_update<const P: usize>(theta: &[f64; P], gamma: f64, s: &[f64; P], k: usize) -> Result<([f64; P], [f64; P])> {
    let inc: [f64; P] = std::array::from_fn(|p| gamma * s[p]);
    let next: [f64; P] = std::array::from_fn(|p| theta[p] + inc[p]);
    if next.iter().all(|v| v.is_finite()) {
        Ok((next, inc))
    } else {
        Err(MpdError::NumericalBlowup { step: k })
    }
}

fn check_series<const D: usize>(times: &[f64], states: &[[f64; D]]) -> Result<()> {
    if states.len() < 2 || times.len() != states.len() {
        return Err(MpdError::Precondition(format!(
            "need at least two observations with matching times (got {} states, {} times)",
            states.len(),
            times.len()
        )));
    }
    Ok(())
}

/// One pass over the observed intervals, `k = 1..T`.
pub fn phase1_run<M, A, const D: usize, const P: usize>(
    bridge: &GuidedBridge<M, A, D, P>,
    settings: &MpdSettings<P>,
    times: &[f64],
    states: &[[f64; D]],
    streams: StreamFactory,
) -> Result<Trajectory<P>>
where
    M: SdeModel<D, P>,
    A: AuxiliaryModel<D, P>,
{
    check_series(times, states)?;
    let mut stepper = Stepper::new(bridge, settings.sampler, streams);
    let mut theta = settings.theta0;
    let mut iterates = vec![Iterate {
        k: 0,
        phase: Phase::Phase1,
        theta,
        increment: [0.0; P],
    }];
    for k in 1..states.len() {
        let mut step = || -> Result<([f64; P], [f64; P])> {
            let grid = make_grid(times[k - 1], times[k], settings.substeps)?;
            let (x, x_end) = (&states[k - 1], &states[k]);
            let w = stepper.conditioned(k as u64, k as u64, &theta, x, x_end, &grid)?;
            let v = stepper.joint(k as u64, purpose::JOINT, k as u64, &theta, x, &grid)?;
            apply_update(&theta, settings.schedule.gamma(k), &score_increment(&w, &v), k)
        };
        let (next, increment) = step().map_err(|e| e.at_iteration(k))?;
        theta = next;
        iterates.push(Iterate {
            k,
            phase: Phase::Phase1,
            theta,
            increment,
        });
    }
    Ok(Trajectory {
        phase1_end: iterates.len() - 1,
        iterates,
        stats: stepper.stats,
    })
}

/// Generative continuation for `k = k_start+1 ..= k_start+n_steps` on a
/// regular grid of spacing `gap` starting at time `t_start`.
#[allow(clippy::too_many_arguments)]
pub fn phase2_run<M, A, const D: usize, const P: usize>(
    bridge: &GuidedBridge<M, A, D, P>,
    settings: &MpdSettings<P>,
    theta_start: [f64; P],
    x_start: [f64; D],
    t_start: f64,
    gap: f64,
    k_start: usize,
    n_steps: usize,
    streams: StreamFactory,
) -> Result<Trajectory<P>>
where
    M: SdeModel<D, P>,
    A: AuxiliaryModel<D, P>,
{
    let mut stepper = Stepper::new(bridge, settings.sampler, streams);
    let mut theta = theta_start;
    let mut x = x_start;
    let mut iterates = Vec::with_capacity(n_steps);
    for i in 1..=n_steps {
        let k = k_start + i;
        let t0 = t_start + (i - 1) as f64 * gap;
        let mut step = || -> Result<([f64; P], [f64; P], [f64; D])> {
            let grid = make_grid(t0, t0 + gap, settings.substeps)?;
            let key = k as u64;
            let x_next = stepper.next_state(key, key, &theta, &x, &grid)?;
            let w = stepper.conditioned(key, key, &theta, &x, &x_next, &grid)?;
            let v = stepper.joint(key, purpose::JOINT, key, &theta, &x, &grid)?;
            let (next, inc) = apply_update(&theta, settings.schedule.gamma(k), &score_increment(&w, &v), k)?;
            Ok((next, inc, x_next))
        };
        let (next, increment, x_next) = step().map_err(|e| e.at_iteration(k))?;
        theta = next;
        x = x_next;
        iterates.push(Iterate {
            k,
            phase: Phase::Phase2,
            theta,
            increment,
        });
    }
    Ok(Trajectory {
        phase1_end: 0,
        iterates,
        stats: stepper.stats,
    })
}

/// Phase 1 over the data, then `settings.phase2_steps` generative steps with
/// the counter continuing from `T`. Envelopes are recalibrated at the switch.
pub fn run_mpd<M, A, const D: usize, const P: usize>(
    bridge: &GuidedBridge<M, A, D, P>,
    settings: &MpdSettings<P>,
    times: &[f64],
    states: &[[f64; D]],
    streams: StreamFactory,
) -> Result<Trajectory<P>>
where
    M: SdeModel<D, P>,
    A: AuxiliaryModel<D, P>,
{
    let mut traj = phase1_run(bridge, settings, times, states, streams)?;
    let t_last = times.len() - 1;
    let gap = times[t_last] - times[t_last - 1];
    let tail = phase2_run(
        bridge,
        settings,
        traj.phase1_terminal(),
        states[t_last],
        times[t_last],
        gap,
        t_last,
        settings.phase2_steps,
        streams,
    )?;
    traj.iterates.extend(tail.iterates);
    traj.stats.merge(&tail.stats);
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ou::ou_exact_score;
    use crate::models::{OuAuxiliary, OuModel};

    fn settings(eta: f64, phase2: usize) -> MpdSettings<1> {
        MpdSettings {
            theta0: [5.0],
            schedule: StepSchedule::new(eta, 50.0).unwrap(),
            substeps: 16,
            phase2_steps: phase2,
            sampler: SamplerConfig::default(),
            preconditioner: Preconditioner::Identity,
        }
    }

    fn toy_data() -> (Vec<f64>, Vec<[f64; 1]>) {
        let states = vec![[10.0], [10.1], [9.9], [10.05], [10.2], [9.95]];
        let times = (0..states.len()).map(|i| i as f64 * 0.2).collect();
        (times, states)
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(StepSchedule::new(30.0, 50.0).unwrap().gamma(50), 0.3);
        assert!((StepSchedule::new(0.5, 100.0).unwrap().gamma(100) - 0.0025).abs() < 1e-16);
        let s = StepSchedule::new(30.0, 50.0).unwrap();
        assert!((1..1000).all(|k| s.gamma(k + 1) < s.gamma(k) && s.gamma(k) > 0.0));
        assert!(StepSchedule::new(1.0, 0.0).is_err());
    }

    #[test]
    fn zero_step_keeps_theta() {
        let model = OuModel::benchmark();
        let bridge = GuidedBridge::new(model, OuAuxiliary::fixed(&model, 5.0), &[5.0], 0.2).unwrap();
        let (times, states) = toy_data();
        let traj = run_mpd(&bridge, &settings(0.0, 4), &times, &states, StreamFactory::new(1)).unwrap();
        assert!(traj.iterates.iter().all(|it| it.theta == [5.0]));
        assert_eq!(traj.iterates.len(), 1 + 5 + 4);
    }

    #[test]
    fn trajectory_bookkeeping() {
        let model = OuModel::benchmark();
        let bridge = GuidedBridge::new(model, OuAuxiliary::fixed(&model, 5.0), &[5.0], 0.2).unwrap();
        let (times, states) = toy_data();
        let s = settings(30.0, 6);
        let traj = run_mpd(&bridge, &s, &times, &states, StreamFactory::new(2)).unwrap();
        assert_eq!(traj.phase1_end, 5);
        for (i, it) in traj.iterates.iter().enumerate() {
            assert_eq!(it.k, i);
            assert_eq!(it.phase, if i <= 5 { Phase::Phase1 } else { Phase::Phase2 });
            if i > 0 {
                assert_eq!(it.theta[0], traj.iterates[i - 1].theta[0] + it.increment[0]);
            }
        }
        let again = run_mpd(&bridge, &s, &times, &states, StreamFactory::new(2)).unwrap();
        assert_eq!(traj, again);
    }

    #[test]
    fn empty_phase_two_is_identity() {
        let model = OuModel::benchmark();
        let bridge = GuidedBridge::unchecked(model, OuAuxiliary::fixed(&model, 5.0));
        let t = phase2_run(
            &bridge,
            &settings(30.0, 0),
            [4.0],
            [10.0],
            20.0,
            0.2,
            100,
            0,
            StreamFactory::new(3),
        )
        .unwrap();
        assert!(t.iterates.is_empty());
    }

    #[test]
    fn trivial_auxiliary_increment_is_exact_score_difference() {
        let model = OuModel::benchmark();
        let bridge = GuidedBridge::new(model, OuAuxiliary::tied(&model), &[3.0], 0.2).unwrap();
        let grid = make_grid(0.0, 0.2, 16).unwrap();
        let mut stepper = Stepper::new(&bridge, SamplerConfig::default(), StreamFactory::new(4));
        let w = stepper.conditioned(1, 1, &[3.0], &[9.8], &[10.1], &grid).unwrap();
        let v = stepper.joint(1, purpose::JOINT, 1, &[3.0], &[9.8], &grid).unwrap();
        let s = score_increment(&w, &v)[0];
        let exact = ou_exact_score(3.0, 10.0, 0.5, 0.2, 9.8, 10.1).unwrap()
            - ou_exact_score(3.0, 10.0, 0.5, 0.2, 9.8, v.endpoint[0]).unwrap();
        assert!((s - exact).abs() < 1e-9);
        assert_eq!(score_increment(&w, &w), [0.0]);
    }

    #[test]
    fn single_interval_rejected_when_empty() {
        let model = OuModel::benchmark();
        let bridge = GuidedBridge::unchecked(model, OuAuxiliary::fixed(&model, 5.0));
        let err = phase1_run(&bridge, &settings(1.0, 0), &[0.0], &[[10.0]], StreamFactory::new(5)).unwrap_err();
        assert!(matches!(err, MpdError::Precondition(_)));
    }

    #[test]
    fn one_interval_with_zero_step() {
        let model = OuModel::benchmark();
        let bridge = GuidedBridge::unchecked(model, OuAuxiliary::fixed(&model, 5.0));
        let t = phase1_run(
            &bridge,
            &settings(0.0, 0),
            &[0.0, 0.2],
            &[[10.0], [10.1]],
            StreamFactory::new(6),
        )
        .unwrap();
        assert_eq!(t.terminal(), [5.0]);
    }
}
