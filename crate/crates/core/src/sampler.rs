//! Rejection sampling of bridge noise and of joint (noise, endpoint) pairs.
//!
//! Both targets have the form `exp(Σ L Δ) × (tractable law)`, so proposals are
//! drawn from the tractable part and accepted with probability
//! `exp(e − log M)`. The bound `log M` is calibrated from pilot draws and
//! inflated whenever a proposal exceeds it.

use std::collections::HashMap;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{AuxiliaryModel, BridgeDraw, BridgeSpan, GuidedBridge, ScoredWeight};
use crate::error::{MpdError, Result};
use crate::sde::{BridgeGrid, SdeModel, WienerIncrements};

/// Exceedances below this are rounding, not violations.
const VIOLATION_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_pilot: usize,
    pub safety_log: f64,
    pub max_proposals: u64,
    /// Max-norm distance in θ after which an envelope is recalibrated.
    pub trust_radius: f64,
    /// Each sub-step increment is summed from this many finer normals, which
    /// couples runs at different levels through shared randomness.
    pub fine_factor: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_pilot: 64,
            safety_log: 0.5,
            max_proposals: 100_000,
            trust_radius: 0.5,
            fine_factor: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pilot < 16 {
            return Err(MpdError::Config(format!(
                "sampler.n_pilot = {} (need at least 16)",
                self.n_pilot
            )));
        }
        if !(self.safety_log >= 0.0 && self.safety_log.is_finite()) {
            return Err(MpdError::Config(format!("sampler.safety_log = {}", self.safety_log)));
        }
        if self.max_proposals == 0 || self.fine_factor == 0 {
            return Err(MpdError::Config(
                "sampler.max_proposals and sampler.fine_factor must be positive".into(),
            ));
        }
        if !(self.trust_radius > 0.0) {
            return Err(MpdError::Config(format!(
                "sampler.trust_radius = {}",
                self.trust_radius
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope<const P: usize> {
    pub log_m: f64,
    pub n_pilot: usize,
    pub safety_log: f64,
    pub violation_count: u64,
    pub max_exceedance: f64,
    pub pilot_exits: usize,
    pub theta_calibrated: [f64; P],
}

impl<const P: usize> Envelope<P> {
    /// A fixed bound, mainly for tests.
    pub fn fixed(log_m: f64, theta: [f64; P]) -> Self {
        Envelope {
            log_m,
            n_pilot: 0,
            safety_log: 0.0,
            violation_count: 0,
            max_exceedance: 0.0,
            pilot_exits: 0,
            theta_calibrated: theta,
        }
    }

    pub fn is_stale(&self, theta: &[f64; P], trust_radius: f64) -> bool {
        self.theta_calibrated
            .iter()
            .zip(theta)
            .any(|(a, b)| (a - b).abs() > trust_radius)
    }
}

/// Counters accumulated over one replication.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerStats {
    pub accepted: u64,
    pub proposals: u64,
    pub violations: u64,
    pub domain_exits: u64,
    pub max_exceedance: f64,
    pub calibrations: u64,
}

impl SamplerStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            return 1.0;
        }
        self.accepted as f64 / self.proposals as f64
    }

    pub fn merge(&mut self, other: &SamplerStats) {
        self.accepted += other.accepted;
        self.proposals += other.proposals;
        self.violations += other.violations;
        self.domain_exits += other.domain_exits;
        self.max_exceedance = self.max_exceedance.max(other.max_exceedance);
        self.calibrations += other.calibrations;
    }
}

/// An accepted draw and its scored weight.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredDraw<const D: usize, const P: usize> {
    pub draw: BridgeDraw<D>,
    pub weight: ScoredWeight<P>,
    pub endpoint: [f64; D],
    pub n_proposals: u64,
}

struct Proposal<const D: usize> {
    end: [f64; D],
    noise: WienerIncrements<D>,
    /// Log acceptance numerator.
    exponent: f64,
}

fn span_for<const D: usize>(grid: &BridgeGrid, x: &[f64; D], end: [f64; D]) -> BridgeSpan<D> {
    BridgeSpan::new(grid, *x, end)
}

/// One proposal. `None` when the path leaves the model's domain.
#[allow(clippy::too_many_arguments)]
fn propose<M, A, R, const D: usize, const P: usize>(
    bridge: &GuidedBridge<M, A, D, P>,
    theta: &[f64; P],
    x: &[f64; D],
    x_end: Option<&[f64; D]>,
    grid: &BridgeGrid,
    fine_factor: usize,
    rng: &mut R,
) -> Result<Option<Proposal<D>>>
where
    M: SdeModel<D, P>,
    A: AuxiliaryModel<D, P>,
    R: Rng + ?Sized,
{
    let end = match x_end {
        Some(e) => *e,
        None => bridge.aux.sample_endpoint(theta, x, grid.t_start, grid.t_end, rng)?,
    };
    let noise = WienerIncrements::sample(grid, fine_factor, rng);
    if !bridge.model.in_domain(&end) {
        return Ok(None);
    }
    let span = span_for(grid, x, end);
    let exponent = match bridge.weight(theta, &span, grid, &noise) {
        Ok((exponent_sum, log_weight)) => match x_end {
            Some(_) => exponent_sum,
            // Joint target exp(ΣLΔ)·f̃(u|x) against proposal q(u|x).
            None => {
                log_weight
                    - bridge
                        .aux
                        .endpoint_log_density(theta, x, grid.t_start, grid.t_end, &end)?
            }
        },
        Err(MpdError::DomainExit { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    Ok(Some(Proposal { end, noise, exponent }))
}

/// Sets `log M` to the largest pilot exponent plus `safety_log`. Conditioned
/// form when `x_end` is given, joint form otherwise.
pub fn calibrate_envelope<M, A, R, const D: usize, const P: usize>(
    bridge: &GuidedBridge<M, A, D, P>,
    theta: &[f64; P],
    x: &[f64; D],
    x_end: Option<&[f64; D]>,
    grid: &BridgeGrid,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Envelope<P>>
where
    M: SdeModel<D, P>,
    A: AuxiliaryModel<D, P>,
    R: Rng + ?Sized,
{
    if config.n_pilot < 16 {
        return Err(MpdError::Precondition(format!("n_pilot = {} < 16", config.n_pilot)));
    }
    let mut max = f64::NEG_INFINITY;
    let mut exits = 0;
    for _ in 0..config.n_pilot {
        match propose(bridge, theta, x, x_end, grid, config.fine_factor, rng)? {
            Some(p) => max = max.max(p.exponent),
            None => exits += 1,
        }
    }
    if !max.is_finite() {
        // Every pilot left the domain; start from zero and let violations adapt.
        max = 0.0;
    }
    Ok(Envelope {
        log_m: max + config.safety_log,
        n_pilot: config.n_pilot,
        safety_log: config.safety_log,
        violation_count: 0,
        max_exceedance: 0.0,
        pilot_exits: exits,
        theta_calibrated: *theta,
    })
}

#[allow(clippy::too_many_arguments)]
fn rejection_loop<M, A, R, const D: usize, const P: usize>(
    bridge: &GuidedBridge<M, A, D, P>,
    theta: &[f64; P],
    x: &[f64; D],
    x_end: Option<&[f64; D]>,
    grid: &BridgeGrid,
    config: &SamplerConfig,
    env: &mut Envelope<P>,
    stats: &mut SamplerStats,
    rng: &mut R,
) -> Result<ScoredDraw<D, P>>
where
    M: SdeModel<D, P>,
    A: AuxiliaryModel<D, P>,
    R: Rng + ?Sized,
{
    let mut n = 0u64;
    loop {
        if n >= config.max_proposals {
            return Err(MpdError::MaxProposalsExceeded {
                cap: config.max_proposals,
            });
        }
        n += 1;
        stats.proposals += 1;
        let proposal = propose(bridge, theta, x, x_end, grid, config.fine_factor, rng)?;
        let uniform: f64 = rng.random();
        let Some(p) = proposal else {
            stats.domain_exits += 1;
            continue;
        };
        let excess = p.exponent - env.log_m;
        if excess > VIOLATION_TOL {
            warn!("envelope violation: exponent exceeds log M by {excess:.3e}");
            env.violation_count += 1;
            env.max_exceedance = env.max_exceedance.max(excess);
            env.log_m = (env.log_m + env.safety_log).max(p.exponent + env.safety_log);
            stats.violations += 1;
            stats.max_exceedance = stats.max_exceedance.max(excess);
            continue;
        }
        if uniform < excess.exp() {
            let span = span_for(grid, x, p.end);
            let (draw, weight) = bridge.score_draw(theta, &span, grid, &p.noise)?;
            stats.accepted += 1;
            return Ok(ScoredDraw {
                draw,
                weight,
                endpoint: p.end,
                n_proposals: n,
            });
        }
    }
}

/// Draws bridge noise from `π(dw | x, x′)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_conditioned_noise<M, A, R, const D: usize, const P: usize>(
    bridge: &GuidedBridge<M, A, D, P>,
    theta: &[f64; P],
    x: &[f64; D],
    x_end: &[f64; D],
    grid: &BridgeGrid,
    config: &SamplerConfig,
    env: &mut Envelope<P>,
    stats: &mut SamplerStats,
    rng: &mut R,
) -> Result<ScoredDraw<D, P>>
where
    M: SdeModel<D, P>,
    A: AuxiliaryModel<D, P>,
    R: Rng + ?Sized,
{
    rejection_loop(bridge, theta, x, Some(x_end), grid, config, env, stats, rng)
}

/// Draws `(v, u)` from `π(dv, u | x)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_joint_endpoint<M, A, R, const D: usize, const P: usize>(
    bridge: &GuidedBridge<M, A, D, P>,
    theta: &[f64; P],
    x: &[f64; D],
    grid: &BridgeGrid,
    config: &SamplerConfig,
    env: &mut Envelope<P>,
    stats: &mut SamplerStats,
    rng: &mut R,
) -> Result<ScoredDraw<D, P>>
where
    M: SdeModel<D, P>,
    A: AuxiliaryModel<D, P>,
    R: Rng + ?Sized,
{
    rejection_loop(bridge, theta, x, None, grid, config, env, stats, rng)
}

/// Generative step: the endpoint of a joint draw.
#[allow(clippy::too_many_arguments)]
pub fn sample_next_state<M, A, R, const D: usize, const P: usize>(
    bridge: &GuidedBridge<M, A, D, P>,
    theta: &[f64; P],
    x: &[f64; D],
    grid: &BridgeGrid,
    config: &SamplerConfig,
    env: &mut Envelope<P>,
    stats: &mut SamplerStats,
    rng: &mut R,
) -> Result<[f64; D]>
where
    M: SdeModel<D, P>,
    A: AuxiliaryModel<D, P>,
    R: Rng + ?Sized,
{
    sample_joint_endpoint(bridge, theta, x, grid, config, env, stats, rng).map(|d| d.endpoint)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnvelopeKind {
    Conditioned,
    Joint,
}

/// Envelopes keyed by interval, recalibrated on trust-radius breach.
#[derive(Clone, Debug, Default)]
pub struct EnvelopeCache<const P: usize> {
    entries: HashMap<(u64, EnvelopeKind), Envelope<P>>,
    pub violations: u64,
}

impl<const P: usize> EnvelopeCache<P> {
    pub fn new() -> Self {
        EnvelopeCache {
            entries: HashMap::new(),
            violations: 0,
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Returns the envelope for `key`, calibrating with `pilot` if it is
    /// missing or stale.
    #[allow(clippy::too_many_arguments)]
    pub fn get<M, A, R, const D: usize>(
        &mut self,
        key: u64,
        bridge: &GuidedBridge<M, A, D, P>,
        theta: &[f64; P],
        x: &[f64; D],
        x_end: Option<&[f64; D]>,
        grid: &BridgeGrid,
        config: &SamplerConfig,
        stats: &mut SamplerStats,
        pilot: impl FnOnce() -> R,
    ) -> Result<&mut Envelope<P>>
    where
        M: SdeModel<D, P>,
        A: AuxiliaryModel<D, P>,
        R: Rng,
    {
        let kind = if x_end.is_some() {
            EnvelopeKind::Conditioned
        } else {
            EnvelopeKind::Joint
        };
        let fresh = match self.entries.get(&(key, kind)) {
            Some(env) => env.is_stale(theta, config.trust_radius),
            None => true,
        };
        if fresh {
            let env = calibrate_envelope(bridge, theta, x, x_end, grid, config, &mut pilot())?;
            stats.calibrations += 1;
            self.entries.insert((key, kind), env);
        }
        Ok(self.entries.get_mut(&(key, kind)).expect("inserted above"))
    }
}
