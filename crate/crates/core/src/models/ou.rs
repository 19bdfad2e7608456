//! Ornstein–Uhlenbeck `dX = θ(μ − X)dt + σ dW` with the rate `θ` unknown.
//!
//! Everything here has a closed form, so this module also carries the exact
//! transition, score and bridge moments used as oracles.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Dual, Matrix, Scalar, Vector};
use crate::bridge::{AuxiliaryModel, BridgeSpan, DensityPack};
use crate::error::{MpdError, Result};
use crate::sde::SdeModel;

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuModel {
    pub mu: f64,
    pub sigma: f64,
}

impl OuModel {
    /// `sigma = 0` is accepted for forward simulation; bridging rejects it.
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 {
            return Err(MpdError::Model(format!("invalid OU constants mu={mu}, sigma={sigma}")));
        }
        Ok(OuModel { mu, sigma })
    }

    pub fn benchmark() -> Self {
        OuModel { mu: 10.0, sigma: 0.5 }
    }
}

impl SdeModel<1, 1> for OuModel {
    fn id(&self) -> &'static str {
        "ou"
    }

    fn param_names(&self) -> [&'static str; 1] {
        ["theta"]
    }

    fn drift<S: Scalar>(&self, theta: &[S; 1], x: &Vector<S, 1>) -> Vector<S, 1> {
        [theta[0] * (S::cst(self.mu) - x[0])]
    }

    fn diffusion<S: Scalar>(&self, _theta: &[S; 1], _x: &Vector<S, 1>) -> Matrix<S, 1> {
        [[S::cst(self.sigma)]]
    }
}

/// Rate used by the auxiliary OU process.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AuxRate {
    /// A fixed reference rate.
    Fixed(f64),
    /// The model's own rate; the auxiliary then coincides with the target.
    Tied,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuAuxiliary {
    pub mu: f64,
    pub sigma: f64,
    pub rate: AuxRate,
}

impl OuAuxiliary {
    pub fn fixed(model: &OuModel, theta_aux: f64) -> Self {
        OuAuxiliary {
            mu: model.mu,
            sigma: model.sigma,
            rate: AuxRate::Fixed(theta_aux),
        }
    }

    pub fn tied(model: &OuModel) -> Self {
        OuAuxiliary {
            mu: model.mu,
            sigma: model.sigma,
            rate: AuxRate::Tied,
        }
    }

    fn rate<S: Scalar>(&self, theta: &[S; 1]) -> S {
        match self.rate {
            AuxRate::Fixed(r) => S::cst(r),
            AuxRate::Tied => theta[0],
        }
    }
}

/// Conditional mean and variance after time `dt` for a generic scalar rate.
fn moments<S: Scalar>(rate: S, mu: f64, sigma: f64, dt: f64, x: S) -> (S, S, S) {
    let decay = (-(rate * dt)).exp();
    let mean = (x - mu) * decay + mu;
    let variance = if rate.value().abs() < 1e-12 {
        S::cst(sigma * sigma * dt)
    } else {
        (-(decay * decay) + 1.0) * (sigma * sigma) / (rate * 2.0)
    };
    (mean, variance, decay)
}

fn pack<S: Scalar>(rate: S, mu: f64, sigma: f64, dt: f64, x: S, x_end: f64) -> DensityPack<S, 1> {
    let (mean, variance, decay) = moments(rate, mu, sigma, dt, x);
    let resid = -mean + x_end;
    DensityPack {
        log_density: -(variance.ln() + LOG_2PI) * 0.5 - resid * resid / (variance * 2.0),
        grad: [resid * decay / variance],
        hessian: [[-(decay * decay) / variance]],
    }
}

impl AuxiliaryModel<1, 1> for OuAuxiliary {
    fn id(&self) -> &'static str {
        match self.rate {
            AuxRate::Fixed(_) => "ou-fixed",
            AuxRate::Tied => "ou-tied",
        }
    }

    fn drift<S: Scalar>(&self, theta: &[S; 1], _span: &BridgeSpan<1>, _t: f64, x: &Vector<S, 1>) -> Vector<S, 1> {
        [self.rate(theta) * (S::cst(self.mu) - x[0])]
    }

    fn covariance<S: Scalar>(
        &self,
        _theta: &[S; 1],
        _span: &BridgeSpan<1>,
        _t: f64,
        _x: &Vector<S, 1>,
    ) -> Matrix<S, 1> {
        [[S::cst(self.sigma * self.sigma)]]
    }

    fn transition<S: Scalar>(
        &self,
        theta: &[S; 1],
        span: &BridgeSpan<1>,
        t: f64,
        x: &Vector<S, 1>,
    ) -> Result<DensityPack<S, 1>> {
        let dt = span.t_end - t;
        if dt <= 0.0 {
            return Err(MpdError::Domain(format!(
                "auxiliary density at non-positive horizon {dt}"
            )));
        }
        Ok(pack(self.rate(theta), self.mu, self.sigma, dt, x[0], span.end[0]))
    }

    fn sample_endpoint<R: Rng + ?Sized>(
        &self,
        theta: &[f64; 1],
        x: &[f64; 1],
        t_start: f64,
        t_end: f64,
        rng: &mut R,
    ) -> Result<[f64; 1]> {
        let (mean, variance, _) = moments(self.rate(theta), self.mu, self.sigma, t_end - t_start, x[0]);
        let z: f64 = rng.sample(StandardNormal);
        Ok([mean + variance.sqrt() * z])
    }

    fn endpoint_log_density(
        &self,
        theta: &[f64; 1],
        x: &[f64; 1],
        t_start: f64,
        t_end: f64,
        u: &[f64; 1],
    ) -> Result<f64> {
        Ok(pack(self.rate(theta), self.mu, self.sigma, t_end - t_start, x[0], u[0]).log_density)
    }
}

/// Exact conditional `(mean, variance)` of `X_{t+Δ}` given `X_t = x`.
pub fn ou_exact_transition(theta: f64, mu: f64, sigma: f64, dt: f64, x: f64) -> Result<(f64, f64)> {
    if theta == 0.0 {
        return Err(MpdError::Domain("degenerate OU rate 0".into()));
    }
    if dt <= 0.0 {
        return Err(MpdError::Domain(format!("non-positive horizon {dt}")));
    }
    let (mean, variance, _) = moments(theta, mu, sigma, dt, x);
    Ok((mean, variance))
}

pub fn ou_log_density<S: Scalar>(theta: S, mu: f64, sigma: f64, dt: f64, x: f64, x_end: f64) -> S {
    pack(theta, mu, sigma, dt, S::cst(x), x_end).log_density
}

/// `∂/∂θ log N(x′; mean(θ), var(θ))`, written out by hand.
pub fn ou_exact_score(theta: f64, mu: f64, sigma: f64, dt: f64, x: f64, x_end: f64) -> Result<f64> {
    let (mean, variance) = ou_exact_transition(theta, mu, sigma, dt, x)?;
    let a = (-theta * dt).exp();
    let dmean = -dt * (x - mu) * a;
    let dvar = sigma * sigma * (dt * a * a / theta - (1.0 - a * a) / (2.0 * theta * theta));
    let r = x_end - mean;
    Ok(-0.5 * dvar / variance + r * dmean / variance + r * r * dvar / (2.0 * variance * variance))
}

/// The same score via forward-mode differentiation of the log density.
pub fn ou_exact_score_ad(theta: f64, mu: f64, sigma: f64, dt: f64, x: f64, x_end: f64) -> f64 {
    ou_log_density(Dual::<1>::variable(theta, 0), mu, sigma, dt, x, x_end).tangent[0]
}

/// Gaussian density pack of the auxiliary OU at rate `theta_aux` over `[t, s2]`.
pub fn ou_aux_density_pack(
    theta_aux: f64,
    mu: f64,
    sigma: f64,
    t: f64,
    s2: f64,
    x: f64,
    x_end: f64,
) -> Result<DensityPack<f64, 1>> {
    if t >= s2 {
        return Err(MpdError::Domain(format!("need t < s2, got {t} >= {s2}")));
    }
    Ok(pack(theta_aux, mu, sigma, s2 - t, x, x_end))
}

/// Mean and variance of the exact OU bridge at time `t ∈ (t0, t1)` pinned at
/// `x` (time `t0`) and `x_end` (time `t1`).
pub fn ou_bridge_moments(
    theta: f64,
    mu: f64,
    sigma: f64,
    t0: f64,
    t: f64,
    t1: f64,
    x: f64,
    x_end: f64,
) -> Result<(f64, f64)> {
    let (m1, v1) = ou_exact_transition(theta, mu, sigma, t - t0, x)?;
    let (_, v2) = ou_exact_transition(theta, mu, sigma, t1 - t, 0.0)?;
    let a2 = (-theta * (t1 - t)).exp();
    let end_mean = mu + (m1 - mu) * a2;
    let end_var = a2 * a2 * v1 + v2;
    let cov = a2 * v1;
    Ok((m1 + cov / end_var * (x_end - end_mean), v1 - cov * cov / end_var))
}
