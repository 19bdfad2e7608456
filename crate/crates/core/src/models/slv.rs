//! Stochastic Lotka–Volterra predator–prey model with multiplicative noise,
//! parameters `θ = (α, β, ζ, γ)`:
//!
//! ```text
//! dX¹ = X¹(α − βX²)dt + σ₁X¹ dW¹
//! dX² = X²(ζX¹ − γ)dt + σ₂X² dW²
//! ```
//!
//! The auxiliary process is geometric with a per-component growth rate that
//! interpolates linearly in time between its values at the bridged endpoints,
//! so its log-state transition is Gaussian.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Matrix, Scalar, Vector};
use crate::bridge::{AuxiliaryModel, BridgeSpan, DensityPack};
use crate::error::{MpdError, Result};
use crate::sde::SdeModel;

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlvModel {
    pub sigma: [f64; 2],
}

impl SlvModel {
    pub fn new(sigma1: f64, sigma2: f64) -> Result<Self> {
        if !(sigma1.is_finite() && sigma2.is_finite()) || sigma1 < 0.0 || sigma2 < 0.0 {
            return Err(MpdError::Model(format!(
                "invalid SLV volatilities ({sigma1}, {sigma2})"
            )));
        }
        Ok(SlvModel {
            sigma: [sigma1, sigma2],
        })
    }

    pub fn benchmark() -> Self {
        SlvModel { sigma: [0.2, 0.15] }
    }
}

/// Per-capita growth rates `(α − βx², ζx¹ − γ)` at state `x`.
fn growth_rates<S: Scalar>(theta: &[S; 4], x: &[S; 2]) -> [S; 2] {
    let [alpha, beta, zeta, gamma] = *theta;
    [alpha - beta * x[1], zeta * x[0] - gamma]
}

impl SdeModel<2, 4> for SlvModel {
    fn id(&self) -> &'static str {
        "slv"
    }

    fn param_names(&self) -> [&'static str; 4] {
        ["alpha", "beta", "zeta", "gamma"]
    }

    fn drift<S: Scalar>(&self, theta: &[S; 4], x: &Vector<S, 2>) -> Vector<S, 2> {
        let r = growth_rates(theta, x);
        [x[0] * r[0], x[1] * r[1]]
    }

    fn diffusion<S: Scalar>(&self, _theta: &[S; 4], x: &Vector<S, 2>) -> Matrix<S, 2> {
        let zero = S::zero();
        [[x[0] * self.sigma[0], zero], [zero, x[1] * self.sigma[1]]]
    }

    fn positive_domain(&self) -> bool {
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlvAuxiliary {
    pub sigma: [f64; 2],
}

impl SlvAuxiliary {
    pub fn new(model: &SlvModel) -> Self {
        SlvAuxiliary { sigma: model.sigma }
    }

    /// Growth rates at the left and right anchors.
    fn anchor_rates<S: Scalar>(theta: &[S; 4], start: &[f64; 2], end: &[f64; 2]) -> ([S; 2], [S; 2]) {
        let c = |x: &[f64; 2]| [S::cst(x[0]), S::cst(x[1])];
        (growth_rates(theta, &c(start)), growth_rates(theta, &c(end)))
    }
}

/// Linear interpolant `r(s) = r₀(1 − s/L) + r₁ s/L` on `[0, L]`.
pub fn interpolated_rate<S: Scalar>(r0: S, r1: S, length: f64, s: f64) -> S {
    let w = s / length;
    r0 * (1.0 - w) + r1 * w
}

/// `∫_s^L r(u) du` for the linear interpolant, by the trapezoid rule (exact).
pub fn interpolated_rate_integral<S: Scalar>(r0: S, r1: S, length: f64, s: f64) -> S {
    (interpolated_rate(r0, r1, length, s) + r1) * ((length - s) * 0.5)
}

/// Log-normal density pack for the interpolated-rate geometric auxiliary.
/// `s` is time since the interval start, `length` the interval length.
pub fn slv_aux_density_pack<S: Scalar>(
    rates_start: [S; 2],
    rates_end: [S; 2],
    sigma: [f64; 2],
    s: f64,
    length: f64,
    x: &[S; 2],
    x_end: &[f64; 2],
) -> Result<DensityPack<S, 2>> {
    if x.iter().any(|v| v.value() <= 0.0) || x_end.iter().any(|&v| v <= 0.0) {
        return Err(MpdError::Domain("SLV auxiliary density needs positive states".into()));
    }
    let tau = length - s;
    if tau <= 0.0 {
        return Err(MpdError::Domain(format!(
            "auxiliary density at non-positive horizon {tau}"
        )));
    }
    let mut log_density = S::zero();
    let mut grad = [S::zero(); 2];
    let mut hessian = [[S::zero(); 2]; 2];
    for i in 0..2 {
        let var = sigma[i] * sigma[i] * tau;
        let drift =
            interpolated_rate_integral(rates_start[i], rates_end[i], length, s) - 0.5 * sigma[i] * sigma[i] * tau;
        let log_end = x_end[i].ln();
        let z = -(x[i].ln() + drift) + log_end;
        log_density += -(z * z) / (2.0 * var) - (log_end + 0.5 * (LOG_2PI + var.ln()));
        grad[i] = z / (x[i] * var);
        hessian[i][i] = -(z + 1.0) / (x[i] * x[i] * var);
    }
    Ok(DensityPack {
        log_density,
        grad,
        hessian,
    })
}

impl AuxiliaryModel<2, 4> for SlvAuxiliary {
    fn id(&self) -> &'static str {
        "slv-interpolated"
    }

    fn drift<S: Scalar>(&self, theta: &[S; 4], span: &BridgeSpan<2>, t: f64, x: &Vector<S, 2>) -> Vector<S, 2> {
        let (r0, r1) = Self::anchor_rates(theta, &span.start, &span.end);
        let s = t - span.t_start;
        std::array::from_fn(|i| x[i] * interpolated_rate(r0[i], r1[i], span.length(), s))
    }

    fn covariance<S: Scalar>(&self, _theta: &[S; 4], _span: &BridgeSpan<2>, _t: f64, x: &Vector<S, 2>) -> Matrix<S, 2> {
        let zero = S::zero();
        // Same rounding as the model's σσᵀ, so the endpoint match is bitwise.
        let v = |i: usize| (x[i] * self.sigma[i]) * (x[i] * self.sigma[i]);
        [[v(0), zero], [zero, v(1)]]
    }

    fn transition<S: Scalar>(
        &self,
        theta: &[S; 4],
        span: &BridgeSpan<2>,
        t: f64,
        x: &Vector<S, 2>,
    ) -> Result<DensityPack<S, 2>> {
        let (r0, r1) = Self::anchor_rates(theta, &span.start, &span.end);
        slv_aux_density_pack(r0, r1, self.sigma, t - span.t_start, span.length(), x, &span.end)
    }

    /// Candidate endpoints use rates frozen at the left state: geometric
    /// Brownian motion per component.
    fn sample_endpoint<R: Rng + ?Sized>(
        &self,
        theta: &[f64; 4],
        x: &[f64; 2],
        t_start: f64,
        t_end: f64,
        rng: &mut R,
    ) -> Result<[f64; 2]> {
        if x.iter().any(|&v| v <= 0.0) {
            return Err(MpdError::Domain("SLV endpoint proposal from non-positive state".into()));
        }
        let tau = t_end - t_start;
        let r = growth_rates(theta, x);
        Ok(std::array::from_fn(|i| {
            let z: f64 = rng.sample(StandardNormal);
            let s = self.sigma[i];
            x[i] * ((r[i] - 0.5 * s * s) * tau + s * tau.sqrt() * z).exp()
        }))
    }

    fn endpoint_log_density(
        &self,
        theta: &[f64; 4],
        x: &[f64; 2],
        t_start: f64,
        t_end: f64,
        u: &[f64; 2],
    ) -> Result<f64> {
        let r = growth_rates(theta, x);
        Ok(slv_aux_density_pack(r, r, self.sigma, 0.0, t_end - t_start, x, u)?.log_density)
    }
}
