//! Guided diffusion bridges and their discretised likelihood weights.
//!
//! For an interval `[s₁, s₂]` with endpoints `x` and `x′`, the guided proposal
//! runs the SDE with drift `μ_θ(x) + Σ_θ(x) ∇ₓ log f̃_{θ,t,s₂}(x′|x)`, where `f̃`
//! is the closed-form transition density of an auxiliary process. The
//! discretised weight is
//!
//! ```text
//! log R = Σ_j L(t_j, X_j) Δ + log f̃_{θ,s₁,s₂}(x′|x)
//! ```
//!
//! and its parameter gradient, taken with the driving noise held fixed, is the
//! score used by the martingale recursion.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::autodiff::{
    cholesky, constants, dot, gaussian_log_density, lift, mat_vec, outer, trace_of_product, Dual, Matrix, Scalar,
    Vector,
};
use crate::error::{MpdError, Result};
use crate::sde::{BridgeGrid, SdeModel, WienerIncrements};

/// Interval times and the two states being bridged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BridgeSpan<const D: usize> {
    pub t_start: f64,
    pub t_end: f64,
    pub start: [f64; D],
    pub end: [f64; D],
}

impl<const D: usize> BridgeSpan<D> {
    pub fn new(grid: &BridgeGrid, start: [f64; D], end: [f64; D]) -> Self {
        BridgeSpan {
            t_start: grid.t_start,
            t_end: grid.t_end,
            start,
            end,
        }
    }

    pub fn length(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// `log f̃_{θ,t,s₂}(x′|x)` with its gradient and Hessian in `x`.
#[derive(Clone, Copy, Debug)]
pub struct DensityPack<S, const D: usize> {
    pub log_density: S,
    pub grad: Vector<S, D>,
    pub hessian: Matrix<S, D>,
}

/// An auxiliary diffusion with tractable transition density used to guide the
/// bridge. The auxiliary may depend on the bridged endpoints.
pub trait AuxiliaryModel<const D: usize, const P: usize>: Send + Sync {
    fn id(&self) -> &'static str;

    fn drift<S: Scalar>(&self, theta: &[S; P], span: &BridgeSpan<D>, t: f64, x: &Vector<S, D>) -> Vector<S, D>;

    fn covariance<S: Scalar>(&self, theta: &[S; P], span: &BridgeSpan<D>, t: f64, x: &Vector<S, D>) -> Matrix<S, D>;

    /// Density of `span.end` at `span.t_end` given state `x` at time `t < span.t_end`.
    fn transition<S: Scalar>(
        &self,
        theta: &[S; P],
        span: &BridgeSpan<D>,
        t: f64,
        x: &Vector<S, D>,
    ) -> Result<DensityPack<S, D>>;

    /// Draws a candidate endpoint from a tractable law `q(·|x)` over `[t_start, t_end]`.
    /// For auxiliaries that do not depend on their endpoint this is `f̃` itself.
    fn sample_endpoint<R: Rng + ?Sized>(
        &self,
        theta: &[f64; P],
        x: &[f64; D],
        t_start: f64,
        t_end: f64,
        rng: &mut R,
    ) -> Result<[f64; D]>;

    /// `log q(u|x)` for the law used by [`AuxiliaryModel::sample_endpoint`].
    fn endpoint_log_density(
        &self,
        theta: &[f64; P],
        x: &[f64; D],
        t_start: f64,
        t_end: f64,
        u: &[f64; D],
    ) -> Result<f64>;
}

/// The state path of one bridge, including both imposed endpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeDraw<const D: usize> {
    pub path: Vec<[f64; D]>,
    pub noise: WienerIncrements<D>,
    pub start: [f64; D],
    pub end: [f64; D],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredWeight<const P: usize> {
    /// `log R^l`.
    pub log_weight: f64,
    /// `∇_θ log R^l` at fixed noise.
    pub score: [f64; P],
    /// `Σ_j L Δ`, the part of the weight without the endpoint density.
    pub exponent_sum: f64,
}

/// Result of a fused path-and-weight pass.
#[derive(Clone, Debug)]
pub struct Evaluated<S, const D: usize> {
    pub path: Vec<Vector<S, D>>,
    pub exponent_sum: S,
    pub log_weight: S,
}

struct NodeTerms<S, const D: usize> {
    log_density: S,
    guided_drift: Vector<S, D>,
    l: S,
    diffusion: Matrix<S, D>,
}

const PROBE_COUNT: usize = 100;

/// A target model paired with its auxiliary process.
#[derive(Clone, Debug)]
pub struct GuidedBridge<M, A, const D: usize, const P: usize> {
    pub model: M,
    pub aux: A,
}

impl<M, A, const D: usize, const P: usize> GuidedBridge<M, A, D, P>
where
    M: SdeModel<D, P>,
    A: AuxiliaryModel<D, P>,
{
    /// Pairs a model with an auxiliary, checking at `theta` and on random probe
    /// states that `Σ_θ` is positive definite, that `Σ̃_θ(s₂, x′) = Σ_θ(x′)`,
    /// and that the auxiliary's x-derivatives agree with finite differences.
    pub fn new(model: M, aux: A, theta: &[f64; P], probe_gap: f64) -> Result<Self> {
        let bridge = GuidedBridge { model, aux };
        bridge.check_contracts(theta, probe_gap)?;
        Ok(bridge)
    }

    /// Skips construction checks.
    pub fn unchecked(model: M, aux: A) -> Self {
        GuidedBridge { model, aux }
    }

    fn check_contracts(&self, theta: &[f64; P], gap: f64) -> Result<()> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..PROBE_COUNT {
            let x = probe_state(&self.model, &mut rng);
            let x_end = probe_state(&self.model, &mut rng);
            cholesky(&self.model.covariance(theta, &x))
                .map_err(|_| MpdError::Model(format!("diffusion matrix not positive definite at {x:?}")))?;

            let span = BridgeSpan {
                t_start: 0.0,
                t_end: gap,
                start: x,
                end: x_end,
            };
            let target = self.model.covariance(theta, &x_end);
            let aux = self.aux.covariance(theta, &span, gap, &x_end);
            let mismatch = (0..D)
                .flat_map(|i| (0..D).map(move |j| (i, j)))
                .map(|(i, j)| (target[i][j] - aux[i][j]).abs())
                .fold(0.0, f64::max);
            if mismatch > 1e-10 {
                return Err(MpdError::Model(format!(
                    "auxiliary covariance does not match the model at the endpoint (gap {mismatch:e})"
                )));
            }

            let t = rng.random_range(0.0..0.75) * gap;
            let err = derivative_mismatch(&self.aux, theta, &span, t, &x)?;
            if err > 1e-6 {
                return Err(MpdError::Model(format!(
                    "auxiliary density derivatives disagree with finite differences ({err:e})"
                )));
            }
        }
        Ok(())
    }

    /// `μ_θ(x) + Σ_θ(x) ∇ₓ log f̃_{θ,t,s₂}(x′|x)`.
    pub fn guided_drift<S: Scalar>(
        &self,
        theta: &[S; P],
        span: &BridgeSpan<D>,
        t: f64,
        x: &Vector<S, D>,
    ) -> Result<Vector<S, D>> {
        Ok(self.node(theta, span, t, x)?.guided_drift)
    }

    /// The integrand of the log Radon–Nikodym derivative between the
    /// conditioned target and the guided proposal.
    pub fn l_functional<S: Scalar>(&self, theta: &[S; P], span: &BridgeSpan<D>, t: f64, x: &Vector<S, D>) -> Result<S> {
        Ok(self.node(theta, span, t, x)?.l)
    }

    fn node<S: Scalar>(
        &self,
        theta: &[S; P],
        span: &BridgeSpan<D>,
        t: f64,
        x: &Vector<S, D>,
    ) -> Result<NodeTerms<S, D>> {
        let pack = self.aux.transition(theta, span, t, x)?;
        let mu = self.model.drift(theta, x);
        let diffusion = self.model.diffusion(theta, x);
        let cov = crate::autodiff::gram(&diffusion);
        let mu_aux = self.aux.drift(theta, span, t, x);
        let cov_aux = self.aux.covariance(theta, span, t, x);

        let pull = mat_vec(&cov, &pack.grad);
        let guided_drift = std::array::from_fn(|i| mu[i] + pull[i]);

        let drift_gap: Vector<S, D> = std::array::from_fn(|i| mu[i] - mu_aux[i]);
        let cov_gap: Matrix<S, D> = std::array::from_fn(|i| std::array::from_fn(|j| cov[i][j] - cov_aux[i][j]));
        let gg = outer(&pack.grad, &pack.grad);
        let curvature: Matrix<S, D> = std::array::from_fn(|i| std::array::from_fn(|j| -pack.hessian[i][j] - gg[i][j]));
        let l = dot(&drift_gap, &pack.grad) - trace_of_product(&cov_gap, &curvature) * 0.5;
        Ok(NodeTerms {
            log_density: pack.log_density,
            guided_drift,
            l,
            diffusion,
        })
    }

    fn check_state(&self, x: &Vector<impl Scalar, D>, step: usize) -> Result<()> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(MpdError::NumericalBlowup { step });
        }
        if self.model.positive_domain() && x.iter().any(|v| v.value() <= 0.0) {
            return Err(MpdError::DomainExit { step });
        }
        Ok(())
    }

    /// Guided Euler–Maruyama path: steps `j = 0..n−2` are simulated and the
    /// final node is the imposed endpoint.
    pub fn bridge_path<S: Scalar>(
        &self,
        theta: &[S; P],
        span: &BridgeSpan<D>,
        grid: &BridgeGrid,
        noise: &WienerIncrements<D>,
    ) -> Result<Vec<Vector<S, D>>> {
        Ok(self.evaluate(theta, span, grid, noise)?.path)
    }

    /// Log weight of an existing path.
    pub fn log_r<S: Scalar>(
        &self,
        theta: &[S; P],
        span: &BridgeSpan<D>,
        grid: &BridgeGrid,
        path: &[Vector<S, D>],
    ) -> Result<(S, S)> {
        if path.len() != grid.n_substeps + 1 {
            return Err(MpdError::Grid(format!(
                "path has {} nodes for {} sub-steps",
                path.len(),
                grid.n_substeps
            )));
        }
        let delta = grid.delta();
        let mut exponent = S::zero();
        for (j, x) in path[..grid.n_substeps].iter().enumerate() {
            exponent += self.l_functional(theta, span, grid.time(j), x)? * delta;
        }
        let endpoint = self
            .aux
            .transition(theta, span, span.t_start, &constants(&span.start))?;
        Ok((exponent, exponent + endpoint.log_density))
    }

    /// Builds the guided path from `noise` and accumulates its log weight in
    /// the same pass.
    pub fn evaluate<S: Scalar>(
        &self,
        theta: &[S; P],
        span: &BridgeSpan<D>,
        grid: &BridgeGrid,
        noise: &WienerIncrements<D>,
    ) -> Result<Evaluated<S, D>> {
        let n = grid.n_substeps;
        if noise.len() != n {
            return Err(MpdError::Grid(format!(
                "{} increments for {} sub-steps",
                noise.len(),
                n
            )));
        }
        let delta = grid.delta();
        let mut path = Vec::with_capacity(n + 1);
        let mut x: Vector<S, D> = constants(&span.start);
        path.push(x);
        let mut exponent = S::zero();
        let mut log_endpoint = S::zero();
        for j in 0..n {
            let node = self.node(theta, span, grid.time(j), &x)?;
            if j == 0 {
                // f̃_{θ,s₁,s₂}(x′|x)
                log_endpoint = node.log_density;
            }
            exponent += node.l * delta;
            if j + 1 < n {
                let noise_term = mat_vec(&node.diffusion, &constants(&noise.increments[j]));
                x = std::array::from_fn(|i| x[i] + node.guided_drift[i] * delta + noise_term[i]);
                self.check_state(&x, j + 1)?;
                path.push(x);
            }
        }
        path.push(constants(&span.end));
        if !exponent.is_finite() || !log_endpoint.is_finite() {
            return Err(MpdError::NumericalBlowup { step: n });
        }
        Ok(Evaluated {
            path,
            exponent_sum: exponent,
            log_weight: exponent + log_endpoint,
        })
    }

    /// `(exponent_sum, log_weight)` without derivatives.
    pub fn weight(
        &self,
        theta: &[f64; P],
        span: &BridgeSpan<D>,
        grid: &BridgeGrid,
        noise: &WienerIncrements<D>,
    ) -> Result<(f64, f64)> {
        let e = self.evaluate(theta, span, grid, noise)?;
        Ok((e.exponent_sum, e.log_weight))
    }

    /// Path and weight with the parameter gradient of the log weight.
    pub fn score_draw(
        &self,
        theta: &[f64; P],
        span: &BridgeSpan<D>,
        grid: &BridgeGrid,
        noise: &WienerIncrements<D>,
    ) -> Result<(BridgeDraw<D>, ScoredWeight<P>)> {
        let e: Evaluated<Dual<P>, D> = self.evaluate(&lift(theta), span, grid, noise)?;
        let draw = BridgeDraw {
            path: e.path.iter().map(|x| x.map(|v| v.value)).collect(),
            noise: noise.clone(),
            start: span.start,
            end: span.end,
        };
        let weight = ScoredWeight {
            log_weight: e.log_weight.value,
            score: e.log_weight.tangent,
            exponent_sum: e.exponent_sum.value,
        };
        Ok((draw, weight))
    }
}

fn probe_state<M: SdeModel<D, P>, R: Rng, const D: usize, const P: usize>(model: &M, rng: &mut R) -> [f64; D] {
    std::array::from_fn(|_| {
        let u: f64 = rng.random_range(-1.0..1.0);
        if model.positive_domain() {
            u.exp()
        } else {
            u
        }
    })
}

/// Largest relative gap between the auxiliary's analytic x-gradient/Hessian
/// and central differences of its log density (and of its gradient).
pub fn derivative_mismatch<A, const D: usize, const P: usize>(
    aux: &A,
    theta: &[f64; P],
    span: &BridgeSpan<D>,
    t: f64,
    x: &[f64; D],
) -> Result<f64>
where
    A: AuxiliaryModel<D, P>,
{
    let pack = aux.transition(theta, span, t, x)?;
    let mut worst = 0.0f64;
    for i in 0..D {
        let h = 1e-5 * x[i].abs().max(1.0);
        let mut plus = *x;
        let mut minus = *x;
        plus[i] += h;
        minus[i] -= h;
        let p = aux.transition(theta, span, t, &plus)?;
        let m = aux.transition(theta, span, t, &minus)?;
        let fd = (p.log_density - m.log_density) / (2.0 * h);
        worst = worst.max((pack.grad[i] - fd).abs() / pack.grad[i].abs().max(1.0));
        for j in 0..D {
            let fd = (p.grad[j] - m.grad[j]) / (2.0 * h);
            worst = worst.max((pack.hessian[i][j] - fd).abs() / pack.hessian[i][j].abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Self-normalised importance estimate of the score of the Euler transition
/// density over one interval, using unguided forward Euler proposals for the
/// interior and weighting by the last Euler step into the fixed endpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NaiveScore<const P: usize> {
    pub estimate: [f64; P],
    /// Delta-method variance of the self-normalised estimate.
    pub variance: [f64; P],
    pub ess: f64,
}

pub fn naive_score_estimator<M, R, const D: usize, const P: usize>(
    model: &M,
    theta: &[f64; P],
    x: &[f64; D],
    x_end: &[f64; D],
    grid: &BridgeGrid,
    n_samples: usize,
    rng: &mut R,
) -> Result<NaiveScore<P>>
where
    M: SdeModel<D, P>,
    R: Rng + ?Sized,
{
    if n_samples < 2 {
        return Err(MpdError::Precondition(
            "naive estimator needs at least two samples".into(),
        ));
    }
    let n = grid.n_substeps;
    let delta = grid.delta();
    let theta_d = lift(theta);
    let euler_log_density = |from: &[f64; D], to: &[f64; D]| -> Result<Dual<P>> {
        let from_d = constants::<Dual<P>, D>(from);
        let drift = model.drift(&theta_d, &from_d);
        let mean: Vector<Dual<P>, D> = std::array::from_fn(|i| from_d[i] + drift[i] * delta);
        let cov = model.covariance(&theta_d, &from_d);
        let cov: Matrix<Dual<P>, D> = std::array::from_fn(|i| std::array::from_fn(|j| cov[i][j] * delta));
        gaussian_log_density(&constants(to), &mean, &cov)
    };

    if n == 1 {
        let s = euler_log_density(x, x_end)?;
        return Ok(NaiveScore {
            estimate: s.tangent,
            variance: [0.0; P],
            ess: n_samples as f64,
        });
    }

    let mut log_w = Vec::with_capacity(n_samples);
    let mut scores = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut state = *x;
        let mut total = Dual::<P>::constant(0.0);
        let mut exited = false;
        for _ in 0..n - 1 {
            let drift = model.drift(theta, &state);
            let diff = model.diffusion(theta, &state);
            let z: [f64; D] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal) * delta.sqrt());
            let noise = mat_vec(&diff, &z);
            let next: [f64; D] = std::array::from_fn(|i| state[i] + drift[i] * delta + noise[i]);
            if !model.in_domain(&next) {
                exited = true;
                break;
            }
            total += euler_log_density(&state, &next)?;
            state = next;
        }
        if exited {
            continue;
        }
        let last = euler_log_density(&state, x_end)?;
        total += last;
        log_w.push(last.value);
        scores.push(total.tangent);
    }

    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(MpdError::DegenerateWeights { ess: 0.0 });
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    let sum_sq: f64 = w.iter().map(|v| v * v).sum();
    let ess = sum * sum / sum_sq;
    if ess < 2.0 {
        return Err(MpdError::DegenerateWeights { ess });
    }
    let mut estimate = [0.0; P];
    for (wi, s) in w.iter().zip(&scores) {
        for p in 0..P {
            estimate[p] += wi * s[p] / sum;
        }
    }
    let mut variance = [0.0; P];
    for (wi, s) in w.iter().zip(&scores) {
        let wn = wi / sum;
        for p in 0..P {
            variance[p] += wn * wn * (s[p] - estimate[p]).powi(2);
        }
    }
    Ok(NaiveScore {
        estimate,
        variance,
        ess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::models::ou::{ou_aux_density_pack, ou_exact_score, ou_exact_transition, ou_log_density};
    use crate::models::{OuAuxiliary, OuModel, SlvAuxiliary, SlvModel};
    use crate::sde::make_grid;
    use rand_chacha::ChaCha8Rng;

    fn ou_span(x: f64, x_end: f64) -> BridgeSpan<1> {
        BridgeSpan {
            t_start: 0.0,
            t_end: 0.2,
            start: [x],
            end: [x_end],
        }
    }

    #[test]
    fn trivial_auxiliary_has_zero_l_and_exact_weight() {
        let model = OuModel::benchmark();
        let bridge = GuidedBridge::new(model, OuAuxiliary::tied(&model), &[3.0], 0.2).unwrap();
        let grid = make_grid(0.0, 0.2, 16).unwrap();
        let span = ou_span(9.7, 10.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let noise = WienerIncrements::sample(&grid, 1, &mut rng);
            let e: Evaluated<f64, 1> = bridge.evaluate(&[3.0], &span, &grid, &noise).unwrap();
            for (j, x) in e.path[..16].iter().enumerate() {
                assert!(bridge.l_functional(&[3.0], &span, grid.time(j), x).unwrap().abs() <= 1e-12);
            }
            let exact = ou_log_density(3.0, 10.0, 0.5, 0.2, 9.7, 10.3);
            assert!((e.log_weight - exact).abs() <= 1e-10);
            let (_, w) = bridge.score_draw(&[3.0], &span, &grid, &noise).unwrap();
            let score = ou_exact_score(3.0, 10.0, 0.5, 0.2, 9.7, 10.3).unwrap();
            assert!((w.score[0] - score).abs() <= 1e-10 * score.abs().max(1.0));
        }
    }

    #[test]
    fn guided_drift_matches_closed_form() {
        let model = OuModel::benchmark();
        let bridge = GuidedBridge::unchecked(model, OuAuxiliary::tied(&model));
        let span = ou_span(9.7, 10.3);
        let (t, x) = (0.05, 9.9);
        let (m, v) = ou_exact_transition(3.0, 10.0, 0.5, 0.2 - t, x).unwrap();
        let expected = 3.0 * (10.0 - x) + 0.25 * (10.3 - m) * (-3.0f64 * (0.2 - t)).exp() / v;
        let got = bridge.guided_drift(&[3.0], &span, t, &[x]).unwrap()[0];
        assert!((got - expected).abs() < 1e-10);

        // endpoint at the conditional mean: no pull
        let at_mean = ou_span(9.7, m);
        let got = bridge.guided_drift(&[3.0], &at_mean, t, &[x]).unwrap()[0];
        assert!((got - 3.0 * (10.0 - x)).abs() < 1e-10);
    }

    #[test]
    fn drift_pulls_harder_near_the_end() {
        let model = OuModel::benchmark();
        let bridge = GuidedBridge::unchecked(model, OuAuxiliary::tied(&model));
        let span = ou_span(10.0, 10.5);
        let mut last = 0.0;
        for gap in [1e-1, 1e-2, 1e-3, 1e-4] {
            let d = bridge.guided_drift(&[3.0], &span, 0.2 - gap, &[10.0]).unwrap()[0];
            // |x′ − x| / gap asymptotically
            if gap <= 1e-3 {
                assert!((d * gap / 0.5 - 1.0).abs() < 0.01);
            }
            assert!(d > last);
            last = d;
        }
    }

    #[test]
    fn mismatched_rate_l_matches_hand_formula() {
        let model = OuModel::benchmark();
        let bridge = GuidedBridge::unchecked(model, OuAuxiliary::fixed(&model, 5.0));
        let span = ou_span(9.7, 10.3);
        for &(t, x) in &[(0.0, 9.7), (0.1, 10.05), (0.1875, 10.4)] {
            let pack = ou_aux_density_pack(5.0, 10.0, 0.5, t, 0.2, x, 10.3).unwrap();
            let expected = (3.0 - 5.0) * (10.0 - x) * pack.grad[0];
            let got = bridge.l_functional(&[3.0], &span, t, &[x]).unwrap();
            assert!((got - expected).abs() < 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn slv_l_is_trace_only_at_left_anchor() {
        let model = SlvModel::benchmark();
        let aux = SlvAuxiliary::new(&model);
        let bridge = GuidedBridge::new(model, aux, &[1.0, 0.5, 0.3, 0.8], 0.1).unwrap();
        let theta = [1.0, 0.5, 0.3, 0.8];
        let span = BridgeSpan {
            t_start: 0.0,
            t_end: 0.1,
            start: [1.1, 0.9],
            end: [1.2, 0.85],
        };
        let mu = model.drift(&theta, &span.start);
        let mu_aux = bridge.aux.drift(&theta, &span, 0.0, &span.start);
        assert!((mu[0] - mu_aux[0]).abs() < 1e-15 && (mu[1] - mu_aux[1]).abs() < 1e-15);
        // Σ̃ = Σ everywhere for this auxiliary, so the trace term vanishes too.
        let l = bridge.l_functional(&theta, &span, 0.0, &span.start).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn single_substep_path_is_just_endpoints() {
        let model = OuModel::benchmark();
        let bridge = GuidedBridge::unchecked(model, OuAuxiliary::fixed(&model, 5.0));
        let grid = make_grid(0.0, 0.2, 1).unwrap();
        let path: Vec<[f64; 1]> = bridge
            .bridge_path(
                &[3.0],
                &ou_span(9.0, 11.0),
                &grid,
                &WienerIncrements::sample(&grid, 1, &mut ChaCha8Rng::seed_from_u64(3)),
            )
            .unwrap();
        assert_eq!(path, vec![[9.0], [11.0]]);
    }

    #[test]
    fn zero_noise_at_the_mean_stays_put() {
        let model = OuModel::benchmark();
        let bridge = GuidedBridge::unchecked(model, OuAuxiliary::tied(&model));
        let grid = make_grid(0.0, 0.2, 16).unwrap();
        let path: Vec<[f64; 1]> = bridge
            .bridge_path(&[3.0], &ou_span(10.0, 10.0), &grid, &WienerIncrements::zeros(16))
            .unwrap();
        assert!(path.iter().all(|x| x[0] == 10.0));
    }

    #[test]
    fn construction_rejects_zero_diffusion() {
        let model = OuModel::new(10.0, 0.0).unwrap();
        let err = GuidedBridge::new(model, OuAuxiliary::tied(&model), &[3.0], 0.2).unwrap_err();
        assert!(matches!(err, MpdError::Model(_)));
    }

    #[test]
    fn ou_score_passes_grad_check() {
        let model = OuModel::benchmark();
        let bridge = GuidedBridge::unchecked(model, OuAuxiliary::fixed(&model, 5.0));
        let grid = make_grid(0.0, 0.2, 16).unwrap();
        let span = ou_span(9.8, 10.25);
        let noise = WienerIncrements::sample(&grid, 1, &mut ChaCha8Rng::seed_from_u64(9));
        let err = grad_check(
            |th| bridge.weight(th, &span, &grid, &noise).unwrap().1,
            |th| bridge.evaluate(th, &span, &grid, &noise).unwrap().log_weight,
            &[3.0],
            1e-5,
        );
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn slv_score_passes_grad_check() {
        let model = SlvModel::benchmark();
        let bridge = GuidedBridge::unchecked(model, SlvAuxiliary::new(&model));
        let grid = make_grid(0.0, 0.1, 8).unwrap();
        let span = BridgeSpan {
            t_start: 0.0,
            t_end: 0.1,
            start: [1.0, 1.0],
            end: [1.05, 0.96],
        };
        let noise = WienerIncrements::sample(&grid, 1, &mut ChaCha8Rng::seed_from_u64(10));
        let err = grad_check(
            |th| bridge.weight(th, &span, &grid, &noise).unwrap().1,
            |th| bridge.evaluate(th, &span, &grid, &noise).unwrap().log_weight,
            &[1.0, 0.5, 0.3, 0.8],
            1e-5,
        );
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn log_r_agrees_with_fused_pass() {
        let model = OuModel::benchmark();
        let bridge = GuidedBridge::unchecked(model, OuAuxiliary::fixed(&model, 5.0));
        let grid = make_grid(0.0, 0.2, 16).unwrap();
        let span = ou_span(9.8, 10.25);
        let noise = WienerIncrements::sample(&grid, 1, &mut ChaCha8Rng::seed_from_u64(11));
        let e: Evaluated<f64, 1> = bridge.evaluate(&[3.0], &span, &grid, &noise).unwrap();
        let (ex, lw) = bridge.log_r(&[3.0], &span, &grid, &e.path).unwrap();
        assert_eq!(ex, e.exponent_sum);
        assert!((lw - e.log_weight).abs() < 1e-12);
    }

    #[test]
    fn naive_single_step_has_no_variance() {
        let model = OuModel::benchmark();
        let grid = make_grid(0.0, 0.2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let est = naive_score_estimator(&model, &[3.0], &[9.8], &[10.1], &grid, 10, &mut rng).unwrap();
        assert_eq!(est.variance, [0.0]);
        // Euler one-step: N(x + θ(μ−x)Δ, σ²Δ); d/dθ = r (μ−x) / σ²
        let r = 10.1 - (9.8 + 3.0 * 0.2 * 0.2);
        assert!((est.estimate[0] - r * 0.2 / 0.25).abs() < 1e-12);
        assert!(matches!(
            naive_score_estimator(&model, &[3.0], &[9.8], &[10.1], &grid, 1, &mut rng),
            Err(MpdError::Precondition(_))
        ));
    }
}
