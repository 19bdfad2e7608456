//! Diffusion models, time grids, Wiener increments and Euler–Maruyama stepping.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{constants, gram, mat_vec, Matrix, Scalar, Vector};
use crate::error::{MpdError, Result};

/// A diffusion `dX = μ_θ(X) dt + σ_θ(X) dW` with state dimension `D` and
/// parameter dimension `P`.
pub trait SdeModel<const D: usize, const P: usize>: Send + Sync {
    fn id(&self) -> &'static str;

    fn param_names(&self) -> [&'static str; P];

    fn drift<S: Scalar>(&self, theta: &[S; P], x: &Vector<S, D>) -> Vector<S, D>;

    fn diffusion<S: Scalar>(&self, theta: &[S; P], x: &Vector<S, D>) -> Matrix<S, D>;

    fn covariance<S: Scalar>(&self, theta: &[S; P], x: &Vector<S, D>) -> Matrix<S, D> {
        gram(&self.diffusion(theta, x))
    }

    /// States must stay componentwise positive.
    fn positive_domain(&self) -> bool {
        false
    }

    fn in_domain(&self, x: &[f64; D]) -> bool {
        x.iter().all(|v| v.is_finite()) && (!self.positive_domain() || x.iter().all(|&v| v > 0.0))
    }
}

/// Regular sub-step grid over one observation interval. The sub-step count is
/// authoritative; the spacing is derived from it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BridgeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub n_substeps: usize,
}

impl BridgeGrid {
    pub fn new(t_start: f64, t_end: f64, n_substeps: usize) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite()) || t_end <= t_start {
            return Err(MpdError::Grid(format!(
                "need t_end > t_start, got [{t_start}, {t_end}]"
            )));
        }
        if n_substeps == 0 {
            return Err(MpdError::Grid("grid needs at least one sub-step".into()));
        }
        Ok(BridgeGrid {
            t_start,
            t_end,
            n_substeps,
        })
    }

    /// Dyadic grid of spacing `2^-level`; the interval length must be a whole
    /// number of such steps.
    pub fn with_level(t_start: f64, t_end: f64, level: u32) -> Result<Self> {
        let exact = (t_end - t_start) * 2f64.powi(level as i32);
        let n = exact.round();
        if n < 1.0 || (exact - n).abs() > 1e-9 * exact.max(1.0) {
            return Err(MpdError::Grid(format!(
                "level {level} does not divide [{t_start}, {t_end}] evenly ({exact} steps)"
            )));
        }
        Self::new(t_start, t_end, n as usize)
    }

    pub fn length(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn delta(&self) -> f64 {
        self.length() / self.n_substeps as f64
    }

    /// Time of node `j`, `0 ≤ j ≤ n_substeps`.
    pub fn time(&self, j: usize) -> f64 {
        if j == self.n_substeps {
            self.t_end
        } else {
            self.t_start + self.length() * (j as f64 / self.n_substeps as f64)
        }
    }

    pub fn shifted(&self, t_start: f64) -> Result<Self> {
        Self::new(t_start, t_start + self.length(), self.n_substeps)
    }
}

pub fn make_grid(t0: f64, t1: f64, n_substeps: usize) -> Result<BridgeGrid> {
    BridgeGrid::new(t0, t1, n_substeps)
}

pub fn make_grid_level(t0: f64, t1: f64, level: u32) -> Result<BridgeGrid> {
    BridgeGrid::with_level(t0, t1, level)
}

/// The driving noise over one interval: `n_substeps` Gaussian vectors with
/// covariance `delta · I`.
#[derive(Clone, Debug, PartialEq)]
pub struct WienerIncrements<const D: usize> {
    pub increments: Vec<[f64; D]>,
}

impl<const D: usize> WienerIncrements<D> {
    pub fn zeros(n: usize) -> Self {
        WienerIncrements {
            increments: vec![[0.0; D]; n],
        }
    }

    /// Draws increments on `grid`, each one the sum of `fine_factor` finer
    /// increments. Grids with equal `n_substeps · fine_factor` consume the
    /// same normals, so coarse increments are sums of fine ones.
    pub fn sample<R: Rng + ?Sized>(grid: &BridgeGrid, fine_factor: usize, rng: &mut R) -> Self {
        let fine_factor = fine_factor.max(1);
        let fine_sd = (grid.delta() / fine_factor as f64).sqrt();
        let increments = (0..grid.n_substeps)
            .map(|_| {
                let mut acc = [0.0; D];
                for _ in 0..fine_factor {
                    for a in &mut acc {
                        let z: f64 = rng.sample(StandardNormal);
                        *a += z;
                    }
                }
                acc.map(|a| a * fine_sd)
            })
            .collect();
        WienerIncrements { increments }
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    pub fn scaled(&self, a: f64) -> Self {
        WienerIncrements {
            increments: self.increments.iter().map(|dw| dw.map(|v| v * a)).collect(),
        }
    }
}

/// One Euler–Maruyama step `x + drift·delta + diff·dW`.
pub fn em_step<S: Scalar, const D: usize>(
    x: &Vector<S, D>,
    drift: &Vector<S, D>,
    diff: &Matrix<S, D>,
    dw: &[f64; D],
    delta: f64,
    step: usize,
) -> Result<Vector<S, D>> {
    let noise = mat_vec(diff, &constants(dw));
    let next: Vector<S, D> = std::array::from_fn(|i| x[i] + drift[i] * delta + noise[i]);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(MpdError::NumericalBlowup { step })
    }
}

/// Forward Euler–Maruyama path from `x0` over `grid`, including both ends.
pub fn simulate_path<M, R, const D: usize, const P: usize>(
    model: &M,
    theta: &[f64; P],
    x0: &[f64; D],
    grid: &BridgeGrid,
    rng: &mut R,
) -> Result<Vec<[f64; D]>>
where
    M: SdeModel<D, P>,
    R: Rng + ?Sized,
{
    let noise = WienerIncrements::<D>::sample(grid, 1, rng);
    simulate_path_with_noise(model, theta, x0, grid, &noise)
}

pub fn simulate_path_with_noise<M, const D: usize, const P: usize>(
    model: &M,
    theta: &[f64; P],
    x0: &[f64; D],
    grid: &BridgeGrid,
    noise: &WienerIncrements<D>,
) -> Result<Vec<[f64; D]>>
where
    M: SdeModel<D, P>,
{
    if noise.len() != grid.n_substeps {
        return Err(MpdError::Grid(format!(
            "{} increments for {} sub-steps",
            noise.len(),
            grid.n_substeps
        )));
    }
    if !model.in_domain(x0) {
        return Err(MpdError::DomainExit { step: 0 });
    }
    let delta = grid.delta();
    let mut path = Vec::with_capacity(grid.n_substeps + 1);
    path.push(*x0);
    let mut x = *x0;
    for (j, dw) in noise.increments.iter().enumerate() {
        let drift = model.drift(theta, &x);
        let diff = model.diffusion(theta, &x);
        x = em_step(&x, &drift, &diff, dw, delta, j)?;
        if !model.in_domain(&x) {
            return Err(MpdError::DomainExit { step: j + 1 });
        }
        path.push(x);
    }
    Ok(path)
}
