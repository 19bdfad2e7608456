//! Forward-mode dual numbers carrying a full parameter-width tangent.
//!
//! All model, auxiliary and bridge code is written against [`Scalar`], so the
//! same routine evaluates plain `f64` values (cheap proposals) or
//! [`Dual<P>`] values (accepted draws, where the parameter gradient is needed).
//! The primal arithmetic of both paths is identical operation for operation,
//! so a dual evaluation reproduces the `f64` value bit for bit.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{MpdError, Result};

pub trait Scalar:
    Copy
    + Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign<f64>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn is_finite(self) -> bool;

    fn try_ln(self) -> Result<Self> {
        if self.value() > 0.0 {
            Ok(self.ln())
        } else {
            Err(MpdError::Domain(format!(
                "log of non-positive value {:e}",
                self.value()
            )))
        }
    }

    fn try_sqrt(self) -> Result<Self> {
        if self.value() >= 0.0 {
            Ok(self.sqrt())
        } else {
            Err(MpdError::Domain(format!("sqrt of negative value {:e}", self.value())))
        }
    }

    fn try_div(self, rhs: Self) -> Result<Self> {
        if rhs.value() != 0.0 {
            Ok(self / rhs)
        } else {
            Err(MpdError::Domain("division by zero".into()))
        }
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// A value together with its derivative along each of `N` parameter directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<const N: usize> {
    pub value: f64,
    pub tangent: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub const fn constant(value: f64) -> Self {
        Dual {
            value,
            tangent: [0.0; N],
        }
    }

    pub const fn new(value: f64, tangent: [f64; N]) -> Self {
        Dual { value, tangent }
    }

    /// Seeds direction `i` with unit tangent.
    pub fn variable(value: f64, i: usize) -> Self {
        let mut tangent = [0.0; N];
        tangent[i] = 1.0;
        Dual { value, tangent }
    }

    #[inline]
    fn chain(self, value: f64, slope: f64) -> Self {
        let mut tangent = self.tangent;
        for t in &mut tangent {
            *t *= slope;
        }
        Dual { value, tangent }
    }
}

/// Lifts a parameter point to duals seeded with the identity matrix.
pub fn lift<const N: usize>(theta: &[f64; N]) -> [Dual<N>; N] {
    std::array::from_fn(|i| Dual::variable(theta[i], i))
}

pub fn values<const N: usize, const M: usize>(xs: &[Dual<N>; M]) -> [f64; M] {
    std::array::from_fn(|i| xs[i].value)
}

pub fn constants<S: Scalar, const M: usize>(xs: &[f64; M]) -> [S; M] {
    std::array::from_fn(|i| S::cst(xs[i]))
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut tangent = self.tangent;
        for (t, r) in tangent.iter_mut().zip(rhs.tangent) {
            *t += r;
        }
        Dual {
            value: self.value + rhs.value,
            tangent,
        }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut tangent = self.tangent;
        for (t, r) in tangent.iter_mut().zip(rhs.tangent) {
            *t -= r;
        }
        Dual {
            value: self.value - rhs.value,
            tangent,
        }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut tangent = [0.0; N];
        for i in 0..N {
            tangent[i] = self.tangent[i] * rhs.value + self.value * rhs.tangent[i];
        }
        Dual {
            value: self.value * rhs.value,
            tangent,
        }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let value = self.value / rhs.value;
        let mut tangent = [0.0; N];
        for i in 0..N {
            tangent[i] = (self.tangent[i] - value * rhs.tangent[i]) / rhs.value;
        }
        Dual { value, tangent }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut tangent = self.tangent;
        for t in &mut tangent {
            *t = -*t;
        }
        Dual {
            value: -self.value,
            tangent,
        }
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: f64) -> Self {
        Dual {
            value: self.value + rhs,
            tangent: self.tangent,
        }
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: f64) -> Self {
        Dual {
            value: self.value - rhs,
            tangent: self.tangent,
        }
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        self.chain(self.value * rhs, rhs)
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        let mut tangent = self.tangent;
        for t in &mut tangent {
            *t /= rhs;
        }
        Dual {
            value: self.value / rhs,
            tangent,
        }
    }
}

impl<const N: usize> AddAssign for Dual<N> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<const N: usize> SubAssign for Dual<N> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<const N: usize> MulAssign<f64> for Dual<N> {
    #[inline]
    fn mul_assign(&mut self, rhs: f64) {
        *self = *self * rhs;
    }
}

impl<const N: usize> Scalar for Dual<N> {
    #[inline]
    fn cst(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline]
    fn value(self) -> f64 {
        self.value
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.chain(e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        self.chain(self.value.ln(), 1.0 / self.value)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.chain(s, 0.5 / s)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        let slope = match n {
            0 => 0.0,
            _ => n as f64 * self.value.powi(n - 1),
        };
        self.chain(self.value.powi(n), slope)
    }
    fn is_finite(self) -> bool {
        self.value.is_finite() && self.tangent.iter().all(|t| t.is_finite())
    }
}

// Small dense kernels on fixed-size arrays.

pub type Vector<S, const D: usize> = [S; D];
pub type Matrix<S, const D: usize> = [[S; D]; D];

pub fn zeros<S: Scalar, const D: usize>() -> Vector<S, D> {
    [S::zero(); D]
}

pub fn zero_matrix<S: Scalar, const D: usize>() -> Matrix<S, D> {
    [[S::zero(); D]; D]
}

pub fn dot<S: Scalar, const D: usize>(a: &Vector<S, D>, b: &Vector<S, D>) -> S {
    let mut acc = S::zero();
    for i in 0..D {
        acc += a[i] * b[i];
    }
    acc
}

pub fn mat_vec<S: Scalar, const D: usize>(m: &Matrix<S, D>, v: &Vector<S, D>) -> Vector<S, D> {
    std::array::from_fn(|i| dot(&m[i], v))
}

/// `aᵀ M b`.
pub fn quad_form<S: Scalar, const D: usize>(a: &Vector<S, D>, m: &Matrix<S, D>, b: &Vector<S, D>) -> S {
    dot(a, &mat_vec(m, b))
}

/// `Tr(A B)` without forming the product.
pub fn trace_of_product<S: Scalar, const D: usize>(a: &Matrix<S, D>, b: &Matrix<S, D>) -> S {
    let mut acc = S::zero();
    for i in 0..D {
        for j in 0..D {
            acc += a[i][j] * b[j][i];
        }
    }
    acc
}

pub fn outer<S: Scalar, const D: usize>(a: &Vector<S, D>, b: &Vector<S, D>) -> Matrix<S, D> {
    std::array::from_fn(|i| std::array::from_fn(|j| a[i] * b[j]))
}

/// `σ σᵀ`.
pub fn gram<S: Scalar, const D: usize>(sigma: &Matrix<S, D>) -> Matrix<S, D> {
    std::array::from_fn(|i| std::array::from_fn(|j| dot(&sigma[i], &sigma[j])))
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky<S: Scalar, const D: usize>(m: &Matrix<S, D>) -> Result<Matrix<S, D>> {
    let mut l = zero_matrix::<S, D>();
    for i in 0..D {
        for j in 0..=i {
            let mut s = m[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s.value() <= 0.0 {
                    return Err(MpdError::Domain("matrix is not positive definite".into()));
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Log density of `N(mean, cov)` at `x`.
pub fn gaussian_log_density<S: Scalar, const D: usize>(
    x: &Vector<S, D>,
    mean: &Vector<S, D>,
    cov: &Matrix<S, D>,
) -> Result<S> {
    let l = cholesky(cov)?;
    // forward substitution for L z = x - mean
    let mut z = zeros::<S, D>();
    let mut log_det = S::zero();
    for i in 0..D {
        let mut s = x[i] - mean[i];
        for k in 0..i {
            s -= l[i][k] * z[k];
        }
        z[i] = s / l[i][i];
        log_det += l[i][i].ln();
    }
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    Ok(-(dot(&z, &z) * 0.5) - log_det - half_log_2pi * D as f64)
}

/// Largest relative discrepancy between the forward-mode gradient and central
/// finite differences: `max_j |AD_j − FD_j| / max(1, |FD_j|)`.
pub fn grad_check<const N: usize>(
    value: impl Fn(&[f64; N]) -> f64,
    dual: impl Fn(&[Dual<N>; N]) -> Dual<N>,
    theta: &[f64; N],
    h: f64,
) -> f64 {
    let ad = dual(&lift(theta));
    let mut worst = 0.0f64;
    for j in 0..N {
        let mut plus = *theta;
        let mut minus = *theta;
        plus[j] += h;
        minus[j] -= h;
        let fd = (value(&plus) - value(&minus)) / (2.0 * h);
        let err = (ad.tangent[j] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lift_seeds_identity() {
        let d = lift(&[5.0]);
        assert_eq!(d[0].value, 5.0);
        assert_eq!(d[0].tangent, [1.0]);

        let d = lift(&[0.5, 1.0, 0.5, 0.5]);
        for (i, x) in d.iter().enumerate() {
            let mut e = [0.0; 4];
            e[i] = 1.0;
            assert_eq!(x.tangent, e);
        }
        assert_eq!(values(&d), [0.5, 1.0, 0.5, 0.5]);
    }

    #[test]
    fn elementary_rules() {
        let t = [0.3, -2.0];
        let e = Dual::new(0.0, t).exp();
        assert_eq!(e.value, 1.0);
        assert_eq!(e.tangent, t);
        let l = Dual::new(1.0, t).ln();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.tangent, t);
    }

    #[test]
    fn ou_drift_derivative() {
        // d/dθ of θ(μ − x) at θ=3, μ=10, x=9
        let [theta] = lift(&[3.0]);
        let drift = theta * (10.0 - 9.0);
        assert_eq!(drift.value, 3.0);
        assert_eq!(drift.tangent, [1.0]);
    }

    #[test]
    fn domain_errors() {
        assert!(Dual::<1>::constant(-1.0).try_ln().is_err());
        assert!(Dual::<1>::constant(0.0).try_ln().is_err());
        assert!((-4.0f64).try_sqrt().is_err());
        assert!(1.0f64.try_div(0.0).is_err());
    }

    #[test]
    fn grad_check_quadratic() {
        let err = grad_check(|t| t[0] * t[0], |t| t[0] * t[0], &[3.0], 1e-5);
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn gaussian_density_matches_scalar_formula() {
        let x = [1.3, -0.2];
        let mean = [1.0, 0.5];
        let cov = [[0.5, 0.1], [0.1, 0.3]];
        let got = gaussian_log_density(&x, &mean, &cov).unwrap();
        let det: f64 = 0.5 * 0.3 - 0.01;
        let inv = [[0.3 / det, -0.1 / det], [-0.1 / det, 0.5 / det]];
        let r = [0.3, -0.7];
        let q = r[0] * (inv[0][0] * r[0] + inv[0][1] * r[1]) + r[1] * (inv[1][0] * r[0] + inv[1][1] * r[1]);
        let want = -0.5 * q - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn matrix_kernels() {
        let a = [[1.0, 2.0], [3.0, 4.0]];
        let b = [[0.5, -1.0], [2.0, 0.25]];
        // Tr(AB) = (1*0.5 + 2*2) + (3*-1 + 4*0.25)
        assert_eq!(trace_of_product(&a, &b), 4.5 - 2.0);
        assert_eq!(quad_form(&[1.0, 1.0], &a, &[1.0, 0.0]), 4.0);
        assert_eq!(outer(&[1.0, 2.0], &[3.0, 4.0]), [[3.0, 4.0], [6.0, 8.0]]);
        assert_eq!(gram(&[[1.0, 0.0], [2.0, 3.0]]), [[1.0, 2.0], [2.0, 13.0]]);
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(b.abs()).max(1.0)
    }

    proptest! {
        // f(θ) = exp(a θ) · ln(θ² + 1) / sqrt(θ + 2)
        #[test]
        fn chain_rule_matches_symbolic(theta in -1.5f64..3.0, a in -1.0f64..1.0) {
            let [x] = lift(&[theta]);
            let f = (x * a).exp() * (x.powi(2) + 1.0).ln() / (x + 2.0).sqrt();
            let g = (a * theta).exp();
            let l = (theta * theta + 1.0).ln();
            let s = (theta + 2.0).sqrt();
            let df = a * g * l / s + g * (2.0 * theta / (theta * theta + 1.0)) / s
                - g * l * 0.5 / (s * s * s);
            prop_assert!((f.tangent[0] - df).abs() <= 1e-13 * df.abs().max(1.0));
            prop_assert!(close(f.value, g * l / s));
        }

        #[test]
        fn tangent_is_linear(u in -5.0f64..5.0, v in -5.0f64..5.0, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let [x, y] = lift(&[u, v]);
            let f = x * y;
            let g = x.exp() + y;
            let h = f * a + g * b;
            for i in 0..2 {
                let want = a * f.tangent[i] + b * g.tangent[i];
                prop_assert!(close(h.tangent[i], want));
            }
        }
    }
}
