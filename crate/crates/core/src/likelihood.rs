//! Penalized OU negative log-likelihood and its nested value functions.
//!
//! For a portfolio path `x = S w` with `T` transitions the objective is
//!
//! ```text
//! f(w, a, c, θ) = -η/2 ||w||² + ½ ln a + γ c + ||x_{1:T} - c x_{0:T-1} - θ(1-c)||² / (2 T a)
//! ```
//!
//! `θ`, `c` and (for γ = 0) `a` have closed-form minimizers, giving
//! `f1(w, a, c) = min_θ f`, `f2(w, a) = min_c f1` and `f3(w) = min_a f2`.
//! Everything past `θ` is expressed through the centered lag vectors
//! `b0 = B x_{0:T-1}` and `b1 = B x_{1:T}` with `B = I - 11ᵀ/T`.
//!
//! With γ > 0, `f2(w, ·)` has a local minimum at the smaller root of a
//! quadratic and falls without bound as `a → ∞` (the γc term rewards
//! `c → -∞`). `f3` always refers to that local minimum.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ou_model::ARParams;

/// `|1 - c|` below this leaves `θ` undetermined.
pub const THETA_EPS: f64 = 1e-8;

/// Relative residual energy below which a fit counts as exact.
const EXACT_FIT_REL: f64 = 1e-24;

/// Feasibility tolerance on `||w||_1`.
pub const FEASIBILITY_TOL: f64 = 1e-10;

/// Portfolio weights on the L1 unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Weights(DVector<f64>);

impl Weights {
    pub fn new(w: DVector<f64>) -> Result<Self> {
        if let Some(i) = w.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let l1 = w.lp_norm(1);
        if (l1 - 1.0).abs() > FEASIBILITY_TOL {
            return Err(Error::InvalidParameter(format!("weights have L1 norm {l1}, expected 1")));
        }
        Ok(Weights(w))
    }

    pub(crate) fn new_unchecked(w: DVector<f64>) -> Self {
        Weights(w)
    }

    /// Uniform weights `1/m`.
    pub fn uniform(m: usize) -> Self {
        Weights(DVector::from_element(m, 1.0 / m as f64))
    }

    pub fn basis(m: usize, i: usize) -> Self {
        let mut e = DVector::zeros(m);
        e[i] = 1.0;
        Weights(e)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Weights {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Weights::new(DVector::from_vec(v))
    }
}

impl From<Weights> for Vec<f64> {
    fn from(w: Weights) -> Self {
        w.0.as_slice().to_vec()
    }
}

/// Regularization strengths: `gamma` on the lag coefficient, `eta` on the
/// concave `-η/2 ||w||²` sparsity term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub gamma: f64,
    pub eta: f64,
}

impl PenaltyConfig {
    pub fn new(gamma: f64, eta: f64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) || !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "penalties must be finite and non-negative (gamma={gamma}, eta={eta})"
            )));
        }
        Ok(PenaltyConfig { gamma, eta })
    }

    pub fn none() -> Self {
        PenaltyConfig { gamma: 0.0, eta: 0.0 }
    }

    fn sparsity_term(&self, w: &DVector<f64>) -> f64 {
        -0.5 * self.eta * w.norm_squared()
    }
}

/// Centered lagged portfolio path.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredLags {
    pub b0: Vec<f64>,
    pub b1: Vec<f64>,
    pub mean0: f64,
    pub mean1: f64,
    pub len: usize,
}

pub fn centered_lags(x: &[f64]) -> Result<CenteredLags> {
    if x.len() < 3 {
        return Err(Error::SeriesTooShort { len: x.len(), min: 3 });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let t = x.len() - 1;
    let mean0 = x[..t].iter().sum::<f64>() / t as f64;
    let mean1 = x[1..].iter().sum::<f64>() / t as f64;
    Ok(CenteredLags {
        b0: x[..t].iter().map(|v| v - mean0).collect(),
        b1: x[1..].iter().map(|v| v - mean1).collect(),
        mean0,
        mean1,
        len: t,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl CenteredLags {
    /// `||b0||²`
    pub fn p(&self) -> f64 {
        dot(&self.b0, &self.b0)
    }

    /// `||b1||²`
    pub fn q(&self) -> f64 {
        dot(&self.b1, &self.b1)
    }

    /// `b0ᵀ b1`
    pub fn r(&self) -> f64 {
        dot(&self.b0, &self.b1)
    }

    /// `||b1 - c b0||²`
    pub fn residual_sq(&self, c: f64) -> f64 {
        self.b0.iter().zip(&self.b1).map(|(x0, x1)| (x1 - c * x0).powi(2)).sum()
    }

    fn checked_p(&self) -> Result<f64> {
        let p = self.p();
        let scale = self.mean0.abs().max(self.mean1.abs()).max(f64::MIN_POSITIVE);
        let floor = self.len as f64 * (4.0 * f64::EPSILON * scale).powi(2);
        if !(p > floor) {
            return Err(Error::DegeneratePortfolio);
        }
        Ok(p)
    }

    /// Least-squares slope of `b1` on `b0`.
    pub fn ols_slope(&self) -> Result<f64> {
        Ok(self.r() / self.checked_p()?)
    }

    /// `||b1 - ĉ b0||²` at the least-squares slope; equals `(pq - r²)/p`.
    fn ols_residual_sq(&self) -> Result<f64> {
        let c = self.ols_slope()?;
        Ok(self.residual_sq(c))
    }

    fn is_exact_fit(&self, resid: f64) -> bool {
        resid <= EXACT_FIT_REL * self.q().max(self.p())
    }
}

/// Column-centered lag matrices of a price history, so that the lags of any
/// portfolio are `b0 = X0c w` and `b1 = X1c w`.
#[derive(Debug, Clone)]
pub struct CenteredDesign {
    pub x0c: DMatrix<f64>,
    pub x1c: DMatrix<f64>,
    pub mean0: DVector<f64>,
    pub mean1: DVector<f64>,
}

impl CenteredDesign {
    pub fn new(s: &DMatrix<f64>) -> Result<Self> {
        let rows = s.nrows();
        if rows < 3 {
            return Err(Error::SeriesTooShort { len: rows, min: 3 });
        }
        if let Some(i) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let t = rows - 1;
        let mut x0c = s.rows(0, t).into_owned();
        let mut x1c = s.rows(1, t).into_owned();
        let mean0 = DVector::from_iterator(s.ncols(), x0c.column_iter().map(|c| c.mean()));
        let mean1 = DVector::from_iterator(s.ncols(), x1c.column_iter().map(|c| c.mean()));
        for j in 0..s.ncols() {
            x0c.column_mut(j).add_scalar_mut(-mean0[j]);
            x1c.column_mut(j).add_scalar_mut(-mean1[j]);
        }
        Ok(CenteredDesign { x0c, x1c, mean0, mean1 })
    }

    pub fn transitions(&self) -> usize {
        self.x0c.nrows()
    }

    pub fn assets(&self) -> usize {
        self.x0c.ncols()
    }

    pub fn lags(&self, w: &DVector<f64>) -> Result<CenteredLags> {
        if w.len() != self.assets() {
            return Err(Error::DimensionMismatch { expected: self.assets(), got: w.len() });
        }
        let b0 = &self.x0c * w;
        let b1 = &self.x1c * w;
        Ok(CenteredLags {
            b0: b0.as_slice().to_vec(),
            b1: b1.as_slice().to_vec(),
            mean0: self.mean0.dot(w),
            mean1: self.mean1.dot(w),
            len: self.transitions(),
        })
    }
}

/// The full objective `f(w, a, c, θ)` evaluated on raw prices.
pub fn objective_full(
    s: &DMatrix<f64>,
    w: &DVector<f64>,
    a: f64,
    c: f64,
    theta: f64,
    pen: &PenaltyConfig,
) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::NonPositiveVariance(a));
    }
    if w.len() != s.ncols() {
        return Err(Error::DimensionMismatch { expected: s.ncols(), got: w.len() });
    }
    let x = s * w;
    let t = x.len() - 1;
    let level = theta * (1.0 - c);
    let rss: f64 = (1..=t).map(|i| (x[i] - c * x[i - 1] - level).powi(2)).sum();
    Ok(pen.sparsity_term(w) + 0.5 * a.ln() + pen.gamma * c + rss / (2.0 * t as f64 * a))
}

pub fn theta_star(lags: &CenteredLags, c: f64) -> Result<f64> {
    let gap = 1.0 - c;
    if gap.abs() <= THETA_EPS {
        return Err(Error::ThetaUndefined(gap.abs()));
    }
    Ok((lags.mean1 - c * lags.mean0) / gap)
}

/// `θ*`, falling back to the mean of `x_{1:T}` when `c` is too close to 1.
pub fn theta_star_or_mean(lags: &CenteredLags, c: f64) -> (f64, bool) {
    match theta_star(lags, c) {
        Ok(t) => (t, false),
        Err(_) => (lags.mean1, true),
    }
}

/// `c*(a) = (b0ᵀb1 - T a γ) / ||b0||²`.
pub fn c_star(lags: &CenteredLags, a: f64, gamma: f64) -> Result<f64> {
    let p = lags.checked_p()?;
    Ok((lags.r() - lags.len as f64 * a * gamma) / p)
}

/// Closed-form innovation variance for γ = 0.
pub fn a_star_gamma0(lags: &CenteredLags) -> Result<f64> {
    let resid = lags.ols_residual_sq()?;
    if lags.is_exact_fit(resid) {
        return Err(Error::ExactFitDegenerate);
    }
    Ok(resid / lags.len as f64)
}

/// `||b0||⁴ - 4γ²(||b0||²||b1||² - (b0ᵀb1)²)`.
pub fn gamma_discriminant(lags: &CenteredLags, gamma: f64) -> Result<f64> {
    let p = lags.checked_p()?;
    let gram = p * lags.ols_residual_sq()?;
    Ok(p * p - 4.0 * gamma * gamma * gram)
}

/// Local minimizer of `f2(w, ·)` for γ > 0, the smaller root of
/// `T²γ² a² - T p a + (pq - r²) = 0`.
///
/// Evaluated as `2 p D / (T (p + √disc))` with `D = ||b1 - ĉ b0||²`, which is
/// the same root without the cancellation of `p - √disc` at small γ.
pub fn a_star_gamma(lags: &CenteredLags, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    let p = lags.checked_p()?;
    let d = lags.ols_residual_sq()?;
    let disc = p * p - 4.0 * gamma * gamma * p * d;
    if disc < 0.0 {
        return Err(Error::GammaTooLarge(disc));
    }
    if lags.is_exact_fit(d) {
        return Err(Error::ExactFitDegenerate);
    }
    Ok(2.0 * p * d / (lags.len as f64 * (p + disc.sqrt())))
}

/// Upper edge of the basin around [`a_star_gamma`]: the larger root, a local
/// maximum of `f2(w, ·)`. `None` when no stationary point exists.
pub fn a_local_max_gamma(lags: &CenteredLags, gamma: f64) -> Option<f64> {
    let p = lags.checked_p().ok()?;
    let disc = gamma_discriminant(lags, gamma).ok()?;
    if disc < 0.0 || gamma <= 0.0 {
        return None;
    }
    Some((p + disc.sqrt()) / (2.0 * lags.len as f64 * gamma * gamma))
}

/// `c*` at `a = a_star_gamma`:
/// `r/p - 1/(2γ) + √(r²/p² + 1/(4γ²) - q/p)`, in rationalized form.
pub fn c_star_gamma_form(lags: &CenteredLags, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    let p = lags.checked_p()?;
    let d = lags.ols_residual_sq()?;
    let disc = p * p - 4.0 * gamma * gamma * p * d;
    if disc < 0.0 {
        return Err(Error::GammaTooLarge(disc));
    }
    Ok(lags.r() / p - 2.0 * gamma * d / (p + disc.sqrt()))
}

/// Upper limit of the γ range on which `a*` increases and `c*` decreases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaBound {
    Finite(f64),
    /// `b0` and `b1` are collinear.
    Unbounded,
}

/// `½ √(||b0||⁴ / (||b0||²||b1||² - (b0ᵀb1)²))`.
pub fn gamma_monotonicity_bound(lags: &CenteredLags) -> Result<GammaBound> {
    let p = lags.checked_p()?;
    let d = lags.ols_residual_sq()?;
    if lags.is_exact_fit(d) {
        return Ok(GammaBound::Unbounded);
    }
    Ok(GammaBound::Finite(0.5 * (p / d).sqrt()))
}

pub fn f1(lags: &CenteredLags, w: &DVector<f64>, a: f64, c: f64, pen: &PenaltyConfig) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::NonPositiveVariance(a));
    }
    let t = lags.len as f64;
    Ok(pen.sparsity_term(w) + 0.5 * a.ln() + pen.gamma * c + lags.residual_sq(c) / (2.0 * t * a))
}

pub fn f2(lags: &CenteredLags, w: &DVector<f64>, a: f64, pen: &PenaltyConfig) -> Result<f64> {
    let c = c_star(lags, a, pen.gamma)?;
    f1(lags, w, a, c, pen)
}

/// The innovation variance that defines `f3`.
pub fn a_star(lags: &CenteredLags, gamma: f64) -> Result<f64> {
    if gamma == 0.0 {
        a_star_gamma0(lags)
    } else {
        a_star_gamma(lags, gamma)
    }
}

/// `f3(w) = f2(w, a*)`. For γ = 0 this is `-η/2||w||² + ½ ln a* + ½`.
pub fn f3(lags: &CenteredLags, w: &DVector<f64>, pen: &PenaltyConfig) -> Result<f64> {
    if pen.gamma == 0.0 {
        let a = a_star_gamma0(lags)?;
        Ok(pen.sparsity_term(w) + 0.5 * a.ln() + 0.5)
    } else {
        let a = a_star_gamma(lags, pen.gamma)?;
        f2(lags, w, a, pen)
    }
}

/// `∇_w f2(w, a)`, evaluated at `c = c*(a, w)` (the c-dependence drops out).
pub fn grad_w_f2(
    design: &CenteredDesign,
    w: &DVector<f64>,
    a: f64,
    pen: &PenaltyConfig,
) -> Result<DVector<f64>> {
    let lags = design.lags(w)?;
    let c = c_star(&lags, a, pen.gamma)?;
    Ok(grad_w_at(design, &lags, w, a, c, pen))
}

pub(crate) fn grad_w_at(
    design: &CenteredDesign,
    lags: &CenteredLags,
    w: &DVector<f64>,
    a: f64,
    c: f64,
    pen: &PenaltyConfig,
) -> DVector<f64> {
    let resid = DVector::from_iterator(
        lags.len,
        lags.b1.iter().zip(&lags.b0).map(|(x1, x0)| x1 - c * x0),
    );
    let t = lags.len as f64;
    let fit = (design.x1c.tr_mul(&resid) - design.x0c.tr_mul(&resid) * c) / (t * a);
    fit - w * pen.eta
}

/// `∂_a f2(w, a) = 1/(2a) - ||b1 - c* b0||² / (2 T a²)`.
pub fn grad_a_f2(
    design: &CenteredDesign,
    w: &DVector<f64>,
    a: f64,
    pen: &PenaltyConfig,
) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::NonPositiveVariance(a));
    }
    let lags = design.lags(w)?;
    let c = c_star(&lags, a, pen.gamma)?;
    Ok(grad_a_at(&lags, a, c))
}

pub(crate) fn grad_a_at(lags: &CenteredLags, a: f64, c: f64) -> f64 {
    0.5 / a - lags.residual_sq(c) / (2.0 * lags.len as f64 * a * a)
}

/// Second-order structure of the γ = 0 reduced objective at `w`.
#[derive(Debug, Clone)]
pub struct HessianCertificate {
    /// `-ηI + Dᵀ(I - 2uuᵀ)D / ||Dw||²` with `D = B A(c*)` held fixed.
    pub hessian: DMatrix<f64>,
    /// Hessian of `f3` including the response of `c*` to `w`.
    pub full_hessian: DMatrix<f64>,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub c: f64,
}

/// `D = B A(c) = X1c - c X0c`.
pub fn residual_operator(design: &CenteredDesign, c: f64) -> DMatrix<f64> {
    &design.x1c - &design.x0c * c
}

/// Forms the reduced-objective Hessian at `w` (γ = 0) and its extreme eigenvalues.
pub fn hessian_structure_check(
    design: &CenteredDesign,
    w: &DVector<f64>,
    pen: &PenaltyConfig,
) -> Result<HessianCertificate> {
    if pen.gamma != 0.0 {
        return Err(Error::InvalidParameter("Hessian structure requires gamma = 0".into()));
    }
    let lags = design.lags(w)?;
    let c = c_star(&lags, 0.0, 0.0)?;
    let d = residual_operator(design, c);
    let dw = &d * w;
    let n = dw.norm_squared();
    if lags.is_exact_fit(n) {
        return Err(Error::ExactFitDegenerate);
    }
    let m = w.len();
    let dtdw = d.tr_mul(&dw);
    let hessian = (d.tr_mul(&d) - &dtdw * dtdw.transpose() * (2.0 / n)) / n
        - DMatrix::identity(m, m) * pen.eta;

    // Schur complement over c: subtract v vᵀ / (N p) with v = X0cᵀ r + Dᵀ b0
    let b0 = DVector::from_column_slice(&lags.b0);
    let v = design.x0c.tr_mul(&dw) + d.tr_mul(&b0);
    let full_hessian = &hessian - &v * v.transpose() / (n * lags.p());

    let eig = SymmetricEigen::new(hessian.clone()).eigenvalues;
    let min_eigenvalue = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_eigenvalue = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(HessianCertificate { hessian, full_hessian, min_eigenvalue, max_eigenvalue, c })
}

/// Eigenvalues of the reflection `I - 2uuᵀ`, `u = Dw / ||Dw||`, sorted ascending.
pub fn reflection_spectrum(design: &CenteredDesign, w: &DVector<f64>) -> Result<Vec<f64>> {
    let lags = design.lags(w)?;
    let c = c_star(&lags, 0.0, 0.0)?;
    let dw = residual_operator(design, c) * w;
    let norm = dw.norm();
    if norm == 0.0 {
        return Err(Error::ExactFitDegenerate);
    }
    let u = dw / norm;
    let t = u.len();
    let reflection = DMatrix::identity(t, t) - &u * u.transpose() * 2.0;
    let mut eig: Vec<f64> = SymmetricEigen::new(reflection).eigenvalues.iter().cloned().collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

/// How NLL values are scaled for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NllConvention {
    /// Average per transition, including the `½ ln 2π` constant.
    #[default]
    PerObservation,
    /// Summed over transitions, without the constant.
    Raw,
}

/// Gaussian AR(1) negative log-likelihood of `x` under `q`.
pub fn nll_report(x: &[f64], q: &ARParams, conv: NllConvention) -> Result<f64> {
    if !(q.a > 0.0) {
        return Err(Error::NonPositiveVariance(q.a));
    }
    if x.len() < 2 {
        return Err(Error::SeriesTooShort { len: x.len(), min: 2 });
    }
    let t = (x.len() - 1) as f64;
    let level = q.theta * (1.0 - q.c);
    let rss: f64 = x.windows(2).map(|p| (p[1] - q.c * p[0] - level).powi(2)).sum();
    Ok(match conv {
        NllConvention::PerObservation => 0.5 * (2.0 * PI).ln() + 0.5 * q.a.ln() + rss / (2.0 * t * q.a),
        NllConvention::Raw => 0.5 * t * q.a.ln() + rss / (2.0 * q.a),
    })
}
