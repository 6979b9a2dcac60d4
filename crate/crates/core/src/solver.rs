//! Projected gradient with partial minimization, the plain full-variable
//! projected-gradient baseline, closed-form single-series fits and multi-start.
//!
//! The main loop works on `f2(w, a)`: `θ` and `c` are always eliminated in
//! closed form. Per iteration, in order:
//!
//! 1. `c ← c*(a, w)`
//! 2. `a ← a*(w)` when γ = 0, otherwise a projected gradient step on `a`
//!    (or the closed form in [`AUpdate::Exact`] mode)
//! 3. `w ← proj_{||·||₁=1}(w - δ ∇_w f2(w, a))`
//!
//! Both steps use backtracking with sufficient decrease, so the recorded loss
//! never increases.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::PriceMatrix;
use crate::error::{Error, Result};
use crate::likelihood::{
    a_local_max_gamma, a_star_gamma, a_star_gamma0, c_star, centered_lags, f2, grad_a_at,
    grad_w_at, nll_report, objective_full, theta_star_or_mean, CenteredDesign, CenteredLags,
    NllConvention, PenaltyConfig, Weights,
};
use crate::ou_model::{derive_seed, ou_from_ar, seeded_rng, ARParams, OUParams, Series};
use crate::projection::project_l1_sphere;

/// Smallest step tried before a line search gives up.
const MIN_STEP: f64 = 1e-20;
/// Positivity floor for `a` in the baseline solver.
const A_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    #[default]
    Uniform,
    RandomOrthant,
    Provided(Vec<f64>),
}

/// How `a` is updated when γ > 0. With γ = 0 the closed form is always used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AUpdate {
    #[default]
    Gradient,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Stop when `|f_i - f_{i-1}| / max(1, |f_{i-1}|) < tol`.
    pub tol: f64,
    /// Initial step on `w` for each line search.
    pub step_w: f64,
    /// Initial step on `a`, in units of `a²` (the step length is `step_a * a²`).
    pub step_a: f64,
    pub backtrack: f64,
    /// Sufficient-decrease constant of the line search.
    pub armijo: f64,
    pub restarts: usize,
    pub seed: u64,
    pub init: Init,
    pub a_update: AUpdate,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 5000,
            tol: 1e-9,
            step_w: 1.0,
            step_a: 1.0,
            backtrack: 0.5,
            armijo: 1e-4,
            restarts: 1,
            seed: 0,
            init: Init::Uniform,
            a_update: AUpdate::Gradient,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if self.max_iter < 1 {
            return bad("max_iter must be at least 1");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if !(self.step_w > 0.0 && self.step_a > 0.0) {
            return bad("step sizes must be positive");
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return bad("backtrack factor must lie in (0, 1)");
        }
        if !(self.armijo >= 0.0 && self.armijo < 1.0) {
            return bad("armijo constant must lie in [0, 1)");
        }
        if self.restarts < 1 {
            return bad("restarts must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitFlag {
    /// `|1 - c|` too small; `θ` set to the window mean.
    ThetaFallback,
    /// No local minimum in `a` for this γ at some iterate.
    GammaTooLarge,
    /// A projection received the zero vector.
    ProjectedFromZero,
    /// A line search hit the minimum step without decrease.
    LineSearchStalled,
    MaxIterReached,
    /// Fewer transitions than assets.
    FewerObservationsThanAssets,
    /// Fitted `c >= 1`; no OU interpretation.
    NotMeanReverting,
    /// Fitted `c <= 0`.
    OscillatoryLag,
    /// At least one restart failed.
    RestartFailed,
    /// The row could not be fitted at all.
    FitFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    #[default]
    PartialMinimization,
    Baseline,
    SingleSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub solver: SolverKind,
    pub tickers: Vec<String>,
    pub w: Weights,
    pub ar: ARParams,
    /// `None` when `c >= 1`.
    pub ou: Option<OUParams>,
    pub dt: f64,
    pub penalty: PenaltyConfig,
    pub objective: f64,
    pub trace: Vec<f64>,
    pub nll_train: f64,
    pub nll_test: Option<f64>,
    pub flags: BTreeSet<FitFlag>,
    pub iterations: usize,
    /// Final objective of every restart, `None` where the restart failed.
    pub restart_objectives: Vec<Option<f64>>,
}

impl FitResult {
    /// Portfolio path `S w`.
    pub fn portfolio(&self, s: &PriceMatrix) -> Result<Vec<f64>> {
        if s.cols() != self.w.len() {
            return Err(Error::DimensionMismatch { expected: self.w.len(), got: s.cols() });
        }
        Ok((&s.values * self.w.as_vector()).as_slice().to_vec())
    }

    /// NLL of the portfolio path on `s` under the fitted parameters.
    pub fn nll_on(&self, s: &PriceMatrix, conv: NllConvention) -> Result<f64> {
        nll_report(&self.portfolio(s)?, &self.ar, conv)
    }

    /// Sets `nll_test` from a held-out window.
    pub fn evaluate_test(&mut self, test: &PriceMatrix, conv: NllConvention) -> Result<()> {
        self.nll_test = Some(self.nll_on(test, conv)?);
        Ok(())
    }
}

/// Closed-form γ = 0 fit of a single path: OLS slope, `θ*`, `a*`.
pub fn fit_single_series(x: &Series) -> Result<ARParams> {
    let lags = centered_lags(x.values())?;
    let c = lags.ols_slope()?;
    let a = a_star_gamma0(&lags)?;
    let (theta, _) = theta_star_or_mean(&lags, c);
    ARParams::new(a, c, theta)
}

/// Single-series fit packaged as a [`FitResult`] with `w = (1)`.
pub fn fit_single_series_result(
    x: &Series,
    ticker: &str,
    dt: f64,
    conv: NllConvention,
) -> Result<FitResult> {
    let ar = fit_single_series(x)?;
    let lags = centered_lags(x.values())?;
    let mut flags = BTreeSet::new();
    if theta_star_or_mean(&lags, ar.c).1 {
        flags.insert(FitFlag::ThetaFallback);
    }
    let ou = interpret(&ar, dt, &mut flags);
    let objective = 0.5 * ar.a.ln() + 0.5;
    Ok(FitResult {
        solver: SolverKind::SingleSeries,
        tickers: vec![ticker.to_string()],
        w: Weights::basis(1, 0),
        ar,
        ou,
        dt,
        penalty: PenaltyConfig::none(),
        objective,
        trace: vec![objective],
        nll_train: nll_report(x.values(), &ar, conv)?,
        nll_test: None,
        flags,
        iterations: 0,
        restart_objectives: vec![Some(objective)],
    })
}

fn interpret(ar: &ARParams, dt: f64, flags: &mut BTreeSet<FitFlag>) -> Option<OUParams> {
    if ar.is_oscillatory() {
        flags.insert(FitFlag::OscillatoryLag);
    }
    match ou_from_ar(ar, dt) {
        Ok(p) => Some(p),
        Err(_) => {
            flags.insert(FitFlag::NotMeanReverting);
            None
        }
    }
}

/// Starting weights for restart `k` (restart 0 honours `cfg.init`).
pub fn initial_weights(m: usize, cfg: &SolverConfig, restart: usize) -> Result<DVector<f64>> {
    let init = if restart == 0 { cfg.init.clone() } else { Init::RandomOrthant };
    let raw = match init {
        Init::Uniform => DVector::from_element(m, 1.0 / m as f64),
        Init::Provided(w) => {
            if w.len() != m {
                return Err(Error::DimensionMismatch { expected: m, got: w.len() });
            }
            DVector::from_vec(w)
        }
        Init::RandomOrthant => {
            let mut rng = seeded_rng(derive_seed(cfg.seed, &[restart as u64]));
            DVector::from_iterator(
                m,
                (0..m).map(|_| {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * (1.0 + rng.random_range(-0.5..0.5))
                }),
            )
        }
    };
    Ok(project_l1_sphere(&raw).weights.into_inner())
}

/// Sample variance of the first differences of `S w`.
fn initial_variance(s: &DMatrix<f64>, w: &DVector<f64>) -> Result<f64> {
    let x = s * w;
    let d: Vec<f64> = x.as_slice().windows(2).map(|p| p[1] - p[0]).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len().max(2) - 1) as f64;
    if !(var > 0.0) {
        return Err(Error::DegeneratePortfolio);
    }
    Ok(var)
}

fn relative_change(prev: f64, cur: f64) -> f64 {
    (cur - prev).abs() / prev.abs().max(1.0)
}

/// Evaluates `f2`, mapping degenerate points to `+∞` so line searches reject them.
fn f2_at(design: &CenteredDesign, w: &DVector<f64>, a: f64, pen: &PenaltyConfig) -> f64 {
    design
        .lags(w)
        .and_then(|l| f2(&l, w, a, pen))
        .ok()
        .filter(|v| v.is_finite())
        .unwrap_or(f64::INFINITY)
}

/// Backtracking step on `a` for γ > 0. Steps that leave `(0, a_hi)` are rejected,
/// `a_hi` being the local maximum beyond which `f2` decreases without bound.
fn gradient_step_a(
    lags: &CenteredLags,
    w: &DVector<f64>,
    a: f64,
    pen: &PenaltyConfig,
    cfg: &SolverConfig,
    flags: &mut BTreeSet<FitFlag>,
) -> Result<f64> {
    let current = f2(lags, w, a, pen)?;
    let c = c_star(lags, a, pen.gamma)?;
    let g = grad_a_at(lags, a, c);
    let a_hi = match a_local_max_gamma(lags, pen.gamma) {
        Some(v) => v,
        None => {
            flags.insert(FitFlag::GammaTooLarge);
            f64::INFINITY
        }
    };
    let mut delta = cfg.step_a * a * a;
    while delta > MIN_STEP * a * a {
        let trial = a - delta * g;
        if trial > 0.0 && trial < a_hi {
            if let Ok(v) = f2(lags, w, trial, pen) {
                if v <= current - cfg.armijo * (trial - a).powi(2) / delta {
                    return Ok(trial);
                }
            }
        }
        delta *= cfg.backtrack;
    }
    Ok(a)
}

/// Single run of the partial-minimization projected gradient method.
pub fn fit_portfolio(s: &PriceMatrix, pen: &PenaltyConfig, cfg: &SolverConfig) -> Result<FitResult> {
    cfg.validate()?;
    let w0 = initial_weights(s.cols(), cfg, 0)?;
    run_partial_minimization(s, pen, cfg, w0)
}

pub(crate) fn run_partial_minimization(
    s: &PriceMatrix,
    pen: &PenaltyConfig,
    cfg: &SolverConfig,
    w0: DVector<f64>,
) -> Result<FitResult> {
    let design = CenteredDesign::new(&s.values)?;
    let mut flags = BTreeSet::new();
    if design.transitions() < design.assets() {
        log::warn!("{} transitions for {} assets", design.transitions(), design.assets());
        flags.insert(FitFlag::FewerObservationsThanAssets);
    }

    let mut w = w0;
    let mut a = initial_variance(&s.values, &w)?;
    let mut loss = f2_at(&design, &w, a, pen);
    if !loss.is_finite() {
        return Err(Error::DegeneratePortfolio);
    }
    let mut trace = vec![loss];
    let mut iterations = 0;

    for _ in 0..cfg.max_iter {
        iterations += 1;
        let lags = design.lags(&w)?;

        if pen.gamma == 0.0 {
            a = a_star_gamma0(&lags)?;
        } else {
            let mut exact = None;
            if cfg.a_update == AUpdate::Exact {
                match a_star_gamma(&lags, pen.gamma) {
                    Ok(v) if f2(&lags, &w, v, pen)? <= f2(&lags, &w, a, pen)? => exact = Some(v),
                    Ok(_) => {}
                    Err(Error::GammaTooLarge(_)) => {
                        flags.insert(FitFlag::GammaTooLarge);
                    }
                    Err(e) => return Err(e),
                }
            }
            a = match exact {
                Some(v) => v,
                None => gradient_step_a(&lags, &w, a, pen, cfg, &mut flags)?,
            };
        }

        let c = c_star(&lags, a, pen.gamma)?;
        let g = grad_w_at(&design, &lags, &w, a, c, pen);
        let current = f2(&lags, &w, a, pen)?;

        let mut delta = cfg.step_w;
        let mut accepted = None;
        while delta > MIN_STEP {
            let proj = project_l1_sphere(&(&w - &g * delta));
            if proj.from_zero {
                flags.insert(FitFlag::ProjectedFromZero);
            }
            let trial = proj.weights.into_inner();
            let value = f2_at(&design, &trial, a, pen);
            let moved = (&trial - &w).norm_squared();
            if value <= current - cfg.armijo * moved / delta {
                accepted = Some((trial, value));
                break;
            }
            delta *= cfg.backtrack;
        }
        let prev = loss;
        match accepted {
            Some((trial, value)) => {
                w = trial;
                loss = value;
            }
            None => {
                flags.insert(FitFlag::LineSearchStalled);
                loss = current;
            }
        }
        trace.push(loss);
        if relative_change(prev, loss) < cfg.tol {
            break;
        }
        if iterations == cfg.max_iter {
            flags.insert(FitFlag::MaxIterReached);
        }
    }

    finish(s, &design, w, a, pen, SolverKind::PartialMinimization, trace, iterations, flags)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    s: &PriceMatrix,
    design: &CenteredDesign,
    w: DVector<f64>,
    a: f64,
    pen: &PenaltyConfig,
    solver: SolverKind,
    trace: Vec<f64>,
    iterations: usize,
    mut flags: BTreeSet<FitFlag>,
) -> Result<FitResult> {
    let lags = design.lags(&w)?;
    let a = if pen.gamma == 0.0 { a_star_gamma0(&lags)? } else { a };
    let c = c_star(&lags, a, pen.gamma)?;
    let (theta, fell_back) = theta_star_or_mean(&lags, c);
    if fell_back {
        flags.insert(FitFlag::ThetaFallback);
    }
    let objective = f2(&lags, &w, a, pen)?;
    let ar = ARParams::new(a, c, theta)?;
    let ou = interpret(&ar, s.dt, &mut flags);
    let x = &s.values * &w;
    let nll_train = nll_report(x.as_slice(), &ar, NllConvention::PerObservation)?;
    Ok(FitResult {
        solver,
        tickers: s.tickers.clone(),
        w: Weights::new(w)?,
        ar,
        ou,
        dt: s.dt,
        penalty: *pen,
        objective,
        trace,
        nll_train,
        nll_test: None,
        flags,
        iterations,
        restart_objectives: vec![Some(objective)],
    })
}

/// State of the baseline solver: every variable is iterated directly.
#[derive(Debug, Clone)]
struct FullState {
    w: DVector<f64>,
    a: f64,
    c: f64,
    theta: f64,
}

struct FullGradient {
    w: DVector<f64>,
    a: f64,
    c: f64,
    theta: f64,
}

fn full_gradient(s: &DMatrix<f64>, st: &FullState, pen: &PenaltyConfig) -> FullGradient {
    let x = s * &st.w;
    let t = x.len() - 1;
    let level = st.theta * (1.0 - st.c);
    let r = DVector::from_iterator(t, (1..=t).map(|i| x[i] - st.c * x[i - 1] - level));
    let scale = 1.0 / (t as f64 * st.a);
    let x0 = s.rows(0, t);
    let x1 = s.rows(1, t);
    let gw = (x1.tr_mul(&r) - x0.tr_mul(&r) * st.c) * scale - &st.w * pen.eta;
    let ga = 0.5 / st.a - r.norm_squared() / (2.0 * t as f64 * st.a * st.a);
    let gc = pen.gamma + scale * (0..t).map(|i| r[i] * (st.theta - x[i])).sum::<f64>();
    let gt = -(1.0 - st.c) * scale * r.sum();
    FullGradient { w: gw, a: ga, c: gc, theta: gt }
}

/// Plain projected gradient on `(w, a, c, θ)` jointly, without partial minimization.
///
/// Starts from the same `(w, a)` as [`fit_portfolio`], with `c` and `θ` at
/// their closed-form values, so both methods share the initial loss.
pub fn fit_baseline_pgd(s: &PriceMatrix, pen: &PenaltyConfig, cfg: &SolverConfig) -> Result<FitResult> {
    cfg.validate()?;
    let w0 = initial_weights(s.cols(), cfg, 0)?;
    let design = CenteredDesign::new(&s.values)?;
    let a0 = initial_variance(&s.values, &w0)?;
    let lags = design.lags(&w0)?;
    let c0 = c_star(&lags, a0, pen.gamma)?;
    let (theta0, _) = theta_star_or_mean(&lags, c0);

    let mut flags = BTreeSet::new();
    let objective = |st: &FullState| {
        objective_full(&s.values, &st.w, st.a, st.c, st.theta, pen)
            .ok()
            .filter(|v| v.is_finite())
            .unwrap_or(f64::INFINITY)
    };

    let mut st = FullState { w: w0, a: a0, c: c0, theta: theta0 };
    let mut loss = objective(&st);
    let mut trace = vec![loss];
    let mut iterations = 0;

    for _ in 0..cfg.max_iter {
        iterations += 1;
        let g = full_gradient(&s.values, &st, pen);
        let mut delta = cfg.step_w;
        let mut accepted = None;
        while delta > MIN_STEP {
            let proj = project_l1_sphere(&(&st.w - &g.w * delta));
            if proj.from_zero {
                flags.insert(FitFlag::ProjectedFromZero);
            }
            let trial = FullState {
                w: proj.weights.into_inner(),
                a: (st.a - delta * g.a).max(A_FLOOR),
                c: st.c - delta * g.c,
                theta: st.theta - delta * g.theta,
            };
            let moved = (&trial.w - &st.w).norm_squared()
                + (trial.a - st.a).powi(2)
                + (trial.c - st.c).powi(2)
                + (trial.theta - st.theta).powi(2);
            let value = objective(&trial);
            if value <= loss - cfg.armijo * moved / delta {
                accepted = Some((trial, value));
                break;
            }
            delta *= cfg.backtrack;
        }
        let prev = loss;
        match accepted {
            Some((trial, value)) => {
                st = trial;
                loss = value;
            }
            None => {
                flags.insert(FitFlag::LineSearchStalled);
            }
        }
        trace.push(loss);
        if relative_change(prev, loss) < cfg.tol {
            break;
        }
        if iterations == cfg.max_iter {
            flags.insert(FitFlag::MaxIterReached);
        }
    }

    let ar = ARParams::new(st.a, st.c, st.theta)?;
    let ou = interpret(&ar, s.dt, &mut flags);
    let x = &s.values * &st.w;
    let nll_train = nll_report(x.as_slice(), &ar, NllConvention::PerObservation)?;
    Ok(FitResult {
        solver: SolverKind::Baseline,
        tickers: s.tickers.clone(),
        w: Weights::new(st.w)?,
        ar,
        ou,
        dt: s.dt,
        penalty: *pen,
        objective: loss,
        trace,
        nll_train,
        nll_test: None,
        flags,
        iterations,
        restart_objectives: vec![Some(loss)],
    })
}

/// First trace index whose loss is within `band` of `target`; `None` if never.
pub fn iterations_to_band(trace: &[f64], target: f64, band: f64) -> Option<usize> {
    trace.iter().position(|&v| v <= target + band)
}

/// Runs [`fit_portfolio`] from `cfg.restarts` initializations and keeps the
/// lowest final objective (earliest restart on ties).
pub fn multi_start(s: &PriceMatrix, pen: &PenaltyConfig, cfg: &SolverConfig) -> Result<FitResult> {
    cfg.validate()?;
    let starts = (0..cfg.restarts)
        .map(|k| initial_weights(s.cols(), cfg, k))
        .collect::<Result<Vec<_>>>()?;
    multi_start_from(s, pen, cfg, starts)
}

/// Multi-start over explicit starting points, run in parallel and reduced in index order.
pub fn multi_start_from(
    s: &PriceMatrix,
    pen: &PenaltyConfig,
    cfg: &SolverConfig,
    starts: Vec<DVector<f64>>,
) -> Result<FitResult> {
    cfg.validate()?;
    let runs: Vec<Result<FitResult>> = starts
        .into_par_iter()
        .map(|w0| run_partial_minimization(s, pen, cfg, w0))
        .collect();

    let objectives: Vec<Option<f64>> =
        runs.iter().map(|r| r.as_ref().ok().map(|f| f.objective)).collect();
    let mut best: Option<FitResult> = None;
    let mut errors = Vec::new();
    for (k, run) in runs.into_iter().enumerate() {
        match run {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| fit.objective < b.objective) {
                    best = Some(fit);
                }
            }
            Err(e) => errors.push(format!("restart {k}: {e}")),
        }
    }
    let mut best = best.ok_or_else(|| Error::NoFeasibleFit(errors.join("; ")))?;
    if !errors.is_empty() {
        best.flags.insert(FitFlag::RestartFailed);
    }
    best.restart_objectives = objectives;
    Ok(best)
}
