//! Ornstein-Uhlenbeck parameterizations and synthetic path generation.
//!
//! Two discretizations map the continuous parameters `(mu, theta, sigma2)` onto
//! the AR(1) triple `(a, c, theta)` that the likelihood works in:
//!
//! * Euler: `a = dt * sigma2`, `c = 1 - dt * mu`
//! * exact transition: `c = exp(-dt * mu)`, `a = sigma2 * (1 - exp(-2 dt mu)) / (2 mu)`
//!
//! The estimator always uses the Euler form; the exact form is provided for
//! simulation and for comparison. All random draws come from a seeded
//! [`ChaCha8Rng`] with standard normals drawn by the ziggurat sampler of
//! `rand_distr::StandardNormal`, so a seed reproduces a path on any platform.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_io::PriceMatrix;
use crate::error::{Error, Result};

/// Continuous-time OU parameters for `dx = mu (theta - x) dt + sigma dB`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OUParams {
    pub mu: f64,
    pub theta: f64,
    pub sigma2: f64,
}

impl OUParams {
    pub fn new(mu: f64, theta: f64, sigma2: f64) -> Result<Self> {
        let p = OUParams { mu, theta, sigma2 };
        p.validate()?;
        Ok(p)
    }

    /// Zero-volatility parameters. Only meaningful for deterministic simulation.
    pub fn noise_free(mu: f64, theta: f64) -> Self {
        OUParams { mu, theta, sigma2: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidParameter(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma2 must be positive, got {}",
                self.sigma2
            )));
        }
        if !self.theta.is_finite() {
            return Err(Error::InvalidParameter("theta must be finite".into()));
        }
        Ok(())
    }

    /// Stationary variance `sigma2 / (2 mu)`.
    pub fn stationary_variance(&self) -> f64 {
        self.sigma2 / (2.0 * self.mu)
    }
}

/// Discrete AR(1) parameters: innovation variance `a`, lag coefficient `c`, mean `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ARParams {
    pub a: f64,
    pub c: f64,
    pub theta: f64,
}

impl ARParams {
    pub fn new(a: f64, c: f64, theta: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::NonPositiveVariance(a));
        }
        if !c.is_finite() || !theta.is_finite() {
            return Err(Error::InvalidParameter("c and theta must be finite".into()));
        }
        Ok(ARParams { a, c, theta })
    }

    /// `c <= 0`: the Euler step overshoots the mean (dt * mu >= 1).
    pub fn is_oscillatory(&self) -> bool {
        self.c <= 0.0
    }
}

/// Sampling grid: interval `dt`, total span `L`, and `steps = round(L / dt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub span: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, span: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if !(span > 0.0 && span.is_finite()) {
            return Err(Error::InvalidParameter(format!("span must be positive, got {span}")));
        }
        let steps = (span / dt).round();
        if steps < 2.0 {
            return Err(Error::InvalidParameter(format!(
                "grid has {steps} steps, need at least 2"
            )));
        }
        Ok(TimeGrid { dt, span, steps: steps as usize })
    }
}

/// A univariate path `x_0 .. x_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    values: Vec<f64>,
}

impl Series {
    pub const MIN_LEN: usize = 3;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < Self::MIN_LEN {
            return Err(Error::SeriesTooShort { len: values.len(), min: Self::MIN_LEN });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Series { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of transitions `T`.
    pub fn transitions(&self) -> usize {
        self.values.len() - 1
    }
}

pub fn ar_from_ou(p: &OUParams, dt: f64) -> ARParams {
    let q = ARParams { a: dt * p.sigma2, c: 1.0 - dt * p.mu, theta: p.theta };
    if q.is_oscillatory() {
        log::warn!("dt * mu = {} >= 1 gives non-positive lag coefficient", dt * p.mu);
    }
    q
}

pub fn ou_from_ar(q: &ARParams, dt: f64) -> Result<OUParams> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    if !(q.c < 1.0) {
        return Err(Error::NotMeanReverting(q.c));
    }
    Ok(OUParams { mu: (1.0 - q.c) / dt, theta: q.theta, sigma2: q.a / dt })
}

/// AR parameters of the exact OU transition density over one step of length `dt`.
pub fn sde_ar_from_ou(p: &OUParams, dt: f64) -> ARParams {
    let c = (-dt * p.mu).exp();
    // -expm1(-2 dt mu) keeps precision when dt * mu is tiny
    let a = p.sigma2 * (-(-2.0 * dt * p.mu).exp_m1()) / (2.0 * p.mu);
    ARParams { a, c, theta: p.theta }
}

/// Seeded generator used for every simulated path.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with stream indices (SplitMix64 finalizer), giving
/// independent seeds for restarts, realizations and grid cells.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mut z = base;
    for &s in stream {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(s.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Euler-Maruyama path `x_t = x_{t-1} + mu (theta - x_{t-1}) dt + sigma sqrt(dt) eps_t`.
///
/// `x0 = None` starts at `theta`. `sigma2 = 0` is accepted here and yields the
/// noise-free recursion.
pub fn simulate_ou(p: &OUParams, grid: &TimeGrid, x0: Option<f64>, seed: u64) -> Result<Series> {
    check_sim_params(p)?;
    let mut rng = seeded_rng(seed);
    let scale = (p.sigma2 * grid.dt).sqrt();
    let mut x = x0.unwrap_or(p.theta);
    let mut out = Vec::with_capacity(grid.steps + 1);
    out.push(x);
    for _ in 0..grid.steps {
        let eps: f64 = StandardNormal.sample(&mut rng);
        x = x + p.mu * (p.theta - x) * grid.dt + scale * eps;
        out.push(x);
    }
    Series::new(out)
}

/// Exact-transition path `x_t = theta + c (x_{t-1} - theta) + sqrt(a) eps_t`.
pub fn simulate_ou_exact(
    p: &OUParams,
    grid: &TimeGrid,
    x0: Option<f64>,
    seed: u64,
) -> Result<Series> {
    check_sim_params(p)?;
    let q = sde_ar_from_ou(p, grid.dt);
    let mut rng = seeded_rng(seed);
    let scale = q.a.sqrt();
    let mut x = x0.unwrap_or(p.theta);
    let mut out = Vec::with_capacity(grid.steps + 1);
    out.push(x);
    for _ in 0..grid.steps {
        let eps: f64 = StandardNormal.sample(&mut rng);
        x = p.theta + q.c * (x - p.theta) + scale * eps;
        out.push(x);
    }
    Series::new(out)
}

/// Gaussian random walk `x_t = x_{t-1} + step_sd * eps_t`.
pub fn simulate_random_walk(steps: usize, step_sd: f64, x0: f64, seed: u64) -> Result<Series> {
    let mut rng = seeded_rng(seed);
    let mut x = x0;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x);
    for _ in 0..steps {
        let eps: f64 = StandardNormal.sample(&mut rng);
        x += step_sd * eps;
        out.push(x);
    }
    Series::new(out)
}

fn check_sim_params(p: &OUParams) -> Result<()> {
    if !(p.mu > 0.0) || !p.mu.is_finite() {
        return Err(Error::InvalidParameter(format!("mu must be positive, got {}", p.mu)));
    }
    if !(p.sigma2 >= 0.0) || !p.sigma2.is_finite() || !p.theta.is_finite() {
        return Err(Error::InvalidParameter("sigma2 must be >= 0 and theta finite".into()));
    }
    Ok(())
}

/// One component of the synthetic selection universe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Component {
    Ou { mu: f64, sigma: f64, theta: f64 },
    /// Non-mean-reverting walk with per-step standard deviation `step_sd`.
    RandomWalk { step_sd: f64 },
}

/// Four OU series and one random walk:
///
/// | # | mu | sigma | theta |
/// |---|----|-------|-------|
/// | 1 | 1  | 1     | 0     |
/// | 2 | 4  | 1     | 1     |
/// | 3 | 1  | 0.5   | 1     |
/// | 4 | 4  | 0.5   | 0     |
/// | 5 | random walk, step sd 0.1 | | |
pub const SELECTION_UNIVERSE: [Component; 5] = [
    Component::Ou { mu: 1.0, sigma: 1.0, theta: 0.0 },
    Component::Ou { mu: 4.0, sigma: 1.0, theta: 1.0 },
    Component::Ou { mu: 1.0, sigma: 0.5, theta: 1.0 },
    Component::Ou { mu: 4.0, sigma: 0.5, theta: 0.0 },
    Component::RandomWalk { step_sd: 0.1 },
];

/// Default grid of the selection experiment: 500 steps at dt = 0.01.
pub const SELECTION_DT: f64 = 0.01;
pub const SELECTION_STEPS: usize = 500;

/// Simulates `components` on a common grid, one derived seed per column.
pub fn simulate_universe(
    components: &[Component],
    grid: &TimeGrid,
    seed: u64,
) -> Result<PriceMatrix> {
    let rows = grid.steps + 1;
    let mut values = DMatrix::zeros(rows, components.len());
    let mut tickers = Vec::with_capacity(components.len());
    for (j, comp) in components.iter().enumerate() {
        let s = derive_seed(seed, &[j as u64]);
        let path = match *comp {
            Component::Ou { mu, sigma, theta } => {
                simulate_ou(&OUParams { mu, theta, sigma2: sigma * sigma }, grid, None, s)?
            }
            Component::RandomWalk { step_sd } => simulate_random_walk(grid.steps, step_sd, 0.0, s)?,
        };
        for (i, v) in path.values().iter().enumerate() {
            values[(i, j)] = *v;
        }
        tickers.push(format!("S{}", j + 1));
    }
    let timestamps = (0..rows).map(|i| i.to_string()).collect();
    PriceMatrix::new(values, tickers, timestamps, grid.dt)
}

/// The five-series selection instance at its default grid.
pub fn selection_instance(seed: u64) -> Result<PriceMatrix> {
    let grid = TimeGrid::new(SELECTION_DT, SELECTION_DT * SELECTION_STEPS as f64)?;
    simulate_universe(&SELECTION_UNIVERSE, &grid, seed)
}
