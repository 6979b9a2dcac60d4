//! Instance generators and numeric oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ouport::likelihood::{centered_lags, CenteredLags};
use ouport::ou_model::seeded_rng;
use ouport::PriceMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    seeded_rng(seed ^ 0x5eed_0f_7e57)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// AR(1) path with random coefficient, level and noise.
pub fn ar_path(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let c = rng.random_range(-0.5..0.95);
    let theta = rng.random_range(-3.0..3.0);
    let sd = rng.random_range(0.1..2.0);
    let mut x = theta + normal(rng) * sd;
    let mut out = vec![x];
    for _ in 1..len {
        x = theta + c * (x - theta) + sd * normal(rng);
        out.push(x);
    }
    out
}

pub fn random_lags(rng: &mut ChaCha8Rng) -> (Vec<f64>, CenteredLags) {
    let len = rng.random_range(40..400);
    let x = ar_path(rng, len);
    let lags = centered_lags(&x).unwrap();
    (x, lags)
}

/// `rows × m` matrix of independent AR(1) columns.
pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, m: usize) -> DMatrix<f64> {
    let cols: Vec<Vec<f64>> = (0..m).map(|_| ar_path(rng, rows)).collect();
    DMatrix::from_fn(rows, m, |i, j| cols[j][i])
}

pub fn prices(values: DMatrix<f64>, dt: f64) -> PriceMatrix {
    let tickers = (0..values.ncols()).map(|j| format!("A{j}")).collect();
    let ts = (0..values.nrows()).map(|i| i.to_string()).collect();
    PriceMatrix::new(values, tickers, ts, dt).unwrap()
}

pub fn random_sphere_point(rng: &mut ChaCha8Rng, m: usize) -> DVector<f64> {
    let v = DVector::from_fn(m, |_, _| normal(rng));
    let l1 = v.lp_norm(1);
    v / l1
}

/// Golden-section search for the minimizer of a unimodal `f` on `[lo, hi]`,
/// polished by bisection on the sign of a finite-difference slope once the
/// bracket is small (golden section alone stalls near `sqrt(eps)`).
pub fn argmin_1d(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let width = hi - lo;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-4 * width {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    // widen slightly so the minimizer is strictly inside
    let pad = hi - lo;
    let (mut lo, mut hi) = (lo - pad, hi + pad);
    // five-point stencil: O(h⁴) bias, so h can be wide enough to beat rounding
    let h = pad;
    let slope = |x: f64| 8.0 * (f(x + h) - f(x - h)) - (f(x + 2.0 * h) - f(x - 2.0 * h));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Minimum of `f` over `n` evenly spaced points of `[lo, hi]`.
pub fn grid_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> (f64, f64) {
    (0..n)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            (x, f(x))
        })
        .fold((f64::NAN, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Minimum over a geometric grid on `[lo, hi]`, for scale parameters.
pub fn log_grid_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> (f64, f64) {
    let (l, v) = grid_min(|u| f(u.exp()), lo.ln(), hi.ln(), n);
    (l.exp(), v)
}

/// Simplex projection by bisection on the threshold `τ` in `Σ max(v - τ, 0) = 1`.
pub fn simplex_by_bisection(v: &[f64]) -> Vec<f64> {
    let mass = |t: f64| v.iter().map(|x| (x - t).max(0.0)).sum::<f64>();
    let mut lo = v.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    v.iter().map(|x| (x - t).max(0.0)).collect()
}

/// Closest point of the L1 sphere found by trying every sign orthant.
pub fn orthant_oracle(w: &[f64]) -> (Vec<f64>, f64) {
    let m = w.len();
    let mut best = (Vec::new(), f64::INFINITY);
    for mask in 0..(1u32 << m) {
        let s: Vec<f64> = (0..m).map(|i| if mask >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
        let flipped: Vec<f64> = w.iter().zip(&s).map(|(x, si)| x * si).collect();
        let u = simplex_by_bisection(&flipped);
        let cand: Vec<f64> = u.iter().zip(&s).map(|(x, si)| x * si).collect();
        let d = dist(&cand, w);
        if d < best.1 {
            best = (cand, d);
        }
    }
    best
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Largest and second-largest |w_i| summed.
pub fn top_two_mass(w: &[f64]) -> f64 {
    let mut a: Vec<f64> = w.iter().map(|x| x.abs()).collect();
    a.sort_by(|x, y| y.total_cmp(x));
    a.iter().take(2).sum()
}
