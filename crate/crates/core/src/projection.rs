//! Euclidean projections onto the unit simplex and the L1 unit sphere.
//!
//! The sphere `{w : ||w||_1 = 1}` is not convex, but its projection factors
//! through the simplex: `proj(w) = sign(w) ⊙ proj_simplex(|w|)`.

use nalgebra::DVector;

use crate::likelihood::Weights;

/// Componentwise sign with `sign(0) = +1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignPattern {
    pub signs: Vec<i8>,
}

impl SignPattern {
    pub fn of(v: &[f64]) -> Self {
        SignPattern { signs: v.iter().map(|&x| if x < 0.0 { -1 } else { 1 }).collect() }
    }
}

/// Threshold `tau` such that `max(v - tau, 0)` is the simplex projection of `v`.
///
/// Sort-and-threshold, `O(m log m)`. Ties in the sort are broken by index.
pub fn simplex_threshold(v: &[f64]) -> f64 {
    assert!(!v.is_empty(), "cannot project an empty vector");
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));

    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &i) in order.iter().enumerate() {
        cumsum += v[i];
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if v[i] - candidate > 0.0 {
            tau = candidate;
        } else {
            break;
        }
    }
    tau
}

/// Projection onto `{u >= 0, sum u = 1}`.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let tau = simplex_threshold(v);
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

/// Result of [`project_l1_sphere`].
#[derive(Debug, Clone, PartialEq)]
pub struct SphereProjection {
    pub weights: Weights,
    /// The input was the zero vector and `e_1` was returned.
    pub from_zero: bool,
}

/// Projection onto `{||w||_1 = 1}`.
///
/// The zero vector has no unique projection; it maps to `e_1` with `from_zero` set.
pub fn project_l1_sphere(w: &DVector<f64>) -> SphereProjection {
    let m = w.len();
    assert!(m > 0, "cannot project an empty vector");
    let l1 = w.lp_norm(1);
    if l1 == 0.0 {
        let mut e = DVector::zeros(m);
        e[0] = 1.0;
        return SphereProjection { weights: Weights::new_unchecked(e), from_zero: true };
    }
    // already feasible up to rounding: leave it alone so projection is idempotent
    if (l1 - 1.0).abs() <= 8.0 * f64::EPSILON * m as f64 {
        return SphereProjection { weights: Weights::new_unchecked(w.clone()), from_zero: false };
    }

    let signs = SignPattern::of(w.as_slice());
    let abs: Vec<f64> = w.iter().map(|x| x.abs()).collect();
    let u = project_simplex(&abs);
    let total: f64 = u.iter().sum();
    let out = DVector::from_iterator(
        m,
        u.iter().zip(&signs.signs).map(|(&ui, &s)| f64::from(s) * ui / total),
    );
    SphereProjection { weights: Weights::new_unchecked(out), from_zero: false }
}
