//! Restricted (natural) cubic spline basis in the Harrell normalization:
//! linear tails beyond the boundary knots, continuous second derivative,
//! nonlinear terms scaled by the squared knot range.

use thiserror::Error;

use super::KnotVector;
use crate::numeric::{is_strictly_increasing, quantile_sorted};

#[derive(Debug, Error)]
pub enum RcsError {
    #[error("knot count must be 3, 4 or 5, got {0}")]
    BadKnotCount(usize),
    #[error("knots must be finite")]
    NonFiniteKnot,
    #[error("knots must be strictly increasing")]
    NotIncreasing,
    #[error("need at least {need} distinct values to place {need} knots, got {got}")]
    TooFewDistinct { need: usize, got: usize },
    #[error("duplicate knots remain after nudging; values too concentrated")]
    DegenerateKnots,
}

/// Outer-quantile default knot positions, by knot count.
fn quantile_positions(k: usize) -> &'static [f64] {
    match k {
        3 => &[0.10, 0.50, 0.90],
        4 => &[0.05, 0.35, 0.65, 0.95],
        5 => &[0.05, 0.275, 0.50, 0.725, 0.95],
        _ => unreachable!("knot count validated upstream"),
    }
}

/// Place `k` knots at the conventional outer quantiles of `values`
/// (type-7 quantiles). Duplicate knots are nudged apart by 1e-8 of the value
/// range; if they still coincide the input is too degenerate for a spline.
pub fn place_knots(values: &[f64], k: usize) -> Result<KnotVector, RcsError> {
    if !(3..=5).contains(&k) {
        return Err(RcsError::BadKnotCount(k));
    }
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut distinct = 0usize;
    for i in 0..sorted.len() {
        if i == 0 || sorted[i] > sorted[i - 1] {
            distinct += 1;
        }
    }
    if distinct < k {
        return Err(RcsError::TooFewDistinct { need: k, got: distinct });
    }
    let mut knots: Vec<f64> = quantile_positions(k)
        .iter()
        .map(|&p| quantile_sorted(&sorted, p))
        .collect();
    if !is_strictly_increasing(&knots) {
        let range = sorted[sorted.len() - 1] - sorted[0];
        let delta = 1e-8 * range;
        let mid = (k as f64 - 1.0) / 2.0;
        for (i, knot) in knots.iter_mut().enumerate() {
            *knot += (i as f64 - mid) * delta;
        }
        if !is_strictly_increasing(&knots) {
            return Err(RcsError::DegenerateKnots);
        }
    }
    KnotVector::new(knots)
}

/// Restricted cubic spline basis over a fixed knot vector.
///
/// For k knots the basis row (excluding intercept) has k-1 columns: the
/// identity term x followed by k-2 restricted truncated-cubic terms.
#[derive(Debug, Clone)]
pub struct RcsBasis {
    knots: KnotVector,
}

impl RcsBasis {
    pub fn new(knots: KnotVector) -> Self {
        Self { knots }
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    /// Number of basis columns (k-1).
    pub fn ncols(&self) -> usize {
        self.knots.k() - 1
    }

    /// Basis row at x: `[x, term_1(x), ..., term_{k-2}(x)]`.
    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        let t = self.knots.knots();
        let k = t.len();
        let scale = (t[k - 1] - t[0]) * (t[k - 1] - t[0]);
        let mut row = Vec::with_capacity(k - 1);
        row.push(x);
        let cube = |v: f64| -> f64 {
            let p = (v).max(0.0);
            p * p * p
        };
        let span_last = t[k - 1] - t[k - 2];
        for m in 0..(k - 2) {
            let term = cube(x - t[m]) - cube(x - t[k - 2]) * (t[k - 1] - t[m]) / span_last
                + cube(x - t[k - 1]) * (t[k - 2] - t[m]) / span_last;
            row.push(term / scale);
        }
        row
    }
}
