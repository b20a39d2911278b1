//! Smoothers used by the calibration methods: restricted cubic spline bases
//! and LOESS local polynomial regression with AICc span selection.

mod loess;
mod rcs;

pub use loess::{
    default_span_grid, loess_aicc, loess_fit, loess_select_span, LoessError, LoessModel,
    LoessPrediction,
};
pub use rcs::{place_knots, RcsBasis, RcsError};

/// Strictly increasing knot locations on the logit scale, 3 to 5 of them.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    knots: Vec<f64>,
}

impl KnotVector {
    pub fn new(knots: Vec<f64>) -> Result<Self, RcsError> {
        if !(3..=5).contains(&knots.len()) {
            return Err(RcsError::BadKnotCount(knots.len()));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(RcsError::NonFiniteKnot);
        }
        if !crate::numeric::is_strictly_increasing(&knots) {
            return Err(RcsError::NotIncreasing);
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of knots k; the spline basis has k-1 columns.
    pub fn k(&self) -> usize {
        self.knots.len()
    }
}
