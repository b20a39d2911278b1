//! Logistic regression by iteratively reweighted least squares with
//! step-halving, delta-method prediction uncertainty, likelihood-ratio
//! testing, and spline knot-count selection.

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::numeric::{bernoulli_ll, expit};
use crate::smoothers::{place_knots, KnotVector, RcsBasis, RcsError};

/// Thresholds flagging (quasi-)separation: fitted values or their standard
/// errors beyond these bounds on the logit scale.
const SEPARATION_LOGIT: f64 = 15.0;
const SEPARATION_SE: f64 = 70.0;

#[derive(Debug, Error)]
pub enum LogisticError {
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("design has {cols} columns but only {rows} rows")]
    MoreColumnsThanRows { rows: usize, cols: usize },
    #[error("outcome length {y} does not match design rows {rows}")]
    DimensionMismatch { rows: usize, y: usize },
    #[error("step-halving failed to restore likelihood ascent")]
    Diverged,
    #[error("models must have different parameter counts for a likelihood ratio test")]
    EqualParameterCounts,
    #[error("likelihood ratio test requires converged fits")]
    NotConverged,
    #[error("no feasible knot count: {0}")]
    NoFeasibleKnots(#[from] RcsError),
    #[error("empty design")]
    EmptyDesign,
}

/// How the design matrix of a calibration fit is built from predicted risks.
#[derive(Debug, Clone, PartialEq)]
pub enum DesignSpec {
    InterceptOnly,
    /// Intercept plus logit(p_hat): the alpha + zeta model.
    LinearInLogit,
    /// Intercept plus a restricted cubic spline of logit(p_hat).
    Rcs(KnotVector),
}

impl DesignSpec {
    /// Design row for a point on the logit scale (leading 1 for intercept).
    pub fn row(&self, logit_p: f64) -> Vec<f64> {
        match self {
            DesignSpec::InterceptOnly => vec![1.0],
            DesignSpec::LinearInLogit => vec![1.0, logit_p],
            DesignSpec::Rcs(knots) => {
                let mut row = vec![1.0];
                row.extend(RcsBasis::new(knots.clone()).evaluate(logit_p));
                row
            }
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            DesignSpec::InterceptOnly => 1,
            DesignSpec::LinearInLogit => 2,
            DesignSpec::Rcs(knots) => knots.k(),
        }
    }

    /// Full design matrix for a set of logit-scale values.
    pub fn matrix(&self, logit_p: &[f64]) -> DMatrix<f64> {
        let rows: Vec<f64> = logit_p.iter().flat_map(|&v| self.row(v)).collect();
        DMatrix::from_row_slice(logit_p.len(), self.ncols(), &rows)
    }
}

/// Maximum-likelihood logistic fit.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coefficients: DVector<f64>,
    /// Inverse observed information at the optimum.
    pub covariance: DMatrix<f64>,
    pub log_likelihood: f64,
    pub n: usize,
    pub design: Option<DesignSpec>,
    pub converged: bool,
    pub separation_flag: bool,
}

impl LogisticFit {
    pub fn p(&self) -> usize {
        self.coefficients.len()
    }

    /// Linear predictor and delta-method standard error at a covariate row.
    pub fn predict_logit_se(&self, x0: &[f64]) -> PredictionWithSe {
        assert_eq!(x0.len(), self.p(), "covariate row length mismatch");
        let x = DVector::from_column_slice(x0);
        let logit_estimate = self.coefficients.dot(&x);
        let var = (&self.covariance * &x).dot(&x);
        PredictionWithSe { logit_estimate, se_logit: var.max(0.0).sqrt() }
    }
}

/// A logit-scale prediction with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct PredictionWithSe {
    pub logit_estimate: f64,
    pub se_logit: f64,
}

/// Fit a logistic regression of `y` on the rows of `x` by IRLS with
/// step-halving. Fractional outcomes in [0,1] are accepted, which lets the
/// same routine fit calibration models against known true probabilities.
pub fn fit_logistic(
    x: &DMatrix<f64>,
    y: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<LogisticFit, LogisticError> {
    let n = x.nrows();
    let p = x.ncols();
    if n == 0 || p == 0 {
        return Err(LogisticError::EmptyDesign);
    }
    if y.len() != n {
        return Err(LogisticError::DimensionMismatch { rows: n, y: y.len() });
    }
    if p > n {
        return Err(LogisticError::MoreColumnsThanRows { rows: n, cols: p });
    }

    let yv = DVector::from_column_slice(y);
    let mut beta = DVector::zeros(p);
    let mut ll = log_likelihood(x, &yv, &beta);
    let mut converged = false;
    let mut xtwx = DMatrix::zeros(p, p);

    for _ in 0..max_iter {
        let eta = x * &beta;
        let mu = eta.map(expit);

        xtwx.fill(0.0);
        let mut score = DVector::zeros(p);
        for i in 0..n {
            let wi = (mu[i] * (1.0 - mu[i])).max(1e-10);
            let ri = yv[i] - mu[i];
            for a in 0..p {
                let xa = x[(i, a)];
                score[a] += xa * ri;
                for b in a..p {
                    xtwx[(a, b)] += wi * xa * x[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }

        if score.amax() < tol {
            converged = true;
            break;
        }

        let chol = Cholesky::new(xtwx.clone()).ok_or(LogisticError::RankDeficient)?;
        let delta = chol.solve(&score);

        // Step-halving keeps the likelihood non-decreasing.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=10 {
            let cand = &beta + step * &delta;
            let cand_ll = log_likelihood(x, &yv, &cand);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 {
                let rel_change = (cand_ll - ll).abs() / (ll.abs() + 0.1);
                beta = cand;
                ll = cand_ll;
                accepted = true;
                if rel_change < tol {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(LogisticError::Diverged);
        }
        if converged {
            break;
        }
    }

    // Covariance from the observed information at the final estimate.
    let eta = x * &beta;
    xtwx.fill(0.0);
    for i in 0..n {
        let m = expit(eta[i]);
        let wi = (m * (1.0 - m)).max(1e-10);
        for a in 0..p {
            for b in a..p {
                xtwx[(a, b)] += wi * x[(i, a)] * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    let covariance = Cholesky::new(xtwx)
        .ok_or(LogisticError::RankDeficient)?
        .inverse();

    // Separation check on the logit scale via the fitted linear predictor:
    // spline bases have collinear columns whose raw coefficients are large
    // and cancel, so thresholds apply to eta and its delta-method SE.
    let mut separation_flag = false;
    for i in 0..n {
        if eta[i].abs() > SEPARATION_LOGIT {
            separation_flag = true;
            break;
        }
        let xi = x.row(i).transpose();
        let var = (&covariance * &xi).dot(&xi);
        if var.max(0.0).sqrt() > SEPARATION_SE {
            separation_flag = true;
            break;
        }
    }

    Ok(LogisticFit {
        coefficients: beta,
        covariance,
        log_likelihood: ll,
        n,
        design: None,
        converged,
        separation_flag,
    })
}

/// Fit `y` on a design built from logit-scale values, retaining the design
/// for later prediction.
pub fn fit_calibration(
    design: &DesignSpec,
    logit_p: &[f64],
    y: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<LogisticFit, LogisticError> {
    let x = design.matrix(logit_p);
    let mut fit = fit_logistic(&x, y, max_iter, tol)?;
    fit.design = Some(design.clone());
    Ok(fit)
}

fn log_likelihood(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    let mut ll = 0.0;
    for i in 0..y.len() {
        ll += bernoulli_ll(y[i], expit(eta[i]));
    }
    ll
}

/// Likelihood ratio test of a smaller model against a larger one.
/// Returns (statistic, df, p-value); the statistic is clipped at zero.
pub fn lr_test(
    fit_small: &LogisticFit,
    fit_large: &LogisticFit,
) -> Result<(f64, usize, f64), LogisticError> {
    if fit_small.p() == fit_large.p() {
        return Err(LogisticError::EqualParameterCounts);
    }
    if !fit_small.converged || !fit_large.converged {
        return Err(LogisticError::NotConverged);
    }
    let (small, large) = if fit_small.p() < fit_large.p() {
        (fit_small, fit_large)
    } else {
        (fit_large, fit_small)
    };
    let statistic = (2.0 * (large.log_likelihood - small.log_likelihood)).max(0.0);
    let df = large.p() - small.p();
    let p_value = ChiSquared::new(df as f64).expect("df > 0").sf(statistic);
    Ok((statistic, df, p_value))
}

/// Outcome of the knot-count selection procedure.
#[derive(Debug, Clone)]
pub struct KnotSelection {
    pub k: usize,
    pub knots: KnotVector,
    pub fit: LogisticFit,
}

/// Choose the spline knot count in {3,4,5} for a calibration fit: fit every
/// feasible count and return the smallest one that no larger count improves
/// upon significantly (pairwise likelihood ratio tests at level `alpha`).
pub fn select_rcs_knots(
    logit_p: &[f64],
    y: &[f64],
    alpha: f64,
) -> Result<KnotSelection, LogisticError> {
    let mut candidates: Vec<(usize, KnotVector, LogisticFit)> = Vec::new();
    let mut last_err: Option<LogisticError> = None;
    for k in [3usize, 4, 5] {
        let knots = match place_knots(logit_p, k) {
            Ok(kv) => kv,
            Err(e) => {
                last_err = Some(LogisticError::NoFeasibleKnots(e));
                continue;
            }
        };
        match fit_calibration(&DesignSpec::Rcs(knots.clone()), logit_p, y, 50, 1e-9) {
            Ok(fit) if fit.converged && !fit.separation_flag => {
                candidates.push((k, knots, fit));
            }
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    if candidates.is_empty() {
        return Err(last_err.unwrap_or(LogisticError::RankDeficient));
    }
    for i in 0..candidates.len() {
        let improved = candidates[i + 1..]
            .iter()
            .any(|(_, _, larger)| match lr_test(&candidates[i].2, larger) {
                Ok((_, _, p)) => p < alpha,
                Err(_) => false,
            });
        if !improved {
            let (k, knots, fit) = candidates.swap_remove(i);
            return Ok(KnotSelection { k, knots, fit });
        }
    }
    let (k, knots, fit) = candidates.pop().expect("nonempty");
    Ok(KnotSelection { k, knots, fit })
}
