//! Univariate and bivariate random-effects meta-analysis: REML
//! heterogeneity estimation, pooled effects with normal or
//! Hartung-Knapp-Sidik-Jonkman confidence intervals, and prediction
//! intervals for the effect in a new cluster.

use nalgebra::{Matrix2, Vector2};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::numeric::{logit, sample_var};
use crate::optim::{brent_min, NelderMead};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("need at least {need} effects, got {got}")]
    TooFewEffects { need: usize, got: usize },
    #[error("within-cluster variances must be positive and finite")]
    BadVariance,
    #[error("t-based prediction interval needs k >= 3; use the normal method or no-PI mode")]
    TooFewForTBasedPi,
    #[error("confidence level must lie in (0, 1)")]
    BadLevel,
}

/// One cluster's logit-scale estimate with its sampling variance.
#[derive(Debug, Clone)]
pub struct EffectEstimate {
    pub theta: f64,
    pub var_within: f64,
    pub label: String,
}

impl EffectEstimate {
    pub fn new(theta: f64, var_within: f64, label: impl Into<String>) -> Self {
        Self { theta, var_within, label: label.into() }
    }
}

/// Confidence interval flavor for the pooled effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CiMethod {
    Normal,
    Hksj,
}

/// Prediction interval flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiMethod {
    TBased,
    Normal,
}

/// Pooled random-effects result for a single outcome.
#[derive(Debug, Clone)]
pub struct MetaResult {
    pub mu: f64,
    pub se_mu: f64,
    pub tau2: f64,
    pub k: usize,
    pub ci: (f64, f64),
    pub pi: Option<(f64, f64)>,
    pub ci_method: CiMethod,
    pub pi_method: Option<PiMethod>,
    /// Set when k = 2 forces a t distribution with a single degree of
    /// freedom in the HKSJ interval.
    pub wide_interval_warning: bool,
}

fn check_effects(effects: &[EffectEstimate], need: usize) -> Result<(), MetaError> {
    if effects.len() < need {
        return Err(MetaError::TooFewEffects { need, got: effects.len() });
    }
    if effects
        .iter()
        .any(|e| !(e.var_within > 0.0) || !e.var_within.is_finite() || !e.theta.is_finite())
    {
        return Err(MetaError::BadVariance);
    }
    Ok(())
}

fn z_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

fn t_quantile(df: f64, level: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df)
        .expect("positive df")
        .inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

/// Restricted log-likelihood of the random-effects model at a given tau^2,
/// up to constants that do not depend on tau^2.
fn restricted_ll(effects: &[EffectEstimate], tau2: f64) -> f64 {
    let mut sum_w = 0.0;
    let mut sum_wt = 0.0;
    for e in effects {
        let w = 1.0 / (e.var_within + tau2);
        sum_w += w;
        sum_wt += w * e.theta;
    }
    let mu = sum_wt / sum_w;
    let mut ll = -0.5 * sum_w.ln();
    for e in effects {
        let v = e.var_within + tau2;
        ll -= 0.5 * v.ln();
        ll -= 0.5 * (e.theta - mu) * (e.theta - mu) / v;
    }
    ll
}

/// REML estimate of the between-cluster variance, maximizing the restricted
/// likelihood over [0, 10 * var(theta)] with Brent's method.
pub fn reml_tau2(effects: &[EffectEstimate]) -> Result<f64, MetaError> {
    check_effects(effects, 2)?;
    let thetas: Vec<f64> = effects.iter().map(|e| e.theta).collect();
    let tau_max = 10.0 * sample_var(&thetas);
    if tau_max <= 0.0 {
        return Ok(0.0);
    }
    let tau2 = brent_min(|t| -restricted_ll(effects, t), 0.0, tau_max, 1e-10, 300);
    // The optimum may sit on the lower boundary; compare explicitly.
    if restricted_ll(effects, 0.0) >= restricted_ll(effects, tau2) {
        Ok(0.0)
    } else {
        Ok(tau2.max(0.0))
    }
}

/// Inverse-variance pooled mean with weights 1/(tau^2 + sigma_j^2) and the
/// requested confidence interval.
pub fn pool(
    effects: &[EffectEstimate],
    tau2: f64,
    ci_method: CiMethod,
    level: f64,
) -> Result<MetaResult, MetaError> {
    check_effects(effects, 2)?;
    if !(level > 0.0 && level < 1.0) {
        return Err(MetaError::BadLevel);
    }
    let k = effects.len();
    let mut sum_w = 0.0;
    let mut sum_wt = 0.0;
    for e in effects {
        let w = 1.0 / (tau2 + e.var_within);
        sum_w += w;
        sum_wt += w * e.theta;
    }
    let mu = sum_wt / sum_w;
    let (se_mu, ci, warn) = match ci_method {
        CiMethod::Normal => {
            let se = sum_w.sqrt().recip();
            let z = z_quantile(level);
            (se, (mu - z * se, mu + z * se), false)
        }
        CiMethod::Hksj => {
            let (lo, hi, se, warn) = hksj_interval(effects, tau2, mu, level);
            (se, (lo, hi), warn)
        }
    };
    Ok(MetaResult {
        mu,
        se_mu,
        tau2,
        k,
        ci,
        pi: None,
        ci_method,
        pi_method: None,
        wide_interval_warning: warn,
    })
}

fn hksj_interval(
    effects: &[EffectEstimate],
    tau2: f64,
    mu: f64,
    level: f64,
) -> (f64, f64, f64, bool) {
    let k = effects.len();
    let mut sum_w = 0.0;
    let mut sum_wd = 0.0;
    for e in effects {
        let w = 1.0 / (tau2 + e.var_within);
        sum_w += w;
        sum_wd += w * (e.theta - mu) * (e.theta - mu);
    }
    let q = sum_wd / ((k as f64 - 1.0) * sum_w);
    let se = q.max(0.0).sqrt();
    let t = t_quantile(k as f64 - 1.0, level);
    (mu - t * se, mu + t * se, se, k == 2)
}

/// Hartung-Knapp-Sidik-Jonkman confidence interval for the pooled effect.
/// Returns the interval and a warning flag for the k = 2 case.
pub fn hksj_ci(
    effects: &[EffectEstimate],
    tau2: f64,
    mu: f64,
    level: f64,
) -> Result<((f64, f64), bool), MetaError> {
    check_effects(effects, 2)?;
    let (lo, hi, _, warn) = hksj_interval(effects, tau2, mu, level);
    Ok(((lo, hi), warn))
}

/// Prediction interval for the effect in a new cluster:
/// `mu ± q * sqrt(tau^2 + se_mu^2)` with q a t (df = k-2) or normal quantile.
pub fn prediction_interval(
    meta: &MetaResult,
    method: PiMethod,
    level: f64,
) -> Result<(f64, f64), MetaError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(MetaError::BadLevel);
    }
    let spread = (meta.tau2 + meta.se_mu * meta.se_mu).sqrt();
    let q = match method {
        PiMethod::TBased => {
            if meta.k < 3 {
                return Err(MetaError::TooFewForTBasedPi);
            }
            t_quantile(meta.k as f64 - 2.0, level)
        }
        PiMethod::Normal => z_quantile(level),
    };
    Ok((meta.mu - q * spread, meta.mu + q * spread))
}

/// One cluster's bivariate point for clustered group calibration:
/// theta = (logit mean outcome, logit mean risk) with its within-cluster
/// covariance.
#[derive(Debug, Clone)]
pub struct BivariatePoint {
    pub theta: Vector2<f64>,
    pub sigma: Matrix2<f64>,
    pub n: usize,
    pub label: String,
}

impl BivariatePoint {
    /// Delta-method construction from the raw group summary. `events` out of
    /// `n` observed outcomes; risks summarized by mean, sample variance and
    /// the sample covariance between outcome and risk. A continuity
    /// correction (events + 0.5)/(n + 1) handles all-event / no-event
    /// groups, and the covariance is floored to positive definite.
    pub fn from_group_stats(
        events: usize,
        n: usize,
        mean_risk: f64,
        var_risk: f64,
        cov_y_risk: f64,
        label: impl Into<String>,
    ) -> Self {
        assert!(n >= 1);
        let nf = n as f64;
        let y_bar = if events == 0 || events == n {
            (events as f64 + 0.5) / (nf + 1.0)
        } else {
            events as f64 / nf
        };
        let pi_bar = mean_risk.clamp(1e-10, 1.0 - 1e-10);
        let dy = 1.0 / (y_bar * (1.0 - y_bar));
        let dpi = 1.0 / (pi_bar * (1.0 - pi_bar));
        let var_logit_y = dy / nf;
        let var_logit_pi = var_risk.max(0.0) / nf * dpi * dpi;
        let cov = cov_y_risk / nf * dy * dpi;
        let sigma = psd_floor(Matrix2::new(var_logit_y, cov, cov, var_logit_pi));
        Self {
            theta: Vector2::new(logit(y_bar), logit(pi_bar)),
            sigma,
            n,
            label: label.into(),
        }
    }
}

/// Floor the eigenvalues of a symmetric 2x2 matrix at 1e-10.
fn psd_floor(m: Matrix2<f64>) -> Matrix2<f64> {
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        *v = v.max(1e-10);
    }
    &eig.eigenvectors * Matrix2::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Pooled bivariate random-effects result.
#[derive(Debug, Clone)]
pub struct BivariateMetaResult {
    /// Pooled (logit outcome, logit risk).
    pub mu: Vector2<f64>,
    pub cov_mu: Matrix2<f64>,
    /// Between-cluster covariance.
    pub omega: Matrix2<f64>,
    pub k: usize,
    /// Wald interval on the outcome dimension, logit scale.
    pub ci_y: (f64, f64),
    /// t-based prediction interval on the outcome dimension, logit scale.
    pub pi_y: (f64, f64),
    pub converged: bool,
}

/// Restricted log-likelihood of the bivariate model at a fixed Omega,
/// up to additive constants.
fn bivariate_restricted_ll(points: &[BivariatePoint], omega: &Matrix2<f64>) -> f64 {
    let mut sum_vinv = Matrix2::zeros();
    let mut sum_vinv_theta = Vector2::zeros();
    let mut ll = 0.0;
    for p in points {
        let v = p.sigma + omega;
        let det = v[(0, 0)] * v[(1, 1)] - v[(0, 1)] * v[(1, 0)];
        if det <= 0.0 || !det.is_finite() {
            return f64::NEG_INFINITY;
        }
        let vinv = Matrix2::new(v[(1, 1)], -v[(0, 1)], -v[(1, 0)], v[(0, 0)]) / det;
        sum_vinv += vinv;
        sum_vinv_theta += vinv * p.theta;
        ll -= 0.5 * det.ln();
    }
    let det_s = sum_vinv[(0, 0)] * sum_vinv[(1, 1)] - sum_vinv[(0, 1)] * sum_vinv[(1, 0)];
    if det_s <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let cov_mu =
        Matrix2::new(sum_vinv[(1, 1)], -sum_vinv[(0, 1)], -sum_vinv[(1, 0)], sum_vinv[(0, 0)])
            / det_s;
    let mu = cov_mu * sum_vinv_theta;
    ll -= 0.5 * det_s.ln();
    for p in points {
        let v = p.sigma + omega;
        let det = v[(0, 0)] * v[(1, 1)] - v[(0, 1)] * v[(1, 0)];
        let vinv = Matrix2::new(v[(1, 1)], -v[(0, 1)], -v[(1, 0)], v[(0, 0)]) / det;
        let r = p.theta - mu;
        ll -= 0.5 * (vinv * r).dot(&r);
    }
    ll
}

fn omega_from_params(params: &[f64]) -> Matrix2<f64> {
    let l11 = params[0].clamp(-13.8, 6.9).exp();
    let l22 = params[1].clamp(-13.8, 6.9).exp();
    let l21 = if params.len() > 2 { params[2].clamp(-1e3, 1e3) } else { 0.0 };
    // L = [[l11, 0], [l21, l22]], Omega = L L'.
    Matrix2::new(
        l11 * l11,
        l11 * l21,
        l11 * l21,
        l21 * l21 + l22 * l22,
    )
}

/// Bivariate random-effects meta-analysis with an unstructured
/// between-cluster covariance estimated by REML over its log-Cholesky
/// factor (Nelder-Mead). The outcome dimension carries a Wald confidence
/// interval and a t-based (df = k-2) prediction interval, both logit scale.
pub fn bivariate_reml(
    points: &[BivariatePoint],
    level: f64,
) -> Result<BivariateMetaResult, MetaError> {
    bivariate_reml_with(points, level, false)
}

/// As [`bivariate_reml`], optionally constraining the between-cluster
/// covariance to be diagonal (no between-cluster correlation).
pub fn bivariate_reml_with(
    points: &[BivariatePoint],
    level: f64,
    diagonal_omega: bool,
) -> Result<BivariateMetaResult, MetaError> {
    if points.len() < 3 {
        return Err(MetaError::TooFewEffects { need: 3, got: points.len() });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(MetaError::BadLevel);
    }
    let k = points.len();

    // Start from the marginal dispersion of each dimension.
    let t0: Vec<f64> = points.iter().map(|p| p.theta[0]).collect();
    let t1: Vec<f64> = points.iter().map(|p| p.theta[1]).collect();
    let s0 = sample_var(&t0).max(1e-4).sqrt();
    let s1 = sample_var(&t1).max(1e-4).sqrt();
    let start = if diagonal_omega {
        vec![s0.ln(), s1.ln()]
    } else {
        vec![s0.ln(), s1.ln(), 0.0]
    };

    let nm = NelderMead { ftol: 1e-9, max_iter: 800, init_step: 0.7 };
    let res = nm.minimize(
        |p| -bivariate_restricted_ll(points, &omega_from_params(p)),
        &start,
    );
    let omega = omega_from_params(&res.x);

    // GLS at the estimated Omega.
    let mut sum_vinv = Matrix2::zeros();
    let mut sum_vinv_theta = Vector2::zeros();
    for p in points {
        let v = p.sigma + omega;
        let det = v[(0, 0)] * v[(1, 1)] - v[(0, 1)] * v[(1, 0)];
        let vinv = Matrix2::new(v[(1, 1)], -v[(0, 1)], -v[(1, 0)], v[(0, 0)]) / det;
        sum_vinv += vinv;
        sum_vinv_theta += vinv * p.theta;
    }
    let det_s = sum_vinv[(0, 0)] * sum_vinv[(1, 1)] - sum_vinv[(0, 1)] * sum_vinv[(1, 0)];
    let cov_mu =
        Matrix2::new(sum_vinv[(1, 1)], -sum_vinv[(0, 1)], -sum_vinv[(1, 0)], sum_vinv[(0, 0)])
            / det_s;
    let mu = cov_mu * sum_vinv_theta;

    let se_y = cov_mu[(0, 0)].max(0.0).sqrt();
    let z = z_quantile(level);
    let ci_y = (mu[0] - z * se_y, mu[0] + z * se_y);
    let t = t_quantile(k as f64 - 2.0, level);
    let spread = (omega[(0, 0)] + se_y * se_y).sqrt();
    let pi_y = (mu[0] - t * spread, mu[0] + t * spread);

    Ok(BivariateMetaResult {
        mu,
        cov_mu,
        omega,
        k,
        ci_y,
        pi_y,
        converged: res.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fixture() -> Vec<EffectEstimate> {
        vec![
            EffectEstimate::new(0.2, 0.01, "a"),
            EffectEstimate::new(0.5, 0.02, "b"),
            EffectEstimate::new(0.9, 0.03, "c"),
        ]
    }

    /// Grid-search oracle over tau^2 with the stated step.
    fn grid_oracle(effects: &[EffectEstimate], hi: f64, step: f64) -> f64 {
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut t = 0.0;
        while t <= hi {
            let ll = restricted_ll(effects, t);
            if ll > best.0 {
                best = (ll, t);
            }
            t += step;
        }
        best.1
    }

    #[test]
    fn identical_effects_give_zero_tau2() {
        let effects = vec![
            EffectEstimate::new(0.4, 0.01, "a"),
            EffectEstimate::new(0.4, 0.02, "b"),
            EffectEstimate::new(0.4, 0.015, "c"),
        ];
        assert_eq!(reml_tau2(&effects).unwrap(), 0.0);
    }

    #[test]
    fn reml_matches_grid_oracle() {
        let effects = fixture();
        let tau2 = reml_tau2(&effects).unwrap();
        let oracle = grid_oracle(&effects, 1.0, 1e-6);
        assert!(
            (tau2 - oracle).abs() < 1e-5,
            "reml {tau2} vs grid oracle {oracle}"
        );
    }

    #[test]
    fn reml_two_far_effects() {
        let effects = vec![
            EffectEstimate::new(0.0, 1e-6, "a"),
            EffectEstimate::new(1.0, 1e-6, "b"),
        ];
        let tau2 = reml_tau2(&effects).unwrap();
        let oracle = grid_oracle(&effects, 5.0, 1e-6);
        assert!((tau2 - oracle).abs() < 1e-4, "reml {tau2} vs {oracle}");
        assert!(tau2 > 0.2);
    }

    #[test]
    fn reml_requires_two_effects() {
        let one = vec![EffectEstimate::new(0.0, 0.1, "a")];
        assert!(matches!(
            reml_tau2(&one),
            Err(MetaError::TooFewEffects { need: 2, got: 1 })
        ));
    }

    #[test]
    fn reml_continuous_under_perturbation() {
        let effects = fixture();
        let base = reml_tau2(&effects).unwrap();
        let mut bumped = effects.clone();
        bumped[1].theta += 1e-8;
        let pert = reml_tau2(&bumped).unwrap();
        assert!((base - pert).abs() < 1e-6);
    }

    #[test]
    fn pool_equal_effects() {
        let sigma2 = 0.04;
        let effects: Vec<_> = (0..5)
            .map(|i| EffectEstimate::new(0.7, sigma2, format!("c{i}")))
            .collect();
        let res = pool(&effects, 0.0, CiMethod::Normal, 0.95).unwrap();
        assert_relative_eq!(res.mu, 0.7, epsilon = 1e-12);
        assert_relative_eq!(res.se_mu, (sigma2 / 5.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn pool_matches_hand_computed_weighted_mean() {
        let effects = fixture();
        let tau2 = 0.05;
        let res = pool(&effects, tau2, CiMethod::Normal, 0.95).unwrap();
        let w: Vec<f64> = effects.iter().map(|e| 1.0 / (tau2 + e.var_within)).collect();
        let mu = (0.2 * w[0] + 0.5 * w[1] + 0.9 * w[2]) / (w[0] + w[1] + w[2]);
        assert!((res.mu - mu).abs() < 1e-10);
    }

    #[test]
    fn infinite_variance_effect_has_no_weight() {
        let mut effects = fixture();
        let base = pool(&effects, 0.0, CiMethod::Normal, 0.95).unwrap();
        effects.push(EffectEstimate::new(50.0, 1e12, "noise"));
        let with_noise = pool(&effects, 0.0, CiMethod::Normal, 0.95).unwrap();
        assert!((base.mu - with_noise.mu).abs() < 1e-6);
    }

    #[test]
    fn pool_permutation_and_duplication() {
        let effects = fixture();
        let res = pool(&effects, 0.02, CiMethod::Normal, 0.95).unwrap();
        let mut rev = effects.clone();
        rev.reverse();
        let res_rev = pool(&rev, 0.02, CiMethod::Normal, 0.95).unwrap();
        assert_eq!(res.mu, res_rev.mu);
        let mut dup = effects.clone();
        dup.extend(effects.clone());
        let res_dup = pool(&dup, 0.02, CiMethod::Normal, 0.95).unwrap();
        assert_relative_eq!(res_dup.mu, res.mu, epsilon = 1e-12);
        assert_relative_eq!(res_dup.se_mu, res.se_mu / 2.0_f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn hksj_zero_dispersion() {
        let effects: Vec<_> = (0..4)
            .map(|i| EffectEstimate::new(0.3, 0.01, format!("c{i}")))
            .collect();
        let ((lo, hi), warn) = hksj_ci(&effects, 0.0, 0.3, 0.95).unwrap();
        assert!((hi - lo).abs() < 1e-12);
        assert!(!warn);
    }

    #[test]
    fn hksj_matches_hand_computation() {
        let effects = fixture();
        let tau2 = 0.05;
        let res = pool(&effects, tau2, CiMethod::Hksj, 0.95).unwrap();
        let w: Vec<f64> = effects.iter().map(|e| 1.0 / (tau2 + e.var_within)).collect();
        let sw: f64 = w.iter().sum();
        let mu = (0.2 * w[0] + 0.5 * w[1] + 0.9 * w[2]) / sw;
        let q = (w[0] * (0.2 - mu).powi(2) + w[1] * (0.5 - mu).powi(2) + w[2] * (0.9 - mu).powi(2))
            / (2.0 * sw);
        let t = t_quantile(2.0, 0.95);
        assert!((res.ci.0 - (mu - t * q.sqrt())).abs() < 1e-10);
        assert!((res.ci.1 - (mu + t * q.sqrt())).abs() < 1e-10);
    }

    #[test]
    fn hksj_k2_warns() {
        let effects = vec![
            EffectEstimate::new(0.1, 0.02, "a"),
            EffectEstimate::new(0.4, 0.03, "b"),
        ];
        let (_, warn) = hksj_ci(&effects, 0.01, 0.2, 0.95).unwrap();
        assert!(warn);
    }

    #[test]
    fn prediction_interval_formula() {
        let meta = MetaResult {
            mu: 0.0,
            se_mu: 0.1,
            tau2: 0.04,
            k: 10,
            ci: (0.0, 0.0),
            pi: None,
            ci_method: CiMethod::Normal,
            pi_method: None,
            wide_interval_warning: false,
        };
        let (lo, hi) = prediction_interval(&meta, PiMethod::TBased, 0.95).unwrap();
        let half = (hi - lo) / 2.0;
        // t_{8, 0.975} * sqrt(0.05)
        assert!((half - 2.3060041350333704 * 0.05_f64.sqrt()).abs() < 1e-9);
        assert!((half - 0.51566).abs() < 1e-4);
        assert!((lo + hi).abs() < 1e-12);
    }

    #[test]
    fn pi_reduces_to_t_times_se_when_tau2_zero() {
        let meta = MetaResult {
            mu: 1.0,
            se_mu: 0.2,
            tau2: 0.0,
            k: 7,
            ci: (0.0, 0.0),
            pi: None,
            ci_method: CiMethod::Normal,
            pi_method: None,
            wide_interval_warning: false,
        };
        let (lo, hi) = prediction_interval(&meta, PiMethod::TBased, 0.95).unwrap();
        assert!(((hi - lo) / 2.0 - t_quantile(5.0, 0.95) * 0.2).abs() < 1e-12);
    }

    #[test]
    fn pi_at_least_as_wide_as_normal_ci() {
        for k in [3usize, 5, 20] {
            let effects: Vec<_> = (0..k)
                .map(|i| EffectEstimate::new(0.1 * i as f64, 0.02, format!("c{i}")))
                .collect();
            let tau2 = reml_tau2(&effects).unwrap();
            let meta = pool(&effects, tau2, CiMethod::Normal, 0.95).unwrap();
            let (plo, phi) = prediction_interval(&meta, PiMethod::TBased, 0.95).unwrap();
            assert!(plo <= meta.ci.0 + 1e-12 && phi >= meta.ci.1 - 1e-12);
        }
    }

    #[test]
    fn pi_requires_three_for_t() {
        let meta = MetaResult {
            mu: 0.0,
            se_mu: 0.1,
            tau2: 0.0,
            k: 2,
            ci: (0.0, 0.0),
            pi: None,
            ci_method: CiMethod::Normal,
            pi_method: None,
            wide_interval_warning: false,
        };
        assert!(matches!(
            prediction_interval(&meta, PiMethod::TBased, 0.95),
            Err(MetaError::TooFewForTBasedPi)
        ));
        assert!(prediction_interval(&meta, PiMethod::Normal, 0.95).is_ok());
    }

    #[test]
    fn t_based_pi_approaches_normal_pi() {
        let meta = MetaResult {
            mu: 0.0,
            se_mu: 0.05,
            tau2: 0.09,
            k: 1000,
            ci: (0.0, 0.0),
            pi: None,
            ci_method: CiMethod::Normal,
            pi_method: None,
            wide_interval_warning: false,
        };
        let (tlo, thi) = prediction_interval(&meta, PiMethod::TBased, 0.95).unwrap();
        let (nlo, nhi) = prediction_interval(&meta, PiMethod::Normal, 0.95).unwrap();
        let ht = (thi - tlo) / 2.0;
        let hn = (nhi - nlo) / 2.0;
        assert!((ht - hn).abs() / hn < 0.003, "{ht} vs {hn}");
    }

    fn bivariate_fixture() -> Vec<BivariatePoint> {
        vec![
            BivariatePoint {
                theta: Vector2::new(-0.2, -0.1),
                sigma: Matrix2::new(0.04, 0.01, 0.01, 0.02),
                n: 50,
                label: "a".into(),
            },
            BivariatePoint {
                theta: Vector2::new(0.4, 0.3),
                sigma: Matrix2::new(0.03, 0.008, 0.008, 0.02),
                n: 60,
                label: "b".into(),
            },
            BivariatePoint {
                theta: Vector2::new(0.9, 0.8),
                sigma: Matrix2::new(0.05, 0.012, 0.012, 0.03),
                n: 40,
                label: "c".into(),
            },
            BivariatePoint {
                theta: Vector2::new(-0.6, -0.5),
                sigma: Matrix2::new(0.04, 0.01, 0.01, 0.025),
                n: 55,
                label: "d".into(),
            },
        ]
    }

    #[test]
    fn bivariate_reml_beats_grid_oracle() {
        let points = bivariate_fixture();
        let res = bivariate_reml(&points, 0.95).unwrap();
        let ll_hat = bivariate_restricted_ll(&points, &res.omega);
        // 20^3 grid over (tau_y, tau_pi, rho).
        let mut best = f64::NEG_INFINITY;
        for i in 0..20 {
            for j in 0..20 {
                for r in 0..20 {
                    let ty = 0.02 + 0.1 * i as f64;
                    let tp = 0.02 + 0.1 * j as f64;
                    let rho = -0.95 + 0.1 * r as f64;
                    let omega =
                        Matrix2::new(ty * ty, rho * ty * tp, rho * ty * tp, tp * tp);
                    best = best.max(bivariate_restricted_ll(&points, &omega));
                }
            }
        }
        assert!(
            ll_hat >= best - 1e-6,
            "restricted ll {ll_hat} below grid best {best}"
        );
    }

    #[test]
    fn bivariate_omega_is_psd() {
        let points = bivariate_fixture();
        let res = bivariate_reml(&points, 0.95).unwrap();
        assert!(res.omega[(0, 0)] >= 0.0);
        assert!(res.omega[(1, 1)] >= 0.0);
        let rho = res.omega[(0, 1)] / (res.omega[(0, 0)] * res.omega[(1, 1)]).sqrt().max(1e-300);
        assert!(rho.abs() <= 1.0 + 1e-9);
        assert!(res.pi_y.0 <= res.ci_y.0 && res.ci_y.1 <= res.pi_y.1);
    }

    #[test]
    fn bivariate_decouples_to_univariate() {
        // Diagonal within-cluster covariances and independent dimensions:
        // marginal pooled results should match two univariate REML pools.
        let mut rng = crate::streams::stream_rng(23, &[5]);
        use rand::Rng;
        let mut points = Vec::new();
        let mut eff_y = Vec::new();
        let mut eff_p = Vec::new();
        for i in 0..8 {
            let ty = 0.3 * (rng.random::<f64>() - 0.5) + 0.2;
            let tp = 0.4 * (rng.random::<f64>() - 0.5) - 0.1;
            let vy = 0.02 + 0.01 * rng.random::<f64>();
            let vp = 0.015 + 0.01 * rng.random::<f64>();
            points.push(BivariatePoint {
                theta: Vector2::new(ty, tp),
                sigma: Matrix2::new(vy, 0.0, 0.0, vp),
                n: 100,
                label: format!("c{i}"),
            });
            eff_y.push(EffectEstimate::new(ty, vy, format!("c{i}")));
            eff_p.push(EffectEstimate::new(tp, vp, format!("c{i}")));
        }
        let biv = bivariate_reml_with(&points, 0.95, true).unwrap();
        let tau_y = reml_tau2(&eff_y).unwrap();
        let uni_y = pool(&eff_y, tau_y, CiMethod::Normal, 0.95).unwrap();
        let tau_p = reml_tau2(&eff_p).unwrap();
        let uni_p = pool(&eff_p, tau_p, CiMethod::Normal, 0.95).unwrap();
        assert!(
            (biv.mu[0] - uni_y.mu).abs() < 1e-4,
            "{} vs {}",
            biv.mu[0],
            uni_y.mu
        );
        assert!((biv.mu[1] - uni_p.mu).abs() < 1e-4);
        assert!((biv.omega[(0, 0)] - tau_y).abs() < 1e-3);
    }

    #[test]
    fn bivariate_needs_three_clusters() {
        let points = bivariate_fixture();
        assert!(bivariate_reml(&points[..2], 0.95).is_err());
    }

    #[test]
    fn group_stats_boundary_continuity_correction() {
        let p = BivariatePoint::from_group_stats(0, 20, 0.1, 0.001, 0.0001, "a");
        // y_bar = 0.5 / 21
        let expected = logit(0.5 / 21.0);
        assert!((p.theta[0] - expected).abs() < 1e-12);
        let full = BivariatePoint::from_group_stats(20, 20, 0.9, 0.001, 0.0001, "a");
        assert!((full.theta[0] - logit(20.5 / 21.0)).abs() < 1e-12);
    }

    #[test]
    fn psd_floor_repairs_indefinite_sigma() {
        let m = Matrix2::new(0.01, 0.05, 0.05, 0.01); // indefinite
        let fixed = psd_floor(m);
        let det = fixed[(0, 0)] * fixed[(1, 1)] - fixed[(0, 1)] * fixed[(1, 0)];
        assert!(fixed[(0, 0)] > 0.0 && det >= 0.0);
    }
}
