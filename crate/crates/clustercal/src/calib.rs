//! The calibration methods: cluster-ignorant baselines (flexible and linear
//! logistic), clustered group calibration (CG-C), two-stage meta-analysis
//! calibration (2MA-C), and mixed-model calibration (MIX-C), plus the
//! intraclass correlation, mean squared calibration error, and pointwise
//! prediction-interval coverage.

use std::collections::BTreeMap;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::dataio::{ClusteredDataset, CurveExport, CurveMetadata};
use crate::glmm::{fit_glmm, fit_null_intercept_model, GlmmError, GlmmSpec, GlmmVariant};
use crate::logistic::{
    fit_calibration, select_rcs_knots, DesignSpec, LogisticError, LogisticFit,
};
use crate::meta::{
    bivariate_reml, pool, prediction_interval, reml_tau2, BivariatePoint, CiMethod, MetaError,
    PiMethod,
};
use crate::numeric::{expit, logit, sample_cov, sample_var};
use crate::smoothers::{
    loess_fit, loess_select_span, place_knots, LoessError, RcsError,
};

/// Variance of the standard logistic distribution, pi^2 / 3.
pub const LOGISTIC_VARIANCE: f64 = 3.289868133696453;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("need at least {need} observations, got {got}")]
    TooFewObservations { need: usize, got: usize },
    #[error("need at least {need} clusters, got {got}")]
    TooFewClusters { need: usize, got: usize },
    #[error("cluster '{cluster}' has {size} observations, fewer than the {q} quantile groups")]
    ClusterTooSmall { cluster: String, size: usize, q: usize },
    #[error("grid must be strictly increasing within (0,1)")]
    BadGrid,
    #[error("group count must be at least 1")]
    BadGroupCount,
    #[error("no overlapping grid points between the curves")]
    NoOverlap,
    #[error("no cluster produced a usable stage-one curve")]
    NoUsableClusters,
    #[error(transparent)]
    Logistic(#[from] LogisticError),
    #[error(transparent)]
    Spline(#[from] RcsError),
    #[error(transparent)]
    Loess(#[from] LoessError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Glmm(#[from] GlmmError),
}

/// Fixed grid of predicted risks the flexible methods are evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<f64>,
}

impl Grid {
    /// 100 evenly spaced points from 0.01 to 0.99.
    pub fn default_grid() -> Self {
        Self::with_points(100).expect("static grid")
    }

    /// `n` evenly spaced points from 0.01 to 0.99.
    pub fn with_points(n: usize) -> Result<Self, CalibError> {
        if n < 2 {
            return Err(CalibError::BadGrid);
        }
        let step = 0.98 / (n as f64 - 1.0);
        Self::new((0..n).map(|i| 0.01 + step * i as f64).collect())
    }

    pub fn new(points: Vec<f64>) -> Result<Self, CalibError> {
        if points.is_empty()
            || points.iter().any(|p| !(*p > 0.0 && *p < 1.0))
            || !crate::numeric::is_strictly_increasing(&points)
        {
            return Err(CalibError::BadGrid);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn logits(&self) -> Vec<f64> {
        self.points.iter().map(|&p| logit(p)).collect()
    }
}

/// A calibration curve over a grid, probability scale, with optional bands
/// and per-cluster curves.
#[derive(Debug, Clone)]
pub struct CalibrationCurve {
    pub grid: Grid,
    pub estimate: Vec<Option<f64>>,
    pub ci_lo: Vec<Option<f64>>,
    pub ci_hi: Vec<Option<f64>>,
    pub pi_lo: Vec<Option<f64>>,
    pub pi_hi: Vec<Option<f64>>,
    pub cluster_curves: Option<BTreeMap<String, Vec<Option<f64>>>>,
    pub method: String,
    pub parameters: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub warnings: Vec<String>,
    /// Set when the underlying fit was degenerate (separation).
    pub flagged: bool,
}

impl CalibrationCurve {
    fn empty(grid: Grid, method: &str) -> Self {
        let n = grid.len();
        Self {
            grid,
            estimate: vec![None; n],
            ci_lo: vec![None; n],
            ci_hi: vec![None; n],
            pi_lo: vec![None; n],
            pi_hi: vec![None; n],
            cluster_curves: None,
            method: method.to_string(),
            parameters: BTreeMap::new(),
            seed: None,
            warnings: Vec::new(),
            flagged: false,
        }
    }

    /// Enforce the band ordering invariant pointwise: the confidence band
    /// contains the estimate and the prediction band contains the
    /// confidence band.
    fn enforce_band_ordering(&mut self) {
        for i in 0..self.grid.len() {
            if let Some(e) = self.estimate[i] {
                if let Some(lo) = self.ci_lo[i].as_mut() {
                    *lo = lo.min(e);
                }
                if let Some(hi) = self.ci_hi[i].as_mut() {
                    *hi = hi.max(e);
                }
            }
            if let (Some(clo), Some(plo)) = (self.ci_lo[i], self.pi_lo[i]) {
                self.pi_lo[i] = Some(plo.min(clo));
            }
            if let (Some(chi), Some(phi)) = (self.ci_hi[i], self.pi_hi[i]) {
                self.pi_hi[i] = Some(phi.max(chi));
            }
        }
    }

    pub fn to_export(&self) -> CurveExport {
        CurveExport {
            grid: self.grid.points().to_vec(),
            estimate: self.estimate.clone(),
            ci_lo: self.ci_lo.clone(),
            ci_hi: self.ci_hi.clone(),
            pi_lo: self.pi_lo.clone(),
            pi_hi: self.pi_hi.clone(),
            cluster_curves: self.cluster_curves.clone(),
            metadata: CurveMetadata {
                method: self.method.clone(),
                parameters: self.parameters.clone(),
                seed: self.seed,
            },
        }
    }
}

fn z_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

/// Smoother choice for the cluster-ignorant flexible curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlexSmoother {
    /// Restricted cubic spline with a fixed knot count.
    Rcs(usize),
    /// LOESS with AICc-selected span.
    Loess,
}

/// Pooled flexible calibration curve ignoring clustering. The confidence
/// band is the delta-method Wald band; no prediction band exists for a
/// single population.
pub fn standard_flexible(
    ds: &ClusteredDataset,
    smoother: FlexSmoother,
    grid: &Grid,
    level: f64,
) -> Result<CalibrationCurve, CalibError> {
    if ds.n() < 20 {
        return Err(CalibError::TooFewObservations { need: 20, got: ds.n() });
    }
    let lp = ds.logit_risks();
    let y = ds.outcomes();
    let z = z_quantile(level);
    let mut curve = CalibrationCurve::empty(grid.clone(), "flexible");

    match smoother {
        FlexSmoother::Rcs(k) => {
            let knots = place_knots(&lp, k)?;
            let design = DesignSpec::Rcs(knots);
            let fit = fit_calibration(&design, &lp, &y, 100, 1e-9)?;
            curve.flagged = fit.separation_flag;
            curve.parameters.insert("smoother".into(), format!("rcs{k}"));
            for (i, &g) in grid.points().iter().enumerate() {
                let row = design.row(logit(g));
                let pred = fit.predict_logit_se(&row);
                curve.estimate[i] = Some(expit(pred.logit_estimate));
                curve.ci_lo[i] = Some(expit(pred.logit_estimate - z * pred.se_logit));
                curve.ci_hi[i] = Some(expit(pred.logit_estimate + z * pred.se_logit));
            }
        }
        FlexSmoother::Loess => {
            let span = loess_select_span(&lp, &y, &crate::smoothers::default_span_grid())?;
            let model = loess_fit(&lp, &y, span, 2)?;
            curve.parameters.insert("smoother".into(), "loess".into());
            curve
                .parameters
                .insert("span".into(), format!("{span:.2}"));
            for (i, &g) in grid.points().iter().enumerate() {
                let pred = model.predict_se(logit(g))?;
                if !(pred.estimate > 0.0 && pred.estimate < 1.0) || !pred.se.is_finite() {
                    continue;
                }
                let theta = logit(pred.estimate);
                let se_logit = pred.se / (pred.estimate * (1.0 - pred.estimate));
                curve.estimate[i] = Some(pred.estimate);
                curve.ci_lo[i] = Some(expit(theta - z * se_logit));
                curve.ci_hi[i] = Some(expit(theta + z * se_logit));
            }
        }
    }
    curve.enforce_band_ordering();
    Ok(curve)
}

/// Linear logistic calibration: intercept alpha and slope zeta of
/// `logit(P(y=1)) = alpha + zeta * logit(p_hat)`, with their covariance.
pub fn linear_logistic_calibration(
    ds: &ClusteredDataset,
) -> Result<(f64, f64, nalgebra::DMatrix<f64>), CalibError> {
    if ds.n() < 10 {
        return Err(CalibError::TooFewObservations { need: 10, got: ds.n() });
    }
    let fit = fit_calibration(
        &DesignSpec::LinearInLogit,
        &ds.logit_risks(),
        &ds.outcomes(),
        100,
        1e-9,
    )?;
    Ok((fit.coefficients[0], fit.coefficients[1], fit.covariance))
}

/// Grouping rule for clustered group calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupingMode {
    /// Q quantile groups per cluster (sizes differing by at most one).
    Grouped,
    /// Q equal-width risk intervals over (0,1); cluster contributions vary.
    Interval,
}

/// One cluster's raw group summary.
#[derive(Debug, Clone)]
pub struct ClusterGroupPoint {
    pub cluster: String,
    pub group: usize,
    pub mean_risk: f64,
    pub event_fraction: f64,
    pub n: usize,
}

/// One pooled CG-C point with intervals on the outcome axis.
#[derive(Debug, Clone)]
pub struct GroupedPoint {
    pub group: usize,
    /// Pooled mean risk, probability scale.
    pub x: f64,
    /// Pooled observed proportion, probability scale.
    pub y: f64,
    pub ci_y: (f64, f64),
    pub pi_y: (f64, f64),
    pub n_clusters: usize,
}

/// Clustered group calibration result.
#[derive(Debug, Clone)]
pub struct GroupedCalibration {
    pub mode: GroupingMode,
    pub q: usize,
    pub points: Vec<GroupedPoint>,
    pub cluster_points: Vec<ClusterGroupPoint>,
    pub warnings: Vec<String>,
}

impl GroupedCalibration {
    /// Export as a curve over the pooled x positions (sorted ascending).
    pub fn to_export(&self) -> CurveExport {
        let mut pts = self.points.clone();
        pts.sort_by(|a, b| a.x.partial_cmp(&b.x).unwrap());
        let mut parameters = BTreeMap::new();
        parameters.insert("groups".into(), self.q.to_string());
        parameters.insert(
            "mode".into(),
            match self.mode {
                GroupingMode::Grouped => "grouped".to_string(),
                GroupingMode::Interval => "interval".to_string(),
            },
        );
        CurveExport {
            grid: pts.iter().map(|p| p.x).collect(),
            estimate: pts.iter().map(|p| Some(p.y)).collect(),
            ci_lo: pts.iter().map(|p| Some(p.ci_y.0)).collect(),
            ci_hi: pts.iter().map(|p| Some(p.ci_y.1)).collect(),
            pi_lo: pts.iter().map(|p| Some(p.pi_y.0)).collect(),
            pi_hi: pts.iter().map(|p| Some(p.pi_y.1)).collect(),
            cluster_curves: None,
            metadata: CurveMetadata {
                method: match self.mode {
                    GroupingMode::Grouped => "cgc-grouped".into(),
                    GroupingMode::Interval => "cgc-interval".into(),
                },
                parameters,
                seed: None,
            },
        }
    }
}

/// Group summary statistics for a set of dataset rows.
fn group_stats(ds: &ClusteredDataset, rows: &[usize]) -> (usize, usize, f64, f64, f64) {
    let n = rows.len();
    let ys: Vec<f64> = rows.iter().map(|&i| ds.records()[i].y as f64).collect();
    let ps: Vec<f64> = rows.iter().map(|&i| ds.records()[i].p_hat).collect();
    let events = ys.iter().filter(|&&v| v == 1.0).count();
    let mean_risk = ps.iter().sum::<f64>() / n as f64;
    (events, n, mean_risk, sample_var(&ps), sample_cov(&ys, &ps))
}

/// Quantile group membership: stable sort by risk, sizes differing by at
/// most one with the remainder in the earliest groups.
fn quantile_groups(ds: &ClusteredDataset, cluster: usize, q: usize) -> Vec<Vec<usize>> {
    let mut rows: Vec<usize> = ds.cluster_rows(cluster).to_vec();
    rows.sort_by(|&a, &b| {
        ds.records()[a]
            .p_hat
            .partial_cmp(&ds.records()[b].p_hat)
            .unwrap()
            .then(a.cmp(&b))
    });
    let n = rows.len();
    let base = n / q;
    let rem = n % q;
    let mut out = Vec::with_capacity(q);
    let mut start = 0;
    for g in 0..q {
        let size = base + usize::from(g < rem);
        out.push(rows[start..start + size].to_vec());
        start += size;
    }
    out
}

/// Clustered group calibration: per-cluster groups pooled with a bivariate
/// random-effects meta-analysis of (logit event fraction, logit mean risk).
pub fn cgc(
    ds: &ClusteredDataset,
    q: usize,
    mode: GroupingMode,
    level: f64,
) -> Result<GroupedCalibration, CalibError> {
    if q < 1 {
        return Err(CalibError::BadGroupCount);
    }
    let j = ds.n_clusters();
    if j < 3 {
        return Err(CalibError::TooFewClusters { need: 3, got: j });
    }
    let mut warnings = Vec::new();
    let mut cluster_points = Vec::new();
    // group index -> per-cluster bivariate points
    let mut by_group: Vec<Vec<BivariatePoint>> = vec![Vec::new(); q];

    match mode {
        GroupingMode::Grouped => {
            for c in 0..j {
                let size = ds.cluster_size(c);
                if size < q {
                    return Err(CalibError::ClusterTooSmall {
                        cluster: ds.labels()[c].clone(),
                        size,
                        q,
                    });
                }
            }
            for c in 0..j {
                for (g, rows) in quantile_groups(ds, c, q).iter().enumerate() {
                    let (events, n, mean_risk, var_risk, cov) = group_stats(ds, rows);
                    by_group[g].push(BivariatePoint::from_group_stats(
                        events,
                        n,
                        mean_risk,
                        var_risk,
                        cov,
                        ds.labels()[c].clone(),
                    ));
                    cluster_points.push(ClusterGroupPoint {
                        cluster: ds.labels()[c].clone(),
                        group: g,
                        mean_risk,
                        event_fraction: events as f64 / n as f64,
                        n,
                    });
                }
            }
        }
        GroupingMode::Interval => {
            for c in 0..j {
                let mut bins: Vec<Vec<usize>> = vec![Vec::new(); q];
                for &row in ds.cluster_rows(c) {
                    let p = ds.records()[row].p_hat;
                    let mut b = (p * q as f64).floor() as usize;
                    if b >= q {
                        b = q - 1;
                    }
                    bins[b].push(row);
                }
                for (g, rows) in bins.iter().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    let (events, n, mean_risk, var_risk, cov) = group_stats(ds, rows);
                    by_group[g].push(BivariatePoint::from_group_stats(
                        events,
                        n,
                        mean_risk,
                        var_risk,
                        cov,
                        ds.labels()[c].clone(),
                    ));
                    cluster_points.push(ClusterGroupPoint {
                        cluster: ds.labels()[c].clone(),
                        group: g,
                        mean_risk,
                        event_fraction: events as f64 / n as f64,
                        n,
                    });
                }
            }
        }
    }

    let pooled: Vec<(usize, Result<crate::meta::BivariateMetaResult, MetaError>)> = by_group
        .par_iter()
        .enumerate()
        .filter(|(_, pts)| !pts.is_empty())
        .map(|(g, pts)| (g, bivariate_reml(pts, level)))
        .collect();

    let mut points = Vec::new();
    for (g, res) in pooled {
        match res {
            Ok(meta) => {
                if !meta.converged {
                    warnings.push(format!("group {g}: covariance search did not converge"));
                }
                let ci = (expit(meta.ci_y.0), expit(meta.ci_y.1));
                let pi = (
                    expit(meta.pi_y.0).min(ci.0),
                    expit(meta.pi_y.1).max(ci.1),
                );
                points.push(GroupedPoint {
                    group: g,
                    x: expit(meta.mu[1]),
                    y: expit(meta.mu[0]),
                    ci_y: ci,
                    pi_y: pi,
                    n_clusters: meta.k,
                });
            }
            Err(MetaError::TooFewEffects { got, .. }) => {
                warnings.push(format!(
                    "group {g}: dropped, only {got} clusters contribute"
                ));
            }
            Err(e) => return Err(e.into()),
        }
    }
    points.sort_by_key(|p| p.group);
    Ok(GroupedCalibration { mode, q, points, cluster_points, warnings })
}

/// Stage-one smoother for the two-stage meta-analysis method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOneSmoother {
    Splines,
    Loess,
}

/// Options for [`two_stage_ma`].
#[derive(Debug, Clone)]
pub struct TwoStageOptions {
    pub smoother: StageOneSmoother,
    pub ci_method: CiMethod,
    pub pi_method: PiMethod,
    pub level: f64,
    /// Restrict each cluster's contribution to its own observed risk range
    /// instead of the full grid.
    pub trim_to_cluster_range: bool,
    /// Significance level of the knot-count selection tests.
    pub knot_alpha: f64,
    pub span_grid: Vec<f64>,
}

impl TwoStageOptions {
    pub fn new(smoother: StageOneSmoother) -> Self {
        Self {
            smoother,
            ci_method: CiMethod::Normal,
            pi_method: PiMethod::TBased,
            level: 0.95,
            trim_to_cluster_range: false,
            knot_alpha: 0.05,
            span_grid: crate::smoothers::default_span_grid(),
        }
    }
}

/// A cluster's stage-one curve: logit-scale estimate and SE per grid point,
/// missing where the smoother is unusable.
struct StageOneCurve {
    cluster: usize,
    theta: Vec<Option<(f64, f64)>>,
}

fn stage_one_cluster(
    ds: &ClusteredDataset,
    cluster: usize,
    grid_logits: &[f64],
    opt: &TwoStageOptions,
) -> Result<StageOneCurve, String> {
    let rows = ds.cluster_rows(cluster);
    let lp: Vec<f64> = rows.iter().map(|&i| logit(ds.records()[i].p_hat)).collect();
    let ys: Vec<f64> = rows.iter().map(|&i| ds.records()[i].y as f64).collect();
    let label = &ds.labels()[cluster];
    let (lo, hi) = lp
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });

    let mut theta = vec![None; grid_logits.len()];
    match opt.smoother {
        StageOneSmoother::Splines => {
            let sel = select_rcs_knots(&lp, &ys, opt.knot_alpha)
                .map_err(|e| format!("cluster {label}: {e}"))?;
            if sel.fit.separation_flag {
                return Err(format!("cluster {label}: separated stage-one fit"));
            }
            let design = DesignSpec::Rcs(sel.knots.clone());
            for (i, &g) in grid_logits.iter().enumerate() {
                if opt.trim_to_cluster_range && (g < lo || g > hi) {
                    continue;
                }
                let pred = sel.fit.predict_logit_se(&design.row(g));
                if pred.logit_estimate.is_finite() && pred.se_logit.is_finite() && pred.se_logit > 0.0
                {
                    theta[i] = Some((pred.logit_estimate, pred.se_logit));
                }
            }
        }
        StageOneSmoother::Loess => {
            let span = loess_select_span(&lp, &ys, &opt.span_grid)
                .map_err(|e| format!("cluster {label}: {e}"))?;
            let model = loess_fit(&lp, &ys, span, 2)
                .map_err(|e| format!("cluster {label}: {e}"))?;
            for (i, &g) in grid_logits.iter().enumerate() {
                if opt.trim_to_cluster_range && (g < lo || g > hi) {
                    continue;
                }
                let Ok(pred) = model.predict_se(g) else { continue };
                if !(pred.estimate > 0.0 && pred.estimate < 1.0) {
                    continue;
                }
                let se_logit = pred.se / (pred.estimate * (1.0 - pred.estimate));
                if se_logit.is_finite() && se_logit > 0.0 {
                    theta[i] = Some((logit(pred.estimate), se_logit));
                }
            }
        }
    }
    Ok(StageOneCurve { cluster, theta })
}

/// Two-stage meta-analysis calibration: a flexible curve per cluster
/// (stage 1), pooled per grid point by univariate random-effects
/// meta-analysis with REML heterogeneity (stage 2).
pub fn two_stage_ma(
    ds: &ClusteredDataset,
    grid: &Grid,
    opt: &TwoStageOptions,
) -> Result<CalibrationCurve, CalibError> {
    let j = ds.n_clusters();
    if j < 2 {
        return Err(CalibError::TooFewClusters { need: 2, got: j });
    }
    let grid_logits = grid.logits();
    let method = match opt.smoother {
        StageOneSmoother::Splines => "2mac-splines",
        StageOneSmoother::Loess => "2mac-loess",
    };
    let mut curve = CalibrationCurve::empty(grid.clone(), method);
    curve.parameters.insert("ci".into(), format!("{:?}", opt.ci_method).to_lowercase());
    curve.parameters.insert("pi".into(), format!("{:?}", opt.pi_method).to_lowercase());

    // Stage 1, clusters in parallel.
    let stage_one: Vec<Result<StageOneCurve, String>> = (0..j)
        .into_par_iter()
        .map(|c| stage_one_cluster(ds, c, &grid_logits, opt))
        .collect();
    let mut curves = Vec::new();
    for res in stage_one {
        match res {
            Ok(c) => curves.push(c),
            Err(w) => curve.warnings.push(w),
        }
    }
    if curves.is_empty() {
        return Err(CalibError::NoUsableClusters);
    }

    // Per-cluster display curves.
    let mut cluster_curves = BTreeMap::new();
    for sc in &curves {
        cluster_curves.insert(
            ds.labels()[sc.cluster].clone(),
            sc.theta
                .iter()
                .map(|o| o.map(|(t, _)| expit(t)))
                .collect::<Vec<Option<f64>>>(),
        );
    }
    curve.cluster_curves = Some(cluster_curves);

    // Stage 2: pool each grid point.
    let want_pi = j >= 3;
    if !want_pi {
        curve
            .warnings
            .push("fewer than 3 clusters: no prediction interval".into());
    }
    let mut dropped_points = 0usize;
    for i in 0..grid.len() {
        let effects: Vec<crate::meta::EffectEstimate> = curves
            .iter()
            .filter_map(|sc| {
                sc.theta[i].map(|(t, se)| {
                    crate::meta::EffectEstimate::new(
                        t,
                        (se * se).max(1e-10),
                        ds.labels()[sc.cluster].clone(),
                    )
                })
            })
            .collect();
        if effects.len() < 2 {
            dropped_points += 1;
            continue;
        }
        let tau2 = reml_tau2(&effects)?;
        let meta = pool(&effects, tau2, opt.ci_method, opt.level)?;
        curve.estimate[i] = Some(expit(meta.mu));
        curve.ci_lo[i] = Some(expit(meta.ci.0));
        curve.ci_hi[i] = Some(expit(meta.ci.1));
        if want_pi && effects.len() >= 3 {
            let (plo, phi) = prediction_interval(&meta, opt.pi_method, opt.level)?;
            curve.pi_lo[i] = Some(expit(plo));
            curve.pi_hi[i] = Some(expit(phi));
        }
    }
    if dropped_points > 0 {
        curve.warnings.push(format!(
            "{dropped_points} grid points had fewer than 2 usable clusters"
        ));
    }
    curve.enforce_band_ordering();
    Ok(curve)
}

/// Mixed-model calibration: a one-stage logistic GLMM with spline fixed
/// effects and cluster random effects, Wald confidence band, simulation
/// prediction band, and shrunken cluster-specific curves.
pub fn mixc(
    ds: &ClusteredDataset,
    variant: GlmmVariant,
    grid: &Grid,
    n_samples: usize,
    seed: u64,
    level: f64,
) -> Result<CalibrationCurve, CalibError> {
    let knots = place_knots(&ds.logit_risks(), 3)?;
    let spec = GlmmSpec::new(variant, knots);
    let max_outer = match variant {
        GlmmVariant::Intercept => 300,
        GlmmVariant::Slope => 800,
    };
    let fit = fit_glmm(ds, &spec, 1e-8, max_outer)?;

    let grid_logits = grid.logits();
    let method = match variant {
        GlmmVariant::Intercept => "mixc-intercept",
        GlmmVariant::Slope => "mixc-slope",
    };
    let mut curve = CalibrationCurve::empty(grid.clone(), method);
    curve.seed = Some(seed);
    curve
        .parameters
        .insert("samples".into(), n_samples.to_string());
    if !fit.converged {
        curve.warnings.push("variance search did not converge".into());
    }
    if fit.boundary {
        curve
            .warnings
            .push("random-effect variance at the boundary".into());
    }

    let avg = fit.predict_average(&grid_logits, level);
    for (i, (est, lo, hi)) in avg.into_iter().enumerate() {
        curve.estimate[i] = Some(est);
        curve.ci_lo[i] = Some(lo);
        curve.ci_hi[i] = Some(hi);
    }
    let band = fit.prediction_band(&grid_logits, n_samples, seed, level)?;
    for i in 0..grid.len() {
        curve.pi_lo[i] = Some(band.lo[i]);
        curve.pi_hi[i] = Some(band.hi[i]);
    }

    let mut cluster_curves = BTreeMap::new();
    for label in &fit.cluster_labels {
        let vals = fit.predict_cluster(label, &grid_logits)?;
        cluster_curves.insert(label.clone(), vals.into_iter().map(Some).collect());
    }
    curve.cluster_curves = Some(cluster_curves);
    curve.enforce_band_ordering();
    Ok(curve)
}

/// Mean squared calibration error between two aligned curves, probability
/// scale; missing points are excluded pairwise. The reporting convention
/// multiplies by 100 at the presentation layer.
pub fn msce(estimated: &[Option<f64>], truth: &[Option<f64>]) -> Result<f64, CalibError> {
    assert_eq!(estimated.len(), truth.len(), "grids must be aligned");
    let mut sum = 0.0;
    let mut n = 0usize;
    for (e, t) in estimated.iter().zip(truth) {
        if let (Some(e), Some(t)) = (e, t) {
            sum += (e - t) * (e - t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(CalibError::NoOverlap);
    }
    Ok(sum / n as f64)
}

/// Pointwise coverage of a prediction band against true cluster curves.
#[derive(Debug, Clone)]
pub struct CoverageTable {
    /// Coverage fraction per grid point; None where the band is missing.
    pub per_point: Vec<Option<f64>>,
    /// Mean over grid points with a band.
    pub mean: f64,
    pub label: String,
}

/// Fraction of clusters whose true curve lies inside the prediction band,
/// per grid point (band edges inclusive).
pub fn pointwise_coverage(
    pi_lo: &[Option<f64>],
    pi_hi: &[Option<f64>],
    true_cluster_curves: &BTreeMap<String, Vec<Option<f64>>>,
    label: &str,
) -> CoverageTable {
    let n = pi_lo.len();
    let mut per_point = vec![None; n];
    for i in 0..n {
        let (Some(lo), Some(hi)) = (pi_lo[i], pi_hi[i]) else {
            continue;
        };
        let mut inside = 0usize;
        let mut total = 0usize;
        for curve in true_cluster_curves.values() {
            if let Some(v) = curve[i] {
                total += 1;
                if v >= lo && v <= hi {
                    inside += 1;
                }
            }
        }
        if total > 0 {
            per_point[i] = Some(inside as f64 / total as f64);
        }
    }
    let covered: Vec<f64> = per_point.iter().flatten().copied().collect();
    let mean = if covered.is_empty() {
        f64::NAN
    } else {
        covered.iter().sum::<f64>() / covered.len() as f64
    };
    CoverageTable { per_point, mean, label: label.to_string() }
}

/// Intraclass correlation estimate from a null random-intercept model.
#[derive(Debug, Clone)]
pub struct IccResult {
    pub icc: f64,
    pub sigma_u2: f64,
    pub low_precision: bool,
    pub converged: bool,
}

/// ICC on the latent logistic scale: sigma_u^2 / (sigma_u^2 + pi^2/3).
pub fn icc(outcomes: &[f64], clusters: &[usize]) -> Result<IccResult, CalibError> {
    let fit = fit_null_intercept_model(outcomes, clusters)?;
    Ok(IccResult {
        icc: fit.sigma_u2 / (fit.sigma_u2 + LOGISTIC_VARIANCE),
        sigma_u2: fit.sigma_u2,
        low_precision: fit.low_precision,
        converged: fit.converged,
    })
}

/// ICC for a clustered dataset's outcomes.
pub fn icc_of_dataset(ds: &ClusteredDataset) -> Result<IccResult, CalibError> {
    icc(&ds.outcomes(), &ds.cluster_of_rows())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// y ~ Bernoulli(transform(p_hat)) over `n_clusters` equal clusters.
    fn gen_calibrated<F: Fn(f64) -> f64>(
        seed: u64,
        n_clusters: usize,
        n_per: usize,
        true_risk: F,
    ) -> ClusteredDataset {
        let mut rows = Vec::new();
        for j in 0..n_clusters {
            let mut rng = crate::streams::stream_rng(seed, &[j as u64]);
            for _ in 0..n_per {
                let p: f64 = (rng.random::<f64>() * 0.96 + 0.02).clamp(0.02, 0.98);
                let risk = true_risk(p);
                rows.push((format!("C{j:02}"), (rng.random::<f64>() < risk) as u8, p));
            }
        }
        ClusteredDataset::from_rows(rows).unwrap().0
    }

    #[test]
    fn flexible_tracks_identity_on_calibrated_data() {
        let ds = gen_calibrated(1, 5, 20_000, |p| p);
        let grid = Grid::default_grid();
        let curve = standard_flexible(&ds, FlexSmoother::Rcs(3), &grid, 0.95).unwrap();
        for (i, &g) in grid.points().iter().enumerate() {
            if g < 0.05 || g > 0.95 {
                continue;
            }
            let est = curve.estimate[i].unwrap();
            assert!((est - g).abs() < 0.02, "grid {g}: estimate {est}");
        }
        assert!(!curve.flagged);
    }

    #[test]
    fn flexible_detects_overestimation() {
        // True risk one logit unit below the stated risk.
        let ds = gen_calibrated(2, 5, 20_000, |p| expit(logit(p) - 1.0));
        let grid = Grid::default_grid();
        let curve = standard_flexible(&ds, FlexSmoother::Rcs(3), &grid, 0.95).unwrap();
        for (i, &g) in grid.points().iter().enumerate() {
            if g < 0.1 || g > 0.9 {
                continue;
            }
            assert!(curve.estimate[i].unwrap() < g);
        }
    }

    #[test]
    fn flexible_rejects_degenerate_risks() {
        let rows: Vec<(String, u8, f64)> = (0..100)
            .map(|i| (format!("C{}", i % 3), (i % 4 == 0) as u8, 0.3))
            .collect();
        let (ds, _) = ClusteredDataset::from_rows(rows).unwrap();
        assert!(standard_flexible(&ds, FlexSmoother::Rcs(3), &Grid::default_grid(), 0.95).is_err());
    }

    #[test]
    fn flexible_loess_tracks_identity() {
        let ds = gen_calibrated(3, 4, 5_000, |p| p);
        let grid = Grid::with_points(50).unwrap();
        let curve = standard_flexible(&ds, FlexSmoother::Loess, &grid, 0.95).unwrap();
        for (i, &g) in grid.points().iter().enumerate() {
            if g < 0.1 || g > 0.9 {
                continue;
            }
            let est = curve.estimate[i].expect("interior estimate");
            assert!((est - g).abs() < 0.05, "grid {g}: estimate {est}");
        }
    }

    #[test]
    fn linear_calibration_recovers_truth() {
        let ds = gen_calibrated(4, 5, 20_000, |p| p);
        let (alpha, zeta, _) = linear_logistic_calibration(&ds).unwrap();
        assert!(alpha.abs() < 0.05, "alpha {alpha}");
        assert!((zeta - 1.0).abs() < 0.05, "zeta {zeta}");

        let shifted = gen_calibrated(5, 5, 20_000, |p| expit(logit(p) + 0.5));
        let (alpha, zeta, _) = linear_logistic_calibration(&shifted).unwrap();
        assert!((alpha - 0.5).abs() < 0.06, "alpha {alpha}");
        assert!((zeta - 1.0).abs() < 0.06, "zeta {zeta}");
    }

    #[test]
    fn linear_calibration_needs_risk_spread() {
        let rows: Vec<(String, u8, f64)> =
            (0..50).map(|i| ("A".to_string(), (i % 3 == 0) as u8, 0.4)).collect();
        let (ds, _) = ClusteredDataset::from_rows(rows).unwrap();
        assert!(linear_logistic_calibration(&ds).is_err());
    }

    #[test]
    fn cgc_single_group_pools_cluster_rates() {
        let ds = gen_calibrated(6, 6, 400, |p| p);
        let gc = cgc(&ds, 1, GroupingMode::Grouped, 0.95).unwrap();
        assert_eq!(gc.points.len(), 1);
        assert_eq!(gc.cluster_points.len(), 6);
        for cp in &gc.cluster_points {
            let c = ds.labels().iter().position(|l| l == &cp.cluster).unwrap();
            let rows = ds.cluster_rows(c);
            let events: usize = rows.iter().filter(|&&i| ds.records()[i].y == 1).count();
            let mean_risk: f64 =
                rows.iter().map(|&i| ds.records()[i].p_hat).sum::<f64>() / rows.len() as f64;
            assert_eq!(cp.n, rows.len());
            assert!((cp.event_fraction - events as f64 / rows.len() as f64).abs() < 1e-12);
            assert!((cp.mean_risk - mean_risk).abs() < 1e-12);
        }
        let p = &gc.points[0];
        assert!(p.pi_y.0 <= p.ci_y.0 && p.ci_y.1 <= p.pi_y.1);
    }

    #[test]
    fn cgc_group_boundaries_match_sort_split_oracle() {
        let ds = gen_calibrated(7, 3, 200, |p| p);
        let groups = quantile_groups(&ds, 0, 10);
        // Oracle: sort the cluster rows by risk and cut into consecutive
        // blocks of 20.
        let mut rows: Vec<usize> = ds.cluster_rows(0).to_vec();
        rows.sort_by(|&a, &b| {
            ds.records()[a]
                .p_hat
                .partial_cmp(&ds.records()[b].p_hat)
                .unwrap()
                .then(a.cmp(&b))
        });
        for (g, group) in groups.iter().enumerate() {
            assert_eq!(group.len(), 20);
            assert_eq!(group.as_slice(), &rows[g * 20..(g + 1) * 20]);
        }
    }

    #[test]
    fn cgc_groups_partition_cluster() {
        let ds = gen_calibrated(8, 4, 103, |p| p);
        for c in 0..4 {
            let groups = quantile_groups(&ds, c, 10);
            let mut all: Vec<usize> = groups.iter().flatten().copied().collect();
            all.sort_unstable();
            let mut expect: Vec<usize> = ds.cluster_rows(c).to_vec();
            expect.sort_unstable();
            assert_eq!(all, expect);
            let sizes: Vec<usize> = groups.iter().map(|g| g.len()).collect();
            let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(max - min <= 1);
        }
    }

    #[test]
    fn cgc_cluster_too_small_named() {
        let mut rows = Vec::new();
        for j in 0..4 {
            let n = if j == 0 { 5 } else { 50 };
            for i in 0..n {
                rows.push((format!("C{j}"), (i % 2) as u8, 0.1 + 0.01 * i as f64));
            }
        }
        let (ds, _) = ClusteredDataset::from_rows(rows).unwrap();
        match cgc(&ds, 10, GroupingMode::Grouped, 0.95) {
            Err(CalibError::ClusterTooSmall { cluster, size, q }) => {
                assert_eq!(cluster, "C0");
                assert_eq!((size, q), (5, 10));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cgc_interval_drops_sparse_bins() {
        // Risks concentrated in (0, 0.5): upper bins have no clusters.
        let ds = gen_calibrated(9, 5, 300, |p| p);
        let mut rows = Vec::new();
        for r in ds.records() {
            let p = r.p_hat * 0.4 + 0.05;
            rows.push((ds.labels()[r.cluster].clone(), r.y, p));
        }
        let (narrow, _) = ClusteredDataset::from_rows(rows).unwrap();
        let gc = cgc(&narrow, 10, GroupingMode::Interval, 0.95).unwrap();
        assert!(gc.points.len() < 10);
        assert!(gc.points.iter().all(|p| p.n_clusters >= 3));
    }

    #[test]
    fn two_stage_identical_clusters_has_no_heterogeneity() {
        let base = gen_calibrated(10, 1, 800, |p| p);
        let mut rows = Vec::new();
        for r in base.records() {
            rows.push(("A".to_string(), r.y, r.p_hat));
        }
        for r in base.records() {
            rows.push(("B".to_string(), r.y, r.p_hat));
        }
        let (ds, _) = ClusteredDataset::from_rows(rows).unwrap();
        let grid = Grid::with_points(30).unwrap();
        let opt = TwoStageOptions::new(StageOneSmoother::Splines);
        let curve = two_stage_ma(&ds, &grid, &opt).unwrap();
        let clusters = curve.cluster_curves.as_ref().unwrap();
        let ca = &clusters["A"];
        for i in 0..grid.len() {
            if let (Some(pooled), Some(one)) = (curve.estimate[i], ca[i]) {
                assert!((pooled - one).abs() < 1e-6, "point {i}: {pooled} vs {one}");
            }
        }
    }

    #[test]
    fn two_stage_needs_two_clusters() {
        let ds = gen_calibrated(11, 1, 500, |p| p);
        let opt = TwoStageOptions::new(StageOneSmoother::Splines);
        assert!(matches!(
            two_stage_ma(&ds, &Grid::default_grid(), &opt),
            Err(CalibError::TooFewClusters { need: 2, got: 1 })
        ));
    }

    #[test]
    fn two_stage_loess_excludes_tail_failures() {
        let ds = gen_calibrated(12, 5, 600, |p| p);
        let grid = Grid::default_grid();
        let opt = TwoStageOptions::new(StageOneSmoother::Loess);
        let curve = two_stage_ma(&ds, &grid, &opt).unwrap();
        // Interior points should be present.
        let mid = grid.len() / 2;
        assert!(curve.estimate[mid].is_some());
        // The pooled curve sits near identity in the interior.
        let est = curve.estimate[mid].unwrap();
        assert!((est - grid.points()[mid]).abs() < 0.08);
    }

    #[test]
    fn mixc_homogeneous_pi_close_to_ci() {
        let ds = gen_calibrated(13, 8, 1200, |p| p);
        let grid = Grid::with_points(25).unwrap();
        let curve = mixc(&ds, GlmmVariant::Intercept, &grid, 20_000, 7, 0.95).unwrap();
        for i in 0..grid.len() {
            let (ci_lo, ci_hi) = (curve.ci_lo[i].unwrap(), curve.ci_hi[i].unwrap());
            let (pi_lo, pi_hi) = (curve.pi_lo[i].unwrap(), curve.pi_hi[i].unwrap());
            assert!((pi_lo - ci_lo).abs() < 0.012, "point {i}: {pi_lo} vs {ci_lo}");
            assert!((pi_hi - ci_hi).abs() < 0.012, "point {i}: {pi_hi} vs {ci_hi}");
        }
        assert!(curve.cluster_curves.as_ref().unwrap().len() == 8);
    }

    #[test]
    fn msce_basics_and_loop_oracle() {
        let a: Vec<Option<f64>> = (0..50).map(|i| Some(0.2 + 0.01 * i as f64)).collect();
        assert_eq!(msce(&a, &a).unwrap(), 0.0);
        let b: Vec<Option<f64>> = a.iter().map(|o| o.map(|v| v + 0.01)).collect();
        assert!((msce(&a, &b).unwrap() - 1e-4).abs() < 1e-15);

        let mut rng = crate::streams::stream_rng(14, &[0]);
        let x: Vec<Option<f64>> = (0..100)
            .map(|_| {
                if rng.random::<f64>() < 0.1 {
                    None
                } else {
                    Some(rng.random::<f64>())
                }
            })
            .collect();
        let y: Vec<Option<f64>> = (0..100)
            .map(|_| {
                if rng.random::<f64>() < 0.1 {
                    None
                } else {
                    Some(rng.random::<f64>())
                }
            })
            .collect();
        let got = msce(&x, &y).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for i in 0..100 {
            if let (Some(a), Some(b)) = (x[i], y[i]) {
                sum += (a - b) * (a - b);
                n += 1;
            }
        }
        assert!((got - sum / n as f64).abs() < 1e-12);
        assert!((msce(&x, &y).unwrap() - msce(&y, &x).unwrap()).abs() < 1e-15);

        let none = vec![None; 3];
        assert!(matches!(msce(&none, &none), Err(CalibError::NoOverlap)));
    }

    #[test]
    fn coverage_hand_fixture() {
        let pi_lo = vec![Some(0.2), Some(0.3), None, Some(0.1)];
        let pi_hi = vec![Some(0.6), Some(0.5), None, Some(0.9)];
        let mut truth = BTreeMap::new();
        truth.insert(
            "A".to_string(),
            vec![Some(0.4), Some(0.55), Some(0.5), Some(0.5)],
        );
        truth.insert("B".to_string(), vec![Some(0.5), Some(0.4), Some(0.5), None]);
        let table = pointwise_coverage(&pi_lo, &pi_hi, &truth, "fixture");
        assert_eq!(table.per_point[0], Some(1.0));
        assert_eq!(table.per_point[1], Some(0.5));
        assert_eq!(table.per_point[2], None);
        assert_eq!(table.per_point[3], Some(1.0));
        assert!((table.mean - (1.0 + 0.5 + 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn coverage_band_edges_inclusive() {
        let pi_lo = vec![Some(0.4)];
        let pi_hi = vec![Some(0.4)];
        let mut truth = BTreeMap::new();
        truth.insert("A".to_string(), vec![Some(0.4)]);
        let t = pointwise_coverage(&pi_lo, &pi_hi, &truth, "x");
        assert_eq!(t.per_point[0], Some(1.0));
        truth.insert("A".to_string(), vec![Some(0.4 + 1e-9)]);
        let t = pointwise_coverage(&pi_lo, &pi_hi, &truth, "x");
        assert_eq!(t.per_point[0], Some(0.0));
    }

    #[test]
    fn icc_algebra() {
        assert!((0.0 / (0.0 + LOGISTIC_VARIANCE)).abs() < 1e-12);
        let half = LOGISTIC_VARIANCE / (LOGISTIC_VARIANCE + LOGISTIC_VARIANCE);
        assert_eq!(half, 0.5);
        assert!((LOGISTIC_VARIANCE - std::f64::consts::PI.powi(2) / 3.0).abs() < 1e-6);
    }

    #[test]
    fn icc_homogeneous_near_zero() {
        let mut rng = crate::streams::stream_rng(15, &[0]);
        let mut y = Vec::new();
        let mut cl = Vec::new();
        for j in 0..15 {
            for _ in 0..600 {
                y.push((rng.random::<f64>() < 0.3) as u8 as f64);
                cl.push(j);
            }
        }
        let res = icc(&y, &cl).unwrap();
        assert!(res.icc < 0.01, "icc {}", res.icc);
    }

    #[test]
    fn methods_invariant_to_cluster_relabeling() {
        let ds = gen_calibrated(16, 5, 400, |p| expit(logit(p) * 0.8));
        // Reverse rows and rename clusters.
        let mut rows: Vec<(String, u8, f64)> = ds
            .records()
            .iter()
            .map(|r| (format!("X{}", ds.labels()[r.cluster]), r.y, r.p_hat))
            .collect();
        rows.reverse();
        let (relabeled, _) = ClusteredDataset::from_rows(rows).unwrap();

        let grid = Grid::with_points(20).unwrap();
        let opt = TwoStageOptions::new(StageOneSmoother::Splines);
        let c1 = two_stage_ma(&ds, &grid, &opt).unwrap();
        let c2 = two_stage_ma(&relabeled, &grid, &opt).unwrap();
        for i in 0..grid.len() {
            match (c1.estimate[i], c2.estimate[i]) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "{a} vs {b}"),
                (a, b) => assert_eq!(a.is_some(), b.is_some()),
            }
        }

        let g1 = cgc(&ds, 5, GroupingMode::Grouped, 0.95).unwrap();
        let g2 = cgc(&relabeled, 5, GroupingMode::Grouped, 0.95).unwrap();
        for (p1, p2) in g1.points.iter().zip(&g2.points) {
            assert!((p1.x - p2.x).abs() < 1e-9);
            assert!((p1.y - p2.y).abs() < 1e-9);
        }
    }
}
