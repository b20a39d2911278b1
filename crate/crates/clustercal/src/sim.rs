//! Simulation harness: clustered superpopulations with known truth,
//! development/validation sampling, true calibration curves, and
//! mean-squared-calibration-error and coverage reports across the
//! calibration methods.
//!
//! Every random draw is keyed by (seed, purpose tag, rep, cluster, ...) so
//! results are identical regardless of how work is scheduled across
//! threads.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{
    cgc, mixc, msce, pointwise_coverage, standard_flexible, two_stage_ma, CalibError,
    CoverageTable, FlexSmoother, Grid, GroupingMode, StageOneSmoother, TwoStageOptions,
};
use crate::dataio::ClusteredDataset;
use crate::glmm::GlmmVariant;
use crate::logistic::{fit_logistic, DesignSpec, LogisticError, LogisticFit};
use crate::numeric::{expit, format_sig, logit, quantile_sorted, round_sig};
use crate::smoothers::{place_knots, RcsError};
use crate::streams::stream_rng;

const TAG_CLUSTER_EFFECT: u64 = 1;
const TAG_PREVALENCE: u64 = 2;
const TAG_POPULATION: u64 = 3;
const TAG_DEV_CHOICE: u64 = 4;
const TAG_DEV_DRAW: u64 = 5;
const TAG_VAL_CHOICE: u64 = 6;
const TAG_VAL_DRAW: u64 = 7;
const TAG_TRUTH_AVG: u64 = 8;
const TAG_TRUTH_CLUSTER: u64 = 9;
const TAG_BAND: u64 = 10;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("AUC needs both outcome classes present")]
    SingleClass,
    #[error("superpopulation has {have} clusters; {need} requested")]
    NotEnoughClusters { have: usize, need: usize },
    #[error("model development failed: {0}")]
    DevelopmentFailed(String),
    #[error("truth-curve construction failed: {0}")]
    TruthFailed(String),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Logistic(#[from] LogisticError),
    #[error(transparent)]
    Spline(#[from] RcsError),
}

/// Generating parameters of a clustered superpopulation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SuperpopConfig {
    pub label: String,
    /// Intercept of the linear predictor.
    pub beta0: f64,
    /// Coefficient of the standard-normal patient covariate.
    pub beta1: f64,
    /// Variance of the normal cluster random intercept.
    pub sigma_u2: f64,
    pub n_clusters: usize,
}

impl SuperpopConfig {
    /// Built-in presets P1-P4: crossing AUC 0.90/0.75 with ICC 0.20/0.05 at
    /// a 30% event rate.
    pub fn preset(name: &str) -> Option<Self> {
        let (beta0, beta1, sigma_u2) = match name {
            "P1" => (-1.6054, -2.09062, 1.559),
            "P2" => (-1.0122, 0.4199, 1.0024),
            "P3" => (-1.5943, 2.3875, 0.7827),
            "P4" => (-1.0244, -0.9273, 0.5183),
            _ => return None,
        };
        Some(Self { label: name.to_string(), beta0, beta1, sigma_u2, n_clusters: 200 })
    }

    /// Table S1 targets (AUC, ICC) for the presets.
    pub fn preset_targets(name: &str) -> Option<(f64, f64)> {
        match name {
            "P1" => Some((0.90, 0.20)),
            "P2" => Some((0.75, 0.20)),
            "P3" => Some((0.90, 0.05)),
            "P4" => Some((0.75, 0.05)),
            _ => None,
        }
    }
}

/// A lazily materialized clustered superpopulation: cluster effects and
/// patient draws are derived from counter-indexed streams, never stored.
#[derive(Debug, Clone)]
pub struct Superpopulation {
    pub config: SuperpopConfig,
    pub seed: u64,
}

/// Build a superpopulation from its generating configuration and seed.
pub fn build_superpopulation(config: SuperpopConfig, seed: u64) -> Superpopulation {
    Superpopulation { config, seed }
}

impl Superpopulation {
    pub fn n_clusters(&self) -> usize {
        self.config.n_clusters
    }

    /// Random intercept of cluster `j`, fixed for the superpopulation.
    pub fn cluster_effect(&self, j: usize) -> f64 {
        let mut rng = stream_rng(self.seed, &[TAG_CLUSTER_EFFECT, j as u64]);
        self.config.sigma_u2.sqrt() * rng.sample::<f64, _>(StandardNormal)
    }

    /// True event probability for covariate `x` in a cluster with effect `u`.
    pub fn true_risk(&self, x: f64, u: f64) -> f64 {
        expit(self.config.beta0 + self.config.beta1 * x + u)
    }

    /// Cluster prevalence estimated from a 100k-patient Monte-Carlo draw.
    pub fn prevalence(&self, j: usize) -> f64 {
        let u = self.cluster_effect(j);
        let mut rng = stream_rng(self.seed, &[TAG_PREVALENCE, j as u64]);
        let m = 100_000;
        let mut sum = 0.0;
        for _ in 0..m {
            let x: f64 = rng.sample(StandardNormal);
            sum += self.true_risk(x, u);
        }
        sum / m as f64
    }

    /// Draw `n` (x, y) patients from cluster `j` using the given stream.
    fn draw_patients(&self, rng: &mut ChaCha8Rng, u: f64, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                let y = (rng.random::<f64>() < self.true_risk(x, u)) as u8 as f64;
                (x, y)
            })
            .collect()
    }

    /// Population draw across random clusters: (true risks, outcomes).
    pub fn sample_population(&self, n: usize, stream: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = stream_rng(self.seed, &[TAG_POPULATION, stream]);
        let mut risks = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let j = rng.random_range(0..self.config.n_clusters);
            let u = self.cluster_effect(j);
            let x: f64 = rng.sample(StandardNormal);
            let r = self.true_risk(x, u);
            risks.push(r);
            ys.push((rng.random::<f64>() < r) as u8 as f64);
        }
        (risks, ys)
    }
}

/// Number of patients drawn per cluster: ceil(EPC * 1.15 / prevalence).
pub fn cluster_sample_size(prevalence: f64, epc: usize) -> usize {
    (epc as f64 * 1.15 / prevalence).ceil() as usize
}

/// Development sample with the raw covariate retained.
#[derive(Debug, Clone)]
pub struct DevSample {
    /// Superpopulation cluster indices, in sampling order.
    pub clusters: Vec<usize>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Position in `clusters` for each row.
    pub cluster_of_row: Vec<usize>,
}

/// Sample a development dataset: `n_clusters` clusters without replacement,
/// each with enough patients to reach the requested events per cluster.
pub fn sample_development(
    sp: &Superpopulation,
    n_clusters: usize,
    epc: usize,
    rep: u64,
) -> Result<DevSample, SimError> {
    if n_clusters > sp.n_clusters() {
        return Err(SimError::NotEnoughClusters { have: sp.n_clusters(), need: n_clusters });
    }
    let chosen = choose_without_replacement(
        &mut stream_rng(sp.seed, &[TAG_DEV_CHOICE, rep]),
        sp.n_clusters(),
        n_clusters,
        &[],
    );
    let mut out = DevSample {
        clusters: chosen.clone(),
        x: Vec::new(),
        y: Vec::new(),
        cluster_of_row: Vec::new(),
    };
    for (pos, &j) in chosen.iter().enumerate() {
        let prev = sp.prevalence(j);
        let n_j = cluster_sample_size(prev, epc);
        let u = sp.cluster_effect(j);
        let mut rng = stream_rng(sp.seed, &[TAG_DEV_DRAW, rep, j as u64]);
        for (x, y) in sp.draw_patients(&mut rng, u, n_j) {
            out.x.push(x);
            out.y.push(y);
            out.cluster_of_row.push(pos);
        }
    }
    Ok(out)
}

fn choose_without_replacement(
    rng: &mut ChaCha8Rng,
    total: usize,
    k: usize,
    excluded: &[usize],
) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..total).filter(|i| !excluded.contains(i)).collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let i = rng.random_range(0..pool.len());
        out.push(pool.swap_remove(i));
    }
    out
}

/// A risk model developed on a simulation training sample: logistic
/// regression with a 3-knot restricted cubic spline of the raw covariate.
#[derive(Debug, Clone)]
pub struct DevelopedModel {
    pub design: DesignSpec,
    pub fit: LogisticFit,
}

impl DevelopedModel {
    pub fn predict_risk(&self, x: f64) -> f64 {
        let row = self.design.row(x);
        let mut eta = 0.0;
        for (c, v) in row.iter().enumerate() {
            eta += self.fit.coefficients[c] * v;
        }
        expit(eta)
    }

    pub fn flagged(&self) -> bool {
        self.fit.separation_flag || !self.fit.converged
    }
}

/// Fit the development model on the raw covariate (clusters ignored).
pub fn develop_model(dev: &DevSample) -> Result<DevelopedModel, SimError> {
    if dev.x.is_empty() {
        return Err(SimError::DevelopmentFailed("empty development sample".into()));
    }
    let knots = place_knots(&dev.x, 3)?;
    let design = DesignSpec::Rcs(knots);
    let xmat = design.matrix(&dev.x);
    let fit = fit_logistic(&xmat, &dev.y, 100, 1e-9)?;
    Ok(DevelopedModel { design, fit })
}

/// Sample a validation dataset: `n_clusters` clusters disjoint from the
/// excluded set, `total` patients allocated evenly (remainder to the first
/// clusters), predicted risks attached from the developed model.
pub fn sample_validation(
    sp: &Superpopulation,
    excluded: &[usize],
    model: &DevelopedModel,
    n_clusters: usize,
    total: usize,
    rep: u64,
) -> Result<(ClusteredDataset, Vec<usize>), SimError> {
    let available = sp.n_clusters() - excluded.len();
    if available < n_clusters {
        return Err(SimError::NotEnoughClusters { have: available, need: n_clusters });
    }
    let chosen = choose_without_replacement(
        &mut stream_rng(sp.seed, &[TAG_VAL_CHOICE, rep]),
        sp.n_clusters(),
        n_clusters,
        excluded,
    );
    let base = total / n_clusters;
    let rem = total % n_clusters;
    let mut rows = Vec::with_capacity(total);
    for (pos, &j) in chosen.iter().enumerate() {
        let n_j = base + usize::from(pos < rem);
        let u = sp.cluster_effect(j);
        let mut rng = stream_rng(sp.seed, &[TAG_VAL_DRAW, rep, j as u64]);
        for (x, y) in sp.draw_patients(&mut rng, u, n_j) {
            rows.push((format!("C{j:03}"), y as u8, model.predict_risk(x)));
        }
    }
    let (ds, _) = ClusteredDataset::from_rows(rows).map_err(|e| {
        SimError::DevelopmentFailed(format!("validation assembly failed: {e}"))
    })?;
    Ok((ds, chosen))
}

/// A true calibration curve: a 5-knot spline calibration of true outcomes
/// on the model's predicted risks in a large population draw, evaluable at
/// any risk within the supported range.
#[derive(Debug, Clone)]
pub struct TruthCurve {
    design: DesignSpec,
    fit: LogisticFit,
    /// Supported range of predicted risks.
    pub support: (f64, f64),
}

impl TruthCurve {
    pub fn evaluate(&self, p: f64) -> Option<f64> {
        if p < self.support.0 || p > self.support.1 {
            return None;
        }
        let row = self.design.row(logit(p));
        let mut eta = 0.0;
        for (c, v) in row.iter().enumerate() {
            eta += self.fit.coefficients[c] * v;
        }
        Some(expit(eta))
    }

    pub fn evaluate_grid(&self, grid: &Grid) -> Vec<Option<f64>> {
        grid.points().iter().map(|&p| self.evaluate(p)).collect()
    }
}

fn truth_curve(
    sp: &Superpopulation,
    u: f64,
    model: &DevelopedModel,
    m: usize,
    stream: &[u64],
) -> Result<TruthCurve, SimError> {
    let mut rng = stream_rng(sp.seed, stream);
    let mut lp = Vec::with_capacity(m);
    let mut y = Vec::with_capacity(m);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for _ in 0..m {
        let x: f64 = rng.sample(StandardNormal);
        let p_hat = model.predict_risk(x).clamp(1e-10, 1.0 - 1e-10);
        lo = lo.min(p_hat);
        hi = hi.max(p_hat);
        lp.push(logit(p_hat));
        y.push((rng.random::<f64>() < sp.true_risk(x, u)) as u8 as f64);
    }
    let knots = place_knots(&lp, 5).map_err(|e| SimError::TruthFailed(e.to_string()))?;
    let design = DesignSpec::Rcs(knots);
    let xmat = design.matrix(&lp);
    let fit =
        fit_logistic(&xmat, &y, 100, 1e-9).map_err(|e| SimError::TruthFailed(e.to_string()))?;
    Ok(TruthCurve { design, fit, support: (lo, hi) })
}

/// True calibration curve of the cluster with the average effect (u = 0).
pub fn true_average_curve(
    sp: &Superpopulation,
    model: &DevelopedModel,
    m: usize,
    rep: u64,
) -> Result<TruthCurve, SimError> {
    truth_curve(sp, 0.0, model, m, &[TAG_TRUTH_AVG, rep])
}

/// True calibration curve of a specific cluster (u = u_j).
pub fn true_cluster_curve(
    sp: &Superpopulation,
    cluster: usize,
    model: &DevelopedModel,
    m: usize,
    rep: u64,
) -> Result<TruthCurve, SimError> {
    truth_curve(
        sp,
        sp.cluster_effect(cluster),
        model,
        m,
        &[TAG_TRUTH_CLUSTER, rep, cluster as u64],
    )
}

/// Concordance probability (AUC) with tie correction, by midranks.
pub fn empirical_auc(risks: &[f64], outcomes: &[f64]) -> Result<f64, SimError> {
    assert_eq!(risks.len(), outcomes.len());
    let n = risks.len();
    let n1 = outcomes.iter().filter(|&&y| y == 1.0).count();
    let n0 = n - n1;
    if n1 == 0 || n0 == 0 {
        return Err(SimError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| risks[a].partial_cmp(&risks[b]).unwrap());
    let mut rank_sum_events = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && risks[idx[j + 1]] == risks[idx[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if outcomes[k] == 1.0 {
                rank_sum_events += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_events - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n1 as f64 * n0 as f64))
}

/// Sizes of the sampled datasets and truth draws.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScaleConfig {
    pub validation_clusters: usize,
    pub validation_total: usize,
    pub truth_m_average: usize,
    pub truth_m_cluster: usize,
    pub band_samples: usize,
}

impl ScaleConfig {
    /// Desk scale: 30 validation clusters of ~500 patients, reduced truth
    /// draws.
    pub fn desk() -> Self {
        Self {
            validation_clusters: 30,
            validation_total: 15_000,
            truth_m_average: 300_000,
            truth_m_cluster: 100_000,
            band_samples: 10_000,
        }
    }

    /// Paper scale: 100,000 validation observations and million-patient
    /// truth draws.
    pub fn full() -> Self {
        Self {
            validation_clusters: 30,
            validation_total: 100_000,
            truth_m_average: 1_000_000,
            truth_m_cluster: 1_000_000,
            band_samples: 10_000,
        }
    }
}

/// One simulation scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub superpop: SuperpopConfig,
    pub epc: usize,
    pub dev_clusters: usize,
    pub reps: usize,
    pub seed: u64,
    pub scale: ScaleConfig,
    /// Random-effect structure used by the MIX-C column.
    pub mixc_slope: bool,
}

impl Scenario {
    pub fn new(superpop: SuperpopConfig, epc: usize, dev_clusters: usize, reps: usize, seed: u64) -> Self {
        Self { superpop, epc, dev_clusters, reps, seed, scale: ScaleConfig::desk(), mixc_slope: true }
    }
}

/// The six reported methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodId {
    Flexible,
    CgcGrouped,
    CgcInterval,
    TwoStageSplines,
    TwoStageLoess,
    MixC,
}

pub const ALL_METHODS: [MethodId; 6] = [
    MethodId::Flexible,
    MethodId::CgcGrouped,
    MethodId::CgcInterval,
    MethodId::TwoStageSplines,
    MethodId::TwoStageLoess,
    MethodId::MixC,
];

impl MethodId {
    pub fn name(&self) -> &'static str {
        match self {
            MethodId::Flexible => "flexible",
            MethodId::CgcGrouped => "cgc_grouped",
            MethodId::CgcInterval => "cgc_interval",
            MethodId::TwoStageSplines => "2mac_splines",
            MethodId::TwoStageLoess => "2mac_loess",
            MethodId::MixC => "mixc",
        }
    }
}

/// Per-replication results: MSCE per method (probability scale, not yet
/// multiplied by 100) and coverage tables for methods with prediction
/// intervals.
#[derive(Debug, Clone)]
pub struct RepResult {
    pub rep: usize,
    pub msce: Vec<Option<f64>>,
    pub coverage: Vec<Option<CoverageTable>>,
    pub method_notes: Vec<String>,
    pub failure: Option<String>,
}

/// Aggregated scenario report.
#[derive(Debug, Clone)]
pub struct SimReport {
    pub scenario: Scenario,
    pub methods: Vec<MethodId>,
    pub reps: Vec<RepResult>,
    /// Median and quartiles of MSCE x100 per method, over successful reps.
    pub median_msce_x100: Vec<Option<f64>>,
    pub iqr_msce_x100: Vec<Option<(f64, f64)>>,
    /// Mean pointwise PI coverage per method.
    pub mean_coverage: Vec<Option<f64>>,
    /// Rep-averaged coverage per grid slot per method.
    pub coverage_by_point: Vec<Option<Vec<Option<f64>>>>,
    pub failed_reps: usize,
    /// More than 20% of reps failed.
    pub unreliable: bool,
}

fn median_iqr(values: &mut Vec<f64>) -> Option<(f64, (f64, f64))> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some((
        quantile_sorted(values, 0.5),
        (quantile_sorted(values, 0.25), quantile_sorted(values, 0.75)),
    ))
}

fn run_rep(scenario: &Scenario, methods: &[MethodId], rep: usize) -> RepResult {
    let sp = build_superpopulation(scenario.superpop.clone(), scenario.seed);
    let grid = Grid::default_grid();
    let mut out = RepResult {
        rep,
        msce: vec![None; methods.len()],
        coverage: vec![None; methods.len()],
        method_notes: Vec::new(),
        failure: None,
    };
    let fail = |msg: String, out: &mut RepResult| {
        out.failure = Some(msg);
    };

    let dev = match sample_development(&sp, scenario.dev_clusters, scenario.epc, rep as u64) {
        Ok(d) => d,
        Err(e) => {
            fail(format!("development sampling: {e}"), &mut out);
            return out;
        }
    };
    let model = match develop_model(&dev) {
        Ok(m) if !m.flagged() => m,
        Ok(_) => {
            fail("development model separated or did not converge".into(), &mut out);
            return out;
        }
        Err(e) => {
            fail(format!("development model: {e}"), &mut out);
            return out;
        }
    };
    let (val, val_clusters) = match sample_validation(
        &sp,
        &dev.clusters,
        &model,
        scenario.scale.validation_clusters,
        scenario.scale.validation_total,
        rep as u64,
    ) {
        Ok(v) => v,
        Err(e) => {
            fail(format!("validation sampling: {e}"), &mut out);
            return out;
        }
    };
    let truth_avg = match true_average_curve(&sp, &model, scenario.scale.truth_m_average, rep as u64)
    {
        Ok(t) => t,
        Err(e) => {
            fail(format!("average truth curve: {e}"), &mut out);
            return out;
        }
    };
    let truth_avg_grid = truth_avg.evaluate_grid(&grid);

    // Cluster-level truth, for coverage (label order matches the dataset).
    let mut truth_clusters: BTreeMap<String, TruthCurve> = BTreeMap::new();
    for &j in &val_clusters {
        match true_cluster_curve(&sp, j, &model, scenario.scale.truth_m_cluster, rep as u64) {
            Ok(t) => {
                truth_clusters.insert(format!("C{j:03}"), t);
            }
            Err(e) => {
                fail(format!("cluster truth curve: {e}"), &mut out);
                return out;
            }
        }
    }
    let truth_cluster_grids: BTreeMap<String, Vec<Option<f64>>> = truth_clusters
        .iter()
        .map(|(label, t)| (label.clone(), t.evaluate_grid(&grid)))
        .collect();

    for (mi, method) in methods.iter().enumerate() {
        let note = |msg: String, out: &mut RepResult| {
            out.method_notes.push(format!("rep {rep} {}: {msg}", method.name()));
        };
        match method {
            MethodId::Flexible => {
                match standard_flexible(&val, FlexSmoother::Rcs(3), &grid, 0.95) {
                    Ok(curve) if !curve.flagged => {
                        out.msce[mi] = msce(&curve.estimate, &truth_avg_grid).ok();
                    }
                    Ok(_) => note("separated fit".into(), &mut out),
                    Err(e) => note(e.to_string(), &mut out),
                }
            }
            MethodId::CgcGrouped | MethodId::CgcInterval => {
                let mode = if matches!(method, MethodId::CgcGrouped) {
                    GroupingMode::Grouped
                } else {
                    GroupingMode::Interval
                };
                match cgc(&val, 10, mode, 0.95) {
                    Ok(gc) => {
                        let est: Vec<Option<f64>> = gc.points.iter().map(|p| Some(p.y)).collect();
                        let truth: Vec<Option<f64>> =
                            gc.points.iter().map(|p| truth_avg.evaluate(p.x)).collect();
                        out.msce[mi] = msce(&est, &truth).ok();
                        // Coverage on the 10 group slots.
                        let mut pi_lo = vec![None; 10];
                        let mut pi_hi = vec![None; 10];
                        for p in &gc.points {
                            pi_lo[p.group] = Some(p.pi_y.0);
                            pi_hi[p.group] = Some(p.pi_y.1);
                        }
                        let truths: BTreeMap<String, Vec<Option<f64>>> = truth_clusters
                            .iter()
                            .map(|(label, t)| {
                                let vals: Vec<Option<f64>> = (0..10)
                                    .map(|g| {
                                        gc.points
                                            .iter()
                                            .find(|p| p.group == g)
                                            .and_then(|p| t.evaluate(p.x))
                                    })
                                    .collect();
                                (label.clone(), vals)
                            })
                            .collect();
                        out.coverage[mi] =
                            Some(pointwise_coverage(&pi_lo, &pi_hi, &truths, method.name()));
                    }
                    Err(e) => note(e.to_string(), &mut out),
                }
            }
            MethodId::TwoStageSplines | MethodId::TwoStageLoess => {
                let smoother = if matches!(method, MethodId::TwoStageSplines) {
                    StageOneSmoother::Splines
                } else {
                    StageOneSmoother::Loess
                };
                match two_stage_ma(&val, &grid, &TwoStageOptions::new(smoother)) {
                    Ok(curve) => {
                        out.msce[mi] = msce(&curve.estimate, &truth_avg_grid).ok();
                        out.coverage[mi] = Some(pointwise_coverage(
                            &curve.pi_lo,
                            &curve.pi_hi,
                            &truth_cluster_grids,
                            method.name(),
                        ));
                    }
                    Err(e) => note(e.to_string(), &mut out),
                }
            }
            MethodId::MixC => {
                let variant = if scenario.mixc_slope {
                    GlmmVariant::Slope
                } else {
                    GlmmVariant::Intercept
                };
                let band_seed = stream_rng(scenario.seed, &[TAG_BAND, rep as u64])
                    .random::<u64>();
                match mixc(&val, variant, &grid, scenario.scale.band_samples, band_seed, 0.95) {
                    Ok(curve) => {
                        out.msce[mi] = msce(&curve.estimate, &truth_avg_grid).ok();
                        out.coverage[mi] = Some(pointwise_coverage(
                            &curve.pi_lo,
                            &curve.pi_hi,
                            &truth_cluster_grids,
                            method.name(),
                        ));
                    }
                    Err(e) => note(e.to_string(), &mut out),
                }
            }
        }
    }
    out
}

/// Run every replication of a scenario (in parallel) and aggregate.
pub fn run_scenario(scenario: &Scenario, methods: &[MethodId]) -> SimReport {
    let reps: Vec<RepResult> = (0..scenario.reps)
        .into_par_iter()
        .map(|rep| run_rep(scenario, methods, rep))
        .collect();

    let failed_reps = reps.iter().filter(|r| r.failure.is_some()).count();
    let mut median = Vec::with_capacity(methods.len());
    let mut iqr = Vec::with_capacity(methods.len());
    let mut mean_cov = Vec::with_capacity(methods.len());
    let mut cov_by_point = Vec::with_capacity(methods.len());

    for mi in 0..methods.len() {
        let mut vals: Vec<f64> = reps
            .iter()
            .filter(|r| r.failure.is_none())
            .filter_map(|r| r.msce[mi])
            .map(|v| v * 100.0)
            .collect();
        match median_iqr(&mut vals) {
            Some((m, q)) => {
                median.push(Some(m));
                iqr.push(Some(q));
            }
            None => {
                median.push(None);
                iqr.push(None);
            }
        }

        // Pointwise coverage averaged over reps.
        let tables: Vec<&CoverageTable> = reps
            .iter()
            .filter(|r| r.failure.is_none())
            .filter_map(|r| r.coverage[mi].as_ref())
            .collect();
        if tables.is_empty() {
            mean_cov.push(None);
            cov_by_point.push(None);
            continue;
        }
        let n_points = tables.iter().map(|t| t.per_point.len()).max().unwrap();
        let mut per_point: Vec<Option<f64>> = Vec::with_capacity(n_points);
        for i in 0..n_points {
            let vals: Vec<f64> = tables
                .iter()
                .filter_map(|t| t.per_point.get(i).copied().flatten())
                .collect();
            per_point.push(if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            });
        }
        let present: Vec<f64> = per_point.iter().flatten().copied().collect();
        mean_cov.push(if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        });
        cov_by_point.push(Some(per_point));
    }

    let unreliable = failed_reps * 5 > scenario.reps;
    SimReport {
        scenario: scenario.clone(),
        methods: methods.to_vec(),
        reps,
        median_msce_x100: median,
        iqr_msce_x100: iqr,
        mean_coverage: mean_cov,
        coverage_by_point: cov_by_point,
        failed_reps,
        unreliable,
    }
}

impl SimReport {
    pub fn method_index(&self, id: MethodId) -> Option<usize> {
        self.methods.iter().position(|m| *m == id)
    }

    /// Long-form CSV of per-rep MSCE (x100): `rep,method,msce_x100`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rep");
        for m in &self.methods {
            out.push(',');
            out.push_str(m.name());
        }
        out.push('\n');
        for rep in &self.reps {
            out.push_str(&rep.rep.to_string());
            for mi in 0..self.methods.len() {
                out.push(',');
                if rep.failure.is_none() {
                    if let Some(v) = rep.msce[mi] {
                        out.push_str(&format_sig(v * 100.0, 10));
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// JSON summary: scenario echo, per-method medians/IQRs (x100), mean
    /// and pointwise coverage, failure counts.
    pub fn to_json(&self) -> String {
        let r10 = |v: f64| round_sig(v, 10);
        let methods: Vec<serde_json::Value> = self
            .methods
            .iter()
            .enumerate()
            .map(|(mi, m)| {
                serde_json::json!({
                    "method": m.name(),
                    "median_msce_x100": self.median_msce_x100[mi].map(r10),
                    "iqr_msce_x100": self.iqr_msce_x100[mi].map(|(a, b)| vec![r10(a), r10(b)]),
                    "mean_pi_coverage": self.mean_coverage[mi].map(r10),
                    "coverage_by_point": self.coverage_by_point[mi]
                        .as_ref()
                        .map(|v| v.iter().map(|o| o.map(r10)).collect::<Vec<_>>()),
                })
            })
            .collect();
        let failures: Vec<serde_json::Value> = self
            .reps
            .iter()
            .filter_map(|r| {
                r.failure
                    .as_ref()
                    .map(|f| serde_json::json!({"rep": r.rep, "reason": f}))
            })
            .collect();
        let doc = serde_json::json!({
            "scenario": {
                "superpopulation": self.scenario.superpop,
                "epc": self.scenario.epc,
                "dev_clusters": self.scenario.dev_clusters,
                "reps": self.scenario.reps,
                "seed": self.scenario.seed,
                "scale": self.scenario.scale,
                "mixc_slope": self.scenario.mixc_slope,
            },
            "methods": methods,
            "failed_reps": self.failed_reps,
            "failures": failures,
            "unreliable": self.unreliable,
        });
        serde_json::to_string_pretty(&doc).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_parameters() {
        let p1 = SuperpopConfig::preset("P1").unwrap();
        assert_eq!((p1.beta0, p1.beta1, p1.sigma_u2), (-1.6054, -2.09062, 1.559));
        let p2 = SuperpopConfig::preset("P2").unwrap();
        assert_eq!((p2.beta0, p2.beta1, p2.sigma_u2), (-1.0122, 0.4199, 1.0024));
        let p3 = SuperpopConfig::preset("P3").unwrap();
        assert_eq!((p3.beta0, p3.beta1, p3.sigma_u2), (-1.5943, 2.3875, 0.7827));
        let p4 = SuperpopConfig::preset("P4").unwrap();
        assert_eq!((p4.beta0, p4.beta1, p4.sigma_u2), (-1.0244, -0.9273, 0.5183));
        assert!(SuperpopConfig::preset("P9").is_none());
        for p in ["P1", "P2", "P3", "P4"] {
            assert_eq!(SuperpopConfig::preset(p).unwrap().n_clusters, 200);
        }
    }

    #[test]
    fn cluster_sample_size_arithmetic() {
        assert_eq!(cluster_sample_size(0.5, 20), 46);
        assert_eq!(cluster_sample_size(0.23, 200), 1000);
    }

    #[test]
    fn auc_perfect_separation_is_one() {
        let risks = [0.1, 0.2, 0.3, 0.8, 0.9];
        let y = [0.0, 0.0, 0.0, 1.0, 1.0];
        assert_eq!(empirical_auc(&risks, &y).unwrap(), 1.0);
    }

    #[test]
    fn auc_matches_hand_counted_pairs_with_tie() {
        // 6 observations, one tied risk pair across classes.
        let risks = [0.2, 0.4, 0.4, 0.6, 0.7, 0.3];
        let y = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        // Events: risks {0.4, 0.6}; non-events: {0.2, 0.4, 0.7, 0.3}.
        // Pairs (event, nonevent): concordant pairs counted by hand:
        // 0.4 vs 0.2 C, 0.4 vs 0.4 tie, 0.4 vs 0.7 D, 0.4 vs 0.3 C,
        // 0.6 vs 0.2 C, 0.6 vs 0.4 C, 0.6 vs 0.7 D, 0.6 vs 0.3 C.
        // (5 + 0.5 * 1) / 8 = 0.6875
        let auc = empirical_auc(&risks, &y).unwrap();
        assert!((auc - 0.6875).abs() < 1e-12, "auc {auc}");
    }

    #[test]
    fn auc_null_is_half() {
        let sp = build_superpopulation(SuperpopConfig::preset("P4").unwrap(), 3);
        let mut rng = stream_rng(3, &[99]);
        let n = 100_000;
        let risks: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() < 0.3) as u8 as f64).collect();
        let auc = empirical_auc(&risks, &y).unwrap();
        assert!((auc - 0.5).abs() < 0.01, "auc {auc}");
        let _ = sp;
        assert!(matches!(
            empirical_auc(&[0.1, 0.2], &[1.0, 1.0]),
            Err(SimError::SingleClass)
        ));
    }

    #[test]
    fn preset_event_rates_and_aucs_hit_targets() {
        for name in ["P1", "P2", "P3", "P4"] {
            let sp = build_superpopulation(SuperpopConfig::preset(name).unwrap(), 20260810);
            let (risks, y) = sp.sample_population(100_000, 0);
            let rate = y.iter().sum::<f64>() / y.len() as f64;
            assert!(
                (rate - 0.30).abs() <= 0.01,
                "{name}: event rate {rate}"
            );
            let (auc_target, _) = SuperpopConfig::preset_targets(name).unwrap();
            let auc = empirical_auc(&risks, &y).unwrap();
            assert!(
                (auc - auc_target).abs() <= 0.01,
                "{name}: auc {auc} vs target {auc_target}"
            );
        }
    }

    #[test]
    fn development_sampling_reaches_epc() {
        let sp = build_superpopulation(SuperpopConfig::preset("P4").unwrap(), 11);
        let mut ok = 0;
        let reps = 50;
        for rep in 0..reps {
            let dev = sample_development(&sp, 5, 20, rep).unwrap();
            let mut events = vec![0.0; 5];
            for (row, &c) in dev.cluster_of_row.iter().enumerate() {
                events[c] += dev.y[row];
            }
            let mean_events = events.iter().sum::<f64>() / 5.0;
            if mean_events >= 20.0 {
                ok += 1;
            }
        }
        assert!(ok * 10 >= reps * 9, "epc reached in {ok}/{reps} reps");
    }

    #[test]
    fn development_and_validation_clusters_disjoint() {
        let sp = build_superpopulation(SuperpopConfig::preset("P2").unwrap(), 4);
        let dev = sample_development(&sp, 30, 20, 0).unwrap();
        let model = develop_model(&dev).unwrap();
        let (_, val_clusters) =
            sample_validation(&sp, &dev.clusters, &model, 30, 3000, 0).unwrap();
        for c in &val_clusters {
            assert!(!dev.clusters.contains(c));
        }
        assert_eq!(val_clusters.len(), 30);
    }

    #[test]
    fn validation_row_count_matches_total() {
        let sp = build_superpopulation(SuperpopConfig::preset("P4").unwrap(), 5);
        let dev = sample_development(&sp, 5, 20, 1).unwrap();
        let model = develop_model(&dev).unwrap();
        let (val, _) = sample_validation(&sp, &dev.clusters, &model, 30, 15_000, 1).unwrap();
        assert_eq!(val.n(), 15_000);
        assert_eq!(val.n_clusters(), 30);
        for j in 0..30 {
            assert_eq!(val.cluster_size(j), 500);
        }
    }

    #[test]
    fn developed_model_is_deterministic_and_accurate() {
        let sp = build_superpopulation(SuperpopConfig::preset("P4").unwrap(), 6);
        let dev = sample_development(&sp, 30, 200, 0).unwrap();
        let m1 = develop_model(&dev).unwrap();
        let m2 = develop_model(&dev).unwrap();
        assert_eq!(m1.fit.coefficients, m2.fit.coefficients);
        // Large development sample recovers the linear-logit truth at u=0.
        for x in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let truth = sp.true_risk(x, 0.0);
            let got = m1.predict_risk(x);
            assert!((got - truth).abs() < 0.02, "x {x}: {got} vs {truth}");
        }
    }

    #[test]
    fn truth_curve_self_consistency() {
        let sp = build_superpopulation(SuperpopConfig::preset("P4").unwrap(), 7);
        let dev = sample_development(&sp, 30, 200, 0).unwrap();
        let model = develop_model(&dev).unwrap();
        let truth = true_average_curve(&sp, &model, 200_000, 0).unwrap();
        let grid = Grid::default_grid();
        for (i, &p) in grid.points().iter().enumerate() {
            if let Some(t) = truth.evaluate_grid(&grid)[i] {
                if p > 0.05 && p < 0.7 {
                    assert!((t - p).abs() < 0.015, "grid {p}: truth {t}");
                }
            }
        }
    }

    #[test]
    fn truth_curve_detects_intercept_shift() {
        let sp = build_superpopulation(SuperpopConfig::preset("P4").unwrap(), 8);
        let dev = sample_development(&sp, 30, 200, 0).unwrap();
        let mut model = develop_model(&dev).unwrap();
        // Shift the model's logit by +1: it now overestimates.
        model.fit.coefficients[0] += 1.0;
        let truth = true_average_curve(&sp, &model, 200_000, 0).unwrap();
        for p in [0.2, 0.3, 0.4, 0.5, 0.6] {
            let expected = expit(logit(p) - 1.0);
            let got = truth.evaluate(p).unwrap();
            assert!((got - expected).abs() < 0.015, "p {p}: {got} vs {expected}");
        }
    }

    #[test]
    fn truth_curve_deterministic_and_stable_in_m() {
        let sp = build_superpopulation(SuperpopConfig::preset("P2").unwrap(), 9);
        let dev = sample_development(&sp, 10, 100, 0).unwrap();
        let model = develop_model(&dev).unwrap();
        let a = true_average_curve(&sp, &model, 100_000, 0).unwrap();
        let b = true_average_curve(&sp, &model, 100_000, 0).unwrap();
        let grid = Grid::with_points(25).unwrap();
        assert_eq!(a.evaluate_grid(&grid), b.evaluate_grid(&grid));
        let big = true_average_curve(&sp, &model, 200_000, 0).unwrap();
        for (x, y) in a.evaluate_grid(&grid).iter().zip(big.evaluate_grid(&grid)) {
            if let (Some(x), Some(y)) = (x, y) {
                assert!((x - y).abs() < 0.005, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn cluster_truth_ordered_by_random_effect() {
        let sp = build_superpopulation(SuperpopConfig::preset("P2").unwrap(), 10);
        let dev = sample_development(&sp, 10, 100, 0).unwrap();
        let model = develop_model(&dev).unwrap();
        // Find clusters with clearly positive and negative effects.
        let hi = (0..200).max_by(|&a, &b| {
            sp.cluster_effect(a).partial_cmp(&sp.cluster_effect(b)).unwrap()
        });
        let lo = (0..200).min_by(|&a, &b| {
            sp.cluster_effect(a).partial_cmp(&sp.cluster_effect(b)).unwrap()
        });
        let (hi, lo) = (hi.unwrap(), lo.unwrap());
        let t_hi = true_cluster_curve(&sp, hi, &model, 100_000, 0).unwrap();
        let t_lo = true_cluster_curve(&sp, lo, &model, 100_000, 0).unwrap();
        let mut checked = 0;
        for p in [0.2, 0.3, 0.4, 0.5] {
            if let (Some(a), Some(b)) = (t_hi.evaluate(p), t_lo.evaluate(p)) {
                assert!(a > b, "p {p}: {a} vs {b}");
                checked += 1;
            }
        }
        assert!(checked >= 2);
    }

    #[test]
    fn single_rep_report_is_reproducible() {
        let mut scenario = Scenario::new(SuperpopConfig::preset("P4").unwrap(), 20, 5, 1, 42);
        scenario.scale = ScaleConfig {
            validation_clusters: 10,
            validation_total: 1500,
            truth_m_average: 20_000,
            truth_m_cluster: 10_000,
            band_samples: 2_000,
        };
        let methods = [MethodId::Flexible, MethodId::TwoStageSplines, MethodId::MixC];
        let r1 = run_scenario(&scenario, &methods);
        let r2 = run_scenario(&scenario, &methods);
        assert_eq!(r1.to_csv(), r2.to_csv());
        assert_eq!(r1.to_json(), r2.to_json());
        assert_eq!(r1.failed_reps, 0, "notes: {:?}", r1.reps[0].method_notes);
    }
}
