//! Logistic generalized linear mixed model fitted by Laplace approximation.
//!
//! The model has restricted-cubic-spline fixed effects of logit(p_hat) and a
//! cluster-level random intercept or random intercept-and-spline
//! coefficients. Random effects are expressed in spherical coordinates
//! u_j = Lambda b_j with b_j ~ N(0, I), so an inner penalized IRLS finds the
//! joint mode of (beta, b) for fixed Lambda and a derivative-free outer
//! search minimizes the Laplace-approximate deviance over the log-Cholesky
//! parameters of Lambda.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::dataio::ClusteredDataset;
use crate::logistic::DesignSpec;
use crate::numeric::{bernoulli_ll, expit, logit};
use crate::optim::NelderMead;
use crate::smoothers::KnotVector;

/// Diagonal Cholesky entries below this are treated as a boundary fit.
const BOUNDARY_TOL: f64 = 1e-4;
/// Floor and ceiling for diagonal Cholesky entries during the outer search.
const DIAG_FLOOR_LN: f64 = -13.815_510_557_964_274; // ln(1e-6)
const DIAG_CEIL_LN: f64 = 6.907_755_278_982_137; // ln(1e3)

#[derive(Debug, Error)]
pub enum GlmmError {
    #[error("need at least 2 clusters, got {0}")]
    TooFewClusters(usize),
    #[error("inner penalized IRLS diverged after step-halving")]
    InnerDiverged,
    #[error("singular system in the mixed-model solve")]
    Singular,
    #[error("cluster '{0}' is not part of the fit")]
    UnknownCluster(String),
    #[error("prediction band needs at least 100 samples, got {0}")]
    TooFewSamples(usize),
    #[error("no variance-parameter value admitted a finite deviance")]
    NoFiniteDeviance,
}

/// Random-effect structure of the mixed calibration model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlmmVariant {
    /// Random intercept per cluster.
    Intercept,
    /// Random intercept and spline coefficients per cluster.
    Slope,
}

/// Model specification: spline knots shared by the fixed and random parts.
#[derive(Debug, Clone)]
pub struct GlmmSpec {
    pub variant: GlmmVariant,
    pub knots: KnotVector,
}

impl GlmmSpec {
    pub fn new(variant: GlmmVariant, knots: KnotVector) -> Self {
        Self { variant, knots }
    }

    /// Number of fixed-effect columns (intercept + spline basis).
    pub fn fixed_dim(&self) -> usize {
        self.knots.k()
    }

    /// Random-effect dimension r.
    pub fn random_dim(&self) -> usize {
        match self.variant {
            GlmmVariant::Intercept => 1,
            GlmmVariant::Slope => self.knots.k(),
        }
    }
}

/// Per-cluster data block with fixed and random design matrices.
struct ClusterBlock {
    label: String,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    y: DVector<f64>,
}

fn blocks_from_dataset(ds: &ClusteredDataset, spec: &GlmmSpec) -> Vec<ClusterBlock> {
    let design = DesignSpec::Rcs(spec.knots.clone());
    let p = spec.fixed_dim();
    let r = spec.random_dim();
    (0..ds.n_clusters())
        .map(|j| {
            let rows = ds.cluster_rows(j);
            let n = rows.len();
            let mut x = DMatrix::zeros(n, p);
            let mut z = DMatrix::zeros(n, r);
            let mut y = DVector::zeros(n);
            for (i, &row) in rows.iter().enumerate() {
                let rec = ds.records()[row];
                let xr = design.row(logit(rec.p_hat));
                for (c, v) in xr.iter().enumerate() {
                    x[(i, c)] = *v;
                }
                match spec.variant {
                    GlmmVariant::Intercept => z[(i, 0)] = 1.0,
                    GlmmVariant::Slope => {
                        for (c, v) in xr.iter().enumerate() {
                            z[(i, c)] = *v;
                        }
                    }
                }
                y[i] = rec.y as f64;
            }
            ClusterBlock { label: ds.labels()[j].clone(), x, z, y }
        })
        .collect()
}

/// Lower-triangular Lambda from packed parameters: r log-diagonals followed
/// by the r(r-1)/2 subdiagonal entries, row-major.
fn lambda_from_params(params: &[f64], r: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(r, r);
    for i in 0..r {
        l[(i, i)] = params[i].clamp(DIAG_FLOOR_LN, DIAG_CEIL_LN).exp();
    }
    let mut idx = r;
    for i in 1..r {
        for j in 0..i {
            l[(i, j)] = params[idx].clamp(-1e3, 1e3);
            idx += 1;
        }
    }
    l
}

fn n_params(r: usize) -> usize {
    r + r * (r - 1) / 2
}

/// Joint-mode state carried across outer evaluations as a warm start.
#[derive(Clone)]
struct PirlsState {
    beta: DVector<f64>,
    b: Vec<DVector<f64>>,
}

struct PirlsOutcome {
    ll: f64,
    converged: bool,
}

fn joint_ll(blocks: &[ClusterBlock], lambda: &DMatrix<f64>, state: &PirlsState) -> (f64, f64) {
    let mut ll = 0.0;
    let mut pen = 0.0;
    for (j, block) in blocks.iter().enumerate() {
        let zt = &block.z * lambda;
        let eta = &block.x * &state.beta + &zt * &state.b[j];
        for i in 0..block.y.len() {
            ll += bernoulli_ll(block.y[i], expit(eta[i]));
        }
        pen += state.b[j].norm_squared();
    }
    (ll, -2.0 * ll + pen)
}

/// Penalized IRLS: joint mode of (beta, b) at fixed Lambda via the Schur
/// complement of the block system, with step-halving on the penalized
/// deviance.
fn pirls(
    blocks: &[ClusterBlock],
    lambda: &DMatrix<f64>,
    state: &mut PirlsState,
    max_iter: usize,
    tol: f64,
) -> Result<PirlsOutcome, GlmmError> {
    let p = state.beta.len();
    let r = lambda.nrows();
    let (mut ll, mut pen_dev) = joint_ll(blocks, lambda, state);
    if !pen_dev.is_finite() {
        return Err(GlmmError::InnerDiverged);
    }
    let mut converged = false;

    for _ in 0..max_iter {
        let mut s_mat = DMatrix::<f64>::zeros(p, p);
        let mut t_vec = DVector::<f64>::zeros(p);
        let mut schur = DMatrix::<f64>::zeros(p, p);
        let mut rhs_adj = DVector::<f64>::zeros(p);
        let mut a_chol_list: Vec<Cholesky<f64, nalgebra::Dyn>> = Vec::with_capacity(blocks.len());
        let mut b_list: Vec<DMatrix<f64>> = Vec::with_capacity(blocks.len());
        let mut c_list: Vec<DVector<f64>> = Vec::with_capacity(blocks.len());

        for (j, block) in blocks.iter().enumerate() {
            let zt = &block.z * lambda; // n x r
            let eta = &block.x * &state.beta + &zt * &state.b[j];
            let n = block.y.len();
            let mut a = DMatrix::<f64>::identity(r, r);
            let mut bmat = DMatrix::<f64>::zeros(r, p);
            let mut c = DVector::<f64>::zeros(r);
            for i in 0..n {
                let mu = expit(eta[i]);
                let w = (mu * (1.0 - mu)).max(1e-10);
                let zwork = eta[i] + (block.y[i] - mu) / w;
                for a_i in 0..r {
                    let zw = zt[(i, a_i)] * w;
                    c[a_i] += zw * zwork;
                    for b_i in 0..=a_i {
                        a[(a_i, b_i)] += zw * zt[(i, b_i)];
                    }
                    for b_i in 0..p {
                        bmat[(a_i, b_i)] += zw * block.x[(i, b_i)];
                    }
                }
                for a_i in 0..p {
                    let xw = block.x[(i, a_i)] * w;
                    t_vec[a_i] += xw * zwork;
                    for b_i in 0..=a_i {
                        s_mat[(a_i, b_i)] += xw * block.x[(i, b_i)];
                    }
                }
            }
            for a_i in 0..r {
                for b_i in (a_i + 1)..r {
                    a[(a_i, b_i)] = a[(b_i, a_i)];
                }
            }
            let chol = Cholesky::new(a).ok_or(GlmmError::Singular)?;
            let ainv_b = chol.solve(&bmat); // r x p
            let ainv_c = chol.solve(&c); // r
            schur += bmat.transpose() * &ainv_b;
            rhs_adj += bmat.transpose() * &ainv_c;
            a_chol_list.push(chol);
            b_list.push(bmat);
            c_list.push(c);
        }
        for a_i in 0..p {
            for b_i in (a_i + 1)..p {
                s_mat[(a_i, b_i)] = s_mat[(b_i, a_i)];
            }
        }

        let m = &s_mat - &schur;
        let chol_m = Cholesky::new(m).ok_or(GlmmError::Singular)?;
        let beta_new = chol_m.solve(&(&t_vec - &rhs_adj));
        let b_new: Vec<DVector<f64>> = blocks
            .iter()
            .enumerate()
            .map(|(j, _)| a_chol_list[j].solve(&(&c_list[j] - &b_list[j] * &beta_new)))
            .collect();

        // Step-halving towards the solved point.
        let mut accepted = false;
        let mut step = 1.0;
        for _ in 0..=10 {
            let cand = PirlsState {
                beta: &state.beta + step * (&beta_new - &state.beta),
                b: state
                    .b
                    .iter()
                    .zip(&b_new)
                    .map(|(old, new)| old + step * (new - old))
                    .collect(),
            };
            let (cand_ll, cand_dev) = joint_ll(blocks, lambda, &cand);
            if cand_dev.is_finite() && cand_dev <= pen_dev + 1e-10 {
                let rel = (pen_dev - cand_dev).abs() / (pen_dev.abs() + 0.1);
                *state = cand;
                ll = cand_ll;
                pen_dev = cand_dev;
                accepted = true;
                if rel < tol {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(GlmmError::InnerDiverged);
        }
        if converged {
            break;
        }
    }
    Ok(PirlsOutcome { ll, converged })
}

/// Laplace-approximate deviance at the joint mode:
/// -2 [ ll - 1/2 sum ||b_j||^2 - 1/2 sum log det(I + Lambda' Z' W Z Lambda) ].
fn laplace_deviance(
    blocks: &[ClusterBlock],
    lambda: &DMatrix<f64>,
    state: &PirlsState,
    ll: f64,
) -> Result<f64, GlmmError> {
    let r = lambda.nrows();
    let mut logdet_sum = 0.0;
    let mut pen = 0.0;
    for (j, block) in blocks.iter().enumerate() {
        let zt = &block.z * lambda;
        let eta = &block.x * &state.beta + &zt * &state.b[j];
        let mut a = DMatrix::<f64>::identity(r, r);
        for i in 0..block.y.len() {
            let mu = expit(eta[i]);
            let w = (mu * (1.0 - mu)).max(1e-10);
            for a_i in 0..r {
                for b_i in 0..=a_i {
                    a[(a_i, b_i)] += w * zt[(i, a_i)] * zt[(i, b_i)];
                }
            }
        }
        for a_i in 0..r {
            for b_i in (a_i + 1)..r {
                a[(a_i, b_i)] = a[(b_i, a_i)];
            }
        }
        let chol = Cholesky::new(a).ok_or(GlmmError::Singular)?;
        let l = chol.l();
        for i in 0..r {
            logdet_sum += 2.0 * l[(i, i)].ln();
        }
        pen += state.b[j].norm_squared();
    }
    Ok(-2.0 * (ll - 0.5 * pen - 0.5 * logdet_sum))
}

/// Simulation-based prediction band on the probability scale.
#[derive(Debug, Clone)]
pub struct SimulatedBand {
    /// Logit-scale grid the band was evaluated on.
    pub grid_logit: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

/// Fitted mixed calibration model.
#[derive(Debug, Clone)]
pub struct GlmmFit {
    pub spec: GlmmSpec,
    pub beta: DVector<f64>,
    /// Covariance of beta conditional on the variance parameters.
    pub cov_beta: DMatrix<f64>,
    /// Random-effect covariance Lambda Lambda'.
    pub sigma_re: DMatrix<f64>,
    /// Lower-triangular factor of `sigma_re`.
    pub lambda: DMatrix<f64>,
    /// Empirical-Bayes conditional modes per cluster, on the u scale.
    pub eb_modes: BTreeMap<String, DVector<f64>>,
    pub laplace_deviance: f64,
    pub converged: bool,
    /// Variance parameters ended on the search floor.
    pub boundary: bool,
    /// Best deviance after each accepted outer improvement, non-increasing.
    pub outer_trace: Vec<f64>,
    pub cluster_labels: Vec<String>,
}

impl GlmmFit {
    fn design(&self) -> DesignSpec {
        DesignSpec::Rcs(self.spec.knots.clone())
    }

    fn random_row(&self, logit_p: f64) -> Vec<f64> {
        match self.spec.variant {
            GlmmVariant::Intercept => vec![1.0],
            GlmmVariant::Slope => self.design().row(logit_p),
        }
    }

    /// Average-cluster curve (random effects at zero) with a Wald
    /// confidence band, on the probability scale: (estimate, lo, hi).
    pub fn predict_average(&self, grid_logit: &[f64], level: f64) -> Vec<(f64, f64, f64)> {
        let design = self.design();
        let z = Normal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0);
        grid_logit
            .iter()
            .map(|&g| {
                let row = DVector::from_column_slice(&design.row(g));
                let eta = self.beta.dot(&row);
                let se = (&self.cov_beta * &row).dot(&row).max(0.0).sqrt();
                (expit(eta), expit(eta - z * se), expit(eta + z * se))
            })
            .collect()
    }

    /// Cluster-specific curve from the fixed effects plus that cluster's
    /// empirical-Bayes mode.
    pub fn predict_cluster(&self, cluster: &str, grid_logit: &[f64]) -> Result<Vec<f64>, GlmmError> {
        let mode = self
            .eb_modes
            .get(cluster)
            .ok_or_else(|| GlmmError::UnknownCluster(cluster.to_string()))?;
        let design = self.design();
        Ok(grid_logit
            .iter()
            .map(|&g| {
                let xrow = DVector::from_column_slice(&design.row(g));
                let zrow = DVector::from_column_slice(&self.random_row(g));
                expit(self.beta.dot(&xrow) + mode.dot(&zrow))
            })
            .collect())
    }

    /// Prediction band for a new cluster: draw fixed effects from
    /// N(beta, cov_beta) and random effects from N(0, sigma_re)
    /// independently, then take pointwise empirical quantiles.
    pub fn prediction_band(
        &self,
        grid_logit: &[f64],
        n_samples: usize,
        seed: u64,
        level: f64,
    ) -> Result<SimulatedBand, GlmmError> {
        if n_samples < 100 {
            return Err(GlmmError::TooFewSamples(n_samples));
        }
        let p = self.beta.len();
        let r = self.lambda.nrows();
        let l_beta = Cholesky::new(self.cov_beta.clone())
            .map(|c| c.l())
            .unwrap_or_else(|| {
                // Covariance may be semi-definite; floor its spectrum.
                let eig = nalgebra::SymmetricEigen::new(self.cov_beta.clone());
                let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                &eig.eigenvectors * DMatrix::from_diagonal(&vals)
            });
        let design = self.design();
        let xrows: Vec<DVector<f64>> = grid_logit
            .iter()
            .map(|&g| DVector::from_column_slice(&design.row(g)))
            .collect();
        let zrows: Vec<DVector<f64>> = grid_logit
            .iter()
            .map(|&g| DVector::from_column_slice(&self.random_row(g)))
            .collect();

        let mut rng = crate::streams::stream_rng(seed, &[0x6c61]);
        let g = grid_logit.len();
        let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(n_samples); g];
        for _ in 0..n_samples {
            let xi = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let beta_star = &self.beta + &l_beta * xi;
            let bs = DVector::from_iterator(r, (0..r).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let u_star = &self.lambda * bs;
            for (gi, (xrow, zrow)) in xrows.iter().zip(&zrows).enumerate() {
                samples[gi].push(beta_star.dot(xrow) + u_star.dot(zrow));
            }
        }
        let alpha = 1.0 - level;
        let mut lo = Vec::with_capacity(g);
        let mut hi = Vec::with_capacity(g);
        for col in samples.iter_mut() {
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            lo.push(expit(crate::numeric::quantile_sorted(col, alpha / 2.0)));
            hi.push(expit(crate::numeric::quantile_sorted(col, 1.0 - alpha / 2.0)));
        }
        Ok(SimulatedBand { grid_logit: grid_logit.to_vec(), lo, hi, n_samples, seed })
    }
}

/// Fit the mixed calibration model on a clustered dataset.
pub fn fit_glmm(
    ds: &ClusteredDataset,
    spec: &GlmmSpec,
    tol: f64,
    max_outer: usize,
) -> Result<GlmmFit, GlmmError> {
    if ds.n_clusters() < 2 {
        return Err(GlmmError::TooFewClusters(ds.n_clusters()));
    }
    let blocks = blocks_from_dataset(ds, spec);
    fit_blocks(blocks, spec.clone(), tol, max_outer)
}

fn fit_blocks(
    blocks: Vec<ClusterBlock>,
    spec: GlmmSpec,
    tol: f64,
    max_outer: usize,
) -> Result<GlmmFit, GlmmError> {
    let p = spec.fixed_dim();
    let r = spec.random_dim();
    let dim = n_params(r);

    let mut start = vec![0.0; dim];
    for v in start.iter_mut().take(r) {
        *v = 0.3_f64.ln();
    }

    let mut warm = PirlsState {
        beta: DVector::zeros(p),
        b: blocks.iter().map(|_| DVector::zeros(r)).collect(),
    };

    let mut eval_state = warm.clone();
    let nm = NelderMead { ftol: 1e-6, max_iter: max_outer, init_step: 0.6 };
    let res = nm.minimize(
        |params: &[f64]| {
            let lambda = lambda_from_params(params, r);
            match pirls(&blocks, &lambda, &mut eval_state, 60, 1e-8) {
                Ok(out) => laplace_deviance(&blocks, &lambda, &eval_state, out.ll)
                    .unwrap_or(f64::INFINITY),
                Err(_) => f64::INFINITY,
            }
        },
        &start,
    );
    if !res.fmin.is_finite() {
        return Err(GlmmError::NoFiniteDeviance);
    }

    // Precise refit at the incumbent variance parameters.
    let lambda = lambda_from_params(&res.x, r);
    let inner = pirls(&blocks, &lambda, &mut warm, 200, tol.min(1e-9))?;
    let dev = laplace_deviance(&blocks, &lambda, &warm, inner.ll)?;

    // Polish per-cluster modes at the final beta, then extract results.
    let mut b_final = warm.b.clone();
    for (j, block) in blocks.iter().enumerate() {
        polish_mode(block, &lambda, &warm.beta, &mut b_final[j]);
    }
    let state = PirlsState { beta: warm.beta.clone(), b: b_final };

    let cov_beta = beta_covariance(&blocks, &lambda, &state)?;

    let mut eb_modes = BTreeMap::new();
    let mut cluster_labels = Vec::with_capacity(blocks.len());
    for (j, block) in blocks.iter().enumerate() {
        eb_modes.insert(block.label.clone(), &lambda * &state.b[j]);
        cluster_labels.push(block.label.clone());
    }

    let boundary = (0..r).any(|i| lambda[(i, i)] < BOUNDARY_TOL);
    Ok(GlmmFit {
        spec,
        beta: state.beta.clone(),
        cov_beta,
        sigma_re: &lambda * lambda.transpose(),
        lambda,
        eb_modes,
        laplace_deviance: dev,
        converged: res.converged && inner.converged,
        boundary,
        outer_trace: res.best_trace,
        cluster_labels,
    })
}

/// Newton polish of one cluster's spherical mode at fixed beta.
fn polish_mode(
    block: &ClusterBlock,
    lambda: &DMatrix<f64>,
    beta: &DVector<f64>,
    b: &mut DVector<f64>,
) {
    let r = lambda.nrows();
    let zt = &block.z * lambda;
    let objective = |bv: &DVector<f64>| -> f64 {
        let eta = &block.x * beta + &zt * bv;
        let mut ll = 0.0;
        for i in 0..block.y.len() {
            ll += bernoulli_ll(block.y[i], expit(eta[i]));
        }
        ll - 0.5 * bv.norm_squared()
    };
    let mut f = objective(b);
    for _ in 0..30 {
        let eta = &block.x * beta + &zt * &*b;
        let mut grad = -b.clone();
        let mut hess = DMatrix::<f64>::identity(r, r);
        for i in 0..block.y.len() {
            let mu = expit(eta[i]);
            let w = (mu * (1.0 - mu)).max(1e-10);
            for a_i in 0..r {
                grad[a_i] += zt[(i, a_i)] * (block.y[i] - mu);
                for b_i in 0..=a_i {
                    hess[(a_i, b_i)] += w * zt[(i, a_i)] * zt[(i, b_i)];
                }
            }
        }
        for a_i in 0..r {
            for b_i in (a_i + 1)..r {
                hess[(a_i, b_i)] = hess[(b_i, a_i)];
            }
        }
        if grad.amax() < 1e-12 {
            break;
        }
        let Some(chol) = Cholesky::new(hess) else { break };
        let delta = chol.solve(&grad);
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..=8 {
            let cand = &*b + step * &delta;
            let fc = objective(&cand);
            if fc.is_finite() && fc >= f - 1e-14 {
                *b = cand;
                f = fc;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
}

/// Conditional covariance of beta: inverse Schur complement of the joint
/// information at the mode.
fn beta_covariance(
    blocks: &[ClusterBlock],
    lambda: &DMatrix<f64>,
    state: &PirlsState,
) -> Result<DMatrix<f64>, GlmmError> {
    let p = state.beta.len();
    let r = lambda.nrows();
    let mut s_mat = DMatrix::<f64>::zeros(p, p);
    let mut schur = DMatrix::<f64>::zeros(p, p);
    for (j, block) in blocks.iter().enumerate() {
        let zt = &block.z * lambda;
        let eta = &block.x * &state.beta + &zt * &state.b[j];
        let mut a = DMatrix::<f64>::identity(r, r);
        let mut bmat = DMatrix::<f64>::zeros(r, p);
        for i in 0..block.y.len() {
            let mu = expit(eta[i]);
            let w = (mu * (1.0 - mu)).max(1e-10);
            for a_i in 0..r {
                let zw = zt[(i, a_i)] * w;
                for b_i in 0..=a_i {
                    a[(a_i, b_i)] += zw * zt[(i, b_i)];
                }
                for b_i in 0..p {
                    bmat[(a_i, b_i)] += zw * block.x[(i, b_i)];
                }
            }
            for a_i in 0..p {
                let xw = block.x[(i, a_i)] * w;
                for b_i in 0..=a_i {
                    s_mat[(a_i, b_i)] += xw * block.x[(i, b_i)];
                }
            }
        }
        for a_i in 0..r {
            for b_i in (a_i + 1)..r {
                a[(a_i, b_i)] = a[(b_i, a_i)];
            }
        }
        let chol = Cholesky::new(a).ok_or(GlmmError::Singular)?;
        let ainv_b = chol.solve(&bmat);
        schur += bmat.transpose() * &ainv_b;
    }
    for a_i in 0..p {
        for b_i in (a_i + 1)..p {
            s_mat[(a_i, b_i)] = s_mat[(b_i, a_i)];
        }
    }
    let info = &s_mat - &schur;
    Ok(Cholesky::new(info).ok_or(GlmmError::Singular)?.inverse())
}

/// Null-model estimate of the random-intercept variance.
#[derive(Debug, Clone)]
pub struct NullInterceptFit {
    pub sigma_u2: f64,
    pub intercept: f64,
    pub converged: bool,
    pub boundary: bool,
    /// Set when only two clusters support the variance estimate.
    pub low_precision: bool,
}

/// Fit an intercept-only logistic model with a random intercept per cluster
/// and return the estimated random-intercept variance. `clusters` holds a
/// cluster index per observation.
pub fn fit_null_intercept_model(
    outcomes: &[f64],
    clusters: &[usize],
) -> Result<NullInterceptFit, GlmmError> {
    assert_eq!(outcomes.len(), clusters.len());
    let n_clusters = clusters.iter().copied().max().map_or(0, |m| m + 1);
    if n_clusters < 2 {
        return Err(GlmmError::TooFewClusters(n_clusters.max(outcomes.is_empty() as usize)));
    }
    let mut per_cluster: Vec<Vec<f64>> = vec![Vec::new(); n_clusters];
    for (&y, &c) in outcomes.iter().zip(clusters) {
        per_cluster[c].push(y);
    }
    let blocks: Vec<ClusterBlock> = per_cluster
        .into_iter()
        .enumerate()
        .filter(|(_, ys)| !ys.is_empty())
        .map(|(j, ys)| {
            let n = ys.len();
            ClusterBlock {
                label: format!("{j}"),
                x: DMatrix::from_element(n, 1, 1.0),
                z: DMatrix::from_element(n, 1, 1.0),
                y: DVector::from_vec(ys),
            }
        })
        .collect();
    if blocks.len() < 2 {
        return Err(GlmmError::TooFewClusters(blocks.len()));
    }
    let low_precision = blocks.len() == 2;

    let r = 1usize;
    let mut warm = PirlsState {
        beta: DVector::zeros(1),
        b: blocks.iter().map(|_| DVector::zeros(r)).collect(),
    };
    let mut eval_state = warm.clone();
    let nm = NelderMead { ftol: 1e-8, max_iter: 200, init_step: 0.6 };
    let res = nm.minimize(
        |params: &[f64]| {
            let lambda = lambda_from_params(params, r);
            match pirls(&blocks, &lambda, &mut eval_state, 60, 1e-9) {
                Ok(out) => laplace_deviance(&blocks, &lambda, &eval_state, out.ll)
                    .unwrap_or(f64::INFINITY),
                Err(_) => f64::INFINITY,
            }
        },
        &[0.3_f64.ln()],
    );
    if !res.fmin.is_finite() {
        return Err(GlmmError::NoFiniteDeviance);
    }
    let lambda = lambda_from_params(&res.x, r);
    let inner = pirls(&blocks, &lambda, &mut warm, 200, 1e-10)?;
    Ok(NullInterceptFit {
        sigma_u2: lambda[(0, 0)] * lambda[(0, 0)],
        intercept: warm.beta[0],
        converged: res.converged && inner.converged,
        boundary: lambda[(0, 0)] < BOUNDARY_TOL,
        low_precision,
    })
}
