//! Flexible calibration curves for clustered binary-outcome predictions.
//!
//! When a risk model is validated on data grouped in clusters (centers,
//! studies, cohorts), observations within a cluster are correlated and the
//! usual pooled calibration curve understates both uncertainty and
//! between-cluster heterogeneity. This crate estimates calibration curves
//! that account for clustering, each with a confidence band for the curve in
//! the cluster with the average effect and a prediction band for a
//! hypothetical new cluster:
//!
//! * **CG-C** — clustered group calibration: per-cluster quantile (or
//!   fixed-interval) groups pooled with a bivariate random-effects
//!   meta-analysis ([`calib::cgc`]).
//! * **2MA-C** — two-stage meta-analysis calibration: a flexible curve
//!   (restricted cubic splines or LOESS) per cluster, pooled pointwise over a
//!   risk grid with univariate random-effects meta-analysis
//!   ([`calib::two_stage_ma`]).
//! * **MIX-C** — one-stage logistic mixed model with spline fixed effects and
//!   cluster random effects fitted by Laplace approximation, giving shrunken
//!   cluster-specific curves as well ([`calib::mixc`]).
//!
//! Cluster-ignorant baselines ([`calib::standard_flexible`],
//! [`calib::linear_logistic_calibration`]), the intraclass correlation
//! ([`calib::icc`]), mean squared calibration error and prediction-interval
//! coverage utilities are included, together with a reproducible simulation
//! harness ([`sim`]) that measures all methods against known truth curves.
//!
//! The `examples/` directory has one runnable program per capability; the
//! `clustercal` binary wraps the same entry points as `calibrate`,
//! `simulate`, and `icc` subcommands.

pub mod calib;
pub mod cli;
pub mod dataio;
pub mod glmm;
pub mod logistic;
pub mod meta;
pub mod sim;
pub mod smoothers;

pub(crate) mod numeric;
pub(crate) mod optim;
pub(crate) mod streams;

pub use logistic::{DesignSpec, LogisticFit, PredictionWithSe};
pub use meta::{BivariateMetaResult, BivariatePoint, EffectEstimate, MetaResult};
pub use smoothers::{KnotVector, LoessModel, RcsBasis};
