//! Cluster-robust inference for instrumental variable models with weak or
//! many instruments.
//!
//! The crate centers on jackknife-style Anderson-Rubin and score statistics
//! whose weighting kernels have exactly zero diagonal cluster blocks, which
//! removes own-cluster terms and keeps tests valid when instruments are
//! weak, numerous, or both, under cluster dependence of unknown form.
//!
//! - [`design`]: clustered data containers, CSV loading, validation, and
//!   control partialling.
//! - [`blocks`]: cluster block bookkeeping and kernel constructions.
//! - [`jackknife`]: AR/score statistics, plain and cross-fit variance
//!   estimators, analytic variance oracles, and the conditional linear
//!   combination bundle.
//! - [`miar`]: the many-instrument AR statistic built from cluster-level
//!   moments.
//! - [`inference`]: hypothesis tests, critical values, and test inversion
//!   into confidence sets.
//! - [`diagnostics`]: first-stage strength diagnostics.
//! - [`montecarlo`]: reproducible simulation designs and experiment
//!   runners.

pub mod blocks;
pub mod design;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod inference;
pub mod jackknife;
pub mod linalg;
pub mod miar;
pub mod montecarlo;

pub use blocks::{block_partition, ClusterBlocks};
pub use design::{load_csv, partial_out_controls, validate, ClusteredDesign, CsvSchema, ValidationReport};
pub use diagnostics::{first_stage_f, FFlavor, FirstStageReport};
pub use error::{Error, Result};
pub use inference::{
    cluster_ar_test, clj_score_test, clj_test, clmi_test, critical_value, invert_confidence_set,
    ConfidenceSet, GridSpec, InversionOptions, Method, TestOutcome,
};
pub use jackknife::{
    analytic_variances, ar_statistic, clc_estimators, joint_standardized, kernel_matrix,
    residuals, score_statistic, variance_bundle, AnalyticVarianceInputs, AnalyticVariances,
    ClcEstimators, KernelChoice, VarianceBundle, VarianceEstimator,
};
pub use miar::{cluster_moment_projection, clmi_statistic, ClusterMomentProjection};
pub use montecarlo::{
    power_experiment, simulate_dataset, size_experiment, McConfig, McMethod, RejectionTable,
};
