//! Two-step kernel-weighted estimation and degeneracy-adaptive inference
//! for panel dyadic regression with sample selection.
//!
//! Dyadic outcomes (trade, migration, risk sharing) carry many zeros
//! produced by the underlying link-formation process. When the shocks that
//! form links also move the outcome, discarding the zeros biases the usual
//! fixed-effect and PPML estimators. This crate implements a two-step
//! remedy on time-differenced data: a conditional-logit first step for the
//! selection index, then a second step that reweights doubly-selected
//! dyads by how little their selection index moved, `K_h(ΔR'γ̂)`. On top
//! of the point estimate it provides a variance estimator that stays
//! consistent whether or not the node-level projection of the score
//! degenerates, a plug-in bandwidth, and bias-corrected confidence
//! intervals.
//!
//! Modules follow the pipeline:
//!
//! - [`panel`] — dyadic panel data, CSV/JSON ingestion, differencing;
//! - [`kernel`] — compact kernels of verified order (generic over the
//!   scalar type; [`Kernel`] is the `f64` alias used by the estimators);
//! - [`first_step`] — conditional logit for the selection equation;
//! - [`estimator`] — kernel-weighted, fixed-effect, and PPML estimators;
//! - [`inference`] — variance parts, bandwidth selection, bias-corrected
//!   intervals, and the end-to-end procedure;
//! - [`monte_carlo`] — the simulation design and replication harness.

pub mod error;
pub mod estimator;
pub mod first_step;
pub mod inference;
pub mod kernel;
pub mod monte_carlo;
pub mod panel;
pub mod quadrature;
pub(crate) mod serde_mat;

pub use error::{Error, Result};
pub use estimator::{
    fixed_effect_beta, kernel_weighted_beta, ppml_beta, weighted_beta, weighted_moments, BetaFit,
    PpmlOptions, WeightedMoments, Weighting,
};
pub use first_step::{
    conditional_logit_objective, fit_conditional_logit, switchers, FirstStepFit, FirstStepOptions,
    SwitcherSample,
};
pub use inference::{
    bias_corrected_ci, bias_estimate, flat_variance, plugin_bandwidth, quadratic_form, residuals,
    run_inference_procedure, sigma_wnu1, sigma_wnu2, variance_hat, ConfidenceInterval,
    InferenceConfig, InferenceFit, PluginBandwidth, PluginConfig, SigmaMode, VarianceParts,
};
pub use kernel::{KernelOrderReport, KernelSpec, ScaledKernel};
pub use monte_carlo::{
    grid, run_cell, run_monte_carlo, simulate_panel, simulate_panel_with_latents, summarize,
    true_gamma, CoverageSummary, DgpConfig, DgpLatents, EstimatorSummary, McCell, McConfig,
    McResult, RenderedTable, RepRecord, TableSet, TRUE_BETA,
};
pub use panel::{
    compose_pair_regressors, difference, load_panel, load_panel_path, CsvSchema, DifferencedSample,
    DyadRegressors, DyadicPanel, NodeTable, PairRule, PanelBuilder,
};

/// The concrete scalar type used throughout the estimation pipeline.
pub type Scalar = f64;

/// The default `f64` kernel type.
pub type Kernel = KernelSpec<Scalar>;
