//! Second-step estimators for the differenced dyadic sample.
//!
//! The kernel-weighted estimator solves the weighted normal equations
//!
//! ```text
//! β̂ = Ŝ_WW⁻¹ Ŝ_WY,
//! Ŝ_WW = (1/N) Σ_rows ΔW ΔW' K_h(ΔR'γ̂),
//! Ŝ_WY = (1/N) Σ_rows ΔW ΔY  K_h(ΔR'γ̂),
//! ```
//!
//! where rows are doubly-selected dyad/period pairs and `N` is `n(n-1)/2`
//! (undirected) or `n(n-1)` (directed). The `1/N` factor cancels in β̂ but
//! is kept because the variance estimator needs these moments on the `1/N`
//! scale. With flat weights (`K_h ≡ 1`) the same code path is exactly the
//! unweighted fixed-effect estimator on doubly-selected dyads.

mod ppml;

pub use ppml::{ppml_beta, PpmlOptions};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{KernelSpec, ScaledKernel};
use crate::panel::DifferencedSample;

/// Condition-number guard for the weighted cross-product solve.
pub const CONDITION_GUARD: f64 = 1e12;

/// Row weighting scheme shared by the estimator and the variance machinery.
#[derive(Debug, Clone)]
pub enum Weighting<'a> {
    /// `K_h(ΔR'γ̂)` with a compact kernel.
    Kernel { kernel: &'a KernelSpec<f64>, gamma: &'a DVector<f64>, h: f64 },
    /// Constant weight 1 (fixed-effect mode). The bandwidth factor used by
    /// the variance combination is pinned to 1 so every power of `h`
    /// cancels and the flat-kernel variance is bandwidth-free.
    Flat,
}

impl<'a> Weighting<'a> {
    /// The `h` entering `h/N` and `1/(Nh)` factors of the variance parts.
    pub fn bandwidth_factor(&self) -> f64 {
        match self {
            Weighting::Kernel { h, .. } => *h,
            Weighting::Flat => 1.0,
        }
    }

    /// Per-row weights and the count of rows inside the kernel support
    /// (`|ΔR'γ̂| ≤ κ·h`; every row for flat weights).
    pub fn row_weights(&self, sample: &DifferencedSample) -> Result<(Vec<f64>, usize)> {
        match self {
            Weighting::Flat => Ok((vec![1.0; sample.len()], sample.len())),
            Weighting::Kernel { kernel, gamma, h } => {
                if gamma.len() != sample.q_r() {
                    return Err(Error::Config(format!(
                        "gamma has length {}, sample has q_r = {}",
                        gamma.len(),
                        sample.q_r()
                    )));
                }
                let scaled = ScaledKernel::new(kernel, *h)?;
                let mut weights = Vec::with_capacity(sample.len());
                let mut in_support = 0usize;
                for row in 0..sample.len() {
                    let v = sample.selection_index(row, gamma.as_slice());
                    if scaled.in_support(v) {
                        in_support += 1;
                    }
                    weights.push(scaled.weight(v));
                }
                Ok((weights, in_support))
            }
        }
    }
}

/// Weighted cross moments of the differenced sample.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeightedMoments {
    /// `Ŝ_WW`, symmetric positive semidefinite.
    #[serde(with = "crate::serde_mat::dmatrix")]
    pub s_ww: DMatrix<f64>,
    /// `Ŝ_WY`.
    #[serde(with = "crate::serde_mat::dvector")]
    pub s_wy: DVector<f64>,
    pub effective_weight_sum: f64,
    pub rows_in_support: usize,
    /// The `N` used in the `1/N` scaling.
    pub n_pairs: usize,
}

/// Accumulate `Ŝ_WW` and `Ŝ_WY` for a given weighting.
pub fn weighted_moments(
    sample: &DifferencedSample,
    weighting: &Weighting<'_>,
) -> Result<WeightedMoments> {
    let q = sample.q_w();
    let (weights, rows_in_support) = weighting.row_weights(sample)?;
    let mut s_ww = DMatrix::zeros(q, q);
    let mut s_wy = DVector::zeros(q);
    let mut weight_sum = 0.0;
    for row in 0..sample.len() {
        let wgt = weights[row];
        if wgt == 0.0 {
            continue;
        }
        weight_sum += wgt;
        let dw = sample.dw_row(row);
        let dy = sample.dy(row);
        for a in 0..q {
            s_wy[a] += wgt * dw[a] * dy;
            for b in a..q {
                s_ww[(a, b)] += wgt * dw[a] * dw[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            s_ww[(a, b)] = s_ww[(b, a)];
        }
    }
    let n = sample.n_pairs() as f64;
    if n > 0.0 {
        s_ww /= n;
        s_wy /= n;
    }
    Ok(WeightedMoments {
        s_ww,
        s_wy,
        effective_weight_sum: weight_sum,
        rows_in_support,
        n_pairs: sample.n_pairs(),
    })
}

/// A fitted second-step coefficient vector with solve diagnostics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BetaFit {
    #[serde(with = "crate::serde_mat::dvector")]
    pub beta_hat: DVector<f64>,
    /// Bandwidth used; `None` for estimators without one (flat, PPML).
    pub h_used: Option<f64>,
    /// Weighted moments behind the solve; `None` for PPML.
    pub moments: Option<WeightedMoments>,
    pub condition_number: f64,
}

/// Solve a symmetric positive-definite system with a condition guard.
/// Returns the solution and the condition number of `m`.
pub(crate) fn solve_spd(
    m: &DMatrix<f64>,
    rhs: &DVector<f64>,
    rows_in_support: usize,
) -> Result<(DVector<f64>, f64)> {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if !(min > 0.0) || !max.is_finite() {
        return Err(Error::SingularMoments { cond: f64::INFINITY, rows_in_support });
    }
    let cond = max / min;
    if cond > CONDITION_GUARD {
        return Err(Error::SingularMoments { cond, rows_in_support });
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or(Error::SingularMoments { cond, rows_in_support })?;
    Ok((chol.solve(rhs), cond))
}

/// Fit β̂ for an arbitrary weighting.
pub fn weighted_beta(sample: &DifferencedSample, weighting: &Weighting<'_>) -> Result<BetaFit> {
    let moments = weighted_moments(sample, weighting)?;
    if moments.rows_in_support == 0 {
        return Err(Error::SingularMoments { cond: f64::INFINITY, rows_in_support: 0 });
    }
    let (beta_hat, condition_number) =
        solve_spd(&moments.s_ww, &moments.s_wy, moments.rows_in_support)?;
    let h_used = match weighting {
        Weighting::Kernel { h, .. } => Some(*h),
        Weighting::Flat => None,
    };
    Ok(BetaFit { beta_hat, h_used, moments: Some(moments), condition_number })
}

/// Kernel-weighted estimator: weight `K_h(ΔR'γ̂)` localizes to dyads whose
/// selection index barely moves across periods.
pub fn kernel_weighted_beta(
    sample: &DifferencedSample,
    gamma_hat: &DVector<f64>,
    kernel: &KernelSpec<f64>,
    h: f64,
) -> Result<BetaFit> {
    weighted_beta(sample, &Weighting::Kernel { kernel, gamma: gamma_hat, h })
}

/// Unweighted differenced least squares on doubly-selected dyads.
pub fn fixed_effect_beta(sample: &DifferencedSample) -> Result<BetaFit> {
    weighted_beta(sample, &Weighting::Flat)
}
