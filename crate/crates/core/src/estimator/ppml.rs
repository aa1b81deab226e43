//! Poisson pseudo-maximum-likelihood gravity estimator on outcome levels.
//!
//! Solves the Poisson moment equations
//!
//! ```text
//! Σ_rows [ ỹ - exp(x'θ) ] x = 0,    ỹ_ijt = d_ijt · exp(y_ijt),
//! ```
//!
//! by damped Newton on the pseudo-likelihood. The default design is the
//! standard gravity one: `x = (W, intercept, node dummies)` with one
//! reference node per dummy block (origin and destination blocks on
//! directed panels). A literal variant with dummies only for the first
//! node is available for replication archaeology; it cannot absorb the
//! full pair-level heterogeneity and is not the default.
//!
//! Zeros are data here: every stored (dyad, period) contributes a row,
//! with `ỹ = 0` when unselected.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::panel::DyadicPanel;

use super::BetaFit;

#[derive(Debug, Clone)]
pub struct PpmlOptions {
    pub max_iter: usize,
    /// Sup-norm step tolerance on the parameter update.
    pub tol: f64,
    /// Use the dummy set exactly as printed in the moment condition
    /// (indicators for the first node only, no intercept).
    pub literal_node1_dummies: bool,
}

impl Default for PpmlOptions {
    fn default() -> Self {
        PpmlOptions { max_iter: 50, tol: 1e-10, literal_node1_dummies: false }
    }
}

struct Design {
    p: usize,
    q_w: usize,
    intercept_col: Option<usize>,
    /// Flattened (column, value) entries per row.
    entries: Vec<(u32, f64)>,
    offsets: Vec<usize>,
    y_tilde: Vec<f64>,
}

impl Design {
    fn row(&self, r: usize) -> &[(u32, f64)] {
        &self.entries[self.offsets[r]..self.offsets[r + 1]]
    }

    fn rows(&self) -> usize {
        self.y_tilde.len()
    }
}

fn build_design(panel: &DyadicPanel, literal: bool) -> Design {
    let q_w = panel.q_w();
    let n = panel.node_count();
    let periods = panel.period_count();
    let p = if literal {
        q_w + 2
    } else if panel.is_directed() {
        q_w + 1 + 2 * (n - 1)
    } else {
        q_w + 1 + (n - 1)
    };
    let mut entries = Vec::new();
    let mut offsets = vec![0usize];
    let mut y_tilde = Vec::new();
    for (idx, &(i, j)) in panel.pairs().iter().enumerate() {
        for t in 0..periods {
            let w = panel.w(idx, t);
            for (col, &val) in w.iter().enumerate() {
                entries.push((col as u32, val));
            }
            if literal {
                if i == 0 {
                    entries.push((q_w as u32, 1.0));
                }
                if j == 0 {
                    entries.push((q_w as u32 + 1, 1.0));
                }
            } else {
                entries.push((q_w as u32, 1.0)); // intercept
                if panel.is_directed() {
                    if i > 0 {
                        entries.push(((q_w + i as usize) as u32, 1.0));
                    }
                    if j > 0 {
                        entries.push(((q_w + (n - 1) + j as usize) as u32, 1.0));
                    }
                } else {
                    if i > 0 {
                        entries.push(((q_w + i as usize) as u32, 1.0));
                    }
                    if j > 0 {
                        entries.push(((q_w + j as usize) as u32, 1.0));
                    }
                }
            }
            offsets.push(entries.len());
            y_tilde.push(if panel.d(idx, t) { panel.y(idx, t).unwrap().exp() } else { 0.0 });
        }
    }
    Design {
        p,
        q_w,
        intercept_col: (!literal).then_some(q_w),
        entries,
        offsets,
        y_tilde,
    }
}

fn deviance(design: &Design, theta: &DVector<f64>) -> f64 {
    let mut dev = 0.0;
    for r in 0..design.rows() {
        let eta: f64 = design.row(r).iter().map(|&(c, v)| v * theta[c as usize]).sum();
        let lambda = eta.exp();
        if !lambda.is_finite() {
            return f64::INFINITY;
        }
        let y = design.y_tilde[r];
        dev += if y > 0.0 { 2.0 * (y * (y.ln() - eta) - (y - lambda)) } else { 2.0 * lambda };
    }
    dev
}

/// PPML estimator; returns the `β` block of the Poisson fit.
pub fn ppml_beta(panel: &DyadicPanel, opts: &PpmlOptions) -> Result<BetaFit> {
    let design = build_design(panel, opts.literal_node1_dummies);
    ppml_solve(design, opts)
}

fn ppml_solve(mut design: Design, opts: &PpmlOptions) -> Result<BetaFit> {
    prune_dead_dummies(&mut design);
    let total_y: f64 = design.y_tilde.iter().sum();
    if total_y <= 0.0 {
        return Err(Error::DegenerateOutcome(
            "all level outcomes are zero; the Poisson moment equations have no solution"
                .to_string(),
        ));
    }
    let p = design.p;
    let mut theta = DVector::zeros(p);
    if let Some(c) = design.intercept_col {
        theta[c] = (total_y / design.rows() as f64).ln();
    }
    let mut dev_prev = deviance(&design, &theta);
    let mut converged = false;
    let mut hessian = DMatrix::zeros(p, p);
    for _iter in 0..opts.max_iter {
        // score g = Σ (ỹ - λ) x  and curvature H = Σ λ x x'
        let mut score = DVector::zeros(p);
        hessian.fill(0.0);
        for r in 0..design.rows() {
            let row = design.row(r);
            let eta: f64 = row.iter().map(|&(c, v)| v * theta[c as usize]).sum();
            let lambda = eta.exp();
            let resid = design.y_tilde[r] - lambda;
            for &(c1, v1) in row {
                score[c1 as usize] += resid * v1;
                for &(c2, v2) in row {
                    if c2 >= c1 {
                        hessian[(c1 as usize, c2 as usize)] += lambda * v1 * v2;
                    }
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                hessian[(a, b)] = hessian[(b, a)];
            }
        }
        let chol = hessian.clone().cholesky().ok_or_else(|| {
            Error::RankDeficient("collinear columns in the PPML design".to_string())
        })?;
        let step = chol.solve(&score);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &theta + &step * scale;
            let dev = deviance(&design, &candidate);
            if dev.is_finite() && dev <= dev_prev * (1.0 + 1e-12) + 1e-12 {
                theta = candidate;
                dev_prev = dev;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // no descent left: numerically at the optimum
            converged = true;
            break;
        }
        if (step.amax() * scale) <= opts.tol * (1.0 + theta.amax()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence { what: "PPML Newton iteration", max_iter: opts.max_iter });
    }
    let eig = hessian.symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    let condition_number = if min > 0.0 { max / min } else { f64::INFINITY };
    let beta_hat = DVector::from_iterator(design.q_w, (0..design.q_w).map(|a| theta[a]));
    Ok(BetaFit { beta_hat, h_used: None, moments: None, condition_number })
}

/// Remove dummy levels whose pseudo-ML coefficient diverges to -∞: a 0/1
/// column with no positive outcome among its incident rows fits those rows
/// exactly in the `λ → 0` limit, so the level and its rows drop out of the
/// moment conditions. Columns with no incident rows at all (e.g. the
/// never-firing `1{j=1}` indicator of the literal design on an undirected
/// panel) are removed by the same rule. Iterates because dropping rows can
/// empty further levels.
fn prune_dead_dummies(design: &mut Design) {
    let rows = design.rows();
    let first_dummy = design.q_w + usize::from(design.intercept_col.is_some());
    let mut row_alive = vec![true; rows];
    let mut col_alive = vec![true; design.p];
    loop {
        let mut y_sum = vec![0.0f64; design.p];
        for r in 0..rows {
            if !row_alive[r] {
                continue;
            }
            for &(c, v) in design.row(r) {
                if v != 0.0 {
                    y_sum[c as usize] += design.y_tilde[r];
                }
            }
        }
        let mut changed = false;
        for c in first_dummy..design.p {
            if col_alive[c] && y_sum[c] <= 0.0 {
                col_alive[c] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for r in 0..rows {
            if row_alive[r]
                && design.row(r).iter().any(|&(c, v)| v != 0.0 && !col_alive[c as usize])
            {
                row_alive[r] = false;
            }
        }
    }
    if col_alive.iter().all(|&a| a) {
        return;
    }
    let mut remap = vec![u32::MAX; design.p];
    let mut next = 0u32;
    for (col, &a) in col_alive.iter().enumerate() {
        if a {
            remap[col] = next;
            next += 1;
        }
    }
    let mut entries = Vec::with_capacity(design.entries.len());
    let mut offsets = Vec::with_capacity(rows + 1);
    let mut y_tilde = Vec::with_capacity(rows);
    offsets.push(0);
    for r in 0..rows {
        if !row_alive[r] {
            continue;
        }
        for &(col, val) in design.row(r) {
            entries.push((remap[col as usize], val));
        }
        offsets.push(entries.len());
        y_tilde.push(design.y_tilde[r]);
    }
    design.entries = entries;
    design.offsets = offsets;
    design.y_tilde = y_tilde;
    design.p = next as usize;
    design.intercept_col = design.intercept_col.map(|c| remap[c] as usize);
}
