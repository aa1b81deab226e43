//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (run with `cargo test --test acceptance -- --nocapture` to see
//! them). Tolerances and reference values are pinned here and nowhere
//! else.

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dyadic_selection::panel::DifferencedSample;
use dyadic_selection::*;

fn check(criterion: &str, pass: bool, detail: &str) {
    println!("criterion {criterion}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

// ---------------------------------------------------------------------
// Criterion 1: kernel correctness.
// ---------------------------------------------------------------------

#[test]
fn criterion_1_kernel_correctness() {
    let start = Instant::now();
    let kernel = Kernel::biweight();
    let report = kernel.verify_order(1e-8);
    let mut stable = true;
    let mut detail = format!("order check pass = {}", report.pass);
    for panels in [128usize, 256, 512] {
        let coarse = kernel.square_integral_on_grid(panels);
        let fine = kernel.square_integral_on_grid(2 * panels);
        stable &= (coarse - fine).abs() < 1e-8;
    }
    detail.push_str(&format!(
        ", ∫K² = {:.12} stable under refinement = {stable}",
        kernel.square_integral()
    ));
    let elapsed = start.elapsed();
    let in_time = elapsed.as_secs_f64() < 1.0;
    detail.push_str(&format!(", runtime {:.2?}", elapsed));
    check("1 (kernel correctness)", report.pass && stable && in_time, &detail);
}

// ---------------------------------------------------------------------
// Criterion 2: variance-component oracle equivalence.
// ---------------------------------------------------------------------

fn random_instance(rng: &mut ChaCha8Rng) -> (DifferencedSample, DVector<f64>, DVector<f64>, f64) {
    let n = rng.gen_range(3..=25usize);
    let q_w = rng.gen_range(1..=3usize);
    let mut rows = Vec::new();
    for i in 0..n as u32 {
        for j in (i + 1)..n as u32 {
            if rng.gen_bool(0.75) {
                let dw: Vec<f64> = (0..q_w).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let dr = vec![rng.gen_range(-2.0..2.0)];
                rows.push((i, j, 0u32, 1u32, rng.gen_range(-2.0..2.0), dw, dr));
            }
        }
    }
    let sample =
        DifferencedSample::from_raw_rows(n, n * (n - 1) / 2, false, q_w, 1, &rows).unwrap();
    let beta = DVector::from_iterator(q_w, (0..q_w).map(|_| rng.gen_range(-1.0..1.0)));
    let gamma = DVector::from_vec(vec![rng.gen_range(0.5..1.5)]);
    let h = rng.gen_range(0.3..2.0);
    (sample, beta, gamma, h)
}

#[test]
fn criterion_2_variance_oracles() {
    let start = Instant::now();
    let kernel = Kernel::biweight();
    let mut rng = ChaCha8Rng::seed_from_u64(220529);
    let mut max_gap1 = 0.0f64;
    let mut max_gap2 = 0.0f64;
    for _ in 0..50 {
        let (sample, beta, gamma, h) = random_instance(&mut rng);
        let weighting = Weighting::Kernel { kernel: &kernel, gamma: &gamma, h };
        let fast = sigma_wnu1(&sample, &weighting, &beta, SigmaMode::Fast).unwrap();
        let brute = sigma_wnu1(&sample, &weighting, &beta, SigmaMode::BruteForce).unwrap();
        max_gap1 = max_gap1.max((&fast - &brute).abs().max());

        // naive-loop oracle for the dyad-level component
        let s2 = sigma_wnu2(&sample, &weighting, &beta).unwrap();
        let q = sample.q_w();
        let mut oracle = DMatrix::<f64>::zeros(q, q);
        for row in 0..sample.len() {
            let idx = sample.selection_index(row, gamma.as_slice());
            let kh = kernel.scaled(h, idx).unwrap();
            let dw = sample.dw_row(row);
            let eps = sample.dy(row)
                - dw.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>();
            for a in 0..q {
                for b in 0..q {
                    oracle[(a, b)] += kh * kh * dw[a] * dw[b] * eps * eps;
                }
            }
        }
        oracle *= h / sample.n_pairs() as f64;
        max_gap2 = max_gap2.max((&s2 - &oracle).abs().max());
    }
    let elapsed = start.elapsed();
    let pass = max_gap1 <= 1e-10 && max_gap2 <= 1e-12 && elapsed.as_secs_f64() < 30.0;
    check(
        "2 (oracle equivalence)",
        pass,
        &format!(
            "max |fast - brute| = {max_gap1:.2e} (tol 1e-10), max |Σ̂₂ - naive| = {max_gap2:.2e} (tol 1e-12), runtime {elapsed:.2?}"
        ),
    );
}

// ---------------------------------------------------------------------
// Criterion 3: first-step recovery and gradient correctness.
// ---------------------------------------------------------------------

#[test]
fn criterion_3_first_step_recovery() {
    let start = Instant::now();
    let truth = true_gamma();
    let mut norms: Vec<f64> = Vec::new();
    for seed in 0..50u64 {
        let cfg = DgpConfig { n: 200, theta: -2.0, sigma: 1.0, seed: 320000 + seed };
        let panel = simulate_panel(&cfg).unwrap();
        let fit = fit_conditional_logit(&panel, &FirstStepOptions::default()).unwrap();
        norms.push((&fit.gamma_hat - &truth).norm());
    }
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = norms[norms.len() / 2];

    // gradient versus central finite differences on a simulated switcher set
    let panel = simulate_panel(&DgpConfig { n: 60, theta: -2.0, sigma: 1.0, seed: 11 }).unwrap();
    let sw = switchers(&panel);
    let mut max_fd_gap = 0.0f64;
    for point in [[0.0, 0.0], [0.8, 1.1], [-0.4, 0.6]] {
        let g = DVector::from_vec(point.to_vec());
        let eval = conditional_logit_objective(&g, &sw).unwrap();
        let step = 1e-5;
        for a in 0..2 {
            let mut gp = g.clone();
            let mut gm = g.clone();
            gp[a] += step;
            gm[a] -= step;
            let vp = conditional_logit_objective(&gp, &sw).unwrap().value;
            let vm = conditional_logit_objective(&gm, &sw).unwrap().value;
            let fd = (vp - vm) / (2.0 * step);
            max_fd_gap = max_fd_gap.max((eval.gradient[a] - fd).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = median < 0.15 && max_fd_gap <= 1e-6 && elapsed.as_secs_f64() < 120.0;
    check(
        "3 (first-step recovery)",
        pass,
        &format!(
            "median ‖γ̂-(1,1)‖ = {median:.4} (< 0.15), max gradient FD gap = {max_fd_gap:.2e} (tol 1e-6), runtime {elapsed:.2?}"
        ),
    );
}

// ---------------------------------------------------------------------
// Shared desk-scale replication cells for criteria 4 and 5.
// ---------------------------------------------------------------------

struct SharedCells {
    results: Vec<McResult>,
}

impl SharedCells {
    fn get(&self, theta: f64, sigma: f64) -> &McResult {
        self.results
            .iter()
            .find(|r| r.cell.theta == theta && r.cell.sigma == sigma)
            .expect("cell present")
    }
}

fn shared_cells() -> &'static SharedCells {
    static CELLS: OnceLock<SharedCells> = OnceLock::new();
    CELLS.get_or_init(|| {
        let cfg = McConfig { reps: 500, keep_records: false, ..Default::default() };
        let cells = [
            McCell { n: 100, theta: -0.3, sigma: 1.0 },
            McCell { n: 100, theta: -2.0, sigma: 1.0 },
            McCell { n: 100, theta: -3.0, sigma: 1.0 },
            McCell { n: 100, theta: -2.0, sigma: 0.0 },
        ];
        SharedCells { results: run_monte_carlo(&cells, &cfg) }
    })
}

#[test]
fn criterion_4_table1_replication() {
    let start = Instant::now();
    let cells = shared_cells();
    // (θ, kernel bias, FE bias, kernel rmse, FE rmse) at σ = 1, n = 100
    let targets = [
        (-0.3, 0.038, 0.136, 0.087, 0.148),
        (-2.0, 0.099, 0.349, 0.142, 0.359),
        (-3.0, 0.117, 0.359, 0.184, 0.378),
    ];
    let mut pass = true;
    let mut detail = String::new();
    for (theta, bias_n, bias_fe, rmse_n, rmse_fe) in targets {
        let r = cells.get(theta, 1.0);
        let sn = r.beta_n.as_ref().expect("kernel estimates");
        let sf = r.beta_fe.as_ref().expect("FE estimates");
        let ok = within(sn.mean_bias, bias_n, 0.02)
            && within(sf.mean_bias, bias_fe, 0.02)
            && within(sn.rmse, rmse_n, 0.02)
            && within(sf.rmse, rmse_fe, 0.02);
        pass &= ok;
        detail.push_str(&format!(
            "[θ={theta}: bias_n {:.3} (ref {bias_n}), bias_fe {:.3} (ref {bias_fe}), rmse_n {:.3} (ref {rmse_n}), rmse_fe {:.3} (ref {rmse_fe})] ",
            sn.mean_bias, sf.mean_bias, sn.rmse, sf.rmse
        ));
    }
    detail.push_str(&format!("±0.02, runtime {:.2?}", start.elapsed()));
    check("4 (Table 1 replication)", pass, &detail);
}

#[test]
fn criterion_5_coverage_replication() {
    let start = Instant::now();
    let cells = shared_cells();

    let eval = |r: &McResult| -> (f64, f64) {
        (
            r.ci_bc.as_ref().expect("bc coverage").rate,
            r.ci_conv.as_ref().expect("conv coverage").rate,
        )
    };
    let (bc_deg, conv_deg) = eval(cells.get(-2.0, 0.0));
    let (bc_nondeg, _) = eval(cells.get(-0.3, 1.0));

    let mut pass_bc_deg = within(bc_deg, 0.958, 0.03);
    let mut pass_conv_deg = within(conv_deg, 0.482, 0.05);
    let mut pass_bc_nondeg = within(bc_nondeg, 0.978, 0.03);
    let mut escalated = String::new();

    // The criterion escalates to 2000 replications with a ±0.02 band
    // before being judged.
    if !(pass_bc_deg && pass_conv_deg && pass_bc_nondeg) {
        escalated = " [escalated to 2000 reps]".to_string();
        let cfg = McConfig { reps: 2000, keep_records: false, ..Default::default() };
        if !(pass_bc_deg && pass_conv_deg) {
            let r = run_cell(&McCell { n: 100, theta: -2.0, sigma: 0.0 }, &cfg);
            let (bc, conv) = eval(&r);
            pass_bc_deg = within(bc, 0.958, 0.02);
            pass_conv_deg = within(conv, 0.482, 0.02);
        }
        if !pass_bc_nondeg {
            let r = run_cell(&McCell { n: 100, theta: -0.3, sigma: 1.0 }, &cfg);
            pass_bc_nondeg = within(eval(&r).0, 0.978, 0.02);
        }
    }
    let pass = pass_bc_deg && pass_conv_deg && pass_bc_nondeg;
    check(
        "5 (coverage replication)",
        pass,
        &format!(
            "σ=0,θ=-2: bc {bc_deg:.3} (ref 0.958±0.03), conv {conv_deg:.3} (ref 0.482±0.05); σ=1,θ=-0.3: bc {bc_nondeg:.3} (ref 0.978±0.03){escalated}, runtime {:.2?}",
            start.elapsed()
        ),
    );
}

/// Bias ordering across estimators in the selected-on-unobservables
/// designs: the kernel-weighted estimator beats fixed effects, which
/// beats PPML.
#[test]
fn estimator_bias_ordering() {
    let cells = shared_cells();
    for theta in [-2.0, -3.0] {
        let r = cells.get(theta, 1.0);
        let bias_n = r.beta_n.as_ref().unwrap().mean_bias.abs();
        let bias_fe = r.beta_fe.as_ref().unwrap().mean_bias.abs();
        let bias_ppml = r.beta_ppml.as_ref().unwrap().mean_bias.abs();
        assert!(
            bias_n < bias_fe && bias_fe < bias_ppml,
            "ordering violated at θ={theta}: {bias_n:.3} / {bias_fe:.3} / {bias_ppml:.3}"
        );
    }
}

/// RMSE of the kernel-weighted estimator falls with the node count.
#[test]
fn rmse_decreases_in_n() {
    let cfg = McConfig { reps: 150, keep_records: false, include_ppml: false, ..Default::default() };
    let small = run_cell(&McCell { n: 50, theta: -2.0, sigma: 1.0 }, &cfg);
    let large = run_cell(&McCell { n: 100, theta: -2.0, sigma: 1.0 }, &cfg);
    let rmse_small = small.beta_n.as_ref().unwrap().rmse;
    let rmse_large = large.beta_n.as_ref().unwrap().rmse;
    assert!(rmse_large < rmse_small, "rmse grew with n: {rmse_small:.3} -> {rmse_large:.3}");
}

/// Poisson comparator point estimates against the reference values
/// (not a numbered criterion; the gate covers the kernel and FE columns).
#[test]
fn ppml_reference_values() {
    let cells = shared_cells();
    let targets = [(-0.3, 0.195), (-2.0, 0.438), (-3.0, 0.542)];
    for (theta, bias) in targets {
        let r = cells.get(theta, 1.0);
        let s = r.beta_ppml.as_ref().expect("ppml estimates");
        assert!(
            within(s.mean_bias, bias, 0.03),
            "PPML mean bias {:.3} at θ={theta} differs from reference {bias}",
            s.mean_bias
        );
    }
}

// ---------------------------------------------------------------------
// Criterion 6: zero-fraction calibration.
// ---------------------------------------------------------------------

#[test]
fn criterion_6_zero_fraction() {
    let start = Instant::now();
    let targets = [(-0.3, 0.20), (-2.0, 0.75), (-3.0, 0.90)];
    let mut pass = true;
    let mut detail = String::new();
    let mut fractions = Vec::new();
    for (theta, target) in targets {
        let mut total = 0.0;
        for seed in 0..50u64 {
            let cfg = DgpConfig { n: 200, theta, sigma: 1.0, seed: 660000 + seed };
            let panel = simulate_panel(&cfg).unwrap();
            let doubly = (0..panel.stored_pair_count())
                .filter(|&i| panel.d(i, 0) && panel.d(i, 1))
                .count();
            total += 1.0 - doubly as f64 / panel.stored_pair_count() as f64;
        }
        let avg = total / 50.0;
        pass &= within(avg, target, 0.03);
        fractions.push(avg);
        detail.push_str(&format!("[θ={theta}: {avg:.3} (ref {target})] "));
    }
    // zero fraction is monotone decreasing in θ (targets are θ-descending)
    pass &= fractions.windows(2).all(|w| w[0] < w[1]);
    detail.push_str(&format!("±0.03, runtime {:.2?}", start.elapsed()));
    check("6 (zero-fraction calibration)", pass, &detail);
}

// ---------------------------------------------------------------------
// Criterion 7: property suite.
// ---------------------------------------------------------------------

#[test]
fn criterion_7_property_suite() {
    let start = Instant::now();
    let mut failures: Vec<String> = Vec::new();

    // flat-weight mode equals the fixed-effect estimator exactly
    {
        let panel = simulate_panel(&DgpConfig { n: 40, theta: -2.0, sigma: 1.0, seed: 7 }).unwrap();
        let sample = difference(&panel);
        let fe = fixed_effect_beta(&sample).unwrap();
        let config = InferenceConfig { flat_weights: true, ..Default::default() };
        let fit = run_inference_procedure(&panel, &config).unwrap();
        if fit.beta_hat != fe.beta_hat {
            failures.push("flat-weight β̂ differs from fixed-effect β̂".to_string());
        }
        if fit.ci != fit.ci_conv {
            failures.push("flat-weight bias-corrected CI differs from conventional CI".to_string());
        }
    }

    // directed path on a symmetrized undirected panel reproduces the
    // undirected first and second steps
    {
        let panel = simulate_panel(&DgpConfig { n: 40, theta: -2.0, sigma: 1.0, seed: 9 }).unwrap();
        let directed = panel.to_directed();
        let opts = FirstStepOptions::default();
        let fs_u = fit_conditional_logit(&panel, &opts).unwrap();
        let fs_d = fit_conditional_logit(&directed, &opts).unwrap();
        if (&fs_u.gamma_hat - &fs_d.gamma_hat).norm() > 1e-10 {
            failures.push("directed-path γ̂ differs from undirected γ̂".to_string());
        }
        if (fs_d.loglik - 2.0 * fs_u.loglik).abs() > 1e-8 {
            failures.push("directed objective is not exactly twice the undirected one".to_string());
        }
        let kernel = Kernel::biweight();
        let (su, sd) = (difference(&panel), difference(&directed));
        let bu = kernel_weighted_beta(&su, &fs_u.gamma_hat, &kernel, 1.5).unwrap();
        let bd = kernel_weighted_beta(&sd, &fs_u.gamma_hat, &kernel, 1.5).unwrap();
        if (&bu.beta_hat - &bd.beta_hat).norm() > 1e-10 {
            failures.push("directed-path β̂ differs from undirected β̂".to_string());
        }
    }

    // determinism across thread counts
    {
        let cell = McCell { n: 30, theta: -2.0, sigma: 1.0 };
        let cfg = McConfig { reps: 4, keep_records: true, ..Default::default() };
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool2 = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
        let r1 = pool1.install(|| run_cell(&cell, &cfg));
        let r2 = pool2.install(|| run_cell(&cell, &cfg));
        if r1 != r2 {
            failures.push("results changed with thread count".to_string());
        }
    }

    // CI collapses to the Wald interval as λ → 0
    {
        let ci = bias_corrected_ci(1.3, 0.4, 1e-8, 0.21, 0.05).unwrap();
        let wald = bias_corrected_ci(1.3, 0.4, 0.0, 0.21, 0.05).unwrap();
        if (ci.lower - wald.lower).abs() > 1e-6 || (ci.upper - wald.upper).abs() > 1e-6 {
            failures.push("CI does not collapse to Wald at λ = 1e-8".to_string());
        }
    }

    // PSD of Σ̂₂ and of the combined Σ̂ over random directions
    {
        let panel =
            simulate_panel(&DgpConfig { n: 60, theta: -2.0, sigma: 1.0, seed: 13 }).unwrap();
        let fit = run_inference_procedure(&panel, &InferenceConfig::default()).unwrap();
        let eig2 = fit.variance.sigma2_hat.clone().symmetric_eigen();
        if eig2.eigenvalues.iter().any(|&l| l < -1e-12) {
            failures.push("Σ̂₂ has a negative eigenvalue".to_string());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let q = fit.beta_hat.len();
        for _ in 0..1000 {
            let c = DVector::from_iterator(q, (0..q).map(|_| rng.gen_range(-1.0..1.0)));
            if quadratic_form(&fit.variance.sigma_hat, &c) < -1e-12 {
                failures.push("c'Σ̂c < 0 for a random direction".to_string());
                break;
            }
        }
    }

    // scale equivariance of β̂ and invariance of c'Σ̂c under compensating
    // rescaling (two-column synthetic sample)
    {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut rows = Vec::new();
        for i in 0..20u32 {
            for j in (i + 1)..20u32 {
                if rng.gen_bool(0.8) {
                    let dw = vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                    let dr = vec![rng.gen_range(-2.0..2.0)];
                    let dy = dw[0] - 0.5 * dw[1] + rng.gen_range(-1.0..1.0);
                    rows.push((i, j, 0u32, 1u32, dy, dw, dr));
                }
            }
        }
        let sample = DifferencedSample::from_raw_rows(20, 190, false, 2, 1, &rows).unwrap();
        let scale = 2.5;
        let mut scaled = sample.clone();
        scaled.scale_dw_column(0, scale);

        let base_fit = fixed_effect_beta(&sample).unwrap();
        let scaled_fit = fixed_effect_beta(&scaled).unwrap();
        if (scaled_fit.beta_hat[0] - base_fit.beta_hat[0] / scale).abs() > 1e-10
            || (scaled_fit.beta_hat[1] - base_fit.beta_hat[1]).abs() > 1e-10
        {
            failures.push("β̂ is not scale equivariant".to_string());
        }

        // outcome scale equivariance
        let mut dy_scaled = sample.clone();
        dy_scaled.scale_dy(3.0);
        let dy_fit = fixed_effect_beta(&dy_scaled).unwrap();
        if ((&dy_fit.beta_hat - &base_fit.beta_hat * 3.0).norm()) > 1e-9 {
            failures.push("β̂ is not equivariant in the outcome scale".to_string());
        }

        let var_base = flat_variance(&sample, &base_fit.beta_hat).unwrap();
        let var_scaled = flat_variance(&scaled, &scaled_fit.beta_hat).unwrap();
        let c = DVector::from_vec(vec![0.7, -1.2]);
        let c_scaled = DVector::from_vec(vec![0.7 * scale, -1.2]);
        let qf_base = quadratic_form(&var_base.sigma_hat, &c);
        let qf_scaled = quadratic_form(&var_scaled.sigma_hat, &c_scaled);
        if (qf_base - qf_scaled).abs() > 1e-9 * qf_base.abs().max(1.0) {
            failures.push("c'Σ̂c is not invariant under compensating rescaling".to_string());
        }
    }

    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed.as_secs_f64() < 300.0;
    check(
        "7 (property suite)",
        pass,
        &if failures.is_empty() {
            format!("all properties hold, runtime {elapsed:.2?}")
        } else {
            failures.join("; ")
        },
    );
}

// ---------------------------------------------------------------------
// Criterion 8: degeneracy adaptivity.
// ---------------------------------------------------------------------

#[test]
fn criterion_8_degeneracy_adaptivity() {
    let start = Instant::now();
    let reps = 30u64;
    let config = InferenceConfig::default();
    let mut detail = String::new();
    let mut pass = true;
    for (sigma, label) in [(1.0, "n·c'Σ̂c"), (0.0, "N·h·c'Σ̂c")] {
        let mut stats = Vec::new();
        for n in [50usize, 100, 200] {
            let mut total = 0.0;
            let mut used = 0usize;
            for rep in 0..reps {
                let cfg = DgpConfig { n, theta: -2.0, sigma, seed: 880000 + rep };
                let panel = simulate_panel(&cfg).unwrap();
                let Ok(fit) = run_inference_procedure(&panel, &config) else { continue };
                let var = fit.variance.sigma_hat[(0, 0)];
                total += if sigma > 0.0 {
                    n as f64 * var
                } else {
                    fit.n_pairs as f64 * fit.h_n * var
                };
                used += 1;
            }
            stats.push(total / used as f64);
        }
        let max = stats.iter().cloned().fold(f64::MIN, f64::max);
        let min = stats.iter().cloned().fold(f64::MAX, f64::min);
        let ratio = max / min;
        pass &= ratio <= 2.0;
        detail.push_str(&format!(
            "[σ={sigma}: {label} over n∈{{50,100,200}} = {:.3?}, max/min = {ratio:.2}] ",
            stats
        ));
    }
    detail.push_str(&format!("runtime {:.2?}", start.elapsed()));
    check("8 (degeneracy adaptivity)", pass, &detail);
}
