//! End-to-end behavior of the inference procedure on simulated panels.

use dyadic_selection::*;

#[test]
fn procedure_is_deterministic() {
    let panel = simulate_panel(&DgpConfig { n: 40, theta: -2.0, sigma: 1.0, seed: 5 }).unwrap();
    let config = InferenceConfig::default();
    let a = run_inference_procedure(&panel, &config).unwrap();
    let b = run_inference_procedure(&panel, &config).unwrap();
    assert_eq!(a, b);
}

#[test]
fn inference_fit_json_round_trip() {
    let panel = simulate_panel(&DgpConfig { n: 40, theta: -2.0, sigma: 0.0, seed: 6 }).unwrap();
    let fit = run_inference_procedure(&panel, &InferenceConfig::default()).unwrap();
    let json = serde_json::to_string(&fit).unwrap();
    let back: InferenceFit = serde_json::from_str(&json).unwrap();
    assert_eq!(fit, back);
}

#[test]
fn intervals_are_ordered_and_lambda_in_range() {
    for seed in 0..10u64 {
        let panel =
            simulate_panel(&DgpConfig { n: 50, theta: -2.0, sigma: 1.0, seed: 100 + seed }).unwrap();
        let fit = run_inference_procedure(&panel, &InferenceConfig::default()).unwrap();
        assert!(fit.lambda_n > 0.0 && fit.lambda_n < 1.0, "lambda = {}", fit.lambda_n);
        assert!(fit.h_n > 0.0 && fit.h_pilot > fit.h_n);
        for (ci, conv) in fit.ci.iter().zip(&fit.ci_conv) {
            assert!(ci.lower <= ci.upper);
            assert!(conv.lower <= conv.upper);
        }
    }
}

#[test]
fn degeneracy_stat_separates_regimes() {
    // Under node-level shocks the statistic stabilizes at a positive
    // value; without them it drifts toward zero as n grows.
    let average = |sigma: f64, n: usize| -> f64 {
        let mut total = 0.0;
        let mut used = 0;
        for rep in 0..15u64 {
            let cfg = DgpConfig { n, theta: -2.0, sigma, seed: 990_000 + rep };
            let panel = simulate_panel(&cfg).unwrap();
            if let Ok(fit) = run_inference_procedure(&panel, &InferenceConfig::default()) {
                total += fit.variance.degeneracy_stat[0];
                used += 1;
            }
        }
        total / used as f64
    };
    let degenerate_small = average(0.0, 50);
    let degenerate_large = average(0.0, 150);
    let nondegenerate_small = average(1.0, 50);
    let nondegenerate_large = average(1.0, 150);
    assert!(
        degenerate_large < degenerate_small,
        "degenerate case should drift toward zero: {degenerate_small} -> {degenerate_large}"
    );
    assert!(nondegenerate_large > 0.0);
    assert!(
        nondegenerate_large > 0.3 * nondegenerate_small,
        "non-degenerate case should stabilize: {nondegenerate_small} -> {nondegenerate_large}"
    );
    assert!(
        degenerate_large < 0.5 * nondegenerate_large,
        "regimes should separate: {degenerate_large} vs {nondegenerate_large}"
    );
}

#[test]
fn guard_warnings_reach_the_fit() {
    // Small panels rarely pin the bias estimate, so the bandwidth
    // refinement clamps and the fit reports it.
    let mut config = InferenceConfig::default();
    config.plugin.bias_sq_floor = f64::INFINITY; // force the clamp
    let panel = simulate_panel(&DgpConfig { n: 30, theta: -2.0, sigma: 1.0, seed: 3 }).unwrap();
    let fit = run_inference_procedure(&panel, &config).unwrap();
    assert!(fit.has_guard_warnings());
    assert!(fit.warnings.iter().any(|w| w.contains("clamped")));
    assert_eq!(fit.h_star_hat, config.plugin.h_star_max);
}

#[test]
fn flat_mode_skips_first_step() {
    let panel = simulate_panel(&DgpConfig { n: 30, theta: -2.0, sigma: 1.0, seed: 4 }).unwrap();
    let config = InferenceConfig { flat_weights: true, ..Default::default() };
    let fit = run_inference_procedure(&panel, &config).unwrap();
    assert!(fit.first_step.is_none());
    assert_eq!(fit.lambda_n, 0.0);
    assert_eq!(fit.bias_hat.as_slice(), &[0.0]);
}
