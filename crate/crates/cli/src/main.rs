//! `dyadsel` — estimation and simulation replication for panel dyadic
//! regression with sample selection.
//!
//! Subcommands:
//! - `simulate`: draw a synthetic panel and write it as CSV (or JSON);
//! - `estimate`: run the full two-step inference procedure on a CSV panel;
//! - `replicate-tables`: run the simulation grid and render the
//!   bias/RMSE and coverage tables;
//! - `verify-kernel`: check the built-in kernel's moment conditions.
//!
//! Exit codes: 0 success; 2 input error; 3 numerical failure
//! (singularity, separation, non-convergence); 4 success with guard
//! warnings (outputs are still written).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dyadic_selection::{
    grid, load_panel_path, run_cell, run_inference_procedure, simulate_panel, summarize,
    CsvSchema, DgpConfig, DyadicPanel, Error as DsError, InferenceConfig, InferenceFit, Kernel,
    McCell, McConfig, McResult, PluginConfig, PpmlOptions,
};

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_GUARDED: u8 = 4;

#[derive(Parser)]
#[command(name = "dyadsel", version, about = "Panel dyadic regression with sample selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic panel from the simulation design and write it out.
    Simulate(SimulateArgs),
    /// Estimate a dyadic panel CSV: first step, kernel-weighted second
    /// step, and bias-corrected intervals.
    Estimate(EstimateArgs),
    /// Run the simulation grid and render table analogues.
    ReplicateTables(ReplicateArgs),
    /// Verify the kernel moment conditions by quadrature.
    VerifyKernel(VerifyKernelArgs),
}

#[derive(Args, Clone)]
struct InferenceFlags {
    /// Kernel order.
    #[arg(long, default_value_t = 2)]
    k: u32,
    /// Pilot bandwidth exponent δ ∈ (0, (2k+3)/(4k+4)).
    #[arg(long, default_value_t = 0.4)]
    delta: f64,
    /// Initial bandwidth constant h.
    #[arg(long, default_value_t = 3.0)]
    h_init: f64,
    /// Interval significance level α.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Constant-weight mode (reduces the estimator to fixed effects).
    #[arg(long)]
    flat: bool,
}

impl InferenceFlags {
    fn to_config(&self) -> InferenceConfig {
        InferenceConfig {
            k: self.k,
            delta: self.delta,
            h_init: self.h_init,
            alpha: self.alpha,
            kernel: Kernel::biweight(),
            flat_weights: self.flat,
            first_step: Default::default(),
            plugin: PluginConfig::default(),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of nodes.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Selection shifter θ (≈20%/75%/90% zeros at -0.3/-2.0/-3.0).
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    theta: f64,
    /// Node-shock scale σ (0 = degenerate regime).
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 20240527)]
    seed: u64,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
    /// Output format.
    #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
    format: String,
}

#[derive(Args)]
struct EstimateArgs {
    /// Input CSV with columns i,j,t,d,y,w_1..,r_1.. (or named columns).
    #[arg(long)]
    input: PathBuf,
    /// Output directory for the fit JSON, listings, and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Treat the panel as directed.
    #[arg(long)]
    directed: bool,
    /// Explicit outcome-regressor column names (comma separated).
    #[arg(long, value_delimiter = ',')]
    w_cols: Vec<String>,
    /// Explicit selection-regressor column names (comma separated).
    #[arg(long, value_delimiter = ',')]
    r_cols: Vec<String>,
    #[command(flatten)]
    inference: InferenceFlags,
}

#[derive(Args)]
struct ReplicateArgs {
    /// Output directory (per-cell JSON, tables, manifest).
    #[arg(long)]
    out: PathBuf,
    /// Replications per cell (the reference study used 2000).
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long, default_value_t = 20240527)]
    seed: u64,
    /// Node counts.
    #[arg(long, value_delimiter = ',', default_values_t = vec![50, 100, 150, 200])]
    n: Vec<usize>,
    /// θ grid.
    #[arg(long, value_delimiter = ',', default_values_t = vec![-0.3, -2.0, -3.0], allow_hyphen_values = true)]
    theta: Vec<f64>,
    /// σ grid.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.0])]
    sigma: Vec<f64>,
    /// Worker threads (default: DYADSEL_THREADS or all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Skip the PPML comparator.
    #[arg(long)]
    no_ppml: bool,
    #[command(flatten)]
    inference: InferenceFlags,
}

#[derive(Args)]
struct VerifyKernelArgs {
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::ReplicateTables(args) => cmd_replicate_tables(args),
        Command::VerifyKernel(args) => cmd_verify_kernel(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                CliError::Ds(err) if err.is_input_error() => EXIT_INPUT,
                CliError::Ds(_) => EXIT_NUMERICAL,
                CliError::Io(_) | CliError::Json(_) => EXIT_INPUT,
            };
            ExitCode::from(code)
        }
    }
}

#[derive(Debug)]
enum CliError {
    Ds(DsError),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Ds(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
            CliError::Json(e) => write!(f, "{e}"),
        }
    }
}

impl From<DsError> for CliError {
    fn from(e: DsError) -> Self {
        CliError::Ds(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Json(e)
    }
}

type CliResult = Result<ExitCode, CliError>;

fn setup_threads(requested: Option<usize>) {
    let threads = requested.or_else(|| {
        std::env::var("DYADSEL_THREADS").ok().and_then(|v| v.parse::<usize>().ok())
    });
    if let Some(t) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
}

#[derive(Serialize)]
struct SimulateManifest<'a> {
    version: &'a str,
    n: usize,
    theta: f64,
    sigma: f64,
    seed: u64,
    format: &'a str,
    output: String,
}

fn cmd_simulate(args: SimulateArgs) -> CliResult {
    let cfg = DgpConfig { n: args.n, theta: args.theta, sigma: args.sigma, seed: args.seed };
    let panel = simulate_panel(&cfg)?;
    match args.format.as_str() {
        "csv" => panel.save_csv_path(&args.out)?,
        _ => {
            let file = fs::File::create(&args.out)?;
            panel.save_json(file)?;
        }
    }
    let manifest = SimulateManifest {
        version: env!("CARGO_PKG_VERSION"),
        n: args.n,
        theta: args.theta,
        sigma: args.sigma,
        seed: args.seed,
        format: &args.format,
        output: args.out.display().to_string(),
    };
    let manifest_path = args.out.with_extension("manifest.json");
    serde_json::to_writer_pretty(fs::File::create(&manifest_path)?, &manifest)?;
    let doubly = (0..panel.stored_pair_count())
        .filter(|&i| panel.d(i, 0) && panel.d(i, 1))
        .count();
    println!(
        "wrote {} ({} nodes, {} dyads, {:.1}% doubly selected)",
        args.out.display(),
        panel.node_count(),
        panel.stored_pair_count(),
        100.0 * doubly as f64 / panel.stored_pair_count() as f64
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EstimateManifest<'a> {
    version: &'a str,
    input: String,
    directed: bool,
    k: u32,
    delta: f64,
    h_init: f64,
    alpha: f64,
    flat: bool,
    warnings: &'a [String],
}

fn cmd_estimate(args: EstimateArgs) -> CliResult {
    let mut schema = CsvSchema::default();
    if !args.w_cols.is_empty() {
        schema.w_cols = Some(args.w_cols.clone());
    }
    if !args.r_cols.is_empty() {
        schema.r_cols = Some(args.r_cols.clone());
    }
    let panel = load_panel_path(&args.input, &schema, args.directed)?;
    let config = args.inference.to_config();
    let fit = run_inference_procedure(&panel, &config)?;

    fs::create_dir_all(&args.out)?;
    let fit_path = args.out.join("inference_fit.json");
    serde_json::to_writer_pretty(fs::File::create(&fit_path)?, &fit)?;
    fs::write(args.out.join("first_step.txt"), first_step_listing(&panel, &fit))?;
    fs::write(args.out.join("estimates.txt"), estimate_listing(&panel, &fit))?;
    let manifest = EstimateManifest {
        version: env!("CARGO_PKG_VERSION"),
        input: args.input.display().to_string(),
        directed: args.directed,
        k: config.k,
        delta: config.delta,
        h_init: config.h_init,
        alpha: config.alpha,
        flat: config.flat_weights,
        warnings: &fit.warnings,
    };
    serde_json::to_writer_pretty(fs::File::create(args.out.join("manifest.json"))?, &manifest)?;

    println!("{}", estimate_listing(&panel, &fit));
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    if fit.has_guard_warnings() {
        Ok(ExitCode::from(EXIT_GUARDED))
    } else {
        Ok(ExitCode::SUCCESS)
    }
}

fn first_step_listing(panel: &DyadicPanel, fit: &InferenceFit) -> String {
    let mut out = String::from("First step (conditional logit)\n");
    out.push_str(&format!("{:<16} {:>12}\n", "Variable", "gamma_hat"));
    match &fit.first_step {
        Some(fs) => {
            for (name, value) in panel.r_names().iter().zip(fs.gamma_hat.iter()) {
                out.push_str(&format!("{name:<16} {value:>12.4}\n"));
            }
            out.push_str(&format!(
                "\nswitchers: {}   converged: {}   iterations: {}\n",
                fs.n_switchers, fs.converged, fs.iterations
            ));
        }
        None => out.push_str("(skipped: constant-weight mode)\n"),
    }
    out
}

fn estimate_listing(panel: &DyadicPanel, fit: &InferenceFit) -> String {
    let mut out = String::from("Second step (kernel-weighted, bias-corrected CIs)\n");
    out.push_str(&format!(
        "{:<16} {:>12} {:>12} {:>28}\n",
        "Variable", "estimate", "s.e.",
        format!("{:.0}% CI (bias-corrected)", 100.0 * (1.0 - fit.config.alpha))
    ));
    for (j, name) in panel.w_names().iter().enumerate() {
        let se = fit.variance.sigma_hat[(j, j)].max(0.0).sqrt();
        out.push_str(&format!(
            "{name:<16} {:>12.4} {:>12.4} {:>28}\n",
            fit.beta_hat[j],
            se,
            format!("[{:.4}, {:.4}]", fit.ci[j].lower, fit.ci[j].upper)
        ));
    }
    out.push_str(&format!(
        "\nnodes: {}   dyads (N): {}   rows: {}   in support: {}\n",
        fit.n_nodes, fit.n_pairs, fit.rows_used, fit.rows_in_support
    ));
    out.push_str(&format!(
        "h_n: {:.4}   h_pilot: {:.4}   h*: {:.4}   lambda: {:.4}\n",
        fit.h_n, fit.h_pilot, fit.h_star_hat, fit.lambda_n
    ));
    out
}

#[derive(Serialize, Deserialize, PartialEq, Clone)]
struct TablesManifest {
    version: String,
    base_seed: u64,
    reps: usize,
    k: u32,
    delta: f64,
    h_init: f64,
    alpha: f64,
    flat: bool,
    include_ppml: bool,
    ns: Vec<usize>,
    thetas: Vec<f64>,
    sigmas: Vec<f64>,
    completed: Vec<McCell>,
}

fn cell_file(cell: &McCell) -> String {
    format!("cell_n{}_theta{}_sigma{}.json", cell.n, cell.theta, cell.sigma)
}

fn cmd_replicate_tables(args: ReplicateArgs) -> CliResult {
    setup_threads(args.threads);
    fs::create_dir_all(&args.out)?;
    let manifest_path = args.out.join("manifest.json");
    let mut manifest = TablesManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        base_seed: args.seed,
        reps: args.reps,
        k: args.inference.k,
        delta: args.inference.delta,
        h_init: args.inference.h_init,
        alpha: args.inference.alpha,
        flat: args.inference.flat,
        include_ppml: !args.no_ppml,
        ns: args.n.clone(),
        thetas: args.theta.clone(),
        sigmas: args.sigma.clone(),
        completed: Vec::new(),
    };
    if manifest_path.exists() {
        let existing: TablesManifest =
            serde_json::from_reader(fs::File::open(&manifest_path)?)?;
        let mut fresh = existing.clone();
        fresh.completed = Vec::new();
        if fresh == manifest {
            manifest = existing;
            println!("resuming: {} cell(s) already complete", manifest.completed.len());
        } else {
            return Err(CliError::Ds(DsError::Invalid(format!(
                "existing manifest at {} was produced with a different configuration; \
                 use a fresh output directory",
                manifest_path.display()
            ))));
        }
    }

    let cells = grid(&args.n, &args.theta, &args.sigma);
    let mc = McConfig {
        reps: args.reps,
        base_seed: args.seed,
        inference: args.inference.to_config(),
        ppml: PpmlOptions::default(),
        include_ppml: !args.no_ppml,
        keep_records: true,
    };
    mc.inference.validate()?;

    let mut results: Vec<McResult> = Vec::with_capacity(cells.len());
    for cell in &cells {
        let path = args.out.join(cell_file(cell));
        if manifest.completed.contains(cell) && path.exists() {
            println!("skipping completed cell n={} theta={} sigma={}", cell.n, cell.theta, cell.sigma);
            results.push(serde_json::from_reader(fs::File::open(&path)?)?);
            continue;
        }
        println!("running cell n={} theta={} sigma={} ({} reps)", cell.n, cell.theta, cell.sigma, mc.reps);
        let result = run_cell(cell, &mc);
        serde_json::to_writer(fs::File::create(&path)?, &result)?;
        manifest.completed.push(*cell);
        serde_json::to_writer_pretty(fs::File::create(&manifest_path)?, &manifest)?;
        results.push(result);
    }

    let tables = summarize(&results);
    let named = [
        ("table1", &tables.table1),
        ("table2", &tables.table2),
        ("table3", &tables.table3),
        ("table4", &tables.table4),
    ];
    for (name, table) in named {
        if let Some(t) = table {
            fs::write(args.out.join(format!("{name}.csv")), &t.csv)?;
            fs::write(args.out.join(format!("{name}.txt")), &t.text)?;
            println!("\n{}", t.text);
        }
    }
    write_summary_csv(&args.out, &results)?;
    Ok(ExitCode::SUCCESS)
}

fn write_summary_csv(dir: &Path, results: &[McResult]) -> Result<(), CliError> {
    let mut csv = String::from(
        "theta,sigma,n,reps,zero_fraction,bias_kernel,rmse_kernel,bias_fe,rmse_fe,bias_ppml,rmse_ppml,\
         ci_conv,ci_bc,ci_fe,ci_ppml,failures,fe_failures,ppml_failures\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in results {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.cell.theta,
            r.cell.sigma,
            r.cell.n,
            r.reps,
            r.zero_fraction,
            opt(r.beta_n.as_ref().map(|s| s.mean_bias)),
            opt(r.beta_n.as_ref().map(|s| s.rmse)),
            opt(r.beta_fe.as_ref().map(|s| s.mean_bias)),
            opt(r.beta_fe.as_ref().map(|s| s.rmse)),
            opt(r.beta_ppml.as_ref().map(|s| s.mean_bias)),
            opt(r.beta_ppml.as_ref().map(|s| s.rmse)),
            opt(r.ci_conv.as_ref().map(|c| c.rate)),
            opt(r.ci_bc.as_ref().map(|c| c.rate)),
            opt(r.ci_fe.as_ref().map(|c| c.rate)),
            opt(r.ci_ppml.as_ref().map(|c| c.rate)),
            r.failures,
            r.fe_failures,
            r.ppml_failures,
        ));
    }
    fs::write(dir.join("summary.csv"), csv)?;
    Ok(())
}

fn cmd_verify_kernel(args: VerifyKernelArgs) -> CliResult {
    let kernel = Kernel::biweight();
    let report = kernel.verify_order(args.tol);
    println!("kernel: {} (support {}, order {})", report.name, kernel.support(), report.order);
    for (i, m) in report.moments.iter().enumerate() {
        println!("  moment {i}: {m:+.12e}");
    }
    println!("  ∫K²: {:.12}", kernel.square_integral());
    println!("  pass: {} (tol {:.1e})", report.pass, report.tol);
    if report.pass {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_NUMERICAL))
    }
}
