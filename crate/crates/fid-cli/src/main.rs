//! `fid` — experiment driver for Bayesian fault identification.
//!
//! Subcommands:
//! - `run`      one trial; prints the decision and writes a JSON trace.
//! - `sweep`    full Monte Carlo sweep; writes `sweep.csv` + `summary.json`.
//! - `diagnose` diagnosability report for each candidate truth, as JSON.
//! - `ablate`   preset ablation matrix (full / no-renorm / no-reject) as CSV.
//!
//! Every subcommand takes `--config <json>` plus flag overrides; flags win.
//! Outputs land under `<out>/<experiment name>/`.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use fid_core::{
    derive_seed, estimate_lambda, run_sweep, run_trial, DiagnosabilityConfig, ExperimentConfig,
    FidRng, Metrics, Mode, Outcome, ScenarioConfig, ScenarioKind, TrialResult,
};

#[derive(Parser)]
#[command(
    name = "fid",
    about = "Bayesian fault identification experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single trial and print its decision.
    Run(RunArgs),
    /// Run the full window x noise-scale Monte Carlo sweep.
    Sweep(CommonArgs),
    /// Estimate diagnosability for each candidate truth.
    Diagnose(DiagnoseArgs),
    /// Run the preset ablation matrix (full / no-renorm / no-reject+no-renorm).
    Ablate(CommonArgs),
}

/// Configuration source plus flag overrides, shared by all subcommands.
#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario id (two_tank | mars_satellite | example1 | custom); replaces
    /// the configured scenario with that family's defaults.
    #[arg(long)]
    scenario: Option<String>,
    /// Experiment name (output directory component).
    #[arg(long)]
    name: Option<String>,
    /// Window length N; restricts the sweep to this single window.
    #[arg(long = "N", value_name = "N")]
    window: Option<usize>,
    /// Last step index K (the run spans k = 0..=K).
    #[arg(long = "K", value_name = "K")]
    horizon: Option<usize>,
    /// Chi-square significance level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Belief threshold for identification.
    #[arg(long)]
    b_th: Option<f64>,
    /// Master seed; all trial seeds derive from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Identification mode.
    #[arg(long, value_parser = Mode::from_str)]
    mode: Option<Mode>,
    /// Skip the total-rejection renormalization.
    #[arg(long)]
    no_renorm: bool,
    /// Skip the chi-square rejection test.
    #[arg(long)]
    no_reject: bool,
    /// Active selection: grid points per control axis.
    #[arg(long)]
    grid_per_axis: Option<usize>,
    /// Active selection: grid refinement passes.
    #[arg(long)]
    refine_iters: Option<usize>,
    /// Multiplier on the admissible control box.
    #[arg(long)]
    authority_scale: Option<f64>,
    /// Measurement-noise multiplier; restricts the sweep to this single scale.
    #[arg(long)]
    noise_scale: Option<f64>,
    /// Trials per sweep point.
    #[arg(long)]
    trials: Option<usize>,
    /// Prior probability that the true fault is modeled.
    #[arg(long)]
    pi_star: Option<f64>,
    /// Keep JSON traces for the first this-many trials of each point.
    #[arg(long)]
    keep_traces: Option<usize>,
    /// Output root directory.
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Also write a per-step filter debug CSV (k, hypothesis, x_hat,
    /// cov_trace, stat).
    #[arg(long)]
    filter_trace: bool,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Restrict the report to this truth index.
    #[arg(long)]
    h_star: Option<usize>,
}

impl CommonArgs {
    /// Resolves the experiment configuration: file (or defaults), then the
    /// scenario swap, then individual flag overrides.
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                parse_config(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.scenario {
            let kind: ScenarioKind = s.parse()?;
            cfg.scenario = ScenarioConfig::default_for(kind);
            if self.name.is_none() && self.config.is_none() {
                cfg.name = s.clone();
            }
        }
        if let Some(name) = &self.name {
            cfg.name = name.clone();
        }
        if let Some(n) = self.window {
            cfg.windows = vec![n];
        }
        if let Some(k) = self.horizon {
            cfg.horizon = Some(k);
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(b) = self.b_th {
            cfg.b_th = b;
        }
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if self.no_renorm {
            cfg.no_renorm = true;
        }
        if self.no_reject {
            cfg.no_reject = true;
        }
        if let Some(g) = self.grid_per_axis {
            cfg.grid_per_axis = g;
        }
        if let Some(r) = self.refine_iters {
            cfg.refine_iters = r;
        }
        if let Some(a) = self.authority_scale {
            cfg.authority_scale = a;
        }
        if let Some(s) = self.noise_scale {
            cfg.noise_scales = vec![s];
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(p) = self.pi_star {
            cfg.scenario.pi_star = p;
        }
        if let Some(k) = self.keep_traces {
            cfg.keep_traces = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let dir = self.out.join(&cfg.name);
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

/// Accepts either a full experiment document or a bare scenario document
/// (its `scenario` field is a string, not an object); the latter is wrapped
/// in a default experiment named after the scenario.
fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let doc: serde_json::Value = serde_json::from_str(text)?;
    if doc.get("scenario").is_some_and(|v| v.is_string()) {
        let scenario = ScenarioConfig::from_json(text)?;
        let cfg = ExperimentConfig {
            name: scenario.scenario.clone(),
            scenario,
            ..ExperimentConfig::default()
        };
        cfg.validate()?;
        return Ok(cfg);
    }
    Ok(ExperimentConfig::from_json(text)?)
}

/// Noise scale for single-point subcommands (`run`, `diagnose`): the
/// configured value when unambiguous, the baseline otherwise.
fn single_noise_scale(cfg: &ExperimentConfig) -> f64 {
    if cfg.noise_scales.len() == 1 {
        cfg.noise_scales[0]
    } else {
        1.0
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => cmd_run(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Diagnose(args) => cmd_diagnose(&args),
        Command::Ablate(args) => cmd_ablate(&args),
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let window = cfg.windows[0];
    let noise_scale = single_noise_scale(&cfg);
    let scenario = cfg.point_scenario(noise_scale)?;
    let engine = cfg.engine_config(window, true);
    // Seed scheme matches trial 0 of sweep point 0, so `run` reproduces the
    // first sweep trial of the same configuration.
    let seed = derive_seed(cfg.master_seed, &[0, 0]);
    let result = run_trial(
        &scenario,
        &engine,
        cfg.mode,
        &cfg.active_config(),
        0,
        seed,
    )?;

    let dir = args.common.out_dir(&cfg)?;
    let trace_path = dir.join("run_trace.json");
    fs::write(&trace_path, serde_json::to_string_pretty(&result)?)?;

    println!("scenario : {} (noise_scale {})", cfg.scenario.scenario, noise_scale);
    println!(
        "mode     : {}  N = {}  K = {}",
        cfg.mode,
        window,
        cfg.horizon.unwrap_or(cfg.scenario.horizon)
    );
    println!(
        "truth    : {} ({})",
        result.truth_label,
        match result.truth_index {
            Some(i) => format!("hypothesis {i}"),
            None => "unmodeled".to_string(),
        }
    );
    match result.decision.outcome {
        Outcome::Identified(m) => println!(
            "decision : identified hypothesis {} at step {}",
            m, result.decision.step
        ),
        Outcome::Null => println!("decision : null at step {}", result.decision.step),
    }
    println!("belief   : {:?}", result.decision.belief.as_slice());
    println!("failure  : {}", result.failure);
    println!("trace    : {}", trace_path.display());

    if args.filter_trace {
        let csv_path = dir.join("filter_trace.csv");
        fs::write(&csv_path, filter_trace_csv(&scenario.hypotheses().labels(), &result))?;
        println!("filters  : {}", csv_path.display());
    }
    Ok(())
}

/// Debug CSV: one row per (step, hypothesis) with the posterior estimate,
/// covariance trace, and innovation statistic.
fn filter_trace_csv(labels: &[String], result: &TrialResult) -> String {
    let n_x = result
        .trace
        .first()
        .and_then(|s| s.filters.first())
        .map_or(0, |f| f.x_hat.len());
    let mut out = String::from("k,hypothesis");
    for i in 0..n_x {
        let _ = write!(out, ",x_hat_{i}");
    }
    out.push_str(",cov_trace,stat\n");
    for step in &result.trace {
        for (m, f) in step.filters.iter().enumerate() {
            let _ = write!(out, "{},{}", step.k, labels[m]);
            for v in &f.x_hat {
                let _ = write!(out, ",{v}");
            }
            let _ = write!(out, ",{}", f.cov_trace);
            match f.stat {
                Some(s) => {
                    let _ = writeln!(out, ",{s}");
                }
                None => out.push_str(",\n"),
            }
        }
    }
    out
}

fn cmd_sweep(args: &CommonArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let report = run_sweep(&cfg, &args.out)?;
    println!(
        "swept {} points x {} trials ({}, mode {})",
        report.points.len(),
        cfg.trials,
        cfg.scenario.scenario,
        cfg.mode
    );
    for p in &report.points {
        println!("  {}", point_line(p.point.window, p.point.noise_scale, &p.metrics));
    }
    println!("csv      : {}", report.out_dir.join("sweep.csv").display());
    println!("summary  : {}", report.out_dir.join("summary.json").display());
    Ok(())
}

fn point_line(window: usize, noise_scale: f64, m: &Metrics) -> String {
    format!(
        "N = {:>3}  s = {:<4}  failure {:.3} +/- {:.3}  null {:.3}  delay {}",
        window,
        noise_scale,
        m.failure_rate,
        m.failure_stderr,
        m.null_rate,
        m.avg_delay
            .map(|d| format!("{d:.1}"))
            .unwrap_or_else(|| "-".to_string()),
    )
}

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let window = cfg.windows[0];
    let scenario = cfg.point_scenario(single_noise_scale(&cfg))?;
    let n_hyp = scenario.hypotheses().len();
    let truths: Vec<usize> = match args.h_star {
        Some(h) if h >= n_hyp => bail!("--h-star {h} out of range (|M| = {n_hyp})"),
        Some(h) => vec![h],
        None => (0..n_hyp).collect(),
    };
    let diag = DiagnosabilityConfig {
        window,
        horizon: cfg.horizon,
        trials: cfg.trials,
        ..DiagnosabilityConfig::default()
    };

    let labels = scenario.hypotheses().labels();
    let mut reports = Vec::new();
    for h_star in truths {
        let mut rng = FidRng::seed_from_u64(derive_seed(cfg.master_seed, &[h_star as u64]));
        let report = estimate_lambda(&scenario, h_star, &diag, &mut rng)?;
        let limited = report.is_fundamentally_limited(None);
        reports.push(serde_json::json!({
            "h_star": h_star,
            "truth_label": labels[h_star],
            "fundamentally_limited": limited,
            "report": report,
        }));
    }
    let doc = serde_json::json!({
        "scenario": cfg.scenario.scenario,
        "window": window,
        "trials": cfg.trials,
        "reports": reports,
    });
    let text = serde_json::to_string_pretty(&doc)?;
    let dir = args.common.out_dir(&cfg)?;
    let path = dir.join("diagnosability.json");
    fs::write(&path, &text)?;
    println!("{text}");
    eprintln!("report   : {}", path.display());
    Ok(())
}

/// The preset ablation variants, least to most degraded.
const ABLATION_VARIANTS: [(&str, bool, bool); 3] = [
    // (name, no_reject, no_renorm)
    ("full", false, false),
    ("no_renorm", false, true),
    ("no_reject_no_renorm", true, true),
];

fn cmd_ablate(args: &CommonArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let dir = args.out_dir(&cfg)?;
    let mut csv =
        String::from("variant,mode,window,noise_scale,failure_rate,failure_stderr,avg_delay,null_rate\n");
    for (variant, no_reject, no_renorm) in ABLATION_VARIANTS {
        let mut vcfg = cfg.clone();
        vcfg.no_reject = no_reject;
        vcfg.no_renorm = no_renorm;
        println!("variant {variant}:");
        for (point, metrics) in fid_core::run_monte_carlo(&vcfg)? {
            println!("  {}", point_line(point.window, point.noise_scale, &metrics));
            let delay = metrics
                .avg_delay
                .map(|d| d.to_string())
                .unwrap_or_default();
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                variant,
                point.mode,
                point.window,
                point.noise_scale,
                metrics.failure_rate,
                metrics.failure_stderr,
                delay,
                metrics.null_rate,
            );
        }
    }
    let path = dir.join("ablation.csv");
    fs::write(&path, csv)?;
    println!("csv      : {}", path.display());
    Ok(())
}
