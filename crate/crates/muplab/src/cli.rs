//! The `muplab` command line: training runs, width sweeps, assumption
//! checks, pathwise decomposition, hyperparameter tables, and a self-test.
//!
//! Exit codes: 0 on success, 1 on a validation error (bad flags, malformed
//! or missing config), 2 on a runtime failure. Diagnostics go to stderr,
//! data to files or stdout.

use crate::instrumentation::metric_id;
use crate::model::{Activation, LossKind, MlpConfig};
use crate::optimizer::{train, UpdateRule};
use crate::parametrization::{
    hyperparams_for_config, init_mlp, init_mlp_with_density, preset_mismatches, GlobalPrefactors,
    InitStyle, PznKind,
};
use crate::paths::{path_scaling_sweep, write_path_report_csv, PathSweepConfig};
use crate::sweep::{
    aggregate, fit_slope, run_sweep, summarize, write_records_csv, SweepConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Validation failures exit with 1, runtime failures with 2.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "muplab",
    about = "Width-scaling experiments for MLP parametrizations",
    version
)]
pub struct Cli {
    /// Cap on worker threads (default: logical cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

/// JSON config keys accepted by train / sweep / check-assumptions.
const CONFIG_HELP: &str = "Config keys (JSON):
  widths            hidden widths to sweep, strictly increasing, e.g. [64, 128, 256]
  seeds             list of u64 seeds, one training run per (width, seed)
  pzn               \"spectral_mu_p\" | \"paper_experiment_mu_p\" | \"sp\" | \"ntp\"
  rule              \"layerwise_sgd\" (default) | \"sign_sgd\" | \"spectral_normalized\" |
                    \"frobenius_approx\" | \"width_corrected_frobenius\"
  steps             full-batch training steps
  activation        \"relu\" (default) | \"tanh\" | \"linear\"
  use_bias          bool, default false
  hidden_layers     hidden layers of the swept width, default 2
  sigma0, eta0      width-independent prefactors, defaults sqrt(2) and 0.1
  metric_layer      1-based hidden layer for layer-indexed metrics, default 2
  data              {\"kind\": \"synthetic\", \"batch\": B, \"input_dim\": D}
                    | {\"kind\": \"one_hot\", \"batch\": B, \"vocab\": V}
                    | {\"kind\": \"cifar10\", \"path\": P, \"classes\": [a, b], \"batch\": B}

Any key can be overridden with --set key=value (values parse as JSON).";

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one network and write its loss trajectory.
    #[command(after_help = CONFIG_HELP)]
    Train(RunArgs),
    /// Run a width sweep from a JSON config; write CSV records and a JSON
    /// summary with per-metric power-law slopes.
    #[command(after_help = CONFIG_HELP)]
    Sweep(RunArgs),
    /// Run a sweep and report the no-cancellation, activation-scale, and
    /// batch-averaging diagnostics with their width slopes.
    #[command(after_help = CONFIG_HELP)]
    CheckAssumptions(RunArgs),
    /// Decompose trained deep linear networks into pathwise contributions
    /// and classify cardinality classes by width scaling.
    Paths(PathsArgs),
    /// Print the per-layer sigma/eta table for a list of widths.
    PznTable(PznTableArgs),
    /// Run the built-in property suite.
    Selftest,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Path to a JSON sweep config.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for CSV/JSON artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace the config's seed list with a single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override a config key, e.g. `--set steps=100` or
    /// `--set data.batch=64`. Repeatable; values parse as JSON.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    /// The three-role µP preset used in the sweep experiments.
    Mup,
    /// The general fan-in/fan-out spectral rule.
    SpectralMup,
    Sp,
    Ntp,
}

impl From<KindArg> for PznKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Mup => PznKind::PaperExperimentMuP,
            KindArg::SpectralMup => PznKind::SpectralMuP,
            KindArg::Sp => PznKind::Sp,
            KindArg::Ntp => PznKind::Ntp,
        }
    }
}

#[derive(Debug, Args)]
pub struct PathsArgs {
    /// Hidden widths to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![64, 128, 256, 512])]
    pub widths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0, 1, 2])]
    pub seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "mup")]
    pub kind: KindArg,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PznTableArgs {
    /// Full width list d0,...,dL of the network.
    #[arg(long, value_delimiter = ',', required = true)]
    pub widths: Vec<usize>,
    #[arg(long, value_enum, default_value = "mup")]
    pub kind: KindArg,
    #[arg(long, default_value_t = std::f64::consts::SQRT_2)]
    pub sigma0: f64,
    #[arg(long, default_value_t = 0.1)]
    pub eta0: f64,
}

/// Entry point used by `main`; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if let Some(jobs) = cli.jobs {
        // Ignore failure: the global pool can only be built once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global();
    }
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::CheckAssumptions(args) => cmd_check_assumptions(&args),
        Command::Paths(args) => cmd_paths(&args),
        Command::PznTable(args) => cmd_pzn_table(&args),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn load_config(args: &RunArgs) -> Result<SweepConfig, CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        CliError::Validation(format!("cannot read config {}: {e}", args.config.display()))
    })?;
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
        CliError::Validation(format!("invalid JSON in {}: {e}", args.config.display()))
    })?;
    for entry in &args.overrides {
        apply_override(&mut value, entry)?;
    }
    if let Some(seed) = args.seed {
        value["seeds"] = serde_json::json!([seed]);
    }
    let cfg: SweepConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Validation(format!("config does not match schema: {e}")))?;
    cfg.validate()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(cfg)
}

/// `--set a.b=VALUE`: walk dotted keys and set the leaf to the JSON parse of
/// VALUE (falling back to a plain string).
fn apply_override(root: &mut serde_json::Value, entry: &str) -> Result<(), CliError> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override `{entry}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| CliError::Validation(format!("`{key}`: `{part}` is not an object")))?
            .entry(part.to_string())
            .or_insert(serde_json::json!({}));
    }
    node.as_object_mut()
        .ok_or_else(|| CliError::Validation(format!("`{key}` does not address an object")))?
        .insert(parts.last().unwrap().to_string(), value);
    Ok(())
}

fn out_dir(args: &RunArgs) -> Result<PathBuf, CliError> {
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_train(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let width = *cfg.widths.last().unwrap();
    let seed = cfg.seeds[0];
    let pref = cfg.prefactors();
    let net_cfg = MlpConfig::new(cfg.net_widths(width), cfg.activation, cfg.use_bias)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let data = cfg
        .data
        .build(crate::parametrization::derive_seed(seed, 0xda7a))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut state =
        init_mlp_with_density(&net_cfg, cfg.pzn, &pref, InitStyle::Gaussian, seed, data.density)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    let rule = cfg.rule.build(&net_cfg, cfg.pzn, &pref, data.density);
    let outcome = train(
        &mut state,
        &data,
        &rule,
        cfg.steps,
        LossKind::SquaredError,
        None,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    let dir = out_dir(args)?;
    let mut csv = String::from("step,loss\n");
    for (i, loss) in outcome.losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{loss}");
    }
    let path = dir.join("train_loss.csv");
    write_file(&path, csv.as_bytes())?;
    match outcome.diverged_at {
        Some(step) => eprintln!("diverged at step {step}; trajectory written to {}", path.display()),
        None => eprintln!(
            "final loss {:.6e} after {} steps; trajectory written to {}",
            outcome.final_loss().unwrap_or(f64::NAN),
            cfg.steps,
            path.display()
        ),
    }
    Ok(())
}

fn cmd_sweep(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let records = run_sweep(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    let dir = out_dir(args)?;

    let mut csv_bytes = Vec::new();
    write_records_csv(&records, &mut csv_bytes)
        .map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
    write_file(&dir.join("sweep.csv"), &csv_bytes)?;

    let summary = summarize(&records);
    let json = serde_json::to_vec_pretty(&serde_json::json!({
        "config": cfg,
        "summary": summary,
    }))
    .map_err(|e| CliError::Runtime(format!("json: {e}")))?;
    write_file(&dir.join("summary.json"), &json)?;

    eprintln!(
        "{} cells ({} diverged); wrote {} and {}",
        summary.total_cells,
        summary.diverged_cells,
        dir.join("sweep.csv").display(),
        dir.join("summary.json").display()
    );
    for (id, fit) in &summary.slopes {
        println!(
            "{id}: slope {:+.3} (r² {:.3}, {} widths)",
            fit.slope, fit.r_squared, fit.n_points
        );
    }
    Ok(())
}

fn cmd_check_assumptions(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let records = run_sweep(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    let ids = [
        metric_id::ASSUMPTION1_W,
        metric_id::ASSUMPTION1_H,
        metric_id::ASSUMPTION2,
        metric_id::ASSUMPTION3,
    ];
    println!("{:<16} {:>8} {:>12} {:>12}", "metric", "width", "mean", "std");
    for id in ids {
        let stats = aggregate(&records, id).map_err(|e| CliError::Runtime(e.to_string()))?;
        for s in &stats {
            println!("{:<16} {:>8} {:>12.5} {:>12.5}", id, s.width, s.mean, s.std);
        }
        let points: Vec<(f64, f64)> = stats
            .iter()
            .filter(|s| s.n > 0 && s.mean.is_finite() && s.mean > 0.0)
            .map(|s| (s.width as f64, s.mean))
            .collect();
        match fit_slope(&points) {
            Ok(fit) => println!("{id}: slope {:+.4} (r² {:.3})", fit.slope, fit.r_squared),
            Err(e) => println!("{id}: no slope ({e})"),
        }
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let mut csv_bytes = Vec::new();
        write_records_csv(&records, &mut csv_bytes)
            .map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
        write_file(&dir.join("assumptions.csv"), &csv_bytes)?;
    }
    Ok(())
}

fn cmd_paths(args: &PathsArgs) -> Result<(), CliError> {
    if args.widths.len() < 2 {
        return Err(CliError::Validation(
            "paths needs at least two widths for slope fits".into(),
        ));
    }
    let cfg = PathSweepConfig {
        widths: args.widths.clone(),
        seeds: args.seeds.clone(),
        pzn: args.kind.into(),
        steps: args.steps,
        ..Default::default()
    };
    let report = path_scaling_sweep(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "inclusion-exclusion residual: {:.2e}",
        report.max_decomposition_residual
    );
    println!("{:<8} {:>9} {:>8} {:>14}", "class", "slope", "r²", "leading-order");
    for cs in &report.class_slopes {
        println!(
            "{:<8} {:>+9.3} {:>8.3} {:>14}",
            cs.class.label(),
            cs.fit.slope,
            cs.fit.r_squared,
            cs.leading_order
        );
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let mut buf = Vec::new();
        write_path_report_csv(&report, &mut buf)
            .map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
        write_file(&dir.join("paths.csv"), &buf)?;
    }
    Ok(())
}

fn cmd_pzn_table(args: &PznTableArgs) -> Result<(), CliError> {
    if args.widths.len() < 2 {
        return Err(CliError::Validation(
            "--widths needs at least d0 and d1".into(),
        ));
    }
    let cfg = MlpConfig::new(args.widths.clone(), Activation::Relu, false)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let kind: PznKind = args.kind.into();
    let pref = GlobalPrefactors {
        sigma0: args.sigma0,
        eta0: args.eta0,
        bias_sigma0: 0.0,
    };
    let hyper = hyperparams_for_config(&cfg, kind, &pref);
    println!(
        "kind {} (sigma0 = {}, eta0 = {})",
        kind.name(),
        args.sigma0,
        args.eta0
    );
    println!(
        "{:<6} {:>8} {:>8} {:>14} {:>14}",
        "layer", "fan_in", "fan_out", "sigma", "eta"
    );
    for (i, h) in hyper.iter().enumerate() {
        let (fan_in, fan_out) = cfg.fan(i + 1);
        println!(
            "{:<6} {:>8} {:>8} {:>14.6e} {:>14.6e}",
            i + 1,
            fan_in,
            fan_out,
            h.sigma,
            h.eta
        );
    }
    let mismatches = preset_mismatches(&args.widths, &pref);
    if !mismatches.is_empty() {
        eprintln!(
            "note: three-role preset and general spectral rule disagree at layer(s) {:?} \
             (fan-out below fan-in away from the readout)",
            mismatches
        );
    }
    Ok(())
}

fn cmd_selftest() -> Result<(), CliError> {
    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("{} {}", if ok { "PASS" } else { "FAIL" }, name);
        if !ok {
            failures += 1;
        }
    };

    // Norm sanity.
    let v = crate::linalg::Vector::new(vec![3.0, 4.0]).unwrap();
    check("l2 norm on a 3-4-5 triangle", (v.l2_norm() - 5.0).abs() < 1e-12);

    // Rank-one spectral identities.
    let u = crate::linalg::sample_gaussian_vector(16, 1.0, 1);
    let w = crate::linalg::sample_gaussian_vector(9, 1.0, 2);
    let m = crate::linalg::outer(&u, &w);
    let sn = crate::linalg::spectral_norm_est(&m, 1e-12, 10_000).value;
    check(
        "rank-one spectral norm factorizes",
        (sn - u.l2_norm() * w.l2_norm()).abs() < 1e-8 * sn,
    );
    check(
        "rank-one stable rank is 1",
        (crate::linalg::stable_rank(&m).unwrap() - 1.0).abs() < 1e-8,
    );

    // Alignment properties on random triples.
    let mut align_ok = true;
    for seed in 0..50u64 {
        let p = crate::linalg::sample_gaussian(6, 5, 1.0, 3 * seed + 1);
        let q = crate::linalg::sample_gaussian(5, 7, 1.0, 3 * seed + 2);
        let a = crate::linalg::alignment_est(&p, &q, 1e-12, 100_000).unwrap();
        let refl = crate::linalg::alignment_est(&p, &p.transpose(), 1e-12, 100_000).unwrap();
        align_ok &= (0.0..=1.0 + 1e-9).contains(&a) && (refl - 1.0).abs() < 1e-8;
    }
    check("alignment in [0,1] and reflexive", align_ok);

    // Gradient check on a small tanh net.
    let cfg = MlpConfig::new(vec![4, 6, 2], Activation::Tanh, false).unwrap();
    let state = init_mlp(
        &cfg,
        PznKind::SpectralMuP,
        &GlobalPrefactors::default(),
        InitStyle::Gaussian,
        7,
    )
    .unwrap();
    let x = crate::linalg::sample_gaussian_vector(4, 1.0, 8);
    let y = crate::linalg::sample_gaussian_vector(2, 1.0, 9);
    let rec = crate::model::forward(&state, &x).unwrap();
    let (_, og) = crate::model::loss_and_grad(rec.output(), &y, LossKind::SquaredError).unwrap();
    let grads = crate::model::backward(&state, &rec, &og).unwrap();
    let mut grad_ok = true;
    let h = 1e-6;
    for layer in 1..=2 {
        for i in 0..state.weight(layer).rows() {
            for j in 0..state.weight(layer).cols() {
                let base = state.weight(layer).get(i, j);
                let mut plus = state.clone();
                plus.weight_mut(layer).set(i, j, base + h);
                let rp = crate::model::forward(&plus, &x).unwrap();
                let (lp, _) =
                    crate::model::loss_and_grad(rp.output(), &y, LossKind::SquaredError).unwrap();
                let mut minus = state.clone();
                minus.weight_mut(layer).set(i, j, base - h);
                let rm = crate::model::forward(&minus, &x).unwrap();
                let (lm, _) =
                    crate::model::loss_and_grad(rm.output(), &y, LossKind::SquaredError).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.weight_grad(layer).get(i, j);
                grad_ok &= (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1e-3);
            }
        }
    }
    check("backpropagation matches finite differences", grad_ok);

    // Batch-1 update alignment is exactly 1.
    let data = crate::data::synthetic_gaussian(1, 8, 11);
    let cfg = MlpConfig::new(vec![8, 16, 16, 1], Activation::Relu, false).unwrap();
    let mut state = init_mlp(
        &cfg,
        PznKind::PaperExperimentMuP,
        &GlobalPrefactors::default(),
        InitStyle::Gaussian,
        11,
    )
    .unwrap();
    let pass = crate::model::batch_forward_backward(
        &state,
        &data.inputs,
        &data.targets,
        LossKind::SquaredError,
    )
    .unwrap();
    let rule = UpdateRule::layerwise_sgd(
        state.config(),
        PznKind::PaperExperimentMuP,
        &GlobalPrefactors::default(),
    );
    let outcome = crate::optimizer::apply_update(&mut state, &pass.grads, &rule).unwrap();
    let a = crate::instrumentation::update_alignment(&outcome.deltas[1], &pass.records, 2).unwrap();
    check("batch-1 update alignment equals 1", (a - 1.0).abs() < 1e-8);

    // Slope fit on exact power laws.
    let pts: Vec<(f64, f64)> = [64.0f64, 128.0, 256.0].iter().map(|&w| (w, 5.0 / w.sqrt())).collect();
    let fit = fit_slope(&pts).unwrap();
    check("log-log fit recovers -1/2", (fit.slope + 0.5).abs() < 1e-10);

    if failures == 0 {
        println!("selftest: all checks passed");
        Ok(())
    } else {
        Err(CliError::Runtime(format!("selftest: {failures} check(s) failed")))
    }
}
