//! Command-line harness for the pruning toolkit.
//!
//! Exit codes: 0 success, 1 usage error, 2 oracle or invariant failure,
//! 3 I/O or trace-format error.

use clap::{Args, Parser, Subcommand};
use kvtrim::error::Error;
use kvtrim::harness::{self, BaselineKind, OracleCheckParams, PromptSource, RunConfig};
use kvtrim::model::ModelConfig;
use kvtrim::prompts::PromptFamily;
use kvtrim::pruner::{KRows, PrunerConfig};
use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "kvtrim",
    about = "Adaptive KV-cache pruning on a deterministic toy transformer",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run full-cache and pruned generation on the same prompts.
    Generate(GenerateArgs),
    /// Run one generation pass per threshold and record the trade-off.
    Sweep(SweepArgs),
    /// Compare the adaptive pruner against fixed-budget baselines.
    Compare(CompareArgs),
    /// Prune straight from a trace file; no model needed.
    AnalyzeTrace(AnalyzeArgs),
    /// Run the brute-force oracle suites.
    OracleCheck(OracleArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON run-config file; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Halting threshold (relative norm loss).
    #[arg(long)]
    threshold: Option<f64>,
    /// Number of sink positions ranked first.
    #[arg(long)]
    sink: Option<usize>,
    /// Attention rows reduced per head: a count like "4" or a fraction like "5%".
    #[arg(long = "k-rows")]
    k_rows: Option<String>,
    /// Comma-separated always-retained layers, e.g. "0,1"; "none" disables freezing.
    #[arg(long = "frozen-layers")]
    frozen_layers: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Samples pruned together through the padded-batch path.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    /// Synthetic prompt count.
    #[arg(long)]
    prompts: Option<usize>,
    /// Synthetic prompt family: uniform|skewed|retrieval|mixed.
    #[arg(long)]
    family: Option<String>,
    /// Synthetic prompt length in tokens.
    #[arg(long = "prompt-len")]
    prompt_len: Option<usize>,
    /// File of prompts (one per line, whitespace-separated token ids).
    #[arg(long = "prompt-file")]
    prompt_file: Option<PathBuf>,
    #[arg(long = "decode-steps")]
    decode_steps: Option<usize>,
    /// Write one attention trace per sample next to the CSVs.
    #[arg(long = "emit-traces")]
    emit_traces: bool,
    /// Model shape: "default" (8 layers) or "small" (6 layers).
    #[arg(long = "model-preset")]
    model_preset: Option<String>,
    /// Print the fully resolved run config as JSON and exit.
    #[arg(long = "print-config")]
    print_config: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated ascending thresholds.
    #[arg(long, default_value = "0.001,0.005,0.01,0.02,0.05,0.1")]
    thresholds: String,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated fixed budgets, e.g. "0.9,0.5,0.2".
    #[arg(long)]
    budget: Option<String>,
    /// Comma-separated baselines: slm|h2o|snapkv|attn-rank.
    #[arg(long)]
    baseline: Option<String>,
    /// Also run the sink+recency baseline with frozen bottom layers.
    #[arg(long = "slm-frozen")]
    slm_frozen: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trace file to analyze.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    sink: Option<usize>,
    #[arg(long = "k-rows")]
    k_rows: Option<String>,
    #[arg(long = "frozen-layers")]
    frozen_layers: Option<String>,
    /// Thresholds for the budget-only sweep.
    #[arg(long, default_value = "0.001,0.005,0.01,0.02,0.05,0.1")]
    thresholds: String,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// Random rows checked by the halting-equivalence suite.
    #[arg(long, default_value_t = 10_000)]
    cases: usize,
    /// Largest row length generated.
    #[arg(long = "max-n", default_value_t = 128)]
    max_n: usize,
    /// Rows checked by the exhaustive subset suite.
    #[arg(long = "enumerate-cases", default_value_t = 500)]
    enumerate_cases: usize,
    /// Largest row length enumerated (capped at 16).
    #[arg(long = "enumerate-n", default_value_t = 12)]
    enumerate_n: usize,
    #[arg(long, default_value_t = 0x0AC1E)]
    seed: u64,
    /// Report every case, not just mismatches.
    #[arg(long)]
    verbose: bool,
}

fn parse_k_rows(s: &str) -> Result<KRows, Error> {
    let s = s.trim();
    if let Some(pct) = s.strip_suffix('%') {
        let v: f64 = pct
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad k-rows percentage '{s}'")))?;
        return Ok(KRows::Fraction(v / 100.0));
    }
    if s.contains('.') {
        let v: f64 = s
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad k-rows fraction '{s}'")))?;
        return Ok(KRows::Fraction(v));
    }
    let v: usize = s
        .parse()
        .map_err(|_| Error::InvalidInput(format!("bad k-rows count '{s}'")))?;
    Ok(KRows::Count(v))
}

fn parse_frozen(s: &str) -> Result<BTreeSet<usize>, Error> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(BTreeSet::new());
    }
    s.split(',')
        .map(|f| {
            f.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidInput(format!("bad frozen layer index '{f}'")))
        })
        .collect()
}

fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad {what} '{f}'")))
        })
        .collect()
}

fn resolve_config(common: &CommonArgs) -> Result<RunConfig, Error> {
    let mut config = match &common.config {
        Some(path) => RunConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(preset) = &common.model_preset {
        config.model = match preset.as_str() {
            "default" => ModelConfig::default(),
            "small" => ModelConfig::small(),
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown model preset '{other}' (expected default|small)"
                )))
            }
        };
    }
    if let Some(t) = common.threshold {
        config.pruner.threshold = t;
    }
    if let Some(m) = common.sink {
        config.pruner.sink_count = m;
    }
    if let Some(k) = &common.k_rows {
        config.pruner.reduce_rows = parse_k_rows(k)?;
    }
    if let Some(f) = &common.frozen_layers {
        config.pruner.frozen_layers = parse_frozen(f)?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(batch) = common.batch {
        config.batch = batch;
    }
    if let Some(dir) = &common.out_dir {
        config.out_dir = Some(dir.clone());
    }
    if let Some(steps) = common.decode_steps {
        config.decode_steps = steps;
    }
    if common.emit_traces {
        config.emit_traces = true;
    }
    if let Some(path) = &common.prompt_file {
        config.prompts = PromptSource::TokenFile { path: path.clone() };
    } else if common.prompts.is_some() || common.family.is_some() || common.prompt_len.is_some() {
        let (mut family, mut count, mut len) = match &config.prompts {
            PromptSource::Synthetic { family, count, len } => (*family, *count, *len),
            PromptSource::TokenFile { .. } => (PromptFamily::Mixed, 8, 128),
        };
        if let Some(f) = &common.family {
            family = PromptFamily::parse(f)?;
        }
        if let Some(c) = common.prompts {
            count = c;
        }
        if let Some(l) = common.prompt_len {
            len = l;
        }
        config.prompts = PromptSource::Synthetic { family, count, len };
    }
    Ok(config)
}

fn cmd_generate(args: &GenerateArgs) -> Result<ExitCode, Error> {
    let config = resolve_config(&args.common)?;
    if args.common.print_config {
        println!("{}", config.to_json());
        return Ok(ExitCode::SUCCESS);
    }
    let report = harness::run_generate(&config)?;
    println!("samples: {}  decode steps: {}", report.samples, report.decode_steps);
    println!("mean budget: {:.6}", report.mean_budget);
    let layers: Vec<String> = report
        .per_layer_budgets
        .iter()
        .map(|b| format!("{b:.4}"))
        .collect();
    println!("per-layer budgets: {}", layers.join(" "));
    println!("token agreement: {:.6}", report.agreement);
    println!("max logit divergence: {:.3e}", report.max_logit_divergence);
    println!(
        "prune time: {:.1} ms total ({:.2} ms/sample)  [coarse wall clock on a scalar toy engine]",
        report.prune_seconds * 1e3,
        report.prune_seconds * 1e3 / report.samples as f64
    );
    println!(
        "generation time: {:.1} ms total ({:.2} ms/sample)",
        report.generate_seconds * 1e3,
        report.generate_seconds * 1e3 / report.samples as f64
    );
    if let Some(dir) = &config.out_dir {
        println!("wrote {}", dir.join("budget.csv").display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(args: &SweepArgs) -> Result<ExitCode, Error> {
    let config = resolve_config(&args.common)?;
    if args.common.print_config {
        println!("{}", config.to_json());
        return Ok(ExitCode::SUCCESS);
    }
    let thresholds = parse_f64_list(&args.thresholds, "threshold")?;
    let records = harness::run_sweep(&config, &thresholds)?;
    println!("threshold  mean_budget  agreement");
    for r in &records {
        println!("{:<9.4}  {:<11.6}  {:.6}", r.threshold, r.mean_budget, r.agreement);
    }
    if let Some(dir) = &config.out_dir {
        println!("wrote {}", dir.join("sweep.csv").display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(args: &CompareArgs) -> Result<ExitCode, Error> {
    let mut config = resolve_config(&args.common)?;
    if let Some(budgets) = &args.budget {
        config.budgets = parse_f64_list(budgets, "budget")?;
    }
    if let Some(baselines) = &args.baseline {
        config.baselines = baselines
            .split(',')
            .map(|b| BaselineKind::parse(b.trim()))
            .collect::<Result<_, _>>()?;
    }
    if args.slm_frozen {
        config.slm_frozen = true;
    }
    if args.common.print_config {
        println!("{}", config.to_json());
        return Ok(ExitCode::SUCCESS);
    }
    let rows = harness::run_compare(&config)?;
    println!("{:<12} {:<8} {:<16} agreement", "method", "budget", "measured_budget");
    for r in &rows {
        println!(
            "{:<12} {:<8} {:<16.6} {:.6}",
            r.method, r.budget_label, r.mean_budget, r.agreement
        );
    }
    if let Some(dir) = &config.out_dir {
        println!("wrote {}", dir.join("compare.csv").display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<ExitCode, Error> {
    let mut pruner = PrunerConfig::default();
    if let Some(t) = args.threshold {
        pruner.threshold = t;
    }
    if let Some(m) = args.sink {
        pruner.sink_count = m;
    }
    if let Some(k) = &args.k_rows {
        pruner.reduce_rows = parse_k_rows(k)?;
    }
    if let Some(f) = &args.frozen_layers {
        pruner.frozen_layers = parse_frozen(f)?;
    }
    let thresholds = parse_f64_list(&args.thresholds, "threshold")?;
    let analysis = harness::analyze_trace(
        &args.trace,
        &pruner,
        &thresholds,
        args.out_dir.as_deref(),
    )?;
    println!("mean budget: {:.6}", analysis.mean_budget);
    let layers: Vec<String> = analysis
        .per_layer_budgets
        .iter()
        .map(|b| format!("{b:.4}"))
        .collect();
    println!("per-layer budgets: {}", layers.join(" "));
    for (t, budget, _) in &analysis.sweep {
        println!("threshold {t:<8.4} mean budget {budget:.6}");
    }
    if let Some(dir) = &args.out_dir {
        println!("wrote {}", dir.join("budget.csv").display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(args: &OracleArgs) -> Result<ExitCode, Error> {
    let params = OracleCheckParams {
        cases: args.cases,
        max_n: args.max_n,
        enumerate_cases: args.enumerate_cases,
        enumerate_n: args.enumerate_n,
        seed: args.seed,
        verbose: args.verbose,
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let summary = harness::run_oracle_check(&params, &mut lock)?;
    if summary.total_mismatches > 0 {
        eprintln!("{} oracle mismatches", summary.total_mismatches);
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidInput(_) | Error::ShapeMismatch { .. } | Error::SequenceOverflow { .. } => 1,
        Error::Invariant(_) | Error::NonFinite(_) => 2,
        Error::Io(_) | Error::TraceFormat { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.cmd {
        Cmd::Generate(args) => cmd_generate(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Compare(args) => cmd_compare(args),
        Cmd::AnalyzeTrace(args) => cmd_analyze(args),
        Cmd::OracleCheck(args) => cmd_oracle(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
