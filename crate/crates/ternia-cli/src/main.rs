//! `ternia` — command-line front end for the ternary quantization toolkit.
//!
//! Subcommands: `quantize` (rounding expansion of a float model), `eval`
//! (accuracy of a float or quantized model on a CSV dataset), `ptq`
//! (learned-rounding calibration), `qat` (quantized training from scratch),
//! `theory` (Gaussian-prior threshold analysis), and `analyze` (per-layer
//! error table between a float model and its quantized container).
//!
//! Every run prints one JSON report to standard output and writes its file
//! artifacts only after all computation has succeeded, so a failing run
//! leaves no partial outputs. All randomness derives from `--seed`; with a
//! fixed seed, reports and artifacts are byte-identical across runs. The
//! `TERNIA_THREADS` environment variable caps the worker pool (0 = auto).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use ternia_core::dataset::Dataset;
use ternia_core::io::{self, AnyModel, QuantizedLayer, QuantizedModel};
use ternia_core::ptq::{ptq_quantize_model, PtqConfig};
use ternia_core::qat::{self, QatConfig, QuantHook};
use ternia_core::quant::Operator;
use ternia_core::tensor::{self, Layer, ModelGraph};

/// Schema tag for the report printed to standard output.
const REPORT_SCHEMA: &str = "ternia-report/v1";

#[derive(Parser)]
#[command(name = "ternia", version, about = "Ternary quantization toolkit")]
struct Cli {
    /// Base seed for every stochastic path.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a float model into a ternary expansion container.
    Quantize(QuantizeArgs),
    /// Evaluate a float or quantized model on a CSV dataset.
    Eval(EvalArgs),
    /// Calibrate a quantized model with learned rounding.
    Ptq(PtqArgs),
    /// Train a quantized model from scratch with straight-through gradients.
    Qat(QatArgs),
    /// Analyze the Gaussian-prior threshold optimum.
    Theory(TheoryArgs),
    /// Tabulate per-layer quantization error against the float model.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Serialize)]
struct QuantizeArgs {
    /// Float model manifest.
    #[arg(long)]
    model: PathBuf,
    /// Rounding operator: naive, tquant, or mquant.
    #[arg(long, default_value = "tquant")]
    op: String,
    /// Number of expansion terms (must be at least 1).
    #[arg(long, default_value_t = 1)]
    order: usize,
    /// Output path for the quantized container manifest.
    #[arg(long)]
    out: PathBuf,
    /// Output path for the per-layer residual table
    /// (default: `<out>.residuals.csv`).
    #[arg(long)]
    residual_csv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Model manifest, float or quantized.
    #[arg(long)]
    model: PathBuf,
    /// Dataset CSV (feature columns, then an integer label).
    #[arg(long)]
    data: PathBuf,
    /// Optional path to also write the report to.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct PtqArgs {
    /// Float model manifest.
    #[arg(long)]
    model: PathBuf,
    /// Calibration dataset CSV.
    #[arg(long)]
    calib: PathBuf,
    /// Rounding operator: naive, tquant, or mquant.
    #[arg(long, default_value = "tquant")]
    op: String,
    /// Rounding-fit iterations per layer.
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    /// Output path for the calibrated container manifest.
    #[arg(long)]
    out: PathBuf,
    /// Output path for the per-layer loss trajectory
    /// (default: `<out>.trajectory.csv`).
    #[arg(long)]
    trajectory_csv: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct QatArgs {
    /// Architecture spec, e.g. `mlp` or `mlp:16,16`.
    #[arg(long, default_value = "mlp:16,16")]
    arch: String,
    /// Training dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset CSV.
    #[arg(long)]
    test: PathBuf,
    /// Training epochs.
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Number of seeds; runs use `--seed`, `--seed + 1`, and so on.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Weight bit-width (ternary weights: 2).
    #[arg(long, default_value_t = 2)]
    wbits: u8,
    /// Activation bit-width (2, 4, 8, or 32 for full precision).
    #[arg(long, default_value_t = 4)]
    abits: u8,
    /// Rounding operator: naive, tquant, or mquant.
    #[arg(long, default_value = "tquant")]
    op: String,
    /// Learning rate (cosine-decayed).
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    /// Minibatch size.
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Output path for the summary report.
    #[arg(long)]
    out: PathBuf,
    /// Optional path for the last seed's quantized model container.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TheoryArgs {
    /// Support bound (row extremum) the analysis runs at.
    #[arg(long, default_value_t = 3.0)]
    lambda: f64,
    /// Monte-Carlo sample count for the cross-check estimate.
    #[arg(long, default_value_t = 200_000)]
    mc_samples: u64,
    /// Output path for the analysis report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct AnalyzeArgs {
    /// Float model manifest.
    #[arg(long)]
    model: PathBuf,
    /// Quantized container manifest built from that model.
    #[arg(long)]
    quantized: PathBuf,
    /// Output path for the per-layer error table.
    #[arg(long)]
    out: PathBuf,
}

/// Machine-readable result envelope printed to standard output.
#[derive(Serialize)]
struct Report {
    schema: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    config: serde_json::Value,
    metrics: BTreeMap<String, serde_json::Value>,
}

impl Report {
    fn new(command: &'static str, seed: u64, config: impl Serialize) -> Self {
        Report {
            schema: REPORT_SCHEMA,
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config: serde_json::to_value(config).expect("argument structs serialize"),
            metrics: BTreeMap::new(),
        }
    }

    fn insert(&mut self, key: &str, value: impl Serialize) {
        self.metrics.insert(
            key.to_string(),
            serde_json::to_value(value).expect("metric values serialize"),
        );
    }
}

/// Failures split by exit code: usage errors exit 2, runtime errors exit 1.
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<ternia_core::error::Error> for CliError {
    fn from(e: ternia_core::error::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    let report = match &cli.command {
        Command::Quantize(args) => run_quantize(cli.seed, args),
        Command::Eval(args) => run_eval(cli.seed, args),
        Command::Ptq(args) => run_ptq(cli.seed, args),
        Command::Qat(args) => run_qat(cli.seed, args),
        Command::Theory(args) => run_theory(cli.seed, args),
        Command::Analyze(args) => run_analyze(cli.seed, args),
    };
    match report {
        Ok(report) => {
            println!("{}", to_pretty_json(&report));
            ExitCode::SUCCESS
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Apply the `TERNIA_THREADS` cap before any parallel work starts.
fn init_thread_pool() {
    if let Ok(raw) = std::env::var("TERNIA_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn parse_op(raw: &str) -> CliResult<Operator> {
    raw.parse::<Operator>()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn to_pretty_json(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize")
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("write {path:?}: {e}")))
}

/// Default companion path: `<out>.<suffix>` next to the main artifact.
fn companion(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    out.with_file_name(name)
}

// ---------------------------------------------------------------------------
// quantize
// ---------------------------------------------------------------------------

fn run_quantize(seed: u64, args: &QuantizeArgs) -> CliResult<Report> {
    if args.order == 0 {
        return Err(CliError::Usage(
            "expansion order must be at least 1".into(),
        ));
    }
    let op = parse_op(&args.op)?;
    let graph = io::load_model(&args.model)?;
    let quantized = io::quantize_model(&graph, op, args.order)?;

    // Per-layer residual table: peak and mean-square residual after each
    // expansion term, replayed exactly as the container reconstructs.
    let mut csv = String::from("layer,term,residual_max,residual_mse\n");
    let mut worst_final = 0.0f64;
    let mut quantized_layers = 0usize;
    for (i, (float_layer, q_layer)) in graph.layers.iter().zip(&quantized.layers).enumerate() {
        let (weights, stack) = match (float_layer, q_layer) {
            (Layer::Dense { weights, .. }, QuantizedLayer::Dense { stack, .. }) => (weights, stack),
            (Layer::Conv2d { weights, .. }, QuantizedLayer::Conv2d { stack, .. }) => {
                (weights, stack)
            }
            _ => continue,
        };
        quantized_layers += 1;
        let name = tensor::layer_name(i, float_layer);
        let mut residual: Vec<f32> = weights.as_slice().to_vec();
        for (k, term) in stack.terms().iter().enumerate() {
            let deq = term.dequantize();
            for (r, &d) in residual.iter_mut().zip(deq.as_slice()) {
                *r -= d;
            }
            let max = residual.iter().fold(0.0f64, |m, &v| m.max(f64::from(v.abs())));
            let mse = residual.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>()
                / residual.len() as f64;
            let _ = writeln!(csv, "{name},{},{max},{mse}", k + 1);
            if k + 1 == stack.terms().len() {
                worst_final = worst_final.max(max);
            }
        }
    }

    let csv_path = args
        .residual_csv
        .clone()
        .unwrap_or_else(|| companion(&args.out, "residuals.csv"));
    io::save_quantized(&quantized, &args.out)?;
    write_text(&csv_path, &csv)?;

    let mut report = Report::new("quantize", seed, args);
    report.insert("operator", op.to_string());
    report.insert("order", args.order);
    report.insert("layers_quantized", quantized_layers);
    report.insert("worst_final_residual_max", worst_final);
    report.insert("container", args.out.display().to_string());
    report.insert("residual_csv", csv_path.display().to_string());
    Ok(report)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn run_eval(seed: u64, args: &EvalArgs) -> CliResult<Report> {
    let data = Dataset::load_csv(&args.data)?;
    let (logits, kind) = match io::load_any(&args.model)? {
        AnyModel::Float(graph) => (graph.forward(&data.features)?, "float"),
        AnyModel::Quantized(q) => (q.forward(&data.features)?, "quantized"),
    };
    let accuracy = tensor::accuracy(&logits, &data.labels)?;

    let mut report = Report::new("eval", seed, args);
    report.insert("model_kind", kind);
    report.insert("samples", data.len());
    report.insert("classes", data.num_classes);
    report.insert("accuracy", f64::from(accuracy));
    if let Some(out) = &args.out {
        write_text(out, &format!("{}\n", to_pretty_json(&report)))?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// ptq
// ---------------------------------------------------------------------------

fn run_ptq(seed: u64, args: &PtqArgs) -> CliResult<Report> {
    let op = parse_op(&args.op)?;
    let graph = io::load_model(&args.model)?;
    let calib = Dataset::load_csv(&args.calib)?;
    let cfg = PtqConfig {
        iterations: args.iters,
        seed,
        ..PtqConfig::default()
    };
    let (quantized, trajectories) = ptq_quantize_model(&graph, &calib, op, &cfg)?;

    let mut csv = String::from("layer,iteration,reconstruction,penalty,beta,reg_weight\n");
    let mut losses = BTreeMap::new();
    for t in &trajectories {
        for s in &t.samples {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                t.layer, s.iteration, s.reconstruction, s.penalty, s.beta, s.reg_weight
            );
        }
        losses.insert(
            t.layer.clone(),
            serde_json::json!({
                "nearest_loss": t.nearest_loss,
                "fitted_loss": t.fitted_loss,
            }),
        );
    }

    let csv_path = args
        .trajectory_csv
        .clone()
        .unwrap_or_else(|| companion(&args.out, "trajectory.csv"));
    io::save_quantized(&quantized, &args.out)?;
    write_text(&csv_path, &csv)?;

    let mut report = Report::new("ptq", seed, args);
    report.insert("operator", op.to_string());
    report.insert("iterations", args.iters);
    report.insert("calibration_samples", calib.len());
    report.insert("layer_losses", losses);
    report.insert("container", args.out.display().to_string());
    report.insert("trajectory_csv", csv_path.display().to_string());
    Ok(report)
}

// ---------------------------------------------------------------------------
// qat
// ---------------------------------------------------------------------------

fn run_qat(seed: u64, args: &QatArgs) -> CliResult<Report> {
    let op = parse_op(&args.op)?;
    if args.seeds == 0 {
        return Err(CliError::Usage("need at least one seed".into()));
    }
    let train = Dataset::load_csv(&args.data)?;
    let test = Dataset::load_csv(&args.test)?;
    let cfg = QatConfig {
        arch: args.arch.clone(),
        epochs: args.epochs,
        learning_rate: args.lr,
        batch_size: args.batch_size,
        weight_bits: args.wbits,
        act_bits: args.abits,
        hook: QuantHook::Op(op),
        seeds: (0..args.seeds as u64).map(|i| seed + i).collect(),
        ..QatConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (summary, last) = qat::ste_train(&train, &test, &cfg)?;

    let mut report = Report::new("qat", seed, args);
    report.insert("operator", op.to_string());
    report.insert("mean_accuracy", summary.mean);
    report.insert("std_accuracy", summary.std);
    report.insert("per_seed", &summary.per_seed);
    if let Some(model_out) = &args.model_out {
        let exported = qat::export_quantized(&last.mlp, op, args.abits, &last.act_ranges)?;
        io::save_quantized(&exported, model_out)?;
        report.insert("container", model_out.display().to_string());
    }
    write_text(&args.out, &format!("{}\n", to_pretty_json(&report)))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// theory
// ---------------------------------------------------------------------------

fn run_theory(seed: u64, args: &TheoryArgs) -> CliResult<Report> {
    let analysis =
        ternia_core::gauss::TheoryReport::compute(args.lambda, args.mc_samples, seed)?;
    write_text(&args.out, &format!("{}\n", to_pretty_json(&analysis)))?;

    let mut report = Report::new("theory", seed, args);
    report.insert("analysis", &analysis);
    report.insert("report_path", args.out.display().to_string());
    Ok(report)
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

fn run_analyze(seed: u64, args: &AnalyzeArgs) -> CliResult<Report> {
    let graph = io::load_model(&args.model)?;
    let quantized = io::load_quantized(&args.quantized)?;
    let csv = analyze_csv(&graph, &quantized)?;

    write_text(&args.out, &csv.table)?;
    let mut report = Report::new("analyze", seed, args);
    report.insert("layers_compared", csv.layers);
    report.insert("worst_max_abs_error", csv.worst_max);
    report.insert("zero_code_fraction", csv.zero_fraction);
    report.insert("table", args.out.display().to_string());
    Ok(report)
}

struct AnalyzeTable {
    table: String,
    layers: usize,
    worst_max: f64,
    zero_fraction: f64,
}

/// Per-layer error table between a float model and its quantized container:
/// peak reconstruction error, mean squared error, and ternary code counts.
fn analyze_csv(graph: &ModelGraph, quantized: &QuantizedModel) -> CliResult<AnalyzeTable> {
    if graph.layers.len() != quantized.layers.len() {
        return Err(CliError::Runtime(format!(
            "layer mismatch: float model has {} layers, container has {}",
            graph.layers.len(),
            quantized.layers.len()
        )));
    }
    let mut table = String::from("layer,max_abs_error,mse,count_neg,count_zero,count_pos\n");
    let mut layers = 0usize;
    let mut worst_max = 0.0f64;
    let (mut total_zero, mut total_codes) = (0usize, 0usize);
    for (i, (float_layer, q_layer)) in graph.layers.iter().zip(&quantized.layers).enumerate() {
        let name = tensor::layer_name(i, float_layer);
        let (weights, stack) = match (float_layer, q_layer) {
            (Layer::Dense { weights, .. }, QuantizedLayer::Dense { stack, .. }) => (weights, stack),
            (Layer::Conv2d { weights, .. }, QuantizedLayer::Conv2d { stack, .. }) => {
                (weights, stack)
            }
            (float_layer, QuantizedLayer::Passthrough(passed)) => {
                if std::mem::discriminant(float_layer) != std::mem::discriminant(passed) {
                    return Err(CliError::Runtime(format!(
                        "layer mismatch at {name}: float {float_layer:?} vs passthrough {passed:?}"
                    )));
                }
                continue;
            }
            _ => {
                return Err(CliError::Runtime(format!(
                    "layer mismatch at {name}: float and quantized kinds differ"
                )));
            }
        };
        if weights.shape() != stack.shape() {
            return Err(CliError::Runtime(format!(
                "layer mismatch at {name}: weight shape {:?} vs container shape {:?}",
                weights.shape(),
                stack.shape()
            )));
        }
        let deq = stack.dequantize();
        let (mut max, mut sq) = (0.0f64, 0.0f64);
        for (&w, &d) in weights.as_slice().iter().zip(deq.as_slice()) {
            let e = f64::from(w) - f64::from(d);
            max = max.max(e.abs());
            sq += e * e;
        }
        let mse = sq / weights.as_slice().len() as f64;
        let (mut neg, mut zero, mut pos) = (0usize, 0usize, 0usize);
        for term in stack.terms() {
            let (n, z, p) = term.histogram();
            neg += n;
            zero += z;
            pos += p;
        }
        let _ = writeln!(table, "{name},{max},{mse},{neg},{zero},{pos}");
        layers += 1;
        worst_max = worst_max.max(max);
        total_zero += zero;
        total_codes += neg + zero + pos;
    }
    let zero_fraction = if total_codes == 0 {
        0.0
    } else {
        total_zero as f64 / total_codes as f64
    };
    Ok(AnalyzeTable {
        table,
        layers,
        worst_max,
        zero_fraction,
    })
}
