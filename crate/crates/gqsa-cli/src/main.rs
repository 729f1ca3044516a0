//! Command-line driver for the GQSA pipeline.
//!
//! Six subcommands tie the library together: `compress` turns a seeded
//! synthetic FP model into a `.gqs` file, `tune` runs the two-stage recovery
//! (per-block latent tuning, then end-to-end scale/zero tuning), `verify`
//! re-checks a file against the dense oracle and the format contracts,
//! `bench` times the sparse GEMV engine, `inspect` summarizes footprints,
//! and `sweep` walks the sparsity / group-size ablation axes.
//!
//! FP models are never serialized; they are regenerated from `--seed`, so the
//! only binary format this tool reads or writes is `.gqs`. Every completed
//! run appends one JSON line to the manifest log.
//!
//! Exit codes: 0 success, 1 I/O or runtime failure, 2 usage error,
//! 3 verification failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gqsa::quant::{
    dequantize_group, quantize_group, unpack_codes, QuantParams, QuantizedGroup, SUPPORTED_BITS,
};
use gqsa::{
    bench_gemv, bqpo, build_gqs, compress_model, decompress, dense_gemv, e2e_oqp,
    end_to_end_mse, footprint, footprint_model, gemv_parallel, gemv_reference, group_saliency,
    make_synthetic, read_gqs_file, select_groups, serialize, write_gqs_file, CalibrationSet,
    CompressionConfig, DenseMatrix, DenseVector, Distribution, EngineConfig, GqsLayer, Strategy,
    ToyModel, TraceRow, TuneConfig, TuneReport,
};
use serde_json::{json, Map, Value};

/// Git-describe-style version string recorded in every manifest line.
const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// Offset mixed into `--seed` so the calibration stream never reuses the
/// model's random stream. `compress` and `tune` must derive it identically
/// for the regenerated FP model to match.
const CALIB_SEED_SALT: u64 = 0x5EED;

fn calib_seed(seed: u64) -> u64 {
    seed ^ CALIB_SEED_SALT
}

// --- flags ---

#[derive(Parser)]
#[command(
    name = "gqsa",
    version,
    about = "Group-sparse quantized layers: compress, tune, verify, bench, inspect, sweep"
)]
struct Cli {
    /// Worker threads for the GEMV engine (also via GQSA_THREADS).
    #[arg(long, global = true, env = "GQSA_THREADS", default_value_t = 4)]
    threads: usize,

    /// Run log; one JSON line is appended per completed run.
    #[arg(long, global = true, default_value = "gqsa_runs.jsonl")]
    manifest: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prune and quantize a seeded synthetic FP model into a .gqs file.
    Compress(CompressArgs),
    /// Two-stage recovery on a .gqs file against its regenerated FP model.
    Tune(TuneArgs),
    /// Check a .gqs file against the dense oracle and the format contracts.
    Verify(VerifyArgs),
    /// Time the sparse GEMV engine across sparsity levels and strategies.
    Bench(BenchArgs),
    /// Per-layer shapes, realized sparsity, and footprint of a .gqs file.
    Inspect(InspectArgs),
    /// Quality ablation along the sparsity and group-size axes.
    Sweep(SweepArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Compress(_) => "compress",
            Command::Tune(_) => "tune",
            Command::Verify(_) => "verify",
            Command::Bench(_) => "bench",
            Command::Inspect(_) => "inspect",
            Command::Sweep(_) => "sweep",
        }
    }
}

/// Shape and seeding of the regenerated FP model.
#[derive(Args)]
struct ModelArgs {
    /// Block output width (block 0 is rows x cols, later blocks rows x rows).
    #[arg(long, default_value_t = 128)]
    rows: usize,

    /// Model input dimension.
    #[arg(long, default_value_t = 128)]
    cols: usize,

    /// Number of linear blocks.
    #[arg(long, default_value_t = 3)]
    blocks: usize,

    /// Seed for the FP model; the calibration stream derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Calibration sample count.
    #[arg(long, default_value_t = 512)]
    calib: usize,
}

#[derive(Args)]
struct QuantArgs {
    /// Fraction of weight groups pruned, in [0, 1).
    #[arg(long, default_value_t = 0.5)]
    sparsity: f32,

    /// Code width in bits (2, 3, 4, or 8).
    #[arg(long, default_value_t = 4)]
    bits: u8,

    /// Weights per group along the row.
    #[arg(long, default_value_t = 16)]
    group_size: usize,
}

#[derive(Args)]
struct CompressArgs {
    #[command(flatten)]
    model: ModelArgs,

    #[command(flatten)]
    quant: QuantArgs,

    /// Output .gqs path.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    /// Input .gqs produced by `compress`.
    input: PathBuf,

    /// Seed the input file's FP model was generated from.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Calibration sample count.
    #[arg(long, default_value_t = 512)]
    calib: usize,

    /// Per-block latent tuning epochs.
    #[arg(long, default_value_t = 5)]
    epochs_bqpo: usize,

    /// End-to-end scale/zero tuning epochs.
    #[arg(long, default_value_t = 2)]
    epochs_e2e: usize,

    /// AdamW learning rate for both stages.
    #[arg(long, default_value_t = 1e-5)]
    lr: f32,

    /// Which recovery stages to run.
    #[arg(long, value_enum, default_value_t = StageArg::Both)]
    stage: StageArg,

    /// Output .gqs path.
    #[arg(short, long)]
    out: PathBuf,

    /// Loss trajectory CSV (default: the output path with .loss.csv).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// .gqs file to check.
    input: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 4096)]
    rows: usize,

    #[arg(long, default_value_t = 4096)]
    cols: usize,

    #[arg(long, default_value_t = 4)]
    bits: u8,

    #[arg(long, default_value_t = 16)]
    group_size: usize,

    /// Comma-separated sparsity levels to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.3, 0.4, 0.5, 0.8])]
    sparsity: Vec<f32>,

    /// Partitioning strategy, or both parallel ones.
    #[arg(long, value_enum, default_value_t = StrategyArg::Both)]
    strategy: StrategyArg,

    /// Timed repetitions per configuration.
    #[arg(long, default_value_t = 25)]
    reps: usize,

    /// Seed for the synthetic weights and input.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Write the CSV here instead of stdout.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// .gqs file to summarize.
    input: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,

    /// Fixed point for the axis not being swept (sparsity for the group-size
    /// axis, group size for the sparsity axis).
    #[command(flatten)]
    quant: QuantArgs,

    /// Which ablation axis to walk.
    #[arg(long, value_enum, default_value_t = AxisArg::Both)]
    axis: AxisArg,

    /// Also run two-stage recovery at every point.
    #[arg(long)]
    tune: bool,

    #[arg(long, default_value_t = 5)]
    epochs_bqpo: usize,

    #[arg(long, default_value_t = 2)]
    epochs_e2e: usize,

    #[arg(long, default_value_t = 1e-5)]
    lr: f32,

    /// Write the CSV here instead of stdout.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Bqpo,
    E2e,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Reference,
    #[value(name = "slicek")]
    SliceK,
    #[value(name = "streamk")]
    StreamK,
    /// Both parallel strategies.
    Both,
}

impl StrategyArg {
    fn strategies(self) -> Vec<Strategy> {
        match self {
            StrategyArg::Reference => vec![Strategy::Reference],
            StrategyArg::SliceK => vec![Strategy::SliceK],
            StrategyArg::StreamK => vec![Strategy::StreamK],
            StrategyArg::Both => vec![Strategy::SliceK, Strategy::StreamK],
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    Sparsity,
    GroupSize,
    Both,
}

// --- failures and exit codes ---

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn io(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

impl From<gqsa::Error> for Failure {
    fn from(e: gqsa::Error) -> Self {
        Failure { code: 1, message: e.to_string() }
    }
}

/// What a completed run reports into the manifest.
struct Run {
    config: Value,
    seed: Option<u64>,
    outputs: Vec<PathBuf>,
    extras: Map<String, Value>,
    exit: u8,
}

impl Run {
    fn new(config: Value) -> Self {
        Run { config, seed: None, outputs: Vec::new(), extras: Map::new(), exit: 0 }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let name = cli.command.name();
    let manifest_path = cli.manifest.clone();
    let ctx = Ctx { threads: cli.threads };

    let run = match dispatch(cli.command, &ctx) {
        Ok(run) => run,
        Err(f) => {
            eprintln!("gqsa: {}", f.message);
            return ExitCode::from(f.code);
        }
    };

    let mut line = Map::new();
    line.insert("command".into(), json!(name));
    line.insert("version".into(), json!(VERSION));
    line.insert("seed".into(), run.seed.map_or(Value::Null, |s| json!(s)));
    line.insert("config".into(), run.config);
    line.insert("wall_ms".into(), json!(started.elapsed().as_millis() as u64));
    line.insert(
        "outputs".into(),
        json!(run.outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()),
    );
    for (k, v) in run.extras {
        line.insert(k, v);
    }
    if let Err(f) = append_manifest(&manifest_path, &Value::Object(line)) {
        eprintln!("gqsa: {}", f.message);
        return ExitCode::from(f.code);
    }
    ExitCode::from(run.exit)
}

struct Ctx {
    threads: usize,
}

fn dispatch(command: Command, ctx: &Ctx) -> Result<Run, Failure> {
    if ctx.threads == 0 {
        return Err(Failure::usage("--threads must be at least 1"));
    }
    match command {
        Command::Compress(a) => cmd_compress(a, ctx),
        Command::Tune(a) => cmd_tune(a, ctx),
        Command::Verify(a) => cmd_verify(a, ctx),
        Command::Bench(a) => cmd_bench(a, ctx),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Sweep(a) => cmd_sweep(a, ctx),
    }
}

// --- shared validation and construction ---

fn check_quant_flags(q: &QuantArgs) -> Result<(), Failure> {
    if !(0.0..1.0).contains(&q.sparsity) {
        return Err(Failure::usage(format!("--sparsity {} must lie in [0, 1)", q.sparsity)));
    }
    if !SUPPORTED_BITS.contains(&q.bits) {
        return Err(Failure::usage(format!(
            "--bits {} unsupported, expected one of {SUPPORTED_BITS:?}",
            q.bits
        )));
    }
    if q.group_size == 0 {
        return Err(Failure::usage("--group-size must be positive"));
    }
    Ok(())
}

fn check_model_flags(m: &ModelArgs, group_size: usize) -> Result<(), Failure> {
    if m.rows == 0 || m.cols == 0 || m.blocks == 0 {
        return Err(Failure::usage("--rows, --cols, and --blocks must be positive"));
    }
    if m.calib == 0 {
        return Err(Failure::usage("--calib must be at least 1"));
    }
    if m.cols % group_size != 0 {
        return Err(Failure::usage(format!(
            "--cols {} is not divisible by --group-size {group_size}",
            m.cols
        )));
    }
    if m.blocks > 1 && m.rows % group_size != 0 {
        return Err(Failure::usage(format!(
            "--rows {} is not divisible by --group-size {group_size} (blocks past the first are rows x rows)",
            m.rows
        )));
    }
    Ok(())
}

fn regenerate(m: &ModelArgs) -> Result<(ToyModel, CalibrationSet), Failure> {
    let model = ToyModel::synthetic(m.cols, m.rows, m.blocks, m.seed)?;
    let calib = CalibrationSet::synthetic(m.calib, m.cols, calib_seed(m.seed))?;
    Ok((model, calib))
}

fn model_config_json(m: &ModelArgs, ctx: &Ctx) -> Map<String, Value> {
    let mut map = Map::new();
    map.insert("rows".into(), json!(m.rows));
    map.insert("cols".into(), json!(m.cols));
    map.insert("blocks".into(), json!(m.blocks));
    map.insert("seed".into(), json!(m.seed));
    map.insert("calib".into(), json!(m.calib));
    map.insert("threads".into(), json!(ctx.threads));
    map
}

fn quant_config_json(q: &QuantArgs, map: &mut Map<String, Value>) {
    map.insert("sparsity".into(), json!(q.sparsity as f64));
    map.insert("bits".into(), json!(q.bits));
    map.insert("group_size".into(), json!(q.group_size));
}

fn append_manifest(path: &Path, line: &Value) -> Result<(), Failure> {
    use std::io::Write as _;
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Failure::io(format!("opening manifest {}: {e}", path.display())))?;
    writeln!(file, "{line}")
        .map_err(|e| Failure::io(format!("writing manifest {}: {e}", path.display())))
}

/// Write a CSV to the given path, or print it when no path was given.
fn emit_csv(out: Option<&Path>, csv: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, csv)
            .map_err(|e| Failure::io(format!("writing {}: {e}", path.display()))),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn trace_csv(trace: &[TraceRow]) -> String {
    let mut csv = String::from("stage,block,epoch,batch,loss\n");
    for row in trace {
        let block = row.block.map(|b| b.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{block},{},{},{}", row.stage, row.epoch, row.batch, row.loss);
    }
    csv
}

// --- compress ---

fn cmd_compress(args: CompressArgs, ctx: &Ctx) -> Result<Run, Failure> {
    check_quant_flags(&args.quant)?;
    check_model_flags(&args.model, args.quant.group_size)?;

    let (model, calib) = regenerate(&args.model)?;
    let cfg = CompressionConfig {
        sparsity: args.quant.sparsity,
        bits: args.quant.bits,
        group_size: args.quant.group_size,
        seed: args.model.seed,
        ..Default::default()
    };
    let layers = compress_model(&model, &calib, &cfg)?;
    write_gqs_file(&args.out, &layers)?;

    for (i, layer) in layers.iter().enumerate() {
        println!(
            "block {i}: {}x{} G{} W{}, {}/{} groups kept (sparsity {:.4})",
            layer.rows,
            layer.cols,
            layer.group_size,
            layer.bits,
            layer.nnzg(),
            layer.total_groups(),
            layer.realized_sparsity()
        );
    }
    let fp = footprint_model(&layers)?;
    println!("model: {:.4} bits/weight, {:.2}x vs FP16", fp.bits_per_weight(), fp.ratio_vs_fp16());
    println!("wrote {}", args.out.display());

    let mut config = model_config_json(&args.model, ctx);
    quant_config_json(&args.quant, &mut config);
    let mut run = Run::new(Value::Object(config));
    run.seed = Some(args.model.seed);
    run.outputs.push(args.out);
    run.extras.insert("bits_per_weight".into(), json!(fp.bits_per_weight()));
    run.extras.insert("ratio_vs_fp16".into(), json!(fp.ratio_vs_fp16()));
    Ok(run)
}

// --- tune ---

fn cmd_tune(args: TuneArgs, ctx: &Ctx) -> Result<Run, Failure> {
    if args.calib == 0 {
        return Err(Failure::usage("--calib must be at least 1"));
    }
    if !(args.lr > 0.0) {
        return Err(Failure::usage("--lr must be positive"));
    }
    let layers = read_gqs_file(&args.input)?;
    if layers.is_empty() {
        return Err(Failure::usage(format!("{} holds no layers to tune", args.input.display())));
    }

    // The FP model is regenerated, not loaded: its shape comes from the file,
    // its weights from --seed.
    let width = layers[0].rows;
    let input_dim = layers[0].cols;
    for (k, layer) in layers.iter().enumerate().skip(1) {
        if layer.rows != width || layer.cols != width {
            return Err(Failure::usage(format!(
                "layer {k} is {}x{}, expected {width}x{width}; the file does not match a synthetic model",
                layer.rows, layer.cols
            )));
        }
    }
    let model = ToyModel::synthetic(input_dim, width, layers.len(), args.seed)?;
    let calib = CalibrationSet::synthetic(args.calib, input_dim, calib_seed(args.seed))?;

    let cfg = TuneConfig {
        lr: args.lr,
        epochs_bqpo: args.epochs_bqpo,
        epochs_e2e: args.epochs_e2e,
        ..Default::default()
    };

    let mut current = layers;
    let mut trace = Vec::new();
    let mut stages = Vec::new();
    if matches!(args.stage, StageArg::Bqpo | StageArg::Both) {
        let (tuned, report) = bqpo(&model, &current, &calib, &cfg)?;
        current = tuned;
        print_stage("bqpo", &report, args.epochs_bqpo);
        stages.push(stage_json("bqpo", &report));
        trace.extend(report.trace);
    }
    if matches!(args.stage, StageArg::E2e | StageArg::Both) {
        let (tuned, report) = e2e_oqp(&model, &current, &calib, &cfg)?;
        current = tuned;
        print_stage("e2e", &report, args.epochs_e2e);
        stages.push(stage_json("e2e", &report));
        trace.extend(report.trace);
    }

    write_gqs_file(&args.out, &current)?;
    let loss_csv = args.loss_csv.unwrap_or_else(|| args.out.with_extension("loss.csv"));
    fs::write(&loss_csv, trace_csv(&trace))
        .map_err(|e| Failure::io(format!("writing {}: {e}", loss_csv.display())))?;
    println!("wrote {} and {}", args.out.display(), loss_csv.display());

    let config = json!({
        "input": args.input.display().to_string(),
        "seed": args.seed,
        "calib": args.calib,
        "epochs_bqpo": args.epochs_bqpo,
        "epochs_e2e": args.epochs_e2e,
        "lr": args.lr as f64,
        "stage": match args.stage { StageArg::Bqpo => "bqpo", StageArg::E2e => "e2e", StageArg::Both => "both" },
        "threads": ctx.threads,
    });
    let mut run = Run::new(config);
    run.seed = Some(args.seed);
    run.outputs.push(args.out);
    run.outputs.push(loss_csv);
    run.extras.insert("stages".into(), Value::Array(stages));
    Ok(run)
}

fn print_stage(name: &str, report: &TuneReport, epochs: usize) {
    let clamps = if report.scale_clamp_warnings > 0 {
        format!(", {} scale clamps", report.scale_clamp_warnings)
    } else {
        String::new()
    };
    println!(
        "{name}: end-to-end MSE {:.4e} -> {:.4e} ({epochs} epochs{clamps})",
        report.initial_mse, report.final_mse
    );
}

fn stage_json(name: &str, report: &TuneReport) -> Value {
    json!({
        "stage": name,
        "initial_mse": report.initial_mse,
        "final_mse": report.final_mse,
        "scale_clamp_warnings": report.scale_clamp_warnings,
        "wall_ms": report.wall_ms,
    })
}

// --- verify ---

fn cmd_verify(args: VerifyArgs, ctx: &Ctx) -> Result<Run, Failure> {
    let bytes = fs::read(&args.input)
        .map_err(|e| Failure::io(format!("reading {}: {e}", args.input.display())))?;

    let mut checks = 0usize;
    let mut failures: Vec<String> = Vec::new();
    let mut check = |name: String, ok: bool, detail: String| {
        checks += 1;
        if ok {
            println!("ok   {name}");
        } else {
            println!("FAIL {name}: {detail}");
            failures.push(name);
        }
    };

    match gqsa::deserialize(&bytes) {
        Err(e) => check("parse".into(), false, e.to_string()),
        Ok(layers) => {
            check(format!("parse ({} layers)", layers.len()), true, String::new());
            match serialize(&layers) {
                Ok(again) => check(
                    "format round trip".into(),
                    again == bytes,
                    "re-serialization differs from the file bytes".into(),
                ),
                Err(e) => check("format round trip".into(), false, e.to_string()),
            }
            for (i, layer) in layers.iter().enumerate() {
                match layer.validate() {
                    Ok(()) => check(format!("layer {i} structure"), true, String::new()),
                    Err(e) => {
                        check(format!("layer {i} structure"), false, e.to_string());
                        continue;
                    }
                }
                match quant_fixed_point(layer) {
                    Ok(()) => check(format!("layer {i} quantizer fixed point"), true, String::new()),
                    Err(d) => check(format!("layer {i} quantizer fixed point"), false, d),
                }
                match engine_matches_dense(layer, i as u64, ctx.threads) {
                    Ok(()) => check(format!("layer {i} engine vs dense oracle"), true, String::new()),
                    Err(d) => check(format!("layer {i} engine vs dense oracle"), false, d),
                }
            }
        }
    }

    let passed = failures.is_empty();
    if passed {
        println!("verify: PASS ({checks} checks)");
    } else {
        println!("verify: FAIL ({} of {checks} checks failed)", failures.len());
    }

    let mut run = Run::new(json!({
        "input": args.input.display().to_string(),
        "threads": ctx.threads,
    }));
    run.extras.insert("status".into(), json!(if passed { "pass" } else { "fail" }));
    run.extras.insert("checks".into(), json!(checks));
    run.extras.insert("failures".into(), json!(failures));
    run.exit = if passed { 0 } else { 3 };
    Ok(run)
}

/// Dequantize, requantize with the stored params, and dequantize again: the
/// stored grid must be a fixed point of the quantizer within s/2 + 1e-6.
fn quant_fixed_point(layer: &GqsLayer) -> Result<(), String> {
    let g = layer.group_size;
    let codes = unpack_codes(&layer.packed_codes, layer.nnzg() * g, layer.bits)
        .map_err(|e| e.to_string())?;
    for slot in 0..layer.nnzg() {
        let params = QuantParams {
            scale: layer.scales[slot],
            zero: layer.zeros[slot],
            bits: layer.bits,
        };
        let stored = QuantizedGroup { codes: codes[slot * g..(slot + 1) * g].to_vec(), params };
        let w = dequantize_group(&stored);
        let again = quantize_group(&w, &params).map_err(|e| e.to_string())?;
        let w2 = dequantize_group(&again);
        let bound = params.scale / 2.0 + 1e-6;
        for (i, (a, b)) in w.iter().zip(&w2).enumerate() {
            if (a - b).abs() > bound {
                return Err(format!(
                    "slot {slot} weight {i}: {a} requantizes to {b}, off by more than {bound}"
                ));
            }
        }
    }
    Ok(())
}

/// Reference and both parallel strategies must match dense_gemv(decompress)
/// on a seeded input within 1e-4 relative.
fn engine_matches_dense(layer: &GqsLayer, seed: u64, threads: usize) -> Result<(), String> {
    let x = seeded_input(layer.cols, 0xEC0E ^ seed);
    let dense = decompress(layer).map_err(|e| e.to_string())?;
    let mut want = dense_gemv(&dense, &x).map_err(|e| e.to_string())?;
    if let Some(bias) = &layer.bias {
        for (w, b) in want.data.iter_mut().zip(&bias.data) {
            *w += b;
        }
    }
    let tol = 1e-4 * want.data.iter().fold(1.0f32, |m, v| m.max(v.abs()));

    let compare = |name: &str, got: &DenseVector| -> Result<(), String> {
        for (r, (a, b)) in got.data.iter().zip(&want.data).enumerate() {
            if (a - b).abs() > tol {
                return Err(format!("{name} row {r}: {a} vs dense {b}"));
            }
        }
        Ok(())
    };

    compare("reference", &gemv_reference(layer, &x).map_err(|e| e.to_string())?)?;
    for strategy in [Strategy::SliceK, Strategy::StreamK] {
        let cfg = EngineConfig { workers: threads, strategy, ..Default::default() };
        let (got, _) = gemv_parallel(layer, &x, &cfg).map_err(|e| e.to_string())?;
        compare(&strategy.to_string(), &got)?;
    }
    Ok(())
}

fn seeded_input(dim: usize, seed: u64) -> DenseVector {
    let m = make_synthetic(1, dim, seed, Distribution::Gaussian)
        .expect("synthetic input for a positive dimension");
    DenseVector::from_vec(m.data)
}

// --- bench ---

fn cmd_bench(args: BenchArgs, ctx: &Ctx) -> Result<Run, Failure> {
    if args.rows == 0 || args.cols == 0 {
        return Err(Failure::usage("--rows and --cols must be positive"));
    }
    if !SUPPORTED_BITS.contains(&args.bits) {
        return Err(Failure::usage(format!(
            "--bits {} unsupported, expected one of {SUPPORTED_BITS:?}",
            args.bits
        )));
    }
    if args.group_size == 0 || args.cols % args.group_size != 0 {
        return Err(Failure::usage(format!(
            "--cols {} is not divisible by --group-size {}",
            args.cols, args.group_size
        )));
    }
    if args.reps == 0 {
        return Err(Failure::usage("--reps must be at least 1"));
    }
    if args.sparsity.is_empty() {
        return Err(Failure::usage("--sparsity needs at least one level"));
    }
    for &s in &args.sparsity {
        if !(0.0..1.0).contains(&s) {
            return Err(Failure::usage(format!("sparsity {s} must lie in [0, 1)")));
        }
    }

    // Group scores are squared magnitudes here: the bench path skips Hessian
    // calibration, which at these dimensions would dwarf the timing runs.
    let weights = make_synthetic(args.rows, args.cols, args.seed, Distribution::Gaussian)?;
    let magnitude = DenseMatrix::from_vec(
        args.rows,
        args.cols,
        weights.data.iter().map(|v| v * v).collect(),
    )?;
    let per_group = group_saliency(&magnitude, args.group_size)?;
    let x = seeded_input(args.cols, args.seed ^ 0xBE);

    let mut csv = String::from(
        "strategy,workers,sparsity,bits,group_size,median_ns,p10_ns,p90_ns,imbalance,straggler_ratio,bits_per_weight,ratio_vs_fp16\n",
    );
    for &sparsity in &args.sparsity {
        eprintln!(
            "bench: building {}x{} W{} G{} layer at sparsity {sparsity}",
            args.rows, args.cols, args.bits, args.group_size
        );
        let keep = select_groups(&per_group, sparsity)?;
        let layer = build_gqs(&weights, &keep, args.group_size, args.bits)?;
        let fp = footprint(&layer)?;
        for strategy in args.strategy.strategies() {
            let cfg = EngineConfig { workers: ctx.threads, strategy, ..Default::default() };
            let report = bench_gemv(&layer, &x, &cfg, args.reps)?;
            let _ = writeln!(
                csv,
                "{strategy},{},{sparsity},{},{},{},{},{},{},{},{},{}",
                ctx.threads,
                args.bits,
                args.group_size,
                report.median_ns,
                report.p10_ns,
                report.p90_ns,
                report.stats.imbalance,
                report.stats.straggler_ratio,
                fp.bits_per_weight(),
                fp.ratio_vs_fp16(),
            );
        }
    }
    emit_csv(args.out.as_deref(), &csv)?;

    let config = json!({
        "rows": args.rows,
        "cols": args.cols,
        "bits": args.bits,
        "group_size": args.group_size,
        "sparsity": args.sparsity.iter().map(|&s| s as f64).collect::<Vec<_>>(),
        "strategy": args.strategy.strategies().iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        "reps": args.reps,
        "threads": ctx.threads,
    });
    let mut run = Run::new(config);
    run.seed = Some(args.seed);
    if let Some(out) = args.out {
        run.outputs.push(out);
    }
    Ok(run)
}

// --- inspect ---

fn cmd_inspect(args: InspectArgs) -> Result<Run, Failure> {
    let layers = read_gqs_file(&args.input)?;

    println!(
        "{:>5} {:>6} {:>6} {:>4} {:>4} {:>8} {:>9} {:>8} {:>8}",
        "layer", "rows", "cols", "G", "bits", "nnzg", "sparsity", "bits/wt", "vs FP16"
    );
    for (i, layer) in layers.iter().enumerate() {
        let fp = footprint(layer)?;
        println!(
            "{i:>5} {:>6} {:>6} {:>4} {:>4} {:>8} {:>9.4} {:>8.4} {:>8.2}",
            layer.rows,
            layer.cols,
            layer.group_size,
            layer.bits,
            layer.nnzg(),
            layer.realized_sparsity(),
            fp.bits_per_weight(),
            fp.ratio_vs_fp16(),
        );
    }
    if !layers.is_empty() {
        let fp = footprint_model(&layers)?;
        println!(
            "model: {:.4} bits/weight, {:.2}x vs FP16, payload {} bits",
            fp.bits_per_weight(),
            fp.ratio_vs_fp16(),
            fp.payload_bits
        );
    }

    Ok(Run::new(json!({ "input": args.input.display().to_string() })))
}

// --- sweep ---

fn cmd_sweep(args: SweepArgs, ctx: &Ctx) -> Result<Run, Failure> {
    check_quant_flags(&args.quant)?;
    check_model_flags(&args.model, args.quant.group_size)?;
    if !(args.lr > 0.0) {
        return Err(Failure::usage("--lr must be positive"));
    }

    const SPARSITY_AXIS: [f32; 7] = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
    const GROUP_AXIS: [usize; 5] = [8, 16, 32, 64, 128];

    let (model, calib) = regenerate(&args.model)?;
    let tune_cfg = TuneConfig {
        lr: args.lr,
        epochs_bqpo: args.epochs_bqpo,
        epochs_e2e: args.epochs_e2e,
        ..Default::default()
    };

    let mut points: Vec<(&'static str, f32, usize)> = Vec::new();
    if matches!(args.axis, AxisArg::Sparsity | AxisArg::Both) {
        for &s in &SPARSITY_AXIS {
            points.push(("sparsity", s, args.quant.group_size));
        }
    }
    if matches!(args.axis, AxisArg::GroupSize | AxisArg::Both) {
        for &g in &GROUP_AXIS {
            let divides = args.model.cols % g == 0 && (args.model.blocks == 1 || args.model.rows % g == 0);
            if divides {
                points.push(("group-size", args.quant.sparsity, g));
            } else {
                eprintln!("sweep: skipping group size {g}: model dims are not divisible");
            }
        }
    }

    let mut csv = String::from("axis,sparsity,group_size,bits,seed,untuned_mse,tuned_mse\n");
    for (axis, sparsity, group_size) in points {
        eprintln!("sweep: {axis} axis, sparsity {sparsity}, group size {group_size}");
        let cfg = CompressionConfig {
            sparsity,
            bits: args.quant.bits,
            group_size,
            seed: args.model.seed,
            ..Default::default()
        };
        let layers = compress_model(&model, &calib, &cfg)?;
        let untuned = end_to_end_mse(&model, &layers, &calib)?;
        let tuned = if args.tune {
            let (after_bqpo, _) = bqpo(&model, &layers, &calib, &tune_cfg)?;
            let (after_e2e, report) = e2e_oqp(&model, &after_bqpo, &calib, &tune_cfg)?;
            drop(after_e2e);
            report.final_mse.to_string()
        } else {
            String::new()
        };
        let _ = writeln!(
            csv,
            "{axis},{sparsity},{group_size},{},{},{untuned},{tuned}",
            args.quant.bits, args.model.seed
        );
    }
    emit_csv(args.out.as_deref(), &csv)?;

    let mut config = model_config_json(&args.model, ctx);
    quant_config_json(&args.quant, &mut config);
    config.insert(
        "axis".into(),
        json!(match args.axis {
            AxisArg::Sparsity => "sparsity",
            AxisArg::GroupSize => "group-size",
            AxisArg::Both => "both",
        }),
    );
    config.insert("tune".into(), json!(args.tune));
    let mut run = Run::new(Value::Object(config));
    run.seed = Some(args.model.seed);
    if let Some(out) = args.out {
        run.outputs.push(out);
    }
    Ok(run)
}
