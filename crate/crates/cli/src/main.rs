//! `cilab`: data generation, simulation, training, evaluation and rendering.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use cilab_core::dataset::{self, DatasetMeta, SamplePair, INIT_AMP};
use cilab_core::evaluation::{self, render_triptych};
use cilab_core::field_io::{read_npy, write_npy};
use cilab_core::physics_losses::lyapunov_energy;
use cilab_core::training::{self, load_generator, Predictor, TrainConfig};
use cilab_core::{simulate_trajectory, Field, PdeParams};

#[derive(Parser)]
#[command(name = "cilab", version, about = "Inverse Chafee–Infante laboratory")]
struct Cli {
    /// Worker threads for parallel kernels (default: all cores).
    #[arg(long, global = true, env = "CI_LAB_THREADS")]
    threads: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of (late-time, initial) field pairs.
    Generate(GenerateArgs),
    /// Step a field forward and write snapshots as .npy files.
    Simulate(SimulateArgs),
    /// Print the Lyapunov energy of a field.
    Energy(EnergyArgs),
    /// Train the generator/critic pair.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Render a source | generated | target triptych for one sample.
    Render(RenderArgs),
}

#[derive(Args)]
struct Overrides {
    /// Override a config entry, e.g. `--set pde.kappa=4.7` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON generation config; flags and --set take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset path; the metadata sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Dataset seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of pairs.
    #[arg(long)]
    samples: Option<u64>,
    /// Grid side n.
    #[arg(long)]
    grid: Option<usize>,
    /// Euler steps between initial and late-time field.
    #[arg(long)]
    steps: Option<u32>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct FieldInput {
    /// A .npy field or a .cip dataset.
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    /// Record index when reading a dataset.
    #[arg(long, default_value_t = 0)]
    index: u64,
    /// Which field of a dataset record to read.
    #[arg(long, value_enum, default_value_t = Which::Tar)]
    which: Which,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Which {
    Src,
    Tar,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    input: FieldInput,
    /// Number of Euler steps.
    #[arg(long, default_value_t = PdeParams::N_STEPS as usize)]
    steps: usize,
    /// Snapshot interval in steps.
    #[arg(long, default_value_t = 1)]
    record_every: usize,
    /// Output directory for step_NNNNNN.npy snapshots.
    #[arg(long)]
    out: PathBuf,
    /// JSON PDE parameters (gamma, kappa, dt); defaults to the dataset's or the standard set.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EnergyArgs {
    #[command(flatten)]
    input: FieldInput,
    /// JSON PDE parameters (gamma, kappa, dt); defaults to the dataset's or the standard set.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; --seed, --deterministic and --set take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset.
    #[arg(long)]
    train_data: PathBuf,
    /// Validation dataset (defaults to the training data).
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Directory for checkpoints, train.log and report.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Seed for initialisation, sampling and the penalty interpolation.
    #[arg(long)]
    seed: Option<u64>,
    /// Reproducible run (the default; accepted for explicitness).
    #[arg(long)]
    deterministic: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file (e.g. best.ckpt).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test dataset.
    #[arg(long)]
    data: PathBuf,
    /// JSON report path.
    #[arg(long)]
    report: PathBuf,
    /// Optional per-sample `index,mae` CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Render triptychs for the first N samples.
    #[arg(long, default_value_t = 0, requires = "out_dir")]
    triptychs: u64,
    /// Directory for triptych images.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Dataset to read the record from.
    #[arg(long)]
    data: PathBuf,
    /// Record index.
    #[arg(long, default_value_t = 0)]
    index: u64,
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
}

/// Usage problems found after argument parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenerateConfig {
    grid_n: usize,
    n_samples: u64,
    seed: u64,
    init_amp: f64,
    /// Defaults to 1 / init_amp.
    scale: Option<f64>,
    pde: PhysicsConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { grid_n: 128, n_samples: 1000, seed: 0, init_amp: INIT_AMP, scale: None, pde: PhysicsConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PhysicsConfig {
    gamma: f64,
    kappa: f64,
    dt: f64,
    n_steps: u32,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self { gamma: PdeParams::GAMMA, kappa: PdeParams::KAPPA, dt: PdeParams::DT, n_steps: PdeParams::N_STEPS }
    }
}

impl PhysicsConfig {
    fn from_params(p: &PdeParams) -> Self {
        Self { gamma: p.gamma(), kappa: p.kappa(), dt: p.dt(), n_steps: p.n_steps() }
    }

    fn params(&self, grid_n: usize) -> cilab_core::Result<PdeParams> {
        PdeParams::new(self.gamma, self.kappa, self.dt, self.n_steps, grid_n, 0.0)
    }
}

/// Sets `value` at a dotted path that must already exist in `doc`.
fn apply_override(doc: &mut Value, key: &str, value: &str) -> anyhow::Result<()> {
    let mut node = doc;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            _ => None,
        }
        .ok_or_else(|| usage(format!("unknown config key `{key}`")))?;
    }
    *node = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok(())
}

/// Defaults, then the config file, then `--set` overrides.
fn layered_config<T: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
    overrides: &Overrides,
) -> anyhow::Result<T> {
    let mut doc = serde_json::to_value(T::default())?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let from_file: T = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        doc = serde_json::to_value(from_file)?;
    }
    for kv in &overrides.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        apply_override(&mut doc, k.trim(), v.trim())?;
    }
    serde_json::from_value(doc).map_err(|e| usage(format!("invalid override: {e}")))
}

fn status(pairs: &[(&str, String)]) {
    let mut line = String::from("status=ok");
    for (k, v) in pairs {
        line.push_str(&format!(" {k}={v}"));
    }
    println!("{line}");
}

fn is_dataset(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()) != Some("npy")
}

/// The field to work on and the PDE parameters that go with it.
fn load_field(input: &FieldInput, config: Option<&Path>, overrides: &Overrides) -> anyhow::Result<(Field, PdeParams)> {
    let (field, base) = if is_dataset(&input.input) {
        let (meta, pairs) = dataset::load_indices(&input.input, &[input.index])?;
        let p = pairs.into_iter().next().context("dataset returned no record")?;
        let f = match input.which {
            Which::Src => p.src,
            Which::Tar => p.tar,
        };
        (f, PhysicsConfig::from_params(&meta.pde))
    } else {
        (read_npy(&input.input)?, PhysicsConfig::default())
    };
    let mut doc = serde_json::to_value(&base)?;
    if let Some(path) = config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: Value = serde_json::from_str(&text)?;
        let Value::Object(map) = file else { bail!("config {} must be a JSON object", path.display()) };
        for (k, v) in map {
            apply_override(&mut doc, &k, &v.to_string())?;
        }
    }
    for kv in &overrides.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        apply_override(&mut doc, k.trim(), v.trim())?;
    }
    let physics: PhysicsConfig = serde_json::from_value(doc).map_err(|e| usage(format!("invalid override: {e}")))?;
    let params = physics.params(field.n())?;
    Ok((field, params))
}

fn run_generate(args: &GenerateArgs) -> anyhow::Result<()> {
    let mut cfg: GenerateConfig = layered_config(args.config.as_deref(), &args.overrides)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.samples {
        cfg.n_samples = n;
    }
    if let Some(g) = args.grid {
        cfg.grid_n = g;
    }
    if let Some(k) = args.steps {
        cfg.pde.n_steps = k;
    }
    let mut meta = DatasetMeta::new(cfg.pde.params(cfg.grid_n)?, cfg.n_samples, cfg.init_amp, cfg.seed)?;
    if let Some(scale) = cfg.scale {
        meta.scale = scale;
        meta.validate()?;
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let summary = dataset::generate_dataset(&meta, &args.out)?;
    status(&[
        ("samples", summary.count.to_string()),
        ("grid", meta.grid_n.to_string()),
        ("bytes", summary.bytes.to_string()),
        ("hash", meta.hash()),
        ("out", args.out.display().to_string()),
    ]);
    Ok(())
}

fn run_simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    let (u0, params) = load_field(&args.input, args.config.as_deref(), &args.overrides)?;
    let snaps = simulate_trajectory(&u0, &params, args.steps, args.record_every)?;
    fs::create_dir_all(&args.out)?;
    for (step, f) in &snaps {
        write_npy(f, &args.out.join(format!("step_{step:06}.npy")))?;
    }
    status(&[
        ("steps", args.steps.to_string()),
        ("snapshots", snaps.len().to_string()),
        ("out", args.out.display().to_string()),
    ]);
    Ok(())
}

fn run_energy(args: &EnergyArgs) -> anyhow::Result<()> {
    let (u, params) = load_field(&args.input, args.config.as_deref(), &args.overrides)?;
    println!("{}", lyapunov_energy(&u, &params)?);
    Ok(())
}

fn run_train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg: TrainConfig = layered_config(args.config.as_deref(), &args.overrides)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let val = args.val_data.as_ref().unwrap_or(&args.train_data);
    let report = training::train(&cfg, &args.train_data, val, &args.out_dir)?;
    status(&[
        ("iterations", report.iterations.to_string()),
        ("best_id", report.best_id.clone()),
        ("best_val_mae", report.best_val_mae.to_string()),
        ("elapsed_secs", format!("{:.3}", report.elapsed_secs)),
        ("out_dir", args.out_dir.display().to_string()),
    ]);
    Ok(())
}

fn scaled_record(data: &Path, index: u64) -> anyhow::Result<(DatasetMeta, SamplePair)> {
    let (meta, pairs) = dataset::load_indices(data, &[index])?;
    let p = pairs.into_iter().next().context("dataset returned no record")?;
    let scaled = dataset::to_training_scale(&p, meta.scale)?;
    Ok((meta, scaled))
}

fn run_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let report = evaluation::evaluate_checkpoint(&args.checkpoint, &args.data)?;
    report.write_json(&args.report)?;
    if let Some(csv) = &args.csv {
        report.write_csv(csv)?;
    }
    let mut rendered = 0;
    if let (Some(dir), n) = (&args.out_dir, args.triptychs) {
        if n > 0 {
            fs::create_dir_all(dir)?;
            let (_, gen) = load_generator(&args.checkpoint)?;
            for k in 0..n.min(report.n_samples as u64) {
                let (_, p) = scaled_record(&args.data, k)?;
                let g = gen.predict(&p.src)?;
                render_triptych(&p.src, &g, &p.tar, &dir.join(format!("triptych_{k:06}.png")))?;
                rendered += 1;
            }
        }
    }
    status(&[
        ("n_samples", report.n_samples.to_string()),
        ("mae_mean", report.mae_mean.to_string()),
        ("mae_std", report.mae_std.to_string()),
        ("sem", report.sem.to_string()),
        ("triptychs", rendered.to_string()),
        ("report", args.report.display().to_string()),
    ]);
    Ok(())
}

fn run_render(args: &RenderArgs) -> anyhow::Result<()> {
    let (manifest, gen) = load_generator(&args.checkpoint)?;
    let (meta, p) = scaled_record(&args.data, args.index)?;
    if meta.grid_n != manifest.grid_n {
        bail!("checkpoint expects a {0}x{0} grid, dataset is {1}x{1}", manifest.grid_n, meta.grid_n);
    }
    let g = gen.predict(&p.src)?;
    let mae = cilab_core::physics_losses::pixel_mae(&g, &p.tar)?;
    render_triptych(&p.src, &g, &p.tar, &args.out)?;
    status(&[("index", args.index.to_string()), ("mae", mae.to_string()), ("out", args.out.display().to_string())]);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    match &cli.command {
        Command::Generate(a) => run_generate(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Energy(a) => run_energy(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Render(a) => run_render(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
