mod provenance;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tracespace::error::Error;
use tracespace::eval::{evaluate_suite, EvalOptions, GroundTruthPredictor, ModelPredictor, TracePredictor};
use tracespace::forge::{forge_dataset, ForgeConfig};
use tracespace::io::{list_episode_dirs, read_depth, read_png, read_sample, write_trace, DEPTH_FILE, META_FILE, OBSERVATION_FILE};
use tracespace::model::{read_checkpoint, train, write_checkpoint, Model, TrainConfig, TrainSet};
use tracespace::synth::{gen_benchmark_suite, CameraPath, MotionFamily, SuiteConfig};

use provenance::{hash_path, write_provenance};

/// Screen-aligned 3D trace pipeline: synthetic worlds, dataset forging,
/// flow-matching training, sampling and evaluation.
#[derive(Parser, Debug)]
#[command(name = "tracespace", version)]
struct Cli {
    /// Seed for every random draw; overrides seeds in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    /// Worker threads; 0 uses every core. Outputs are reproducible with 1.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark in the forge input format.
    Synth(SynthArgs),
    /// Turn raw episodes into training samples.
    Forge(ForgeArgs),
    /// Train a trace model on a forged dataset.
    Train(TrainArgs),
    /// Sample a trace for one observation.
    Sample(SampleArgs),
    /// Evaluate a checkpoint on a synthetic benchmark.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON suite config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Comma-separated motion families (default: all four).
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<String>>,
    /// static, orbit or handheld-jitter.
    #[arg(long)]
    camera: Option<String>,
    /// Keypoint grid as ROWSxCOLS.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args, Debug)]
struct ForgeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// JSON forge config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trace length L [default: 32].
    #[arg(long)]
    horizon: Option<usize>,
    /// Keypoint grid as ROWSxCOLS [default: 20x20].
    #[arg(long)]
    grid: Option<String>,
    /// Pixels per frame [default: 0.5].
    #[arg(long)]
    motion_threshold: Option<f64>,
    /// Frames [default: 8].
    #[arg(long)]
    min_chunk: Option<usize>,
    /// Pixels [default: 7].
    #[arg(long)]
    blur_sigma: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Forged dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// JSON training config; absent keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `steps` in the config.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory holding observation.png and depth.f32.
    #[arg(long)]
    obs: PathBuf,
    #[arg(long)]
    instruction: String,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    guidance: f64,
    /// Trace file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint; omit together with --ground-truth.
    #[arg(long, required_unless_present = "ground_truth")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    bench: PathBuf,
    /// Report file; exports are written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    guidance: f64,
    /// Evaluate only the first N episodes.
    #[arg(long)]
    limit: Option<usize>,
    /// Success radius as a fraction of the workspace diameter.
    #[arg(long, default_value_t = 0.1)]
    success_fraction: f64,
    /// Skip per-episode trace and CSV exports.
    #[arg(long)]
    no_exports: bool,
    /// Score the reference traces against themselves.
    #[arg(long, conflicts_with = "ckpt")]
    ground_truth: bool,
}

/// Errors the caller can fix by changing arguments or configs.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_)
                | Error::UnknownProvider(_)
                | Error::OddGrid { .. }
                | Error::InvalidGrid(_)
                | Error::TauOutOfRange(_) => 1,
                _ => 2,
            };
        }
    }
    2
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
    let filter = match tracing_subscriber::EnvFilter::try_new(&cli.log_level) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: invalid --log-level `{}`: {e}", cli.log_level);
            return ExitCode::from(1);
        }
    };
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(2);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            tracing::error!(error = %format!("{e:#}"), code, "command failed");
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn parse_grid(s: &str) -> anyhow::Result<(usize, usize)> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| usage(format!("grid `{s}` is not ROWSxCOLS")))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| usage(format!("grid `{s}` is not ROWSxCOLS")));
    Ok((p(r)?, p(c)?))
}

fn log_config<T: Serialize>(command: &str, config: &T) {
    let json = serde_json::to_string(config).unwrap_or_default();
    tracing::info!(command, config = %json, "resolved config");
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Forge(a) => forge(a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Sample(a) => sample(cli, a),
        Command::Eval(a) => eval(cli, a),
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg: SuiteConfig = read_config(a.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.episodes {
        cfg.episodes = n;
    }
    if let Some(f) = &a.families {
        cfg.families = f.iter().map(|s| s.parse::<MotionFamily>()).collect::<Result<_, _>>()?;
    }
    if let Some(c) = &a.camera {
        cfg.cameras = vec![CameraPath::from_name(c)?];
    }
    if let Some(g) = &a.grid {
        (cfg.grid_rows, cfg.grid_cols) = parse_grid(g)?;
    }
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    if let Some(s) = a.image_size {
        cfg.image_size = s;
    }
    cfg.validate()?;
    log_config("synth", &cfg);
    let manifest = gen_benchmark_suite(&cfg, &a.out)?;
    tracing::info!(episodes = manifest.episodes.len(), "suite written");
    write_provenance(&a.out.join(provenance::FILE), "synth", &cfg, &[])
}

fn forge(a: &ForgeArgs) -> anyhow::Result<()> {
    let mut cfg: ForgeConfig = read_config(a.config.as_deref())?;
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    if let Some(g) = &a.grid {
        (cfg.grid_rows, cfg.grid_cols) = parse_grid(g)?;
    }
    if let Some(v) = a.motion_threshold {
        cfg.motion_threshold = v;
    }
    if let Some(v) = a.min_chunk {
        cfg.min_chunk_len = v;
    }
    if let Some(v) = a.blur_sigma {
        cfg.blur_sigma = v;
    }
    if cfg.horizon == 0 || cfg.grid_rows == 0 || cfg.grid_cols == 0 {
        return Err(usage("horizon and grid must be positive"));
    }
    log_config("forge", &cfg);
    let input_hash = hash_path(&a.input)?;
    let summary = forge_dataset(&a.input, &a.output, &cfg)?;
    tracing::info!(
        episodes = summary.episodes,
        samples = summary.samples,
        failures = summary.failures.len(),
        "dataset forged"
    );
    write_provenance(&a.output.join(provenance::FILE), "forge", &cfg, &[("input", input_hash)])
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg: TrainConfig = read_config(a.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    log_config("train", &cfg);
    let dirs = list_episode_dirs(&a.data, META_FILE)?;
    if dirs.is_empty() {
        return Err(usage(format!("no samples under {}", a.data.display())));
    }
    let samples = dirs.iter().map(|d| read_sample(d)).collect::<Result<Vec<_>, _>>()?;
    let set = TrainSet::new(&samples, &cfg.model)?;
    let mut inputs = vec![("data", hash_path(&a.data)?)];
    if let Some(c) = &a.config {
        inputs.push(("config", hash_path(c)?));
    }
    match train(&set, &cfg) {
        Ok(run) => {
            write_checkpoint(&a.out, &run.checkpoint)?;
            tracing::info!(
                validation_initial = run.validation_initial,
                validation_final = run.validation_final,
                "checkpoint written"
            );
            write_provenance(&provenance::beside(&a.out), "train", &cfg, &inputs)
        }
        Err(abort) => {
            if let Some(ck) = &abort.partial {
                let p = a.out.with_extension("partial");
                write_checkpoint(&p, ck)?;
                tracing::warn!(path = %p.display(), steps = ck.steps, "partial checkpoint written");
            }
            Err(abort.error.into())
        }
    }
}

fn sample(cli: &Cli, a: &SampleArgs) -> anyhow::Result<()> {
    if a.steps == 0 || !(a.guidance >= 0.0) {
        return Err(usage("--steps must be at least 1 and --guidance non-negative"));
    }
    let seed = cli.seed.unwrap_or(0);
    let resolved = serde_json::json!({
        "instruction": a.instruction,
        "steps": a.steps,
        "guidance": a.guidance,
        "seed": seed,
    });
    log_config("sample", &resolved);
    let model = Model::from_checkpoint(read_checkpoint(&a.ckpt)?)?;
    let image = read_png(&a.obs.join(OBSERVATION_FILE))?;
    let depth = read_depth(&a.obs.join(DEPTH_FILE))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trace = model.predict_trace(&image, &depth, &a.instruction, a.steps, a.guidance, &mut rng)?;
    write_trace(&a.out, &trace)?;
    let inputs = [("checkpoint", hash_path(&a.ckpt)?), ("observation", hash_path(&a.obs)?)];
    write_provenance(&provenance::beside(&a.out), "sample", &resolved, &inputs)
}

fn eval(cli: &Cli, a: &EvalArgs) -> anyhow::Result<()> {
    if a.steps == 0 || !(a.guidance >= 0.0) || !(a.success_fraction > 0.0) {
        return Err(usage("--steps, --guidance and --success-fraction must be positive"));
    }
    let seed = cli.seed.unwrap_or(0);
    let opts = EvalOptions {
        success_fraction: a.success_fraction,
        exports: !a.no_exports,
        limit: a.limit,
    };
    let resolved = serde_json::json!({
        "steps": a.steps,
        "guidance": a.guidance,
        "seed": seed,
        "ground_truth": a.ground_truth,
        "options": opts,
    });
    log_config("eval", &resolved);
    let mut inputs = vec![("bench", hash_path(&a.bench)?)];
    let model;
    let predictor: Box<dyn TracePredictor> = match &a.ckpt {
        Some(p) if !a.ground_truth => {
            model = Model::from_checkpoint(read_checkpoint(p)?)?;
            inputs.push(("checkpoint", hash_path(p)?));
            Box::new(ModelPredictor {
                model: &model,
                steps: a.steps,
                guidance: a.guidance,
                seed,
            })
        }
        _ => Box::new(GroundTruthPredictor),
    };
    let report = evaluate_suite(predictor.as_ref(), &a.bench, &a.out, &opts)?;
    tracing::info!(
        episodes = report.n_episodes,
        failures = report.failures.len(),
        success_rate = report.success_rate,
        ade = report.ade,
        "evaluation finished"
    );
    write_provenance(&provenance::beside(&a.out), "eval", &resolved, &inputs)
}
