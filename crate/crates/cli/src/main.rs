//! Subcommand front end: dataset conversion, synthetic data generation,
//! training, evaluation, map rendering, and embedding export.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hsi_openset::config::{OptimAlgorithm, PrototypeSpace, RunConfig};
use hsi_openset::dataset::{extract_patch, load_cube, save_cube, HsiCube};
use hsi_openset::eval;
use hsi_openset::npy;
use hsi_openset::render;
use hsi_openset::synth::{self, SyntheticSpec};
use hsi_openset::train::{self, FitOptions, FitOutcome, TrainState};
use hsi_openset::{Dtype, Real};

#[derive(Parser)]
#[command(
    name = "hsi",
    version,
    about = "Open-set few-shot classification of hyperspectral pixels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a NumPy cube + label map into the dataset container format.
    Convert(ConvertArgs),
    /// Generate a deterministic synthetic dataset.
    Synth(SynthArgs),
    /// Run anchor pre-training only and save the checkpoint.
    Pretrain(TrainArgs),
    /// Full run: pre-training plus episodic training with periodic eval.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out test pixels.
    Eval(EvalArgs),
    /// Render the classification map for every labeled pixel.
    Predict(PredictArgs),
    /// Dump penultimate + logit embeddings with labels as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct ConvertArgs {
    /// NumPy .npy file with the (rows, cols, bands) float cube.
    #[arg(long)]
    data: PathBuf,
    /// NumPy .npy file with the (rows, cols) integer label map.
    #[arg(long)]
    labels: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Dataset name recorded in the manifest.
    #[arg(long)]
    name: Option<String>,
    /// Comma-separated class names for ids 1..=C.
    #[arg(long, value_delimiter = ',')]
    class_names: Option<Vec<String>>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 20)]
    bands: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Voronoi sites per class (spatial fragmentation).
    #[arg(long, default_value_t = 4)]
    sites: usize,
    /// Per-band additive Gaussian noise std.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Minimum pairwise signature distance in noise units.
    #[arg(long, default_value_t = 4.0)]
    min_separation: f64,
}

/// Flags shared by every model-running subcommand. Values given here
/// override the `--config` file.
#[derive(Args)]
struct CommonArgs {
    /// TOML run config; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (container format).
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Known class ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    known: Option<Vec<u16>>,
    /// Unknown class ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    unknown: Option<Vec<u16>>,
    /// Fraction of labeled pixels held out for testing.
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Support shots per known class (k).
    #[arg(long = "k", alias = "shots")]
    shots: Option<usize>,
    /// Queries per class (d); 0 means 3k.
    #[arg(long = "d", alias = "queries")]
    queries: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Spatial patch size (odd).
    #[arg(long)]
    patch: Option<usize>,
    /// Band count after the reduction convolution.
    #[arg(long)]
    reduced_bands: Option<usize>,
    /// Number of trainable prototypes (w).
    #[arg(long = "w", alias = "prototypes")]
    n_prototypes: Option<usize>,
    /// Unknown classes the prototype budget should allow for.
    #[arg(long)]
    expected_unknown: Option<usize>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Embedding the prototypes live in.
    #[arg(long)]
    space: Option<SpaceArg>,
    #[arg(long)]
    algorithm: Option<AlgoArg>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Association set size for prototype grouping.
    #[arg(long)]
    top_k: Option<usize>,
    /// Louvain resolution.
    #[arg(long)]
    resolution: Option<f64>,
    /// Regroup prototypes every n episodes.
    #[arg(long)]
    regroup_every_n: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Penultimate,
    Logit,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Sgd,
    Adam,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(cfg.seed, self.seed);
        set!(cfg.data.known, self.known.clone());
        set!(cfg.data.unknown, self.unknown.clone());
        set!(cfg.data.test_fraction, self.test_fraction);
        set!(cfg.episode.shots, self.shots);
        set!(cfg.episode.queries, self.queries);
        set!(cfg.episode.episodes, self.episodes);
        set!(cfg.episode.pretrain_epochs, self.pretrain_epochs);
        set!(cfg.episode.eval_every, self.eval_every);
        set!(cfg.model.patch, self.patch);
        set!(cfg.model.reduced_bands, self.reduced_bands);
        set!(cfg.model.n_prototypes, self.n_prototypes);
        set!(cfg.model.expected_unknown, self.expected_unknown);
        set!(cfg.model.phi, self.phi);
        set!(cfg.model.gamma, self.gamma);
        set!(cfg.model.tau, self.tau);
        if let Some(space) = self.space {
            cfg.model.prototype_space = match space {
                SpaceArg::Penultimate => PrototypeSpace::Penultimate,
                SpaceArg::Logit => PrototypeSpace::Logit,
            };
        }
        if let Some(algo) = self.algorithm {
            cfg.optim.algorithm = match algo {
                AlgoArg::Sgd => OptimAlgorithm::Sgd,
                AlgoArg::Adam => OptimAlgorithm::Adam,
            };
        }
        set!(cfg.optim.lr, self.lr);
        set!(cfg.optim.momentum, self.momentum);
        set!(cfg.grouping.top_k, self.top_k);
        set!(cfg.grouping.resolution, self.resolution);
        set!(cfg.grouping.regroup_every_n, self.regroup_every_n);
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Run directory for checkpoints, resolved config, and metrics log.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from `<out>/last` if it exists.
    #[arg(long)]
    resume: bool,
    /// Train in f64 instead of f32.
    #[arg(long = "f64")]
    use_f64: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint directory (e.g. <run>/best).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where to write the evaluation report (JSON).
    #[arg(long, default_value = "eval.json")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output PNG path.
    #[arg(long, default_value = "map.png")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output CSV path.
    #[arg(long, default_value = "embeddings.csv")]
    out: PathBuf,
    /// Which labeled pixels to embed.
    #[arg(long, value_enum, default_value_t = Subset::Test)]
    subset: Subset,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert(args) => convert(args),
        Command::Synth(args) => synthesize(args),
        Command::Pretrain(args) => train(args, true),
        Command::Train(args) => train(args, false),
        Command::Eval(args) => evaluate(args),
        Command::Predict(args) => predict(args),
        Command::ExportEmbeddings(args) => export(args),
    }
}

/// Build the effective config: file (if given) overlaid with flags.
fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)
            .with_context(|| format!("loading --config {}", path.display()))?,
        None => RunConfig::default(),
    };
    common.overrides.apply(&mut cfg);
    if let Some(data) = &common.data {
        cfg.data.path = data.clone();
    }
    if cfg.data.path.as_os_str().is_empty() {
        bail!("no dataset directory: pass --data <DIR> or set data.path in --config");
    }
    if cfg.data.known.is_empty() {
        bail!("no known classes: pass --known <IDS> or set data.known in --config");
    }
    Ok(cfg)
}

fn open_cube(cfg: &RunConfig) -> Result<HsiCube> {
    load_cube(&cfg.data.path, cfg.data.impute_nan)
        .with_context(|| format!("loading dataset {}", cfg.data.path.display()))
}

fn convert(args: ConvertArgs) -> Result<()> {
    let data = npy::load_npy_3d_f32(&args.data)
        .with_context(|| format!("reading --data {}", args.data.display()))?;
    let labels = npy::load_npy_2d_labels(&args.labels)
        .with_context(|| format!("reading --labels {}", args.labels.display()))?;
    let c = labels.iter().copied().max().unwrap_or(0) as usize;
    let class_names = match args.class_names {
        Some(names) => names,
        None => (1..=c).map(|i| format!("class_{i}")).collect(),
    };
    let name = args.name.unwrap_or_else(|| {
        args.out
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "converted".to_string())
    });
    let cube = HsiCube {
        name,
        data,
        labels,
        class_names,
    };
    cube.validate()?;
    save_cube(&cube, &args.out)?;
    println!(
        "wrote {} ({}x{}x{} bands, {} classes)",
        args.out.display(),
        cube.height(),
        cube.width(),
        cube.bands(),
        cube.class_count()
    );
    Ok(())
}

fn synthesize(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        height: args.height,
        width: args.width,
        bands: args.bands,
        n_classes: args.classes,
        sites_per_class: args.sites,
        noise_sigma: args.noise,
        min_separation: args.min_separation,
        seed: args.seed,
    };
    let data = synth::generate(&spec)?;
    save_cube(&data.cube, &args.out)?;
    println!(
        "wrote {} ({}x{}x{} bands, {} classes, seed {})",
        args.out.display(),
        spec.height,
        spec.width,
        spec.bands,
        spec.n_classes,
        spec.seed
    );
    Ok(())
}

fn train(args: TrainArgs, pretrain_only: bool) -> Result<()> {
    let mut cfg = resolve_config(&args.common)?;
    if pretrain_only {
        cfg.episode.episodes = 0;
    }
    let cube = open_cube(&cfg)?;
    let options = FitOptions {
        out_dir: Some(&args.out),
        resume: args.resume,
    };
    if args.use_f64 {
        finish_train(train::fit::<f64>(cfg, &cube, options)?, &args.out)
    } else {
        finish_train(train::fit::<f32>(cfg, &cube, options)?, &args.out)
    }
}

fn finish_train<T: Real>(outcome: FitOutcome<T>, out: &Path) -> Result<()> {
    print_report(&outcome.final_report);
    println!(
        "run directory {} (checkpoints last/best, metrics.jsonl, config.toml)",
        out.display()
    );
    Ok(())
}

/// Load the config for a checkpoint-consuming command: explicit --config
/// wins, otherwise the config stored inside the checkpoint.
fn checkpoint_config(common: &CommonArgs, checkpoint: &Path) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)
            .with_context(|| format!("loading --config {}", path.display()))?,
        None => {
            let stored = checkpoint.join("config.toml");
            RunConfig::load(&stored)
                .with_context(|| format!("loading {}", stored.display()))?
        }
    };
    common.overrides.apply(&mut cfg);
    if let Some(data) = &common.data {
        cfg.data.path = data.clone();
    }
    if cfg.data.path.as_os_str().is_empty() {
        bail!("no dataset directory: pass --data <DIR> or set data.path in --config");
    }
    Ok(cfg)
}

fn load_state<T: Real>(cfg: &RunConfig, cube: &HsiCube, checkpoint: &Path) -> Result<TrainState<T>> {
    TrainState::<T>::load(cfg.clone(), cube.bands(), checkpoint)
        .with_context(|| format!("loading --checkpoint {}", checkpoint.display()))
}

fn evaluate(args: EvalArgs) -> Result<()> {
    let cfg = checkpoint_config(&args.common, &args.checkpoint)?;
    let cube = open_cube(&cfg)?;
    match train::checkpoint_dtype(&args.checkpoint)? {
        Dtype::F32 => eval_as::<f32>(&cfg, &cube, &args),
        Dtype::F64 => eval_as::<f64>(&cfg, &cube, &args),
    }
}

fn eval_as<T: Real>(cfg: &RunConfig, cube: &HsiCube, args: &EvalArgs) -> Result<()> {
    let (normalized, pixels) = train::prepare_data(cfg, cube);
    let mut state = load_state::<T>(cfg, cube, &args.checkpoint)?;
    let test = eval::build_test_set(&normalized, &pixels.test, cfg.model.patch)?;
    let report = eval::evaluate(&mut state, &test)?;
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&args.out, json)
        .with_context(|| format!("writing {}", args.out.display()))?;
    print_report(&report);
    println!("report written to {}", args.out.display());
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let cfg = checkpoint_config(&args.common, &args.checkpoint)?;
    let cube = open_cube(&cfg)?;
    match train::checkpoint_dtype(&args.checkpoint)? {
        Dtype::F32 => predict_as::<f32>(&cfg, &cube, &args),
        Dtype::F64 => predict_as::<f64>(&cfg, &cube, &args),
    }
}

fn predict_as<T: Real>(cfg: &RunConfig, cube: &HsiCube, args: &PredictArgs) -> Result<()> {
    let (normalized, _) = train::prepare_data(cfg, cube);
    let mut state = load_state::<T>(cfg, cube, &args.checkpoint)?;
    let image = eval::render_map(&mut state, &normalized)?;
    render::save_png(&image, &args.out)?;
    println!("map written to {}", args.out.display());
    Ok(())
}

fn export(args: ExportArgs) -> Result<()> {
    let cfg = checkpoint_config(&args.common, &args.checkpoint)?;
    let cube = open_cube(&cfg)?;
    match train::checkpoint_dtype(&args.checkpoint)? {
        Dtype::F32 => export_as::<f32>(&cfg, &cube, &args),
        Dtype::F64 => export_as::<f64>(&cfg, &cube, &args),
    }
}

fn export_as<T: Real>(cfg: &RunConfig, cube: &HsiCube, args: &ExportArgs) -> Result<()> {
    let (normalized, pixels) = train::prepare_data(cfg, cube);
    let mut state = load_state::<T>(cfg, cube, &args.checkpoint)?;

    let mut centers: Vec<((usize, usize), u16)> = Vec::new();
    match args.subset {
        Subset::Train => {
            for (&class, list) in &pixels.train {
                centers.extend(list.iter().map(|&c| (c, class)));
            }
        }
        Subset::Test => {
            for (&class, list) in &pixels.test {
                centers.extend(list.iter().map(|&c| (c, class)));
            }
        }
        Subset::All => {
            for center in normalized.labeled_pixels() {
                centers.push((center, normalized.labels[center]));
            }
        }
    }
    let mut patches = Vec::with_capacity(centers.len());
    let mut labels = Vec::with_capacity(centers.len());
    for (center, class) in centers {
        patches.push(extract_patch(&normalized, center, cfg.model.patch)?);
        labels.push(class);
    }
    eval::export_embeddings(&mut state, &patches, &labels, &args.out)?;
    println!("{} rows written to {}", patches.len(), args.out.display());
    Ok(())
}

fn print_report(report: &eval::EvalReport) {
    let opt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.4}"),
        None => "-".to_string(),
    };
    println!("known accuracy    {} ({} samples)", opt(report.known_acc), report.n_known_samples);
    println!(
        "unknown accuracy  {} ({} samples)",
        opt(report.unknown_acc),
        report.n_unknown_samples
    );
    println!("all accuracy      {:.4}", report.all_acc);
    println!("predicted classes {}", report.predicted_class_count);
    println!(
        "rejected unknown  {}   false reject {}",
        opt(report.rejected_unknown_fraction),
        opt(report.false_reject_fraction)
    );
}
