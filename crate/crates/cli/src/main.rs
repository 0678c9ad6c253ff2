//! `melad` command-line tool.
//!
//! Exit status: 0 success, 1 usage error, 2 data error (unreadable or
//! malformed inputs), 3 internal error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use melad::bench::{time_trials, Backend, BenchError, BenchmarkReport};
use melad::data::{
    combine, ingest_csv, ingest_folders, preprocess, resolve_combination, CsvOptions, DataError,
    DatasetManifest, LabelAliases, SourceCode,
};
use melad::model::{
    load_weights, logits_batch, resolve_config, save_weights, ArchitectureConfig, BundleError, ModelError,
    Prediction, WeightBundle,
};
use melad::train::{
    balance_seeded, init_weights, synthetic_dataset, train_with, write_history_csv, AugmentPolicy, TrainConfig,
    TrainError,
};
use melad::{ExecMode, Tensor};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "melad", version, about = "Dilated-convolution melanoma classifier")]
#[command(after_help = "Exit status: 0 success, 1 usage error, 2 data error, 3 internal error.")]
struct Cli {
    /// Worker threads for the engine (default: logical cores).
    #[arg(long, global = true, env = "MELAD_THREADS")]
    threads: Option<usize>,
    /// Bit-reproducible kernels whose results do not depend on the thread count.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify one image.
    Infer {
        image: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Train a network on a manifest.
    Train(TrainArgs),
    /// Time inference trials.
    Bench(BenchArgs),
    /// Count the parameters of an architecture.
    Params(ArchArg),
    /// Receptive field of an architecture.
    Rf {
        #[command(flatten)]
        arch: ArchArg,
        /// Also measure it with an impulse through the network.
        #[arg(long)]
        measure: bool,
    },
    /// Write an initialized weight file.
    Init {
        #[command(flatten)]
        arch: ArchArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// All-zero kernels instead of random initialization.
        #[arg(long)]
        zeros: bool,
    },
    /// Generate a synthetic two-class dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Images per class.
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Build, merge and balance dataset manifests.
    #[command(subcommand)]
    Dataset(DatasetCommand),
}

#[derive(Args)]
struct ArchArg {
    /// Preset name (mela-d, mela-d-lite, resnet50-reference) or JSON config path.
    #[arg(long, default_value = "mela-d")]
    arch: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    arch: ArchArg,
    /// Weight file to write.
    #[arg(long)]
    out: PathBuf,
    /// History CSV (default: next to the weights, `<out>.history.csv`).
    #[arg(long)]
    history: Option<PathBuf>,
    /// JSON training config; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Side images are resized to (default: the architecture's input size).
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long, value_enum)]
    augment: Option<AugmentArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AugmentArg {
    Oversampled,
    All,
    Off,
}

#[derive(Args)]
struct BenchArgs {
    /// Weight file; without it a randomly initialized `--arch` is timed.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchArg,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    /// Image to classify; a synthetic input is used otherwise.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Side of the synthetic input (default: the architecture's input size).
    #[arg(long)]
    size: Option<usize>,
    /// Include decoding and resizing of `--image` in each trial.
    #[arg(long)]
    include_preprocess: bool,
    /// Training sets label for the report, e.g. a+b+c.
    #[arg(long, default_value = "")]
    trainsets: String,
    /// Precision to compute the performance/runtime ratio from.
    #[arg(long)]
    precision: Option<f64>,
    /// Print a markdown table row instead of plain text.
    #[arg(long)]
    markdown: bool,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Build a manifest from a labeled CSV or from benign/ and malignant/ folders.
    Ingest {
        /// Source code recorded on every record (a-k or any short code).
        #[arg(long)]
        source: String,
        #[arg(long, conflicts_with = "folders", required_unless_present = "folders")]
        csv: Option<PathBuf>,
        /// Directory image paths in the CSV are relative to (default: the CSV's directory).
        #[arg(long, requires = "csv")]
        image_root: Option<PathBuf>,
        #[arg(long, default_value = "image")]
        image_column: String,
        #[arg(long, default_value = "label")]
        label_column: String,
        /// JSON object mapping raw label values to benign/malignant.
        #[arg(long)]
        aliases: Option<PathBuf>,
        #[arg(long)]
        folders: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge per-source manifests into one combination.
    Combine {
        /// CODE=PATH of a manifest holding that source; repeat per source.
        #[arg(long = "input", value_parser = parse_input, required = true)]
        inputs: Vec<(SourceCode, PathBuf)>,
        /// Preset name or expression such as a+b+c.
        #[arg(long)]
        combo: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Oversample the minority class to a 50:50 split.
    Balance {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_input(s: &str) -> Result<(SourceCode, PathBuf), String> {
    let (code, path) = s.split_once('=').ok_or("expected CODE=PATH")?;
    let code = SourceCode::new(code).map_err(|e| e.to_string())?;
    Ok((code, PathBuf::from(path)))
}

/// An error with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn data(message: impl ToString) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }

    fn internal(message: impl ToString) -> Self {
        Self {
            code: 3,
            message: message.to_string(),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::data(e)
    }
}

impl From<BundleError> for Failure {
    fn from(e: BundleError) -> Self {
        Failure::data(e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(_) => Failure::internal(e),
            _ => Failure::data(e),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => Failure::usage(e.to_string()),
            TrainError::Data(e) => e.into(),
            TrainError::Model(e) => e.into(),
            TrainError::EmptyManifest | TrainError::Io { .. } => Failure::data(e),
            TrainError::ShapeMismatch(_) | TrainError::Tensor(_) => Failure::internal(e),
        }
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Model(e) => e.into(),
            BenchError::NoTrials | BenchError::PrecisionRange(_) => Failure::usage(e.to_string()),
            _ => Failure::internal(e),
        }
    }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    json: bool,
    mode: ExecMode,
}

impl Ctx {
    fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce() -> String) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
        } else {
            println!("{}", human());
        }
    }
}

fn arch(a: &ArchArg) -> Result<ArchitectureConfig, Failure> {
    Ok(resolve_config(&a.arch)?)
}

fn write_manifest(m: &DatasetManifest, out: &Path) -> Outcome {
    Ok(m.save(out)?)
}

fn thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn cmd_infer(ctx: &Ctx, image: &Path, weights: &Path) -> Outcome {
    let bundle = load_weights(weights)?;
    let size = bundle.config().input.height;
    let start = Instant::now();
    let input = preprocess(image, size)?;
    let logits = logits_batch(&bundle, &input, ctx.mode)?;
    let runtime_ms = start.elapsed().as_secs_f64() * 1000.0;
    let p = Prediction::from_logits(logits[0]);
    let out = json!({
        "label": p.label,
        "p_benign": p.p_benign,
        "p_malignant": p.p_malignant,
        "runtime_ms": runtime_ms,
    });
    ctx.emit(&out, || {
        format!(
            "label: {}\np_benign: {}\np_malignant: {}\nruntime_ms: {:.1}",
            p.label, p.p_benign, p.p_malignant, runtime_ms
        )
    });
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Outcome {
    let arch = arch(&a.arch)?;
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.input_size.is_some() {
        cfg.input_size = a.input_size;
    }
    if let Some(v) = a.augment {
        cfg.augment_policy = match v {
            AugmentArg::Oversampled => AugmentPolicy::Oversampled,
            AugmentArg::All => AugmentPolicy::All,
            AugmentArg::Off => AugmentPolicy::Off,
        };
    }
    cfg.validate()?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    eprintln!(
        "training {} on {} records: lr={} batch={} epochs={} seed={}",
        arch.name,
        manifest.len(),
        cfg.learning_rate,
        cfg.batch_size,
        cfg.epochs,
        cfg.seed
    );
    let json = ctx.json;
    let outcome = train_with(&arch, &manifest, &cfg, ctx.mode, &mut |e| {
        if !json {
            eprintln!("epoch {}: loss {:.4}, accuracy {:.4}", e.epoch, e.loss, e.accuracy);
        }
    })?;
    save_weights(&outcome.bundle, &a.out)?;
    let history_path = a.history.clone().unwrap_or_else(|| {
        let mut name = a.out.file_stem().unwrap_or_default().to_os_string();
        name.push(".history.csv");
        a.out.with_file_name(name)
    });
    let file = std::fs::File::create(&history_path)
        .map_err(|e| Failure::data(format!("{}: {e}", history_path.display())))?;
    write_history_csv(&outcome.history, std::io::BufWriter::new(file))
        .map_err(|e| Failure::data(format!("{}: {e}", history_path.display())))?;
    let last = outcome.history.last().expect("at least one epoch");
    let out = json!({
        "weights": a.out,
        "history": history_path,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "final": last,
    });
    ctx.emit(&out, || {
        format!(
            "lr={} batch={} epochs={}\nfinal epoch {}: loss {:.6}, accuracy {:.4}\nweights: {}\nhistory: {}",
            cfg.learning_rate,
            cfg.batch_size,
            cfg.epochs,
            last.epoch,
            last.loss,
            last.accuracy,
            a.out.display(),
            history_path.display()
        )
    });
    Ok(())
}

fn cmd_bench(ctx: &Ctx, a: &BenchArgs) -> Outcome {
    if a.trials == 0 {
        return Err(Failure::usage("--trials must be at least 1"));
    }
    let bundle = match &a.weights {
        Some(path) => load_weights(path)?,
        None => init_weights(&arch(&a.arch)?, 0)?,
    };
    let size = a.size.unwrap_or(bundle.config().input.height);
    let mode = ctx.mode;
    let times = match (&a.image, a.include_preprocess) {
        (Some(path), true) => time_trials(a.trials, || -> Result<(), Failure> {
            let input = preprocess(path, size)?;
            logits_batch(&bundle, &input, mode)?;
            Ok(())
        })?,
        (image, _) => {
            let input = match image {
                Some(path) => preprocess(path, size)?,
                None => synthetic_input(size),
            };
            time_trials(a.trials, || logits_batch(&bundle, &input, mode).map(|_| ()))?
        }
    };
    let mut report = BenchmarkReport::from_trials(
        &bundle,
        &a.trainsets,
        times,
        [3, size, size],
        rayon::current_num_threads(),
        Backend::Native,
    )?;
    if let Some(p) = a.precision {
        report = report.with_precision(p)?;
    }
    if ctx.json {
        println!("{}", report.to_json());
    } else if a.markdown {
        println!("{}\n{}", BenchmarkReport::markdown_header(report.trials_ms.len()), report.markdown_row());
    } else {
        let trials: Vec<String> = report.trials_ms.iter().map(|t| format!("{t:.1}")).collect();
        println!("model: {}", report.model);
        println!("input: {}x{}x{}", report.input[0], report.input[1], report.input[2]);
        println!("backend: {}, threads: {}", report.backend, report.threads);
        println!("trials_ms: {}", trials.join(", "));
        println!("runtime: {}", report.summary());
        if let Some(r) = report.perf_ratio {
            println!("perf_ratio: {r:.4}");
        }
    }
    Ok(())
}

/// A smooth deterministic test pattern in `[0, 1]`.
fn synthetic_input(size: usize) -> Tensor {
    let mut t = Tensor::zeros(&[3, size, size]);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                *t.at_mut(c, y, x) = ((x + 2 * y + 31 * c) % 97) as f32 / 96.0;
            }
        }
    }
    t
}

fn cmd_params(ctx: &Ctx, a: &ArchArg) -> Outcome {
    let cfg = arch(a)?;
    let count = cfg.count_params()?;
    let out = json!({
        "model": cfg.name,
        "trainable": count.trainable,
        "non_trainable": count.non_trainable,
        "total": count.total(),
    });
    ctx.emit(&out, || {
        format!(
            "{}\ntrainable: {}\nnon-trainable: {}\ntotal: {}",
            cfg.name,
            thousands(count.trainable),
            thousands(count.non_trainable),
            thousands(count.total())
        )
    });
    Ok(())
}

fn cmd_rf(ctx: &Ctx, a: &ArchArg, measure: bool) -> Outcome {
    let cfg = arch(a)?;
    let rf = cfg.receptive_field();
    let measured = if measure {
        Some(melad::model::measure_receptive_field(&cfg)?)
    } else {
        None
    };
    let out = json!({ "model": cfg.name, "receptive_field": rf, "measured": measured });
    ctx.emit(&out, || match measured {
        Some(m) => format!("{rf}\nmeasured: {m}"),
        None => rf.to_string(),
    });
    Ok(())
}

fn cmd_init(ctx: &Ctx, a: &ArchArg, out: &Path, seed: u64, zeros: bool) -> Outcome {
    let cfg = arch(a)?;
    cfg.validate_executable()?;
    let bundle = if zeros {
        WeightBundle::zeros(cfg)?
    } else {
        init_weights(&cfg, seed)?
    };
    save_weights(&bundle, out)?;
    let summary = json!({ "model": bundle.config().name, "weights": out, "zeros": zeros, "seed": seed });
    ctx.emit(&summary, || format!("wrote {}", out.display()));
    Ok(())
}

fn cmd_synth(ctx: &Ctx, out: &Path, seed: u64, n: usize, size: usize) -> Outcome {
    if n == 0 || size == 0 {
        return Err(Failure::usage("--n and --size must be at least 1"));
    }
    let m = synthetic_dataset(seed, n, size, out)?;
    let manifest = out.join(melad::train::MANIFEST_FILE);
    let summary = json!({ "manifest": manifest, "counts": m.counts(), "size": size, "seed": seed });
    ctx.emit(&summary, || format!("wrote {} images, manifest {}", m.len(), manifest.display()));
    Ok(())
}

fn cmd_dataset(ctx: &Ctx, cmd: &DatasetCommand) -> Outcome {
    match cmd {
        DatasetCommand::Ingest {
            source,
            csv,
            image_root,
            image_column,
            label_column,
            aliases,
            folders,
            out,
        } => {
            let source = SourceCode::new(source).map_err(|e| Failure::usage(e.to_string()))?;
            let (manifest, rejected, warnings) = match (csv, folders) {
                (Some(csv), _) => {
                    let mut opts = CsvOptions::new(source);
                    opts.image_column = image_column.clone();
                    opts.label_column = label_column.clone();
                    if let Some(path) = aliases {
                        let text = std::fs::read_to_string(path)
                            .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
                        opts.aliases = LabelAliases::default().with_json(&text)?;
                    }
                    let root = match image_root {
                        Some(r) => r.clone(),
                        None => csv.parent().map(Path::to_path_buf).unwrap_or_default(),
                    };
                    let r = ingest_csv(csv, &root, &opts)?;
                    let rejects: Vec<String> =
                        r.rejects.iter().map(|x| format!("row {}: {}", x.row, x.reason)).collect();
                    (r.manifest, rejects, Vec::new())
                }
                (None, Some(dir)) => {
                    let r = ingest_folders(dir, &source)?;
                    (r.manifest, Vec::new(), r.warnings)
                }
                (None, None) => return Err(Failure::usage("one of --csv or --folders is required")),
            };
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            write_manifest(&manifest, out)?;
            let summary = json!({
                "manifest": out,
                "counts": manifest.counts(),
                "rejected": rejected,
                "warnings": warnings,
            });
            ctx.emit(&summary, || {
                let c = manifest.counts();
                format!(
                    "{} records ({} benign, {} malignant), {} rejected rows\nwrote {}",
                    manifest.len(),
                    c.benign,
                    c.malignant,
                    rejected.len(),
                    out.display()
                )
            });
        }
        DatasetCommand::Combine { inputs, combo, out } => {
            let codes = resolve_combination(combo).map_err(|e| match e {
                DataError::InvalidCode(_) | DataError::DuplicateCode(_) => Failure::usage(e.to_string()),
                e => e.into(),
            })?;
            let mut sources = BTreeMap::new();
            for (code, path) in inputs {
                sources.insert(code.clone(), DatasetManifest::load(path)?);
            }
            let merged = combine(&sources, &codes)?;
            write_manifest(&merged, out)?;
            let provenance: Vec<&str> = merged.provenance().iter().map(SourceCode::as_str).collect();
            let summary = json!({ "manifest": out, "counts": merged.counts(), "provenance": provenance });
            ctx.emit(&summary, || {
                format!("{} records from {}\nwrote {}", merged.len(), provenance.join("+"), out.display())
            });
        }
        DatasetCommand::Balance { manifest, seed, out } => {
            let m = DatasetManifest::load(manifest)?;
            let balanced = balance_seeded(&m, *seed)?;
            write_manifest(&balanced, out)?;
            let summary = json!({ "manifest": out, "before": m.counts(), "after": balanced.counts() });
            ctx.emit(&summary, || {
                let (b, a) = (m.counts(), balanced.counts());
                format!(
                    "{}/{} -> {}/{} (benign/malignant)\nwrote {}",
                    b.benign,
                    b.malignant,
                    a.benign,
                    a.malignant,
                    out.display()
                )
            });
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let ctx = Ctx {
        json: cli.json,
        mode: if cli.deterministic {
            ExecMode::Deterministic
        } else {
            ExecMode::Fast
        },
    };
    match &cli.command {
        Command::Infer { image, weights } => cmd_infer(&ctx, image, weights),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Bench(a) => cmd_bench(&ctx, a),
        Command::Params(a) => cmd_params(&ctx, a),
        Command::Rf { arch, measure } => cmd_rf(&ctx, arch, *measure),
        Command::Init { arch, out, seed, zeros } => cmd_init(&ctx, arch, out, *seed, *zeros),
        Command::Synth { out, seed, n, size } => cmd_synth(&ctx, out, *seed, *n, *size),
        Command::Dataset(cmd) => cmd_dataset(&ctx, cmd),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
