//! `kws`: data preparation, training, evaluation and reports.
//!
//! Exit codes: 0 on success, 1 when a command fails, 2 on a usage error.

mod manifest;

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kws_core::dataset::{scan_with, Split};
use kws_core::eval::{keyword_rocs, roc_csv, stage_feature_map, DEFAULT_THRESHOLDS};
use kws_core::footprint::analyze;
use kws_core::frontend::{load_wav, FeatureKind, Frontend, FrontendConfig};
use kws_core::kv::KvFile;
use kws_core::model::{CENet, ModelConfig, TapPoint, Variant};
use kws_core::tensor::Tensor;
use kws_core::trainer::{TrainConfig, TrainData, Trainer};

use manifest::{beside, Origin, RunManifest, RUN_FILE};

#[derive(Parser, Debug)]
#[command(
    name = "kws",
    version,
    about = "Keyword spotting with compact residual networks and graph context modules"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan a speech-commands directory and write the split manifest.
    PrepareData(PrepareArgs),
    /// Train a model; writes checkpoints and per-step metrics.
    Train(TrainArgs),
    /// Accuracy and ROC curves of a checkpoint on one split.
    Eval(EvalArgs),
    /// Parameter and multiply-accumulate counts per layer.
    Footprint(FootprintArgs),
    /// Features of one wav file as CSV (frames x coefficients).
    Features(FeaturesArgs),
    /// Channel-mean feature map after one stage of a checkpoint.
    FeatureMap(FeatureMapArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Root of the speech-commands corpus.
    #[arg(long, env = "KWS_DATA_DIR")]
    data_dir: PathBuf,
    /// Percent of speakers held out for validation.
    #[arg(long, default_value_t = 10.0)]
    val_pct: f64,
    /// Percent of speakers held out for testing.
    #[arg(long, default_value_t = 10.0)]
    test_pct: f64,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// Manifest file name inside the output directory.
    #[arg(long, default_value = "manifest.csv")]
    manifest_out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// cenet6, cenet24 or cenet40.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Stages (1-3) followed by a graph module, e.g. `1,2,3`; `none` for none.
    #[arg(long, value_parser = parse_stages)]
    gcn_stages: Option<Stages>,
    /// `key = value` training config; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds weight init, shuffling, augmentation and example sampling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long, value_enum)]
    features: Option<Kind>,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    resume: bool,
    /// Log training metrics every this many steps.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long)]
    out_dir: PathBuf,
    /// ROC file name inside the output directory.
    #[arg(long, default_value = "roc.csv")]
    roc_out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLDS)]
    thresholds: usize,
    /// Seed for the unknown / silence sample; defaults to the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct FootprintArgs {
    #[arg(long, value_parser = parse_variant, default_value = "cenet6")]
    variant: Variant,
    #[arg(long, value_parser = parse_stages, default_value = "none")]
    gcn_stages: Stages,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Write the CSV report here instead of printing.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[arg(long)]
    wav: PathBuf,
    #[arg(long, value_enum, default_value_t = Kind::Mfcc)]
    kind: Kind,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FeatureMapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    wav: PathBuf,
    /// Stage index, 1-3.
    #[arg(long)]
    stage: usize,
    #[arg(long, value_enum, default_value_t = Point::Stage)]
    point: Point,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Mfcc,
    Fbank,
}

impl From<Kind> for FeatureKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Mfcc => FeatureKind::Mfcc,
            Kind::Fbank => FeatureKind::Fbank,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Point {
    /// Output of the stage, before its graph module.
    Stage,
    /// After the graph module.
    Augmented,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Stages(Vec<usize>);

impl std::fmt::Display for Stages {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self.0.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: kws_core::Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: kws_core::Error| e.to_string())
}

fn parse_stages(s: &str) -> std::result::Result<Stages, String> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("none") {
        return Ok(Stages(Vec::new()));
    }
    let mut v = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad stage `{p}`")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    v.sort_unstable();
    v.dedup();
    match v.iter().find(|s| !(1..=3).contains(*s)) {
        Some(bad) => Err(format!("stage {bad} is outside 1-3")),
        None => Ok(Stages(v)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("usage error"));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::PrepareData(a) => prepare_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Footprint(a) => footprint(a),
        Command::Features(a) => features(a),
        Command::FeatureMap(a) => feature_map(a),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn prepare_data(a: PrepareArgs) -> Result<()> {
    let manifest_path = a.out_dir.join(&a.manifest_out);
    let mut run = RunManifest::new("prepare-data", &a.out_dir);
    run.input("data_dir", &a.data.data_dir)
        .setting("val_pct", a.data.val_pct, Origin::Flag)
        .setting("test_pct", a.data.test_pct, Origin::Flag)
        .output("manifest", &a.manifest_out);
    run.write(&a.out_dir.join(RUN_FILE))?;

    let ds = scan_with(&a.data.data_dir, a.data.val_pct, a.data.test_pct)?;
    let file =
        std::fs::File::create(&manifest_path).with_context(|| format!("cannot write {}", manifest_path.display()))?;
    ds.write_manifest(std::io::BufWriter::new(file))?;

    let counts = ds.split_counts();
    let total: usize = counts.iter().sum();
    for split in Split::ALL {
        let n = counts[split as usize];
        println!(
            "{:<5} {:>7} {:>6.2}%",
            split.as_str(),
            n,
            100.0 * n as f64 / total as f64
        );
    }
    if !ds.skipped.is_empty() {
        log::warn!("skipped {} files without a speaker id", ds.skipped.len());
    }
    println!(
        "{} utterances, {} noise recordings -> {}",
        total,
        ds.noise_files.len(),
        manifest_path.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    let last = a.out_dir.join("last.ckpt");
    let mut run = RunManifest::new("train", &a.out_dir);
    run.input("data_dir", &a.data.data_dir);

    let mut trainer = if a.resume {
        let t = Trainer::load(&last).with_context(|| format!("cannot resume from {}", last.display()))?;
        run.input("resumed_from", &last);
        t
    } else {
        let kv = match &a.config {
            Some(p) => {
                run.input("config", p);
                KvFile::read(p)?
            }
            None => KvFile::new(),
        };
        let mut cfg = TrainConfig::from_kv(&kv)?;
        if let Some(s) = a.seed {
            cfg.rng_seed = s;
        }
        if let Some(e) = a.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = a.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = a.base_lr {
            cfg.base_lr = lr;
        }
        if let Some(k) = a.features {
            cfg.features = k.into();
        }
        cfg.validate()?;
        let variant = match (a.variant, kv.parse_opt::<Variant>("variant")?) {
            (Some(v), _) | (None, Some(v)) => v,
            (None, None) => Variant::Cenet6,
        };
        let stages = match (&a.gcn_stages, kv.get("gcn_stages")) {
            (Some(s), _) => s.clone(),
            (None, Some(s)) => parse_stages(s)
                .map_err(anyhow::Error::msg)
                .context("config key `gcn_stages`")?,
            (None, None) => Stages(Vec::new()),
        };
        let has = |k: &str| kv.get(k).is_some();
        run.setting("variant", variant, Origin::of(a.variant.is_some(), has("variant")))
            .setting(
                "gcn_stages",
                &stages,
                Origin::of(a.gcn_stages.is_some(), has("gcn_stages")),
            )
            .setting("epochs", cfg.epochs, Origin::of(a.epochs.is_some(), has("epochs")))
            .setting(
                "batch_size",
                cfg.batch_size,
                Origin::of(a.batch_size.is_some(), has("batch_size")),
            )
            .setting("base_lr", cfg.base_lr, Origin::of(a.base_lr.is_some(), has("base_lr")))
            .setting(
                "features",
                cfg.features.as_str(),
                Origin::of(a.features.is_some(), has("features")),
            )
            .setting("rng_seed", cfg.rng_seed, Origin::of(a.seed.is_some(), has("rng_seed")));
        let mut resolved = KvFile::new();
        cfg.to_kv(&mut resolved);
        for key in [
            "power",
            "weight_decay",
            "momentum",
            "noise_prob",
            "snr_range_db",
            "shift_range_ms",
            "unknown_fraction",
            "silence_fraction",
            "queue_depth",
        ] {
            run.setting(key, resolved.get(key).unwrap_or_default(), Origin::of(false, has(key)));
        }
        let model = CENet::build(&ModelConfig::new(variant).with_gcn(&stages.0), cfg.rng_seed)?;
        Trainer::new(model, cfg)?
    };
    run.seed(trainer.cfg.rng_seed)
        .output("metrics", "metrics.csv")
        .output("last_checkpoint", "last.ckpt")
        .output("best_checkpoint", "best.ckpt");
    run.write(&a.out_dir.join(RUN_FILE))?;

    let ds = scan_with(&a.data.data_dir, a.data.val_pct, a.data.test_pct)?;
    let data = TrainData::from_dataset(ds, &trainer.cfg)?;
    log::info!(
        "training {} for {} epochs, batch {}, {} parameters",
        trainer.model.config().display_name(),
        trainer.cfg.epochs,
        trainer.cfg.batch_size,
        trainer.model.num_params()
    );
    let every = a.log_every.max(1);
    let report = trainer.run(&data, Some(&a.out_dir), |m| {
        if m.step % every == 0 {
            log::info!(
                "step {} epoch {} lr {:.5} loss {:.4} acc {:.3}",
                m.step,
                m.epoch,
                m.lr,
                m.loss,
                m.train_acc
            );
        }
        ControlFlow::Continue(())
    })?;
    match report.best_val {
        Some(b) => println!("{} steps, best validation accuracy {b:.4}", trainer.step),
        None => println!("{} steps, no validation split", trainer.step),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.thresholds < 2 {
        bail!("--thresholds must be at least 2");
    }
    let trainer = Trainer::load(&a.checkpoint).with_context(|| format!("cannot load {}", a.checkpoint.display()))?;
    let seed = a.seed.unwrap_or(trainer.cfg.rng_seed);
    let mut run = RunManifest::new("eval", &a.out_dir);
    run.seed(seed)
        .input("checkpoint", &a.checkpoint)
        .input("data_dir", &a.data.data_dir)
        .setting("split", a.split.as_str(), Origin::Flag)
        .setting(
            "thresholds",
            a.thresholds,
            Origin::of(a.thresholds != DEFAULT_THRESHOLDS, false),
        )
        .output("roc", &a.roc_out)
        .output("accuracy", "accuracy.csv");
    run.write(&a.out_dir.join(RUN_FILE))?;

    let ds = scan_with(&a.data.data_dir, a.data.val_pct, a.data.test_pct)?;
    let noise = ds.load_noise()?;
    let lengths: Vec<usize> = noise.iter().map(|c| c.len()).collect();
    let examples = ds.examples(a.split, &lengths, trainer.cfg.balance(), seed)?;
    let preds = trainer.predict(&examples, &noise)?;
    let curves = keyword_rocs(&preds, a.thresholds)?;
    write_file(&a.out_dir.join(&a.roc_out), roc_csv(&curves))?;
    let acc = preds.accuracy();
    write_file(
        &a.out_dir.join("accuracy.csv"),
        format!(
            "split,examples,accuracy\n{},{},{}\n",
            a.split.as_str(),
            preds.len(),
            acc
        ),
    )?;
    println!("accuracy {acc:.4} on {} {} examples", preds.len(), a.split.as_str());
    if let Some(overall) = curves.last() {
        println!("area under the overall ROC (FRR over FAR) {:.4}", overall.auc);
    }
    Ok(())
}

fn footprint(a: FootprintArgs) -> Result<()> {
    let model = CENet::<f32>::build(&ModelConfig::new(a.variant).with_gcn(&a.gcn_stages.0), 0)?;
    let report = analyze(&model);
    match &a.out {
        Some(out) => {
            let mut run = RunManifest::new("footprint", out.parent().unwrap_or(Path::new(".")));
            run.setting("variant", a.variant, Origin::Flag)
                .setting("gcn_stages", &a.gcn_stages, Origin::Flag)
                .output("report", out.file_name().map(PathBuf::from).unwrap_or_default());
            run.write(&beside(out))?;
            write_file(out, report.to_csv())?;
            println!("{report}");
        }
        None => match a.format {
            Format::Table => println!("{report}"),
            Format::Csv => print!("{}", report.to_csv()),
        },
    }
    Ok(())
}

fn features(a: FeaturesArgs) -> Result<()> {
    let kind: FeatureKind = a.kind.into();
    let mut run = RunManifest::new("features", a.out.parent().unwrap_or(Path::new(".")));
    run.input("wav", &a.wav)
        .setting("kind", kind.as_str(), Origin::Flag)
        .output("features", a.out.file_name().map(PathBuf::from).unwrap_or_default());
    run.write(&beside(&a.out))?;
    let clip = load_wav(&a.wav)?;
    let f = Frontend::new(FrontendConfig::default().with_kind(kind))?.compute(&clip)?;
    write_file(&a.out, f.to_csv())?;
    println!(
        "{} frames x {} {} coefficients -> {}",
        f.frames(),
        f.dims(),
        kind.as_str(),
        a.out.display()
    );
    Ok(())
}

fn feature_map(a: FeatureMapArgs) -> Result<()> {
    let point = match a.point {
        Point::Stage => TapPoint::StageOutput,
        Point::Augmented => TapPoint::Augmented,
    };
    let trainer = Trainer::load(&a.checkpoint).with_context(|| format!("cannot load {}", a.checkpoint.display()))?;
    let mut run = RunManifest::new("feature-map", a.out.parent().unwrap_or(Path::new(".")));
    run.input("checkpoint", &a.checkpoint)
        .input("wav", &a.wav)
        .setting("stage", a.stage, Origin::Flag)
        .setting("point", format!("{:?}", a.point).to_lowercase(), Origin::Flag)
        .output("map", a.out.file_name().map(PathBuf::from).unwrap_or_default());
    run.write(&beside(&a.out))?;
    let clip = load_wav(&a.wav)?;
    let f = Frontend::new(trainer.frontend_cfg.clone())?.compute(&clip)?;
    let x = Tensor::new(vec![1, 1, f.frames(), f.dims()], f.to_f32())?;
    let grid = stage_feature_map(&trainer.model, &x, a.stage, point)?;
    write_file(&a.out, grid.to_csv())?;
    println!("{} x {} map -> {}", grid.rows, grid.cols, a.out.display());
    Ok(())
}
