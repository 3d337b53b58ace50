//! `iprrn` command-line tool: synthesise data, degrade HR frames, train,
//! evaluate and run ablations.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use iprrn::ablation::{ablate, AblationPlan};
use iprrn::data::{
    degrade, list_clips, read_clip_dir, render_manifest, synth_sequence, write_clip_dir, ClipRecord,
    DatasetRoot, DegradationSpec, Split, SynthKind,
};
use iprrn::metrics::{psnr_plot_svg, write_metrics_csv, MetricsReport};
use iprrn::trainer::{evaluate, Checkpoint, Trainer};
use iprrn::{Iprrn, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{line_of_key, RunConfig};
use crate::manifest::{timestamp, InputHasher, RunManifest, MANIFEST_FILE};

#[derive(Parser)]
#[command(name = "iprrn", version, about = "Recurrent video super-resolution with a prebuilt initial hidden state")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the train split of a dataset root.
    Train(TrainArgs),
    /// Reconstruct clips with one or more checkpoints and score them.
    Eval(EvalArgs),
    /// Write LR frames for every clip of an HR tree.
    Degrade(DegradeArgs),
    /// Train and score every variant of an ablation plan.
    Ablate(AblateArgs),
    /// Generate a synthetic HR dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Output {
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Reuse an output directory that already holds a run.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with [model], [train], [degradation] and [metrics] sections.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data_root: PathBuf,
    #[command(flatten)]
    output: Output,
    /// Overrides both the init seed and the data-order seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "cpu", value_parser = ["cpu"])]
    device: String,
    /// Continue from a checkpoint up to the configured max_epochs.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate; repeat to compare several on the same clips.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// Series names, one per checkpoint; defaults to the file stems.
    #[arg(long = "label")]
    labels: Vec<String>,
    #[arg(long)]
    data_root: PathBuf,
    #[command(flatten)]
    output: Output,
    /// Supplies [degradation] and [metrics]; other sections are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Write one SVG per clip with every checkpoint's per-frame PSNR.
    #[arg(long)]
    per_frame_plot: bool,
    /// Score the HR frames against themselves (pipeline check).
    #[arg(long)]
    debug_identity: bool,
    #[arg(long, default_value = "cpu", value_parser = ["cpu"])]
    device: String,
}

#[derive(Args)]
struct DegradeArgs {
    /// Dataset root with an hr/ directory, or a bare tree of clip directories.
    #[arg(long)]
    data_root: PathBuf,
    /// LR root to create; defaults to <data-root>/lr when the root has hr/.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reads only the [degradation] section.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write into an existing LR root.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Ablation plan: [model], [train], [metrics] and either [sweep] or [[variant]].
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data_root: PathBuf,
    #[command(flatten)]
    output: Output,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "cpu", value_parser = ["cpu"])]
    device: String,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    output: Output,
    #[arg(long, default_value = "translating_texture")]
    kind: SynthKind,
    #[arg(long, default_value_t = 8)]
    clips: usize,
    #[arg(long, default_value_t = 7)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Clips assigned to the val split (taken after the train clips).
    #[arg(long, default_value_t = 0)]
    val: usize,
    /// Clips assigned to the test split (the last ones).
    #[arg(long, default_value_t = 0)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure split by exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<iprrn::Error> for Failure {
    fn from(e: iprrn::Error) -> Self {
        match e {
            iprrn::Error::Config(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

type Outcome<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, &args),
        Command::Eval(a) => cmd_eval(a, &args),
        Command::Degrade(a) => cmd_degrade(a, &args),
        Command::Ablate(a) => cmd_ablate(a, &args),
        Command::Synth(a) => cmd_synth(a, &args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Creates `out`, refusing to reuse a directory holding an earlier run.
fn prepare_out(output: &Output) -> Outcome<()> {
    if output.out.join(MANIFEST_FILE).exists() && !output.force {
        return Err(usage(format!(
            "{} already contains a run; pass --force to overwrite",
            output.out.display()
        )));
    }
    fs::create_dir_all(&output.out).with_context(|| format!("creating {}", output.out.display()))?;
    Ok(())
}

fn open_root(path: &Path) -> Outcome<DatasetRoot> {
    if !path.is_dir() {
        return Err(usage(format!("data root {} does not exist", path.display())));
    }
    DatasetRoot::open(path).map_err(|e| Failure::Usage(e.into()))
}

fn load_config(path: &Path) -> Outcome<(RunConfig, Vec<u8>)> {
    RunConfig::load(path).map_err(Failure::Usage)
}

fn hash_root(hasher: &mut InputHasher, root: &Path) -> Outcome<()> {
    for sub in ["hr", "lr"] {
        let dir = root.join(sub);
        if dir.is_dir() {
            hasher.add_tree(sub, &dir)?;
        }
    }
    let manifest = root.join("manifest.txt");
    if manifest.is_file() {
        hasher.add_file("manifest.txt", &manifest)?;
    }
    Ok(())
}

fn to_table<T: serde::Serialize>(value: &T) -> anyhow::Result<toml::Table> {
    toml::Table::try_from(value).context("serialising configuration")
}

fn cmd_train(args: TrainArgs, argv: &[String]) -> Outcome<()> {
    let started = timestamp();
    let (mut cfg, bytes) = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.apply_seed(seed);
    }
    cfg.validate()?;
    let root = open_root(&args.data_root)?;
    prepare_out(&args.output)?;

    let clips = root.load(&[Split::Train], &cfg.degradation)?;
    if clips.is_empty() {
        return Err(usage(format!("{} has no training clips", args.data_root.display())));
    }
    let mut hasher = InputHasher::default();
    hasher.add_bytes("config", &bytes);
    hash_root(&mut hasher, &args.data_root)?;

    let mut trainer = match &args.resume {
        Some(path) => {
            hasher.add_file("resume", path)?;
            let mut ck = Checkpoint::load(path)?;
            if ck.model_config != cfg.model {
                return Err(usage(format!(
                    "checkpoint {} was trained with a different [model] section",
                    path.display()
                )));
            }
            ck.train_config = cfg.train.clone();
            Trainer::from_checkpoint(&ck)?
        }
        None => Trainer::new(Iprrn::new(&cfg.model)?, cfg.train.clone())?,
    };
    eprintln!(
        "training {} parameters on {} clips for {} epochs",
        cfg.model.count_params(),
        clips.len(),
        cfg.train.max_epochs().saturating_sub(trainer.epochs_completed())
    );
    let ck = trainer.fit(&clips, Some(&args.output.out)).map_err(|e| match e {
        iprrn::Error::Diverged {
            diagnostic: Some(ref p),
            ..
        } => Failure::Runtime(anyhow!("{e}; state saved to {}", p.display())),
        other => other.into(),
    })?;
    if let Some(last) = ck.log.last() {
        println!("epoch {} loss {:.6} lr {:.3e}", last.epoch, last.loss, last.lr);
    }
    RunManifest {
        command: "train".into(),
        args: argv.to_vec(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: Some(cfg.train.seed),
        input_files: hasher.len(),
        input_hash: hasher.finish(),
        started,
        finished: timestamp(),
        config: to_table(&cfg)?,
        notes: Vec::new(),
    }
    .write(&args.output.out)?;
    println!("wrote {}", args.output.out.join("final.ckpt").display());
    Ok(())
}

/// Distinct series names: file stem, then parent dir plus stem, then an index.
fn checkpoint_labels(paths: &[PathBuf], given: &[String]) -> Outcome<Vec<String>> {
    if !given.is_empty() {
        if given.len() != paths.len() {
            return Err(usage(format!(
                "{} labels given for {} checkpoints",
                given.len(),
                paths.len()
            )));
        }
        return Ok(given.to_vec());
    }
    let stem = |p: &Path| p.file_stem().map_or("model".to_string(), |s| s.to_string_lossy().into_owned());
    let mut labels: Vec<String> = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let mut label = stem(p);
        if labels.contains(&label) || paths.iter().filter(|q| stem(q) == label).count() > 1 {
            if let Some(parent) = p.parent().and_then(|d| d.file_name()) {
                label = format!("{}_{label}", parent.to_string_lossy());
            }
        }
        if labels.contains(&label) {
            label = format!("{label}_{}", i + 1);
        }
        labels.push(label);
    }
    Ok(labels)
}

fn write_sr_frames(dir: &Path, frames: &[Tensor]) -> Outcome<()> {
    write_clip_dir(dir, frames)?;
    Ok(())
}

fn cmd_eval(args: EvalArgs, argv: &[String]) -> Outcome<()> {
    let started = timestamp();
    if args.checkpoints.is_empty() && !args.debug_identity {
        return Err(usage("give at least one --checkpoint (or --debug-identity)"));
    }
    let mut hasher = InputHasher::default();
    let (cfg, explicit) = match &args.config {
        Some(path) => {
            let (cfg, bytes) = load_config(path)?;
            hasher.add_bytes("config", &bytes);
            (cfg, true)
        }
        None => (RunConfig::default(), false),
    };
    let root = open_root(&args.data_root)?;
    prepare_out(&args.output)?;
    hash_root(&mut hasher, &args.data_root)?;

    let mut series: Vec<(String, Vec<(String, MetricsReport)>)> = Vec::new();
    let mut specs = BTreeMap::new();
    let labels = checkpoint_labels(&args.checkpoints, &args.labels)?;
    for (path, label) in args.checkpoints.iter().zip(&labels) {
        hasher.add_file(&format!("checkpoint/{label}"), path)?;
        let ck = Checkpoint::load(path)?;
        let model = ck.model()?;
        let spec = if explicit {
            cfg.degradation.clone()
        } else {
            DegradationSpec {
                scale: ck.model_config.scale,
                ..DegradationSpec::default()
            }
        };
        let clips = root.load(&[args.split], &spec)?;
        let results = evaluate(&model, &clips, cfg.metrics)?;
        let dir = args.output.out.join(label);
        for (id, _, sr) in &results {
            write_sr_frames(&dir.join("sr").join(id), sr)?;
        }
        specs.insert(label.clone(), spec);
        series.push((label.clone(), results.into_iter().map(|(id, r, _)| (id, r)).collect()));
    }
    if args.debug_identity {
        let clips = root.load(&[args.split], &cfg.degradation)?;
        let reports = clips
            .iter()
            .map(|c: &ClipRecord| Ok((c.id.clone(), MetricsReport::evaluate(&c.hr, &c.hr, cfg.metrics)?)))
            .collect::<iprrn::Result<Vec<_>>>()?;
        specs.insert("identity".into(), cfg.degradation.clone());
        series.push(("identity".into(), reports));
    }

    for (label, reports) in &series {
        let dir = args.output.out.join(label);
        fs::create_dir_all(&dir)?;
        let path = dir.join("metrics.csv");
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_metrics_csv(file, reports)?;
        let n = reports.len().max(1) as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
        println!(
            "{label}: {} clips, PSNR {:.3} dB, SSIM {:.4}, gap {:.3} dB",
            reports.len(),
            mean(|r| r.mean_psnr),
            mean(|r| r.mean_ssim),
            mean(|r| r.gap_psnr)
        );
    }
    if args.per_frame_plot {
        let plots = args.output.out.join("plots");
        fs::create_dir_all(&plots)?;
        let clip_ids: Vec<String> = series.first().map_or(Vec::new(), |(_, r)| r.iter().map(|(id, _)| id.clone()).collect());
        for (i, id) in clip_ids.iter().enumerate() {
            let curves: Vec<(String, Vec<f64>)> = series
                .iter()
                .map(|(label, reports)| (label.clone(), reports[i].1.per_frame_psnr.clone()))
                .collect();
            fs::write(plots.join(format!("{id}.svg")), psnr_plot_svg(id, &curves))?;
        }
    }

    let mut config = toml::Table::new();
    config.insert("split".into(), toml::Value::String(args.split.to_string()));
    config.insert("metrics".into(), toml::Value::Table(to_table(&cfg.metrics)?));
    config.insert("degradation".into(), toml::Value::Table(to_table(&specs)?));
    RunManifest {
        command: "eval".into(),
        args: argv.to_vec(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: None,
        input_files: hasher.len(),
        input_hash: hasher.finish(),
        started,
        finished: timestamp(),
        config,
        notes: Vec::new(),
    }
    .write(&args.output.out)?;
    Ok(())
}

fn cmd_degrade(args: DegradeArgs, argv: &[String]) -> Outcome<()> {
    let started = timestamp();
    if !args.data_root.is_dir() {
        return Err(usage(format!("data root {} does not exist", args.data_root.display())));
    }
    let nested = args.data_root.join("hr");
    let (hr_root, lr_root) = if nested.is_dir() {
        let lr = args.out.clone().unwrap_or_else(|| args.data_root.join("lr"));
        (nested, lr)
    } else {
        match &args.out {
            Some(out) => (args.data_root.clone(), out.clone()),
            None => return Err(usage("--out is required when the data root has no hr/ directory")),
        }
    };
    let mut hasher = InputHasher::default();
    let spec = match &args.config {
        Some(path) => {
            let (cfg, bytes) = load_config(path)?;
            hasher.add_bytes("config", &bytes);
            cfg.degradation
        }
        None => DegradationSpec::default(),
    };
    spec.validate()?;
    if lr_root.exists() && fs::read_dir(&lr_root)?.next().is_some() && !args.force {
        return Err(usage(format!(
            "{} already exists; pass --force to write into it",
            lr_root.display()
        )));
    }
    let ids = list_clips(&hr_root)?;
    if ids.is_empty() {
        return Err(usage(format!("{} contains no clip directories", hr_root.display())));
    }
    fs::create_dir_all(&lr_root)?;
    let mut notes = Vec::new();
    let mut written = 0;
    for id in &ids {
        let result = (|| -> anyhow::Result<usize> {
            let dir = hr_root.join(id);
            hasher.add_tree(id, &dir)?;
            let hr = read_clip_dir(&dir)?;
            let lr = degrade(&hr, &spec)?;
            write_clip_dir(&lr_root.join(id), &lr)?;
            Ok(lr.len())
        })();
        match result {
            Ok(n) => {
                written += 1;
                eprintln!("{id}: {n} frames");
            }
            Err(e) => {
                eprintln!("warning: skipping clip {id}: {e:#}");
                notes.push(format!("skipped {id}: {e:#}"));
            }
        }
    }
    let mut config = toml::Table::new();
    config.insert("hr_root".into(), toml::Value::String(hr_root.display().to_string()));
    config.insert("degradation".into(), toml::Value::Table(to_table(&spec)?));
    RunManifest {
        command: "degrade".into(),
        args: argv.to_vec(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: None,
        input_files: hasher.len(),
        input_hash: hasher.finish(),
        started,
        finished: timestamp(),
        config,
        notes,
    }
    .write(&lr_root)?;
    if written == 0 {
        return Err(Failure::Runtime(anyhow!("every clip failed to degrade")));
    }
    println!("degraded {written} of {} clips into {}", ids.len(), lr_root.display());
    Ok(())
}

/// Points an unknown-key error at its line in the plan text.
fn locate_key_error(e: iprrn::Error, text: &str, origin: &Path) -> Failure {
    let msg = e.to_string();
    let line = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.contains("unknown field"))
        .and_then(|key| line_of_key(text, key));
    match line {
        Some(n) => usage(format!("{}, line {n}: {msg}", origin.display())),
        None => usage(format!("{}: {msg}", origin.display())),
    }
}

fn cmd_ablate(args: AblateArgs, argv: &[String]) -> Outcome<()> {
    let started = timestamp();
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("cannot read plan {}", args.config.display()))
        .map_err(Failure::Usage)?;
    let mut plan = AblationPlan::parse(&text).map_err(|e| usage(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        plan.model.insert("init_seed".into(), toml::Value::Integer(seed as i64));
        plan.train.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    let variants = plan.resolve().map_err(|e| locate_key_error(e, &text, &args.config))?;
    let root = open_root(&args.data_root)?;
    prepare_out(&args.output)?;
    let spec = DegradationSpec {
        scale: variants[0].model.scale,
        ..DegradationSpec::default()
    };
    let train = root.load(&[Split::Train], &spec)?;
    let eval = match root.manifest {
        Some(_) => root.load(&[Split::Test, Split::Val], &spec)?,
        None => train.clone(),
    };
    if train.is_empty() || eval.is_empty() {
        return Err(usage(format!(
            "{} needs both training and evaluation clips",
            args.data_root.display()
        )));
    }
    let mut hasher = InputHasher::default();
    hasher.add_bytes("plan", text.as_bytes());
    hash_root(&mut hasher, &args.data_root)?;

    eprintln!("{} variants, {} train clips, {} eval clips", variants.len(), train.len(), eval.len());
    let report = ablate(&plan, &train, &eval)?;
    report.write_csv(&args.output.out.join("report.csv"))?;
    let table = report.to_markdown();
    fs::write(args.output.out.join("report.md"), &table)?;
    print!("{table}");

    let failures: Vec<String> = report
        .rows
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.name)))
        .collect();
    let mut config = to_table(&plan)?;
    config.insert("degradation".into(), toml::Value::Table(to_table(&spec)?));
    RunManifest {
        command: "ablate".into(),
        args: argv.to_vec(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: args.seed,
        input_files: hasher.len(),
        input_hash: hasher.finish(),
        started,
        finished: timestamp(),
        config,
        notes: failures.clone(),
    }
    .write(&args.output.out)?;
    if failures.len() == report.rows.len() {
        return Err(Failure::Runtime(anyhow!("every variant failed: {}", failures.join("; "))));
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs, argv: &[String]) -> Outcome<()> {
    let started = timestamp();
    if args.clips == 0 || args.frames == 0 {
        return Err(usage("--clips and --frames must be positive"));
    }
    if args.val + args.test > args.clips {
        return Err(usage(format!(
            "--val {} plus --test {} exceeds --clips {}",
            args.val, args.test, args.clips
        )));
    }
    prepare_out(&args.output)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut splits = BTreeMap::new();
    let n_train = args.clips - args.val - args.test;
    for i in 0..args.clips {
        let id = format!("{}_{i:04}", args.kind);
        let frames = synth_sequence(args.kind, args.frames, args.height, args.width, rng.gen())?;
        write_clip_dir(&args.output.out.join("hr").join(&id), &frames)?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + args.val {
            Split::Val
        } else {
            Split::Test
        };
        splits.insert(id, split);
    }
    fs::write(args.output.out.join("manifest.txt"), render_manifest(&splits))?;

    let mut config = toml::Table::new();
    config.insert("kind".into(), toml::Value::String(args.kind.to_string()));
    for (k, v) in [
        ("clips", args.clips),
        ("frames", args.frames),
        ("height", args.height),
        ("width", args.width),
        ("val", args.val),
        ("test", args.test),
    ] {
        config.insert(k.into(), toml::Value::Integer(v as i64));
    }
    RunManifest {
        command: "synth".into(),
        args: argv.to_vec(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: Some(args.seed),
        input_files: 0,
        input_hash: InputHasher::default().finish(),
        started,
        finished: timestamp(),
        config,
        notes: Vec::new(),
    }
    .write(&args.output.out)?;
    println!(
        "wrote {} clips of {} frames ({}x{}) to {}",
        args.clips,
        args.frames,
        args.height,
        args.width,
        args.output.out.display()
    );
    Ok(())
}
