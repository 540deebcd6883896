//! `imgprep`: group enumeration, corpus labeling, network training,
//! inference and evaluation.
//!
//! Exit codes: 0 success, 1 partial or runtime failure, 2 usage or
//! configuration error. Progress is reported as JSON lines on stderr.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use imgprep_core::codec::{codec_by_name, Codec};
use imgprep_core::corpus::{read_jsonl, read_manifest, CorpusEntry};
use imgprep_core::eval::{export_curves, export_table, summarize, sweep_qf, ExportFormat, Preprocessor};
use imgprep_core::filters::{DeblockFilter, DetailFilter, Identity, NlmDenoise, OperatorRegistry, ReencodeOperator, SharedOperator};
use imgprep_core::image::{load_image, save_image, ImageBuffer, ImageFormat, PatchSpec};
use imgprep_core::labeling::{generate_groups, GroupGenConfig, GroupMode, LabelRecord, Labeler, ScoreSign};
use imgprep_core::metrics::{metric_by_name, QualityMetric};
use imgprep_core::synth::{write_corpus, CorpusSpec};
use imgprep_core::unet::{patch_pairs, train, TrainConfig, UNet, UNetConfig, UNetOperator};
use serde_json::json;

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "imgprep", version, about = "Compression-oriented image preprocessing pipeline")]
struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Codec quality factor (1-100).
    #[arg(long, global = true)]
    qf: Option<u8>,
    /// jpeg, hevc or webp.
    #[arg(long, global = true)]
    codec: Option<String>,
    /// proxy-nr, psnr, ssim or ms-ssim.
    #[arg(long, global = true)]
    metric: Option<String>,
    /// default (z_quality - z_bpp) or paper (z_quality + z_bpp).
    #[arg(long, global = true)]
    score_sign: Option<ScoreSign>,
    /// combinations or permutations.
    #[arg(long, global = true, value_parser = parse_group_mode)]
    group_mode: Option<GroupMode>,
    /// Longest operator chain.
    #[arg(long, global = true)]
    kmax: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the enumerated preprocessing groups.
    Groups,
    /// Score every group on every corpus image and write labels.
    Label(CorpusArgs),
    /// Train the network on labeled patches.
    Train(TrainArgs),
    /// Run the trained network on images.
    Preprocess(PreprocessArgs),
    /// Size/quality summary table per codec and preprocessor.
    Evaluate(CorpusArgs),
    /// Quality-factor sweep curves.
    Sweep(CorpusArgs),
    /// Write a seeded synthetic noisy corpus with its manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct CorpusArgs {
    /// Corpus manifest; overrides `corpus` from the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Labels manifest; defaults to `<out>/labels.jsonl`.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 10.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
}

fn parse_group_mode(s: &str) -> Result<GroupMode, String> {
    match s {
        "combinations" => Ok(GroupMode::Combinations),
        "permutations" => Ok(GroupMode::Permutations),
        other => Err(format!("unknown group mode `{other}` (expected combinations|permutations)")),
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    /// Bad flags, config or missing inputs.
    #[error("usage: {0}")]
    Usage(String),
    /// The run started but could not finish, or some items failed.
    #[error("failed: {0}")]
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn progress(value: serde_json::Value) {
    eprintln!("{value}");
}

fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(CliError::Usage)?,
        None => RunConfig::default(),
    };
    if let Some(v) = cli.workers {
        cfg.workers = v;
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = &cli.out {
        cfg.out = v.clone();
    }
    if let Some(v) = cli.qf {
        cfg.codec.qf = v;
    }
    if let Some(v) = &cli.codec {
        cfg.codec.name = v.clone();
    }
    if let Some(v) = &cli.metric {
        cfg.metric.name = v.clone();
    }
    if let Some(v) = cli.score_sign {
        cfg.score_sign = v;
    }
    if let Some(v) = cli.group_mode {
        cfg.groups.mode = v;
    }
    if let Some(v) = cli.kmax {
        cfg.groups.k_max = v;
    }
    match &cli.command {
        Command::Label(a) | Command::Evaluate(a) | Command::Sweep(a) => {
            if let Some(m) = &a.manifest {
                cfg.corpus = Some(m.clone());
            }
            if let Some(c) = &a.checkpoint {
                cfg.checkpoint = Some(c.clone());
            }
        }
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(c) = &a.checkpoint {
                cfg.checkpoint = Some(c.clone());
            }
        }
        Command::Preprocess(a) => {
            if let Some(c) = &a.checkpoint {
                cfg.checkpoint = Some(c.clone());
            }
        }
        Command::Groups | Command::Synth(_) => {}
    }
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Groups => "groups",
        Command::Label(_) => "label",
        Command::Train(_) => "train",
        Command::Preprocess(_) => "preprocess",
        Command::Evaluate(_) => "evaluate",
        Command::Sweep(_) => "sweep",
        Command::Synth(_) => "synth",
    }
}

fn ensure_out(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| failed(format!("cannot create {}: {e}", cfg.out.display())))?;
    std::fs::write(cfg.out.join(format!("config.{command}.toml")), cfg.to_toml()).map_err(failed)
}

fn build_operator(name: &str, cfg: &RunConfig) -> Result<SharedOperator, CliError> {
    let o = &cfg.operators;
    Ok(match name {
        "identity" => Arc::new(Identity),
        "nlm" => Arc::new(NlmDenoise::new(o.nlm_h, o.nlm_template, o.nlm_search).map_err(usage)?),
        "detail" => Arc::new(DetailFilter),
        "deblock" => {
            if !(0.0..=1.0).contains(&o.deblock_strength) {
                return Err(usage(format!("operators.deblock_strength must be in [0, 1], got {}", o.deblock_strength)));
            }
            Arc::new(DeblockFilter { strength: o.deblock_strength })
        }
        "reencode" => {
            if !(1..=100).contains(&o.reencode_quality) {
                return Err(usage("operators.reencode_quality must be in 1..=100"));
            }
            Arc::new(ReencodeOperator { quality: o.reencode_quality })
        }
        "unet" => Arc::new(UNetOperator::new(load_checkpoint(cfg)?)),
        other => return Err(usage(format!("unknown operator `{other}`"))),
    })
}

fn build_registry(cfg: &RunConfig) -> Result<OperatorRegistry, CliError> {
    let mut reg = OperatorRegistry::new();
    for name in &cfg.operators.pool {
        reg.register(build_operator(name, cfg)?).map_err(usage)?;
    }
    Ok(reg)
}

fn build_codec(name: &str) -> Result<Arc<dyn Codec>, CliError> {
    codec_by_name(name).map(Arc::from).ok_or_else(|| usage(format!("unknown codec `{name}` (expected jpeg|hevc|webp)")))
}

fn build_metric(cfg: &RunConfig) -> Result<Arc<dyn QualityMetric>, CliError> {
    metric_by_name(&cfg.metric.name, cfg.metric.proxy).map_err(usage)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<UNet, CliError> {
    let path = cfg.checkpoint_path();
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} not found (run `imgprep train` first)", path.display())));
    }
    UNet::load(&path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_corpus(cfg: &RunConfig) -> Result<Vec<CorpusEntry>, CliError> {
    let path = cfg.corpus.as_ref().ok_or_else(|| usage("no corpus manifest (set `corpus` or pass --manifest)"))?;
    if !path.is_file() {
        return Err(usage(format!("manifest {} not found", path.display())));
    }
    read_manifest(path).map_err(usage)
}

fn cmd_groups(cfg: &RunConfig) -> Result<(), CliError> {
    let reg = build_registry(cfg)?;
    let gcfg = GroupGenConfig { n: reg.len(), k_max: cfg.groups.k_max, mode: cfg.groups.mode };
    let groups = generate_groups(&gcfg, &reg).map_err(usage)?;
    for g in groups {
        println!("{}\t{}", g.index, g.name());
    }
    Ok(())
}

fn cmd_label(cfg: &RunConfig) -> Result<(), CliError> {
    let entries = load_corpus(cfg)?;
    let registry = build_registry(cfg)?;
    let gcfg = GroupGenConfig { n: registry.len(), k_max: cfg.groups.k_max, mode: cfg.groups.mode };
    let groups = generate_groups(&gcfg, &registry).map_err(usage)?;
    let labeler = Labeler {
        registry,
        groups,
        codec: build_codec(&cfg.codec.name)?,
        quality: cfg.codec.qf,
        metric: build_metric(cfg)?,
        sign: cfg.score_sign,
    };
    ensure_out(cfg, "label")?;
    let total = entries.len();
    let mut done = 0usize;
    let report = labeler
        .label_corpus_with_progress(&entries, &cfg.out, rayon::current_num_threads(), |id, ok| {
            done += 1;
            progress(json!({"event": "label", "id": id, "ok": ok, "done": done, "total": total}));
        })
        .map_err(failed)?;
    progress(json!({"event": "label_done", "labeled": report.labeled, "skipped": report.skipped, "failed": report.failures.len()}));
    if !report.is_complete() {
        return Err(failed(format!("{} item(s) failed, see {}", report.failures.len(), cfg.out.join("failures.jsonl").display())));
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    let labels_path = args.labels.clone().unwrap_or_else(|| cfg.out.join("labels.jsonl"));
    if !labels_path.is_file() {
        return Err(usage(format!("labels manifest {} not found (run `imgprep label` first)", labels_path.display())));
    }
    let records: Vec<LabelRecord> = read_jsonl(&labels_path).map_err(usage)?;
    let spec = PatchSpec::square(cfg.train.patch_size, cfg.train.patch_stride);
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for r in records.iter().filter(|r| r.split == cfg.train.split) {
        let input = load_image(&r.input_path).map_err(failed)?;
        let label = load_image(&r.label_path).map_err(failed)?;
        let p = patch_pairs(&input, &label, spec).map_err(failed)?;
        if p.is_empty() {
            skipped += 1;
        }
        pairs.extend(p);
    }
    if pairs.is_empty() {
        return Err(usage(format!("no {}x{} training patches in split `{}`", spec.patch_width, spec.patch_height, cfg.train.split)));
    }
    ensure_out(cfg, "train")?;
    progress(json!({"event": "train_start", "patches": pairs.len(), "images_too_small": skipped}));
    let mut net = UNet::new(UNetConfig::with_base(cfg.train.base_channels), cfg.seed).map_err(usage)?;
    if cfg.train.identity_init {
        net.zero_projection();
    }
    let tcfg = TrainConfig { epochs: cfg.train.epochs, batch_size: cfg.train.batch_size, lr: cfg.train.lr, seed: cfg.seed };
    let report = train(&mut net, &pairs, &tcfg, |epoch, loss| progress(json!({"event": "epoch", "epoch": epoch, "mean_loss": loss})))
        .map_err(failed)?;
    let mut csv = String::from("epoch,mean_loss\n");
    for (e, l) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    std::fs::write(cfg.out.join("loss.csv"), csv).map_err(failed)?;
    let ckpt = cfg.checkpoint_path();
    net.save(&ckpt).map_err(failed)?;
    progress(json!({"event": "train_done", "steps": report.steps, "checkpoint": ckpt}));
    Ok(())
}

fn cmd_preprocess(cfg: &RunConfig, args: &PreprocessArgs) -> Result<(), CliError> {
    let net = load_checkpoint(cfg)?;
    ensure_out(cfg, "preprocess")?;
    let mut failures = 0;
    for path in &args.images {
        let result = load_image(path).map_err(|e| e.to_string()).and_then(|img| {
            let out = net.infer(&img);
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let dest = cfg.out.join(format!("{stem}.png"));
            save_image(&out, &dest, ImageFormat::Png).map_err(|e| e.to_string())?;
            Ok(dest)
        });
        match result {
            Ok(dest) => progress(json!({"event": "preprocess", "input": path, "output": dest, "ok": true})),
            Err(e) => {
                failures += 1;
                progress(json!({"event": "preprocess", "input": path, "ok": false, "error": e}));
            }
        }
    }
    if failures > 0 {
        return Err(failed(format!("{failures} image(s) failed")));
    }
    Ok(())
}

fn load_eval_images(cfg: &RunConfig) -> Result<Vec<ImageBuffer>, CliError> {
    let entries = load_corpus(cfg)?;
    let selected: Vec<&CorpusEntry> = entries.iter().filter(|e| cfg.eval.split.as_ref().is_none_or(|s| &e.split == s)).collect();
    if selected.is_empty() {
        return Err(usage("no corpus entries selected for evaluation"));
    }
    selected.iter().map(|e| load_image(&e.path).map_err(failed)).collect()
}

fn eval_preprocessors(cfg: &RunConfig) -> Result<Vec<Preprocessor>, CliError> {
    let mut out = vec![Preprocessor::original()];
    for name in &cfg.eval.preprocessors {
        out.push(Preprocessor::named(name, build_operator(name, cfg)?));
    }
    Ok(out)
}

fn export_all(out: &Path, stem: &str, mut f: impl FnMut(&Path, ExportFormat) -> Result<(), imgprep_core::eval::EvalError>) -> Result<(), CliError> {
    for (ext, fmt) in [("csv", ExportFormat::Csv), ("json", ExportFormat::Json), ("svg", ExportFormat::Svg)] {
        f(&out.join(format!("{stem}.{ext}")), fmt).map_err(failed)?;
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let images = load_eval_images(cfg)?;
    let pres = eval_preprocessors(cfg)?;
    let codecs = cfg.eval.codecs.iter().map(|c| build_codec(c)).collect::<Result<Vec<_>, _>>()?;
    let metric = build_metric(cfg)?;
    ensure_out(cfg, "evaluate")?;
    let rows = summarize(&images, &pres, &codecs, cfg.codec.qf, metric.as_ref()).map_err(failed)?;
    export_all(&cfg.out, "summary", |p, f| export_table(&rows, p, f))?;
    println!("{:<8} {:<24} {:>12} {:>10} {:>10}  status", "codec", "preprocessor", "size (MB)", "ratio %", "quality");
    for r in &rows {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<8} {:<24} {:>12.6} {:>10} {:>10}  {}",
            r.codec,
            r.preprocessor,
            r.total_bytes as f64 / 1e6,
            fmt(r.compression_ratio_pct),
            fmt(r.mean_quality),
            r.status
        );
    }
    let failures = rows.iter().filter(|r| r.status.starts_with("failed")).count();
    if failures > 0 {
        return Err(failed(format!("{failures} row(s) failed")));
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let images = load_eval_images(cfg)?;
    let pres = eval_preprocessors(cfg)?;
    let codec = build_codec(&cfg.codec.name)?;
    let metric = build_metric(cfg)?;
    ensure_out(cfg, "sweep")?;
    let curves = sweep_qf(&images, &pres, codec.as_ref(), &cfg.eval.qf_grid, metric.as_ref()).map_err(failed)?;
    export_all(&cfg.out, "sweep", |p, f| export_curves(&curves, p, f))?;
    for c in &curves {
        progress(json!({"event": "curve", "preprocessor": c.preprocessor, "points": c.points.len(), "failures": c.failures}));
    }
    if curves.iter().any(|c| !c.failures.is_empty()) {
        return Err(failed("some sweep points failed"));
    }
    Ok(())
}

fn cmd_synth(cfg: &RunConfig, args: &SynthArgs) -> Result<(), CliError> {
    if args.count == 0 || args.width == 0 || args.height == 0 || !(0.0..=1.0).contains(&args.test_fraction) {
        return Err(usage("count, width and height must be positive and test-fraction in [0, 1]"));
    }
    ensure_out(cfg, "synth")?;
    let spec = CorpusSpec {
        count: args.count,
        width: args.width,
        height: args.height,
        noise_sigma: args.noise,
        test_fraction: args.test_fraction,
        seed: cfg.seed,
    };
    let entries = write_corpus(&cfg.out, &spec).map_err(failed)?;
    progress(json!({"event": "synth_done", "images": entries.len(), "manifest": cfg.out.join("manifest.jsonl")}));
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = effective_config(cli)?;
    if cfg.workers > 0 {
        // only fails if a global pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    log::debug!("running {}", command_name(&cli.command));
    match &cli.command {
        Command::Groups => cmd_groups(&cfg),
        Command::Label(_) => cmd_label(&cfg),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Preprocess(a) => cmd_preprocess(&cfg, a),
        Command::Evaluate(_) => cmd_evaluate(&cfg),
        Command::Sweep(_) => cmd_sweep(&cfg),
        Command::Synth(a) => cmd_synth(&cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("imgprep: {e}");
            ExitCode::from(e.code())
        }
    }
}
