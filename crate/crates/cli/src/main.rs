//! `paco`: masked-patch pre-training with a learned patch codebook.
//!
//! Subcommands cover the full loop: synthesize or prepare a dataset, run the
//! two-phase pre-training, probe a checkpoint on parsing or alignment,
//! render reconstruction panels, inspect the codebook, and run the ablation
//! grid. Every successful command prints a one-line JSON run summary
//! (command, config echo, seed, wall time, output paths, headline metrics)
//! as its last stdout line. Runtime failures exit 1 with a one-line JSON
//! error on stderr; usage errors exit 2.
//!
//! `--data` accepts a manifest path, a dataset directory containing
//! `manifest.jsonl`, or `synth:COUNT` to use a deterministic synthetic
//! dataset generated at the configured image size and seed. Synthetic
//! datasets are cached under `$PACO_CACHE_DIR` (default: a `paco-cache`
//! directory under the system temp dir); a cache hit is bit-identical to
//! regeneration, so the cache is purely a speedup.

use std::env;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Array3};

use paco_core::checkpoint::load_checkpoint;
use paco_core::codebook::{predict_beliefs, substitute};
use paco_core::config::RunConfig;
use paco_core::data::{
    align_crop_pad, estimate_similarity, five_points, load_image_png, read_manifest,
    resize_bilinear, save_image_png, save_landmarks_json, write_manifest,
    write_synthetic_dataset, AlignTemplate, DatasetManifest, ManifestRecord,
};
use paco_core::eval::{run_probe, ProbeOptions, ProbeReport, ProbeSample, ProbeTask};
use paco_core::mask::{sample_mask, MaskSet};
use paco_core::patch::{patchify, ImageTensor};
use paco_core::pretrain::{
    run_pretraining, select_tokens, AblationSpec, SelectionMode, TrainState,
};
use paco_core::rng::stream_rng;

/// Samples of `synth:COUNT` datasets that land in the test split (every Nth).
const SYNTH_TEST_EVERY: usize = 6;
/// Gap between the panels of a reconstruction strip, in pixels.
const PANEL_GAP: usize = 2;
/// Magic prefix of the codebook token dump.
const TOKENS_MAGIC: &[u8; 8] = b"PACOTOK1";

#[derive(Parser)]
#[command(
    name = "paco",
    version,
    about = "Masked-patch pre-training with a learned patch codebook",
    long_about = "Masked-patch pre-training with a learned patch codebook.\n\n\
        Every successful command prints a one-line JSON run summary as its\n\
        last stdout line. `--data` accepts a manifest path, a directory\n\
        containing manifest.jsonl, or synth:COUNT for a cached deterministic\n\
        synthetic dataset (cache root: $PACO_CACHE_DIR)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the two-phase pre-training loop (incubation, then main)
    Pretrain(PretrainArgs),
    /// Probe a checkpoint on face parsing or alignment
    Evaluate(EvaluateArgs),
    /// Render original / masked / reconstructed panels for one image
    Reconstruct(ReconstructArgs),
    /// Dump codebook tokens and per-position selection histograms
    CodebookDump(CodebookDumpArgs),
    /// Generate a labeled synthetic face dataset
    DataSynth(DataSynthArgs),
    /// Align, crop, and resize a labeled dataset to the model input frame
    DataPrep(DataPrepArgs),
    /// Train every arm of an ablation grid and emit a comparison table
    Ablate(AblateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain(_) => "pretrain",
            Command::Evaluate(_) => "evaluate",
            Command::Reconstruct(_) => "reconstruct",
            Command::CodebookDump(_) => "codebook-dump",
            Command::DataSynth(_) => "data-synth",
            Command::DataPrep(_) => "data-prep",
            Command::Ablate(_) => "ablate",
        }
    }
}

/// Config file plus per-key overrides, shared by the training commands.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set epochs=2 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Random seed (shorthand for --set seed=S)
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)
                .with_context(|| format!("config file {}", path.display()))?,
            None => RunConfig::default(),
        };
        let mut pairs = Vec::new();
        for item in &self.set {
            let (key, value) = item
                .split_once('=')
                .with_context(|| format!("--set '{item}' is not KEY=VALUE"))?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        // Depth first, mirroring the config file rules: setting encoder_depth
        // resets the tap layers, so explicit taps must land afterwards.
        for (k, v) in pairs.iter().filter(|(k, _)| k == "encoder_depth") {
            cfg.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "encoder_depth") {
            cfg.set(k, v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Manifest path, dataset directory, or synth:COUNT
    #[arg(long)]
    data: String,
    /// Output directory for checkpoints, the step log, and the run record
    #[arg(long)]
    out: PathBuf,
    /// Ablation switches: comma-separated key=value pairs with keys
    /// selection (belief|random|single_token), n (0 keeps the config), and
    /// incubation (on|off)
    #[arg(long, value_name = "SPEC")]
    ablation: Option<String>,
    /// Resume from a checkpoint written by an earlier run
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint produced by `paco pretrain`
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_parser = ["parsing", "alignment"])]
    task: String,
    /// Probe regime: head-only on frozen features, or end-to-end
    #[arg(long, default_value = "frozen", value_parser = ["frozen", "finetune"])]
    mode: String,
    /// Manifest path, dataset directory, or synth:COUNT; the head trains on
    /// the train split and metrics are reported on the test split
    #[arg(long)]
    data: String,
    /// Output directory for the JSON report and CSV breakdown
    #[arg(long)]
    out: PathBuf,
    /// Probe optimization steps
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Probe learning rate
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Probe batch size
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Seed for head init and probe batch order
    #[arg(long, default_value_t = 0)]
    probe_seed: u64,
    /// Width of the fused tap-feature projection
    #[arg(long, default_value_t = 64)]
    fusion_width: usize,
    /// Landmark error normalizer
    #[arg(long, default_value = "inter_ocular", value_parser = ["inter_ocular", "diag", "box"])]
    norm: String,
    /// Failure threshold on the normalized error fraction
    #[arg(long, default_value_t = 0.07)]
    auc_threshold: f64,
    /// Include class 0 in the parsing F1 mean
    #[arg(long)]
    include_background: bool,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Checkpoint produced by `paco pretrain`
    #[arg(long)]
    ckpt: PathBuf,
    /// Input PNG; resized to the model frame when dimensions differ
    #[arg(long)]
    image: PathBuf,
    /// Output directory for the four PNG panels
    #[arg(long)]
    out: PathBuf,
    /// Seed for the mask draw (and token draw in random-selection arms)
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CodebookDumpArgs {
    /// Checkpoint produced by `paco pretrain`
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory for tokens.bin and histograms.jsonl
    #[arg(long)]
    out: PathBuf,
    /// Images whose train split feeds the selection histograms
    #[arg(long, default_value = "synth:32")]
    data: String,
}

#[derive(Args)]
struct DataSynthArgs {
    /// Number of samples to generate
    #[arg(long)]
    count: usize,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square image size in pixels
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// 3 for RGB, 1 for grayscale
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Every Nth sample goes to the test split
    #[arg(long, default_value_t = SYNTH_TEST_EVERY)]
    test_every: usize,
}

#[derive(Args)]
struct DataPrepArgs {
    /// Manifest path or dataset directory; every record needs landmarks
    #[arg(long)]
    manifest: PathBuf,
    /// Output dataset directory (aligned images + transformed landmarks)
    #[arg(long)]
    out: PathBuf,
    /// Alignment template JSON {points, crop, pad_to, background}; the
    /// built-in five-point template when omitted
    #[arg(long)]
    template: Option<PathBuf>,
    /// Output frame size
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Arm grid to run
    #[arg(long, default_value = "table7-mini", value_parser = ["table7-mini"])]
    preset: String,
    /// Manifest path, dataset directory, or synth:COUNT (train split
    /// pre-trains each arm; the alignment probe scores train vs test)
    #[arg(long)]
    data: String,
    /// Output directory; each arm trains in its own subdirectory
    #[arg(long)]
    out: PathBuf,
    /// Probe optimization steps per arm
    #[arg(long, default_value_t = 500)]
    probe_steps: usize,
    /// Probe learning rate
    #[arg(long, default_value_t = 1e-2)]
    probe_lr: f64,
    /// Seed for probe head init and batch order
    #[arg(long, default_value_t = 0)]
    probe_seed: u64,
}

fn main() {
    let cli = Cli::parse();
    let command = cli.command.name();
    let started = Instant::now();
    if let Err(err) = run(cli.command, started) {
        let line = serde_json::json!({ "command": command, "error": format!("{err:#}") });
        eprintln!("{line}");
        std::process::exit(1);
    }
}

fn run(command: Command, started: Instant) -> Result<()> {
    match command {
        Command::Pretrain(args) => cmd_pretrain(args, started),
        Command::Evaluate(args) => cmd_evaluate(args, started),
        Command::Reconstruct(args) => cmd_reconstruct(args, started),
        Command::CodebookDump(args) => cmd_codebook_dump(args, started),
        Command::DataSynth(args) => cmd_data_synth(args, started),
        Command::DataPrep(args) => cmd_data_prep(args, started),
        Command::Ablate(args) => cmd_ablate(args, started),
    }
}

/// Print the one-line run summary that ends every successful command.
fn emit_summary(
    command: &str,
    config: serde_json::Value,
    seed: Option<u64>,
    started: Instant,
    outputs: &[PathBuf],
    metrics: serde_json::Value,
) {
    let summary = serde_json::json!({
        "command": command,
        "config": config,
        "seed": seed,
        "wall_time_secs": started.elapsed().as_secs_f64(),
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "metrics": metrics,
    });
    println!("{summary}");
}

fn config_echo(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg.as_map()).expect("config map serializes")
}

fn parse_ablation(spec: Option<&str>) -> Result<AblationSpec> {
    let mut ablation = AblationSpec::default();
    let Some(spec) = spec else {
        return Ok(ablation);
    };
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (key, value) = part
            .split_once('=')
            .with_context(|| format!("ablation item '{part}' is not key=value"))?;
        let value = value.trim();
        match key.trim() {
            "selection" => ablation.selection_mode = value.parse::<SelectionMode>()?,
            "n" => {
                ablation.n_override = value
                    .parse::<usize>()
                    .with_context(|| format!("ablation n '{value}'"))?;
            }
            "incubation" => {
                ablation.incubation_enabled = match value {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    other => bail!("ablation incubation '{other}' (use on or off)"),
                };
            }
            other => bail!("unknown ablation key '{other}' (selection, n, incubation)"),
        }
    }
    Ok(ablation)
}

/// Resolve `--data`: a manifest path, a dataset directory, or `synth:COUNT`.
fn resolve_data(spec: &str, cfg: &RunConfig) -> Result<DatasetManifest> {
    if let Some(rest) = spec.strip_prefix("synth:") {
        let count: usize = rest
            .parse()
            .with_context(|| format!("synth count '{rest}' is not an integer"))?;
        if count == 0 {
            bail!("synth:COUNT needs a positive count");
        }
        let dir = synth_cache_dir(count, cfg.image_size, cfg.channels, cfg.seed);
        let manifest_path = dir.join("manifest.jsonl");
        if !manifest_path.exists() {
            // Build in a scratch directory and rename, so a crashed or
            // concurrent run never leaves a half-written cache entry behind.
            let scratch = dir.with_extension(format!("tmp{}", std::process::id()));
            if scratch.exists() {
                fs::remove_dir_all(&scratch)?;
            }
            write_synthetic_dataset(
                &scratch,
                count,
                cfg.image_size,
                cfg.channels,
                cfg.seed,
                SYNTH_TEST_EVERY,
            )?;
            match fs::rename(&scratch, &dir) {
                Ok(()) => {}
                Err(_) if manifest_path.exists() => {
                    let _ = fs::remove_dir_all(&scratch);
                }
                Err(e) => {
                    return Err(e).with_context(|| format!("installing cache {}", dir.display()))
                }
            }
        }
        Ok(read_manifest(&manifest_path)?)
    } else {
        let path = Path::new(spec);
        let manifest_path = if path.is_dir() {
            path.join("manifest.jsonl")
        } else {
            path.to_path_buf()
        };
        Ok(read_manifest(&manifest_path)
            .with_context(|| format!("dataset {}", manifest_path.display()))?)
    }
}

fn synth_cache_dir(count: usize, size: usize, channels: usize, seed: u64) -> PathBuf {
    let base = env::var_os("PACO_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| env::temp_dir().join("paco-cache"));
    base.join(format!(
        "synth-c{count}-s{size}-ch{channels}-seed{seed}-t{SYNTH_TEST_EVERY}"
    ))
}

fn check_image_shape(image: &ImageTensor, cfg: &RunConfig, what: &str) -> Result<()> {
    if image.height() != cfg.image_size
        || image.width() != cfg.image_size
        || image.channels() != cfg.channels
    {
        bail!(
            "{what} is {}x{}x{} but the config wants {}x{}x{}; run data-prep or adjust the config",
            image.height(),
            image.width(),
            image.channels(),
            cfg.image_size,
            cfg.image_size,
            cfg.channels
        );
    }
    Ok(())
}

fn load_split_images(
    manifest: &DatasetManifest,
    split: &str,
    cfg: &RunConfig,
) -> Result<Vec<ImageTensor>> {
    let mut images = Vec::new();
    for sample in manifest.load_split(split) {
        let sample = sample?;
        check_image_shape(&sample.image, cfg, &format!("record {}", sample.index))?;
        images.push(sample.image);
    }
    if images.is_empty() {
        bail!("split '{split}' of the dataset is empty");
    }
    Ok(images)
}

fn load_probe_split(
    manifest: &DatasetManifest,
    split: &str,
    cfg: &RunConfig,
) -> Result<Vec<ProbeSample>> {
    let mut samples = Vec::new();
    for sample in manifest.load_split(split) {
        let sample = sample?;
        check_image_shape(&sample.image, cfg, &format!("record {}", sample.index))?;
        samples.push(ProbeSample {
            image: sample.image,
            seg: sample.seg,
            landmarks: sample.landmarks,
        });
    }
    if samples.is_empty() {
        bail!("split '{split}' of the dataset is empty");
    }
    Ok(samples)
}

/// Recover config, ablation switches, and full state from a checkpoint. The
/// header carries the flat config echo and the ablation spec, so no side
/// files are needed.
fn load_state(ckpt: &Path) -> Result<(RunConfig, AblationSpec, TrainState)> {
    let (header, _arrays) =
        load_checkpoint(ckpt).with_context(|| format!("checkpoint {}", ckpt.display()))?;
    let cfg = RunConfig::from_flat_str(&header.config)
        .context("config echo inside the checkpoint header")?;
    let ablation: AblationSpec = serde_json::from_value(header.ablation.clone())
        .context("ablation spec inside the checkpoint header")?;
    let state = TrainState::load(ckpt, &cfg, &ablation)?;
    Ok((cfg, ablation, state))
}

fn cmd_pretrain(args: PretrainArgs, started: Instant) -> Result<()> {
    let cfg = args.config.build()?;
    let ablation = parse_ablation(args.ablation.as_deref())?;
    let manifest = resolve_data(&args.data, &cfg)?;
    let images = load_split_images(&manifest, "train", &cfg)?;
    let summary = run_pretraining(&cfg, &ablation, &images, &args.out, args.resume.as_deref())?;
    let final_epoch = summary.epochs.last().cloned();
    let metrics = serde_json::json!({
        "final_checkpoint": summary.final_checkpoint.display().to_string(),
        "params_checksum": summary.params_checksum,
        "train_images": images.len(),
        "selection_mode": ablation.selection_mode.to_string(),
        "candidates": ablation.candidates(&cfg),
        "incubation": ablation.incubation_active(&cfg),
        "final_epoch": final_epoch,
    });
    let outputs = vec![
        args.out.join("train_log.csv"),
        args.out.join("run_summary.json"),
        summary.final_checkpoint.clone(),
    ];
    emit_summary("pretrain", config_echo(&cfg), Some(cfg.seed), started, &outputs, metrics);
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs, started: Instant) -> Result<()> {
    let (cfg, _ablation, mut state) = load_state(&args.ckpt)?;
    let manifest = resolve_data(&args.data, &cfg)?;
    let train = load_probe_split(&manifest, "train", &cfg)?;
    let test = load_probe_split(&manifest, "test", &cfg)?;
    let task: ProbeTask = args.task.parse()?;
    let opts = ProbeOptions {
        steps: args.steps,
        lr: args.lr,
        batch_size: args.batch_size,
        seed: args.probe_seed,
        fusion_width: args.fusion_width,
        auc_threshold: args.auc_threshold,
        norm_mode: args.norm.parse()?,
        include_background: args.include_background,
        ..ProbeOptions::default()
    };
    let report = run_probe(
        &mut state.encoder,
        &cfg,
        task,
        args.mode.parse()?,
        &train,
        &test,
        &opts,
    )?;

    fs::create_dir_all(&args.out)?;
    let report_path = args.out.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    let breakdown_path = args.out.join("breakdown.csv");
    fs::write(&breakdown_path, breakdown_csv(&report))?;

    let metrics = headline_metrics(&report, train.len(), test.len());
    let outputs = vec![report_path, breakdown_path];
    emit_summary("evaluate", config_echo(&cfg), Some(cfg.seed), started, &outputs, metrics);
    Ok(())
}

/// Per-class rows for parsing, per-sample rows for alignment.
fn breakdown_csv(report: &ProbeReport) -> String {
    let mut csv = String::new();
    if let Some(f1) = &report.f1 {
        csv.push_str("class,f1,absent\n");
        for (class, &score) in f1.per_class.iter().enumerate() {
            let absent = f1.absent.contains(&class);
            csv.push_str(&format!("{class},{score},{absent}\n"));
        }
        csv.push_str(&format!("mean,{},\n", f1.mean));
    }
    if let Some(alignment) = &report.alignment {
        csv.push_str("sample,nme_fraction\n");
        for (i, &err) in alignment.per_sample_nme.iter().enumerate() {
            csv.push_str(&format!("{i},{err}\n"));
        }
    }
    csv
}

fn headline_metrics(report: &ProbeReport, train: usize, test: usize) -> serde_json::Value {
    let mut metrics = serde_json::json!({
        "final_train_loss": report.final_train_loss,
        "train_samples": train,
        "test_samples": test,
    });
    if let Some(f1) = &report.f1 {
        metrics["mean_f1"] = f1.mean.into();
        metrics["per_class_f1"] = serde_json::to_value(&f1.per_class).expect("f1 vec");
    }
    if let Some(alignment) = &report.alignment {
        metrics["nme_percent"] = alignment.nme_percent.into();
        metrics["auc"] = alignment.auc.into();
        metrics["fr"] = alignment.fr.into();
    }
    metrics
}

fn cmd_reconstruct(args: ReconstructArgs, started: Instant) -> Result<()> {
    let (cfg, _ablation, state) = load_state(&args.ckpt)?;
    let raw = load_image_png(&args.image)?;
    if raw.channels() != cfg.channels {
        bail!(
            "image has {} channel(s) but the checkpoint was trained on {}",
            raw.channels(),
            cfg.channels
        );
    }
    let image = if raw.height() == cfg.image_size && raw.width() == cfg.image_size {
        raw
    } else {
        resize_bilinear(&raw, cfg.image_size, cfg.image_size)?
    };

    let grid = patchify(&image, cfg.patch_size)?;
    let num_patches = grid.num_patches();
    let mut rng = stream_rng(args.seed, 0);
    let mask = sample_mask(num_patches, cfg.mask_ratio, &mut rng)?;
    let selection = select_tokens(&state, &grid, &mask, &mut rng)?;
    let embedded = state.encoder.embed(&grid.patches)?;
    let substituted = substitute(&embedded, &state.codebook, &selection, &mask)?;
    let (encoded, _taps) = state.encoder.encode(&substituted, &[])?;
    let recon = state.decoder.decode(
        &encoded,
        grid.grid_rows,
        grid.grid_cols,
        cfg.patch_size,
        cfg.channels,
    )?;

    // Gray out the masked patches for the middle panel.
    let mut masked = image.clone();
    let cols = cfg.image_size / cfg.patch_size;
    for &pos in &mask.positions {
        let (gr, gc) = (pos / cols, pos % cols);
        for y in 0..cfg.patch_size {
            for x in 0..cfg.patch_size {
                for ch in 0..cfg.channels {
                    masked.data[[gr * cfg.patch_size + y, gc * cfg.patch_size + x, ch]] = 0.5;
                }
            }
        }
    }

    let recon_grid = patchify(&recon, cfg.patch_size)?;
    let mse_full = mean_sq_diff(&recon_grid.patches, &grid.patches, None);
    let mse_masked = mean_sq_diff(&recon_grid.patches, &grid.patches, Some(&mask.positions));

    fs::create_dir_all(&args.out)?;
    let panel = panel_strip(&[&image, &masked, &recon])?;
    let paths = [
        ("original.png", &image),
        ("masked.png", &masked),
        ("reconstructed.png", &recon),
        ("panel.png", &panel),
    ];
    let mut outputs = Vec::new();
    for (name, img) in paths {
        let path = args.out.join(name);
        save_image_png(&path, img)?;
        outputs.push(path);
    }

    let metrics = serde_json::json!({
        "mse_full": mse_full,
        "mse_masked": mse_masked,
        "masked_positions": mask.positions.len(),
        "num_patches": num_patches,
    });
    emit_summary("reconstruct", config_echo(&cfg), Some(args.seed), started, &outputs, metrics);
    Ok(())
}

/// Mean squared difference over all patch rows, or over a subset of rows.
fn mean_sq_diff(a: &Array2<f64>, b: &Array2<f64>, rows: Option<&[usize]>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..a.shape()[0]).collect();
            &all
        }
    };
    for &r in rows {
        for (x, y) in a.row(r).iter().zip(b.row(r).iter()) {
            sum += (x - y) * (x - y);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Concatenate images side by side with a mid-gray gap between them.
fn panel_strip(images: &[&ImageTensor]) -> Result<ImageTensor> {
    let (h, w, c) = (
        images[0].height(),
        images[0].width(),
        images[0].channels(),
    );
    let total_w = w * images.len() + PANEL_GAP * (images.len() - 1);
    let mut canvas = Array3::<f64>::from_elem((h, total_w, c), 0.5);
    for (i, img) in images.iter().enumerate() {
        let x0 = i * (w + PANEL_GAP);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    canvas[[y, x0 + x, ch]] = img.data[[y, x, ch]];
                }
            }
        }
    }
    ImageTensor::new(canvas).map_err(Into::into)
}

fn cmd_codebook_dump(args: CodebookDumpArgs, started: Instant) -> Result<()> {
    let (cfg, _ablation, state) = load_state(&args.ckpt)?;
    let manifest = resolve_data(&args.data, &cfg)?;
    let images = load_split_images(&manifest, "train", &cfg)?;

    let tokens = &state.codebook.tokens;
    let (k, n, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);

    fs::create_dir_all(&args.out)?;
    // tokens.bin: 8-byte magic, then K, n, D as u64 LE, then K*n*D token
    // values as f64 LE in [position][candidate][dim] order.
    let tokens_path = args.out.join("tokens.bin");
    let mut writer = std::io::BufWriter::new(fs::File::create(&tokens_path)?);
    writer.write_all(TOKENS_MAGIC)?;
    for dim in [k, n, d] {
        writer.write_all(&(dim as u64).to_le_bytes())?;
    }
    for &v in tokens.iter() {
        writer.write_all(&v.to_le_bytes())?;
    }
    writer.flush()?;

    // histograms.jsonl: per position, how often the predictor preferred each
    // candidate across the given images (every position scored every image).
    let full_mask = MaskSet::from_positions((0..k).collect(), k)?;
    let mut counts = vec![vec![0u64; n]; k];
    for image in &images {
        let grid = patchify(image, cfg.patch_size)?;
        let selection = predict_beliefs(&state.predictor, &grid, &full_mask)?;
        for (&pos, &alpha) in selection.positions.iter().zip(selection.alphas.iter()) {
            counts[pos][alpha] += 1;
        }
    }
    let hist_path = args.out.join("histograms.jsonl");
    let mut hist = String::new();
    for (pos, row) in counts.iter().enumerate() {
        let line = serde_json::json!({
            "position": pos,
            "counts": row,
            "images": images.len(),
        });
        hist.push_str(&line.to_string());
        hist.push('\n');
    }
    fs::write(&hist_path, hist)?;

    let mut usage = vec![0u64; n];
    for row in &counts {
        for (candidate, &c) in row.iter().enumerate() {
            usage[candidate] += c;
        }
    }
    let metrics = serde_json::json!({
        "positions": k,
        "candidates": n,
        "embed_dim": d,
        "histogram_images": images.len(),
        "token_usage": usage,
    });
    let outputs = vec![tokens_path, hist_path];
    emit_summary("codebook-dump", config_echo(&cfg), Some(cfg.seed), started, &outputs, metrics);
    Ok(())
}

fn cmd_data_synth(args: DataSynthArgs, started: Instant) -> Result<()> {
    if args.count == 0 {
        bail!("--count must be positive");
    }
    let manifest_path = write_synthetic_dataset(
        &args.out,
        args.count,
        args.size,
        args.channels,
        args.seed,
        args.test_every,
    )?;
    let manifest = read_manifest(&manifest_path)?;
    let train = manifest.split_indices("train").len();
    let test = manifest.split_indices("test").len();
    let metrics = serde_json::json!({
        "count": args.count,
        "size": args.size,
        "channels": args.channels,
        "train": train,
        "test": test,
    });
    let outputs = vec![manifest_path];
    emit_summary(
        "data-synth",
        serde_json::Value::Null,
        Some(args.seed),
        started,
        &outputs,
        metrics,
    );
    Ok(())
}

fn cmd_data_prep(args: DataPrepArgs, started: Instant) -> Result<()> {
    let manifest_path = if args.manifest.is_dir() {
        args.manifest.join("manifest.jsonl")
    } else {
        args.manifest.clone()
    };
    let manifest = read_manifest(&manifest_path)
        .with_context(|| format!("dataset {}", manifest_path.display()))?;
    let template: AlignTemplate = match &args.template {
        Some(path) => serde_json::from_str(
            &fs::read_to_string(path)
                .with_context(|| format!("template {}", path.display()))?,
        )
        .with_context(|| format!("template {}", path.display()))?,
        None => AlignTemplate::default(),
    };
    if template.pad_to < template.crop {
        bail!("template pad_to {} is smaller than crop {}", template.pad_to, template.crop);
    }

    fs::create_dir_all(&args.out)?;
    let offset = ((template.pad_to - template.crop) / 2) as f64;
    let scale = args.size as f64 / template.pad_to as f64;
    let mut records = Vec::with_capacity(manifest.records.len());
    for index in 0..manifest.records.len() {
        let sample = manifest.load_record(index)?;
        let landmarks = sample
            .landmarks
            .as_ref()
            .with_context(|| format!("record {index}: alignment needs landmarks"))?;
        let anchor = five_points(landmarks)?;
        let aligned = align_crop_pad(&sample.image, &anchor, &template, args.size)?;

        // Carry every landmark into the output frame: template warp, pad
        // offset, then the resize scale.
        let sim = estimate_similarity(&anchor, &template.points)?;
        let mut out_landmarks = Array2::<f64>::zeros((landmarks.shape()[0], 2));
        for r in 0..landmarks.shape()[0] {
            let p = sim.apply([landmarks[[r, 0]], landmarks[[r, 1]]]);
            out_landmarks[[r, 0]] = (p[0] + offset) * scale;
            out_landmarks[[r, 1]] = (p[1] + offset) * scale;
        }

        let image_name = format!("img_{index:05}.png");
        let landmarks_name = format!("lmk_{index:05}.json");
        save_image_png(&args.out.join(&image_name), &aligned)?;
        save_landmarks_json(&args.out.join(&landmarks_name), &out_landmarks)?;
        records.push(ManifestRecord {
            image: image_name,
            seg: None,
            landmarks: Some(landmarks_name),
            split: manifest.records[index].split.clone(),
        });
    }
    let out_manifest = args.out.join("manifest.jsonl");
    write_manifest(&out_manifest, &records)?;

    let metrics = serde_json::json!({
        "prepared": records.len(),
        "size": args.size,
    });
    let outputs = vec![out_manifest];
    emit_summary("data-prep", serde_json::Value::Null, None, started, &outputs, metrics);
    Ok(())
}

struct ArmResult {
    name: &'static str,
    selection: String,
    candidates: usize,
    incubation: bool,
    final_mse: f64,
    nme_percent: f64,
    auc: f64,
    fr: f64,
}

fn cmd_ablate(args: AblateArgs, started: Instant) -> Result<()> {
    let cfg = args.config.build()?;
    let manifest = resolve_data(&args.data, &cfg)?;
    let images = load_split_images(&manifest, "train", &cfg)?;
    let train = load_probe_split(&manifest, "train", &cfg)?;
    let test = load_probe_split(&manifest, "test", &cfg)?;

    // The mini grid: the full method plus one arm per switched-off axis
    // (selection mode, codebook size, incubation).
    let arms: Vec<(&'static str, AblationSpec)> = vec![
        ("belief-full", AblationSpec::default()),
        (
            "random-selection",
            AblationSpec { selection_mode: SelectionMode::Random, ..AblationSpec::default() },
        ),
        (
            "single-token",
            AblationSpec { selection_mode: SelectionMode::SingleToken, ..AblationSpec::default() },
        ),
        (
            "no-incubation",
            AblationSpec { incubation_enabled: false, ..AblationSpec::default() },
        ),
    ];

    let opts = ProbeOptions {
        steps: args.probe_steps,
        lr: args.probe_lr,
        seed: args.probe_seed,
        ..ProbeOptions::default()
    };
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    for (name, spec) in arms {
        let arm_dir = args.out.join(name);
        let summary = run_pretraining(&cfg, &spec, &images, &arm_dir, None)?;
        let mut state = TrainState::load(&summary.final_checkpoint, &cfg, &spec)?;
        let report = run_probe(
            &mut state.encoder,
            &cfg,
            ProbeTask::Alignment,
            paco_core::eval::ProbeMode::Frozen,
            &train,
            &test,
            &opts,
        )?;
        let alignment = report
            .alignment
            .as_ref()
            .context("alignment probe produced no metrics")?;
        rows.push(ArmResult {
            name,
            selection: spec.selection_mode.to_string(),
            candidates: spec.candidates(&cfg),
            incubation: spec.incubation_active(&cfg),
            final_mse: summary.epochs.last().map_or(f64::NAN, |e| e.mean_mse),
            nme_percent: alignment.nme_percent,
            auc: alignment.auc,
            fr: alignment.fr,
        });
        outputs.push(summary.final_checkpoint.clone());
    }

    let mut table = String::from(
        "arm               selection     n  incubation  final_mse   nme%     auc      fr\n",
    );
    let mut csv = String::from("arm,selection,candidates,incubation,final_mse,nme_percent,auc,fr\n");
    for r in &rows {
        table.push_str(&format!(
            "{:<17} {:<12} {:>2}  {:<10}  {:<10.6}  {:<7.3}  {:<7.4}  {:<7.4}\n",
            r.name,
            r.selection,
            r.candidates,
            if r.incubation { "on" } else { "off" },
            r.final_mse,
            r.nme_percent,
            r.auc,
            r.fr,
        ));
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.name,
            r.selection,
            r.candidates,
            r.incubation,
            r.final_mse,
            r.nme_percent,
            r.auc,
            r.fr,
        ));
    }
    print!("{table}");
    let table_path = args.out.join("ablation_table.csv");
    fs::write(&table_path, csv)?;
    outputs.push(table_path);

    let best = rows
        .iter()
        .min_by(|a, b| a.nme_percent.total_cmp(&b.nme_percent))
        .map(|r| r.name.to_string());
    let arms_json: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "arm": r.name,
                "selection": r.selection,
                "candidates": r.candidates,
                "incubation": r.incubation,
                "final_mse": r.final_mse,
                "nme_percent": r.nme_percent,
                "auc": r.auc,
                "fr": r.fr,
            })
        })
        .collect();
    let metrics = serde_json::json!({
        "preset": args.preset,
        "arms": arms_json,
        "best_arm_by_nme": best,
    });
    emit_summary("ablate", config_echo(&cfg), Some(cfg.seed), started, &outputs, metrics);
    Ok(())
}
