//! `priorsr` command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array3;
use priorsr::archive::Archive;
use priorsr::checkpoint::{Checkpoint, Stage};
use priorsr::config::Variant;
use priorsr::data::{load_split, synth_dataset, ComplexImage, DatasetManifest, Split};
use priorsr::eval::{evaluate, evaluate_inference, run_ablation, PriorSource, Predictor};
use priorsr::flops::{attention_macs, count_flops};
use priorsr::model::Inputs;
use priorsr::training::{train_to_dir_with, Trainer};
use priorsr::RunConfig;

/// Relative output paths are resolved against this directory when set.
const OUTPUT_ROOT_ENV: &str = "PRIORSR_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "priorsr", version, about = "Prior-guided multi-contrast MRI super-resolution")]
struct Cli {
    /// Run configuration (TOML). Defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration (data, training, inference).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom pairs and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Train the network and the prior extractor.
    TrainStage1(TrainArgs),
    /// Train the condition encoder and denoiser (and the network, jointly).
    TrainStage2 {
        /// Finished stage-one checkpoint.
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Super-resolve one input archive (`lr` and optional `ref` tensors).
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value_t = PriorArg::Auto)]
        prior: PriorArg,
        /// Report path (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Multiply-accumulate accounting for the configured model.
    Flops {
        /// Low-resolution input height; defaults to the configured size.
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Train and evaluate one ablation variant.
    Ablate {
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Dataset directory; the training split is also the evaluation set.
        /// Without it the configured synthetic training set is used.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory; without it the configured synthetic training set is
    /// generated in memory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Step budget; milestones are rescaled proportionally.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from a checkpoint of the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Progress line every this many steps (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    /// Sampled prior for models with one, none otherwise.
    Auto,
    /// Prior extracted from the HR target (reads HR).
    Target,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    NoReference,
    NoPrior,
    NoJoint,
    NoDc,
    NoCe,
    NoLargeWindow,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoReference => Variant::NoReference,
            VariantArg::NoPrior => Variant::NoPrior,
            VariantArg::NoJoint => Variant::NoJoint,
            VariantArg::NoDc => Variant::NoDc,
            VariantArg::NoCe => Variant::NoCe,
            VariantArg::NoLargeWindow => Variant::NoLargeWindow,
        }
    }
}

/// Bad arguments that clap cannot see (missing prerequisites, mismatches).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.is::<UsageError>() || e.downcast_ref::<priorsr::Error>().is_some_and(|e| e.is_config())
    });
    if config {
        2
    } else {
        3
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth { out, n } => {
            let out = output_path(&out);
            let manifest = synth_dataset(&cfg, &out, n)?;
            write_inputs(&cfg, &manifest)?;
            println!("{}", out.join(priorsr::data::MANIFEST_FILE).display());
        }
        Command::TrainStage1(args) => {
            let path = train(&cfg, Stage::One, None, &args)?;
            println!("{}", path.display());
        }
        Command::TrainStage2 { stage1, train: args } => {
            let path = train(&cfg, Stage::Two, stage1.as_deref(), &args)?;
            println!("{}", path.display());
        }
        Command::Infer { checkpoint, input, out } => infer(&cfg, &checkpoint, &input, &output_path(&out))?,
        Command::Eval { checkpoint, data, split, prior, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let pred = Predictor::new(&ckpt)?;
            let split: Split = split.parse()?;
            let manifest = DatasetManifest::load(&data)?;
            let samples = load_split(&manifest, split, &pred.config)?;
            if samples.is_empty() {
                return Err(usage(format!("the {split} split of {} is empty", data.display())));
            }
            let seed = cli.seed.unwrap_or(pred.config.eval.seed);
            let report = match prior {
                PriorArg::Auto => evaluate_inference(&pred, &samples, seed)?,
                PriorArg::Target => evaluate(&pred, &samples, PriorSource::Target, seed)?,
            };
            write_text(&output_path(&out), &report.to_json())?;
            println!("mean_psnr_db {:.4} mean_ssim {:.5}", report.mean_psnr_db, report.mean_ssim);
        }
        Command::Flops { height, width, json } => flops(&cfg, height, width, json)?,
        Command::Ablate { variant, data, steps, out } => {
            let mut cfg = cfg;
            if let Some(steps) = steps {
                cfg.train = cfg.train.with_total_steps(steps);
            }
            let samples = training_samples(&cfg, data.as_deref())?;
            let run = run_ablation(variant.into(), &cfg, samples)?;
            let out = output_path(&out);
            run.stage_one.save(&out.join("stage1.safetensors"))?;
            if let Some(ck) = &run.stage_two {
                ck.save(&out.join("stage2.safetensors"))?;
            }
            write_text(&out.join("report.json"), &run.report.to_json())?;
            println!("{} mean_psnr_db {:.4} mean_ssim {:.5}", run.variant.name(), run.report.mean_psnr_db, run.report.mean_ssim);
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Inference inputs next to each sample: `inputs/<id>.safetensors`.
fn write_inputs(cfg: &RunConfig, manifest: &DatasetManifest) -> anyhow::Result<()> {
    for e in &manifest.entries {
        let s = priorsr::data::load_sample(manifest, &e.id, cfg)?;
        let mut a = Archive::default();
        a.insert("lr", s.target_lr.values().clone().into_dyn());
        a.insert("ref", s.ref_hr.values().clone().into_dyn());
        a.write(&manifest.root.join("inputs").join(format!("{}.safetensors", e.id)))?;
    }
    Ok(())
}

fn training_samples(cfg: &RunConfig, data: Option<&Path>) -> anyhow::Result<Vec<priorsr::data::MultiContrastSample>> {
    match data {
        Some(dir) => {
            let manifest = DatasetManifest::load(dir)?;
            let samples = load_split(&manifest, Split::Train, cfg)?;
            if samples.is_empty() {
                return Err(usage(format!("the train split of {} is empty", dir.display())));
            }
            Ok(samples)
        }
        None => Ok(priorsr::data::synth_train_set(cfg)?),
    }
}

fn train(cfg: &RunConfig, stage: Stage, stage1: Option<&Path>, args: &TrainArgs) -> anyhow::Result<PathBuf> {
    let mut cfg = cfg.clone();
    if let Some(steps) = args.steps {
        cfg.train = cfg.train.with_total_steps(steps);
        cfg.validate()?;
    }
    let samples = training_samples(&cfg, args.data.as_deref())?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            if ckpt.stage != stage {
                return Err(usage(format!("{} is a stage-{} checkpoint", path.display(), ckpt.stage)));
            }
            if let Some(steps) = args.steps {
                ckpt.config.train = ckpt.config.train.with_total_steps(steps);
            }
            Trainer::resume(ckpt, samples)?
        }
        None if stage == Stage::One => Trainer::stage_one(&cfg, samples)?,
        None => {
            let Some(path) = stage1 else {
                return Err(usage("train-stage2 needs --stage1 <checkpoint> (or --resume)"));
            };
            Trainer::stage_two(&cfg, &Checkpoint::load(path)?, samples)?
        }
    };
    let out = output_path(&args.out);
    let every = args.log_every;
    let total = trainer.config.train.total_steps;
    if every > 0 {
        eprintln!("stage {stage}: steps {}..{total}", trainer.step);
    }
    let path = train_to_dir_with(&mut trainer, &out, args.resume.is_some(), |r| {
        if every > 0 && (r.step % every == 0 || r.step == total) {
            eprintln!(
                "step {:>6}  total {:.5}  l_img {:.5}  l_dc {:.5}  l_diff {:.5}  lr {:.3e}",
                r.step, r.total, r.l_img, r.l_dc, r.l_diff, r.lr
            );
        }
    })?;
    Ok(path)
}

fn read_image(a: &Archive, key: &str) -> anyhow::Result<ComplexImage> {
    let t = a.get(key)?;
    if t.ndim() != 3 || t.shape()[2] != 2 {
        return Err(usage(format!("tensor {key:?} has shape {:?}, expected [H, W, 2]", t.shape())));
    }
    let arr: Array3<f32> = t.clone().into_dimensionality()?;
    Ok(ComplexImage::new(arr)?)
}

fn infer(cfg: &RunConfig, checkpoint: &Path, input: &Path, out: &Path) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let pred = Predictor::new(&ckpt)?;
    let archive = Archive::read(input)?;
    let lr = read_image(&archive, "lr")?;
    let reference = match (pred.config.model.use_reference, archive.tensors.contains_key("ref")) {
        (true, true) => Some(read_image(&archive, "ref")?),
        (true, false) => return Err(usage("this checkpoint uses a reference image; the input has no \"ref\" tensor")),
        (false, _) => None,
    };
    let s = pred.config.data.scale;
    let refs = reference.as_ref().map(std::slice::from_ref);
    let refs: Option<Vec<&ComplexImage>> = refs.map(|r| r.iter().collect());
    let inputs = Inputs::new(&[&lr], refs.as_deref(), s).map_err(|e| usage(e.to_string()))?;
    let sr = pred.infer(&inputs, cfg.eval.seed)?.remove(0);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut a = Archive::default();
    a.insert("sr", sr.values().clone().into_dyn());
    a.write(&out.join("sr.safetensors"))?;
    save_magnitude_png(&sr, &out.join("sr.png"))?;
    println!("{}", out.join("sr.png").display());
    Ok(())
}

fn save_magnitude_png(img: &ComplexImage, path: &Path) -> anyhow::Result<()> {
    let mag = img.magnitude();
    let (h, w) = mag.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(mag[(y as usize, x as usize)].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save(path).with_context(|| format!("writing {}", path.display()))
}

fn flops(cfg: &RunConfig, height: Option<usize>, width: Option<usize>, json: bool) -> anyhow::Result<()> {
    let lr = cfg.data.lr_size();
    let (h, w) = (height.unwrap_or(lr), width.unwrap_or(lr));
    if h == 0 || w == 0 {
        return Err(usage("--height and --width must be positive"));
    }
    let m = &cfg.model;
    let (s, t) = (cfg.data.scale, cfg.diffusion.steps);
    let report = count_flops(m, h, w, s, t);
    let sweep = |window: usize, reduction: usize| {
        let mut c = m.clone();
        c.window = window;
        c.reduction = reduction;
        c.use_large_window = true;
        let total = count_flops(&c, h, w, s, t).total;
        let (proj, core) = attention_macs(h * w, m.channels, window, reduction);
        (window, reduction, total, proj + core, core)
    };
    let mut rows = Vec::new();
    for k in [1, 2, 4] {
        rows.push(sweep(m.window, k));
    }
    for l in [8, 16, 32] {
        for k in [1, 2] {
            rows.push(sweep(l, k));
        }
    }
    if json {
        let sweeps: Vec<_> = rows
            .iter()
            .map(|&(window, reduction, total, attention, core)| {
                serde_json::json!({
                    "window": window, "reduction": reduction, "total": total,
                    "attention_per_layer": attention, "attention_core_per_layer": core,
                })
            })
            .collect();
        let doc = serde_json::json!({ "model": report, "sweeps": sweeps });
        println!("{}", serde_json::to_string_pretty(&doc)?);
        return Ok(());
    }
    println!("# per-module MACs, LR input {h}x{w}");
    println!("{:<24} {:>16}", "component", "macs");
    for r in &report.rows {
        println!("{:<24} {:>16}", r.component, r.macs);
    }
    println!("{:<24} {:>16}", "total", report.total);
    println!();
    println!("# sweeps (attention columns are per attention layer)");
    println!("{:>6} {:>9} {:>16} {:>16} {:>16}", "window", "reduction", "total", "attention", "attention_core");
    for (l, k, total, attn, core) in rows {
        println!("{l:>6} {k:>9} {total:>16} {attn:>16} {core:>16}");
    }
    Ok(())
}
