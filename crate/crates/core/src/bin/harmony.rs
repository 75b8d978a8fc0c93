use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use harmony_core::checkpoint::Checkpoint;
use harmony_core::datasynth::{build_synth_dataset, ModelRelighter, SynthConfig};
use harmony_core::diffcore::{SamplerMode, SamplerParams};
use harmony_core::harmoneval::{evaluate, flip_probe, harmonize, HarmonizeRequest};
use harmony_core::image::Image;
use harmony_core::lightcond::{encode_feature, feature_norm_map};
use harmony_core::model::CondSource;
use harmony_core::stagesim::{build_dataset, load_dataset, manifest_hash, validate_dataset, DatasetConfig};
use harmony_core::trainer::{assemble_final, run_stage, TrainConfig, TrainStage};

#[derive(Parser)]
#[command(name = "harmony", version, about = "Lighting-aware portrait harmonization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic light-stage dataset.
    BuildDataset {
        /// Generator settings (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, required_unless_present = "dump_config")]
        out: Option<PathBuf>,
        /// Print the effective generator settings and exit.
        #[arg(long)]
        dump_config: bool,
    },
    /// Check every tuple of a dataset directory.
    Validate { dir: PathBuf },
    /// Train one stage.
    Train {
        #[arg(long)]
        stage: TrainStage,
        #[arg(long, required_unless_present = "dump_config")]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "dump_config")]
        out: Option<PathBuf>,
        /// Print the stage's default config (or the loaded one) and exit.
        #[arg(long)]
        dump_config: bool,
    },
    /// Combine stage checkpoints into the inference model.
    Assemble {
        /// Environment-conditioned stage I checkpoint (denoiser, branch).
        #[arg(long)]
        unet: PathBuf,
        /// Background-conditioned stage I checkpoint (background extractor).
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        align: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build finetuning pairs by relighting held-out scenes.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        /// Synthesis settings (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, required_unless_present = "dump_config")]
        out: Option<PathBuf>,
        #[arg(long)]
        dump_config: bool,
    },
    /// Composite a foreground over a background and harmonize it.
    Harmonize {
        #[arg(long)]
        fg: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        bg: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a test set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Check that mirroring the background mirrors the predicted light.
    ProbeFlip {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Export lighting features (binary) and their norm maps (PNG).
    Features {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Copy)]
struct SamplerArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value = "ddim")]
    mode: SamplerMode,
}

impl From<SamplerArgs> for SamplerParams {
    fn from(a: SamplerArgs) -> Self {
        SamplerParams { mode: a.mode, steps: a.steps, seed: a.seed }
    }
}

fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn dump<T: Serialize>(cfg: &T) -> Result<()> {
    print!("{}", toml::to_string_pretty(cfg)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::BuildDataset { config, n, seed, out, dump_config } => {
            let cfg: DatasetConfig = read_toml(config.as_deref())?;
            if dump_config {
                return dump(&cfg);
            }
            let out = out.expect("required by clap");
            let rows = build_dataset(&cfg, n, seed, &out)?;
            println!("{} tuples in {} (manifest {})", rows.len(), out.display(), manifest_hash(&out)?);
        }
        Cmd::Validate { dir } => {
            let n = validate_dataset(&dir)?;
            println!("{n} tuples ok");
        }
        Cmd::Train { stage, config, out, dump_config } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            cfg.stage = stage;
            if dump_config {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            let out = out.expect("required by clap");
            let ckpt = run_stage(&cfg, &out)?;
            println!("{} checkpoint at step {} -> {}", ckpt.stage, ckpt.step, out.display());
        }
        Cmd::Assemble { unet, extractor, align, out } => {
            let ckpt = assemble_final(&Checkpoint::load(&unet)?, &Checkpoint::load(&extractor)?, &Checkpoint::load(&align)?)?;
            ckpt.save(&out)?;
            println!("final model -> {}", out.display());
        }
        Cmd::Synth { ckpt, config, n, seed, out, dump_config } => {
            let cfg: SynthConfig = read_toml(config.as_deref())?;
            if dump_config {
                return dump(&cfg);
            }
            let out = out.expect("required by clap");
            let relighter = ModelRelighter::new(Checkpoint::load(&ckpt)?, cfg.sampler_steps)?;
            let rows = build_synth_dataset(&cfg, &relighter, n, seed, &out)?;
            println!("{} pairs in {} (manifest {})", rows.len(), out.display(), manifest_hash(&out)?);
        }
        Cmd::Harmonize { fg, mask, bg, ckpt, sampler, out } => {
            let req = HarmonizeRequest {
                foreground: Image::load_png(&fg, 3)?,
                mask: Image::load_png(&mask, 1)?,
                background: Image::load_png(&bg, 3)?,
                checkpoint: ckpt,
                sampler: sampler.into(),
            };
            harmonize(&req)?.save_png(&out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Eval { ckpt, testset, out, sampler } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let ds = load_dataset(&testset)?;
            let report = evaluate(&ckpt, &ds.tuples, &sampler.into())?;
            report.write(&out)?;
            print!("{}", report.summary());
        }
        Cmd::ProbeFlip { ckpt, testset, sampler } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let ds = load_dataset(&testset)?;
            let report = flip_probe(&ckpt, &ds.tuples, &sampler.into())?;
            println!("sample_id\tazimuth\tazimuth_flipped\tflipped");
            let fmt = |a: Option<f64>| a.map_or("flat".to_string(), |v| format!("{v:.3}"));
            for c in &report.cases {
                println!("{}\t{}\t{}\t{}", c.sample_id, fmt(c.azimuth), fmt(c.azimuth_flipped), c.flipped);
            }
            println!("flipped {}/{} ({:.1}%)", report.flipped(), report.cases.len(), 100.0 * report.rate());
        }
        Cmd::Features { ckpt, testset, out } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let source = CondSource::for_stage(ckpt.stage)?;
            let ds = load_dataset(&testset)?;
            if ds.image_size() != ckpt.model.image_size() {
                bail!("test set is {}px, model expects {}px", ds.image_size(), ckpt.model.image_size());
            }
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for t in &ds.tuples {
                let cond = match source {
                    CondSource::Environment => &t.z_b_thumb,
                    _ => &t.y_b,
                };
                let f = ckpt.model.compute_feature(source, &cond.to_tensor())?;
                let path = out.join(format!("{}_f.feat", t.meta.id));
                fs::write(&path, encode_feature(&f, 0)).with_context(|| format!("writing {}", path.display()))?;
                feature_norm_map(&f, 0).save_png(out.join(format!("{}_fnorm.png", t.meta.id)))?;
            }
            println!("{} features -> {}", ds.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
