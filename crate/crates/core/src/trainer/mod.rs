//! Training stages: joint denoiser + conditioning training, feature
//! alignment, assembly of the inference model, and UNet-only finetuning.

mod data;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{pick_weighted, Batch, MixedData, TupleTensors};

use crate::checkpoint::Checkpoint;
use crate::diffcore::{gaussian, q_sample_batch};
use crate::error::{Error, Result};
use crate::model::{CondSource, HarmonyModel, ModelConfig, StageTag, ALIGN, BRANCH, EXTRACT_BG, EXTRACT_ENV, UNET};
use crate::nn::{Adam, Tape, Tensor};
use crate::stagesim::load_dataset;

pub const DEFAULT_LR: f64 = 5e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainStage {
    Stage1Bg,
    Stage1Env,
    Align,
    Finetune,
}

impl TrainStage {
    pub fn output_tag(&self) -> StageTag {
        match self {
            TrainStage::Stage1Bg => StageTag::Stage1Bg,
            TrainStage::Stage1Env => StageTag::Stage1Env,
            TrainStage::Align => StageTag::Align,
            TrainStage::Finetune => StageTag::Finetuned,
        }
    }

    /// Parameter prefixes updated by this stage; everything else is frozen.
    pub fn trainable(&self) -> &'static [&'static str] {
        match self {
            TrainStage::Stage1Bg => &[UNET, BRANCH, EXTRACT_BG],
            TrainStage::Stage1Env => &[UNET, BRANCH, EXTRACT_ENV],
            TrainStage::Align => &[ALIGN],
            TrainStage::Finetune => &[UNET],
        }
    }

    /// Parameter prefixes held fixed by this stage.
    pub fn frozen(&self) -> Vec<&'static str> {
        [UNET, BRANCH, EXTRACT_BG, EXTRACT_ENV, ALIGN].into_iter().filter(|p| !self.trainable().contains(p)).collect()
    }
}

impl std::str::FromStr for TrainStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1-bg" => Ok(Self::Stage1Bg),
            "stage1-env" => Ok(Self::Stage1Env),
            "align" => Ok(Self::Align),
            "finetune" => Ok(Self::Finetune),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub path: PathBuf,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Save every N steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub datasets: Vec<DatasetSource>,
    /// Starting checkpoint: resume point for any stage, or the assembled
    /// model for `finetune`.
    pub init: Option<PathBuf>,
    /// Stage I background model (`align` only).
    pub bg_checkpoint: Option<PathBuf>,
    /// Stage I environment model (`align` only).
    pub env_checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
    /// Optional explicit freeze set; must equal the stage's own.
    pub freeze: Option<Vec<String>>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: TrainStage::Stage1Bg,
            steps: 2000,
            batch_size: 8,
            lr: DEFAULT_LR,
            seed: 0,
            checkpoint_every: 500,
            datasets: Vec::new(),
            init: None,
            bg_checkpoint: None,
            env_checkpoint: None,
            loss_log: None,
            freeze: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative paths in the file are relative to the file.
        if let Some(dir) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            cfg.datasets.iter_mut().for_each(|d| fix(&mut d.path));
            for p in [&mut cfg.init, &mut cfg.bg_checkpoint, &mut cfg.env_checkpoint, &mut cfg.loss_log].into_iter().flatten() {
                fix(p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if let Some(f) = &self.freeze {
            let mut want: Vec<String> = self.stage.frozen().iter().map(|p| p.trim_end_matches('.').to_string()).collect();
            let mut got: Vec<String> = f.iter().map(|p| p.trim_end_matches('.').to_string()).collect();
            want.sort();
            got.sort();
            if want != got {
                return Err(Error::Config(format!("freeze set {got:?} inconsistent with stage (expected {want:?})")));
            }
        }
        Ok(())
    }
}

/// One logged optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub seconds: f64,
}

pub const LOSS_LOG_HEADER: &str = "step\tloss\tseconds";

impl LossRecord {
    pub fn tsv_line(&self) -> String {
        format!("{}\t{}\t{:.3}", self.step, self.loss, self.seconds)
    }
}

/// Receives loss records and periodic checkpoints.
pub trait TrainObserver {
    fn record(&mut self, r: &LossRecord) -> Result<()>;

    fn checkpoint(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for Vec<LossRecord> {
    fn record(&mut self, r: &LossRecord) -> Result<()> {
        self.push(*r);
        Ok(())
    }
}

/// Appends records to a TSV file and saves checkpoints to a fixed path.
pub struct FileObserver {
    log: Option<(PathBuf, fs::File)>,
    ckpt_path: Option<PathBuf>,
    pub records: Vec<LossRecord>,
}

impl FileObserver {
    pub fn new(loss_log: Option<&Path>, ckpt_path: Option<&Path>) -> Result<Self> {
        let log = match loss_log {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let fresh = !p.exists();
                let mut f = OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?;
                if fresh {
                    writeln!(f, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(p, e))?;
                }
                Some((p.to_path_buf(), f))
            }
            None => None,
        };
        Ok(Self { log, ckpt_path: ckpt_path.map(Path::to_path_buf), records: Vec::new() })
    }
}

impl TrainObserver for FileObserver {
    fn record(&mut self, r: &LossRecord) -> Result<()> {
        if let Some((p, f)) = &mut self.log {
            writeln!(f, "{}", r.tsv_line()).map_err(|e| Error::io(p.as_path(), e))?;
        }
        self.records.push(*r);
        Ok(())
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        match &self.ckpt_path {
            Some(p) => ckpt.save(p),
            None => Ok(()),
        }
    }
}

/// Per-step RNG: independent of earlier steps, so resumed runs replay
/// exactly.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

fn apply_freeze(model: &mut HarmonyModel, stage: TrainStage) {
    model.store.freeze_all();
    for p in stage.trainable() {
        model.store.set_frozen(p, false);
    }
}

/// Prepares the checkpoint a stage trains: resumes when `init` already
/// carries the target stage, otherwise starts a fresh optimizer.
fn start(mut ckpt: Checkpoint, stage: TrainStage, cfg: &TrainConfig) -> Checkpoint {
    if ckpt.stage != stage.output_tag() || ckpt.optimizer.is_none() {
        ckpt.stage = stage.output_tag();
        ckpt.step = 0;
        ckpt.optimizer = Some(Adam::new(cfg.lr));
    }
    if let Some(o) = &mut ckpt.optimizer {
        o.lr = cfg.lr;
    }
    ckpt.seed = cfg.seed;
    ckpt.notes.insert("train_config".into(), cfg.to_toml());
    apply_freeze(&mut ckpt.model, stage);
    ckpt
}

fn check_loss(loss: f64, step: usize, lr: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step, lr })
    }
}

fn emit(obs: &mut dyn TrainObserver, ckpt: &Checkpoint, cfg: &TrainConfig, step: usize, loss: f64, t0: Instant) -> Result<()> {
    obs.record(&LossRecord { step, loss, seconds: t0.elapsed().as_secs_f64() })?;
    if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every) && step < cfg.steps {
        obs.checkpoint(ckpt)?;
    }
    Ok(())
}

/// One noise-prediction step on `batch`; returns the loss.
pub fn diffusion_step(
    model: &mut HarmonyModel,
    opt: &mut Adam<f32>,
    source: CondSource,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = batch.len();
    let steps = model.schedule.steps;
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=steps)).collect();
    let eps: Tensor<f32> = gaussian(batch.x_b.shape, rng);
    let x_t = q_sample_batch(&batch.x_b, &ts, &eps, &model.schedule)?;
    let grads = {
        let mut t = Tape::new(&model.store);
        let (xv, av, mv, ev) = (t.constant(x_t), t.constant(batch.x_a.clone()), t.constant(batch.m.clone()), t.constant(eps));
        let cond = t.constant(match source {
            CondSource::Environment => batch.z_thumb.clone(),
            _ => batch.y_b.clone(),
        });
        let f = model.feature(&mut t, source, cond)?;
        let eps_hat = model.eps(&mut t, xv, &ts, av, mv, Some(f))?;
        let loss = t.mse(eps_hat, ev);
        let value = t.scalar(loss) as f64;
        if !value.is_finite() {
            return Ok(value);
        }
        (t.backward(loss), value)
    };
    opt.step(&mut model.store, &grads.0);
    Ok(grads.1)
}

fn diffusion_loop(
    mut ckpt: Checkpoint,
    source: CondSource,
    data: &MixedData,
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<Checkpoint> {
    let t0 = Instant::now();
    let mut opt = ckpt.optimizer.take().expect("optimizer set by start()");
    for step in ckpt.step as usize + 1..=cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let picks = data.sample_indices(&mut rng, cfg.batch_size);
        let batch = data.batch(&picks);
        let loss = diffusion_step(&mut ckpt.model, &mut opt, source, &batch, &mut rng)?;
        check_loss(loss, step, cfg.lr)?;
        ckpt.step = step as u64;
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            ckpt.optimizer = Some(opt.clone());
        }
        emit(obs, &ckpt, cfg, step, loss, t0)?;
    }
    ckpt.optimizer = Some(opt);
    Ok(ckpt)
}

/// Stage I: joint training of denoiser, branch and one extractor.
/// `init` may be a checkpoint of the same stage to resume.
pub fn train_stage1(
    data: &MixedData,
    cond: CondSource,
    cfg: &TrainConfig,
    init: Option<Checkpoint>,
    obs: &mut dyn TrainObserver,
) -> Result<Checkpoint> {
    let stage = match cond {
        CondSource::Background => TrainStage::Stage1Bg,
        CondSource::Environment => TrainStage::Stage1Env,
        CondSource::Aligned => return Err(Error::Config("stage I conditions on a background or an envmap".into())),
    };
    cfg.validate()?;
    let ckpt = match init {
        Some(c) => {
            c.require_stage(&[stage.output_tag()])?;
            c
        }
        None => Checkpoint::new(stage.output_tag(), HarmonyModel::new(&cfg.model, cfg.seed)?, cfg.seed),
    };
    let ckpt = start(ckpt, stage, cfg);
    diffusion_loop(ckpt, cond, data, cfg, obs)
}

fn check_compatible(a: &ModelConfig, b: &ModelConfig, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Config(format!("{what}: model configs differ")));
    }
    Ok(())
}

/// Features `(F_bg(y_b), F_env(z_b))` of every tuple, computed in chunks.
pub fn feature_pairs(model: &HarmonyModel, data: &TupleTensors) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut bg = Vec::new();
    let mut env = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(32) {
        let b = data.gather(chunk);
        let fb = model.compute_feature(CondSource::Background, &b.y_b)?;
        let fe = model.compute_feature(CondSource::Environment, &b.z_thumb)?;
        bg.extend((0..fb.n()).map(|i| fb.select(i)));
        env.extend((0..fe.n()).map(|i| fe.select(i)));
    }
    Ok((Tensor::stack(&bg), Tensor::stack(&env)))
}

/// Mean L1 of `align(f_bg)` and of `f_bg` itself against `f_env`.
pub fn align_gap(model: &HarmonyModel, data: &TupleTensors) -> Result<(f64, f64)> {
    let (fb, fe) = feature_pairs(model, data)?;
    let mut t = Tape::inference(&model.store);
    let x = t.constant(fb.clone());
    let out = model.align.forward(&mut t, x)?;
    Ok((t.value(out).l1_distance(&fe), fb.l1_distance(&fe)))
}

/// Combines the Stage I extractors into one model whose align net is
/// trained next: `extract_env` and the denoiser come from `env`,
/// `extract_bg` from `bg`.
pub fn merge_stage1(bg: &Checkpoint, env: &Checkpoint) -> Result<HarmonyModel> {
    bg.require_stage(&[StageTag::Stage1Bg])?;
    env.require_stage(&[StageTag::Stage1Env])?;
    check_compatible(&bg.model.config, &env.model.config, "stage I checkpoints")?;
    let mut model = env.model.clone();
    copy_prefix(&mut model, &bg.model, EXTRACT_BG);
    Ok(model)
}

fn copy_prefix(dst: &mut HarmonyModel, src: &HarmonyModel, prefix: &str) {
    let ids: Vec<_> = dst.store.ids_with_prefix(prefix).collect();
    for id in ids {
        let name = dst.store.get(id).name.clone();
        let sid = src.store.id(&name).expect("same config implies same names");
        *dst.store.value_mut(id) = src.store.value(sid).clone();
    }
}

/// Stage II: trains only the alignment net with an L1 objective on
/// `(F_bg(y_b), F_env(z_b))` pairs.
pub fn train_align(
    data: &MixedData,
    bg: &Checkpoint,
    env: &Checkpoint,
    cfg: &TrainConfig,
    init: Option<Checkpoint>,
    obs: &mut dyn TrainObserver,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let model = merge_stage1(bg, env)?;
    let ckpt = match init {
        Some(c) => {
            c.require_stage(&[StageTag::Align])?;
            check_compatible(&c.model.config, &model.config, "align resume")?;
            c
        }
        None => Checkpoint::new(StageTag::Align, model, cfg.seed),
    };
    let mut ckpt = start(ckpt, TrainStage::Align, cfg);
    let pairs: Vec<(Tensor<f32>, Tensor<f32>)> =
        data.sources.iter().map(|(_, d)| feature_pairs(&ckpt.model, d)).collect::<Result<_>>()?;
    let mut opt = ckpt.optimizer.take().expect("optimizer set by start()");
    let t0 = Instant::now();
    for step in ckpt.step as usize + 1..=cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let picks = data.sample_indices(&mut rng, cfg.batch_size);
        let fb = Tensor::stack(&picks.iter().map(|&(s, i)| pairs[s].0.select(i)).collect::<Vec<_>>());
        let fe = Tensor::stack(&picks.iter().map(|&(s, i)| pairs[s].1.select(i)).collect::<Vec<_>>());
        let (grads, loss) = {
            let mut t = Tape::new(&ckpt.model.store);
            let (x, y) = (t.constant(fb), t.constant(fe));
            let out = ckpt.model.align.forward(&mut t, x)?;
            let loss = t.l1(out, y);
            let v = t.scalar(loss) as f64;
            check_loss(v, step, cfg.lr)?;
            (t.backward(loss), v)
        };
        opt.step(&mut ckpt.model.store, &grads);
        ckpt.step = step as u64;
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            ckpt.optimizer = Some(opt.clone());
        }
        emit(obs, &ckpt, cfg, step, loss, t0)?;
    }
    ckpt.optimizer = Some(opt);
    Ok(ckpt)
}

/// Builds the inference model: denoiser, branch and `extract_env` from the
/// environment-trained checkpoint, `extract_bg` from the background one and
/// the alignment net from the align checkpoint. No weight is modified.
pub fn assemble_final(env: &Checkpoint, bg: &Checkpoint, align: &Checkpoint) -> Result<Checkpoint> {
    env.require_stage(&[StageTag::Stage1Env])?;
    bg.require_stage(&[StageTag::Stage1Bg])?;
    align.require_stage(&[StageTag::Align])?;
    check_compatible(&env.model.config, &bg.model.config, "environment vs background checkpoint")?;
    check_compatible(&env.model.config, &align.model.config, "environment vs align checkpoint")?;
    let mut model = env.model.clone();
    copy_prefix(&mut model, &bg.model, EXTRACT_BG);
    copy_prefix(&mut model, &align.model, ALIGN);
    model.store.freeze_all();
    let mut out = Checkpoint::new(StageTag::Final, model, env.seed);
    out.notes.insert("env_checkpoint".into(), env.weights_hash());
    out.notes.insert("bg_checkpoint".into(), bg.weights_hash());
    out.notes.insert("align_checkpoint".into(), align.weights_hash());
    Ok(out)
}

/// Stage III: finetunes only the denoiser on mixed data, conditioning
/// through the frozen aligned background path.
pub fn train_finetune(
    data: &MixedData,
    init: Checkpoint,
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<Checkpoint> {
    cfg.validate()?;
    init.require_stage(&[StageTag::Final, StageTag::Finetuned])?;
    let ckpt = start(init, TrainStage::Finetune, cfg);
    diffusion_loop(ckpt, CondSource::Aligned, data, cfg, obs)
}

fn load_mixed(cfg: &TrainConfig) -> Result<MixedData> {
    if cfg.datasets.is_empty() {
        return Err(Error::Config("no datasets configured".into()));
    }
    let s = cfg.model.image_size();
    let sources = cfg
        .datasets
        .iter()
        .map(|d| Ok((d.weight, TupleTensors::from_dataset(&load_dataset(&d.path)?, s)?)))
        .collect::<Result<Vec<_>>>()?;
    MixedData::new(sources)
}

fn load_opt(p: &Option<PathBuf>, what: &str) -> Result<Checkpoint> {
    let p = p.as_ref().ok_or_else(|| Error::Config(format!("{what} checkpoint not configured")))?;
    Checkpoint::load(p)
}

/// Runs the configured stage end to end, writing `out` (and periodic
/// checkpoints to the same path) and the loss log.
pub fn run_stage(cfg: &TrainConfig, out: &Path) -> Result<Checkpoint> {
    cfg.validate()?;
    let data = load_mixed(cfg)?;
    let mut obs = FileObserver::new(cfg.loss_log.as_deref(), Some(out))?;
    let init = cfg.init.as_ref().map(Checkpoint::load).transpose()?;
    let ckpt = match cfg.stage {
        TrainStage::Stage1Bg => train_stage1(&data, CondSource::Background, cfg, init, &mut obs)?,
        TrainStage::Stage1Env => train_stage1(&data, CondSource::Environment, cfg, init, &mut obs)?,
        TrainStage::Align => {
            let bg = load_opt(&cfg.bg_checkpoint, "bg")?;
            let env = load_opt(&cfg.env_checkpoint, "env")?;
            train_align(&data, &bg, &env, cfg, init, &mut obs)?
        }
        TrainStage::Finetune => {
            let init = init.ok_or_else(|| Error::Config("finetune needs `init` = final checkpoint".into()))?;
            train_finetune(&data, init, cfg, &mut obs)?
        }
    };
    ckpt.save(out)?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests;
