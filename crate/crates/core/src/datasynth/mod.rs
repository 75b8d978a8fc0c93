//! Finetuning pairs whose targets are untouched "real" images and whose
//! inputs have the subject relit by a trained model.
//!
//! Real photos are replaced by held-out simulator scenes (natural-style
//! environments), so the clean background is an exact re-render of the
//! scene without the subject rather than an inpainting.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diffcore::{SamplerMode, SamplerParams};
use crate::envlight::{project_to_background, tonemap_ldr, CropSpec, EnvMap};
use crate::error::{Error, Result};
use crate::harmoneval::{composite, harmonize_batch};
use crate::image::{Image, Mask};
use crate::model::{CondSource, StageTag};
use crate::stagesim::{
    render_subject, write_config, write_manifest, write_tuple, DatasetConfig, LightingRef, ManifestRow, SubjectPool,
    SubjectSpec, TrainingTuple, TupleMeta,
};

const SYNTH_FILE: &str = "synth.json";
const DATASET_FILE: &str = "dataset.json";

/// Scene metadata of a held-out "real" image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub subject: SubjectSpec,
    pub lighting: LightingRef,
    pub crop: CropSpec,
}

#[derive(Clone, Debug)]
pub struct RealImage {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    /// `None` for images without simulator metadata; those cannot get a
    /// clean background.
    pub scene: Option<Scene>,
}

/// Held-out scenes: subjects and natural-style envmaps.
#[derive(Clone, Debug)]
pub struct SceneSet {
    pub config: DatasetConfig,
    pub pool: SubjectPool,
}

impl SceneSet {
    pub fn new(config: DatasetConfig) -> Result<Self> {
        config.validate()?;
        let pool = SubjectPool::new(&config);
        Ok(Self { config, pool })
    }

    fn quantized_yaw(&self, rng: &mut impl Rng) -> f64 {
        if !self.config.rotate_envs {
            return 0.0;
        }
        let w = 2 * self.config.env_height;
        rng.random_range(0..w) as f64 * 2.0 * PI / w as f64
    }

    pub fn sample_scene(&self, rng: &mut impl Rng) -> Result<Scene> {
        let c = &self.config;
        let subject = self.pool.subjects[rng.random_range(0..self.pool.subjects.len())].clone();
        let env_id = rng.random_range(0..self.pool.envs.len() as u32);
        let yaw = self.quantized_yaw(rng);
        let fov = if c.fov_deg[0] == c.fov_deg[1] { c.fov_deg[0] } else { rng.random_range(c.fov_deg[0]..c.fov_deg[1]) };
        let pitch = if c.pitch[0] == c.pitch[1] { c.pitch[0] } else { rng.random_range(c.pitch[0]..c.pitch[1]) };
        let crop = CropSpec::new(fov, 0.0, pitch, c.image_size, c.image_size)?;
        Ok(Scene { subject, lighting: LightingRef { env_id, yaw }, crop })
    }

    pub fn env(&self, scene: &Scene) -> EnvMap {
        self.pool.lit(&scene.lighting)
    }

    /// Renders the scene as an 8-bit "photo" with its alpha matte.
    pub fn render_real(&self, id: &str, scene: &Scene) -> Result<RealImage> {
        let env = self.env(scene);
        let (fg, m) = render_subject(&scene.subject, &env, self.config.image_size)?;
        let bg = background(&env, &scene.crop);
        let image = composite(&fg, &m, &bg)?.quantize8();
        Ok(RealImage { id: id.to_string(), image, mask: m.quantize8(), scene: Some(scene.clone()) })
    }

    /// The image's background with the subject removed.
    pub fn make_clean_background(&self, real: &RealImage) -> Result<Image> {
        let scene = real.scene.as_ref().ok_or_else(|| Error::MissingScene(real.id.clone()))?;
        Ok(background(&self.env(scene), &scene.crop))
    }
}

fn background(env: &EnvMap, crop: &CropSpec) -> Image {
    tonemap_ldr(&project_to_background(env, crop)).quantize8()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Environment,
    Background,
}

/// A random relighting condition drawn from the light-stage envmap pool.
#[derive(Clone, Debug)]
pub struct Condition {
    pub kind: ConditionKind,
    pub lighting: LightingRef,
    pub env: EnvMap,
    /// The condition env projected with the scene crop; also the backdrop
    /// the subject is composited over for the model input.
    pub background: Image,
    pub thumbnail: Image,
}

impl Condition {
    pub fn new(kind: ConditionKind, lighting: LightingRef, env: EnvMap, crop: &CropSpec) -> Self {
        let s = crop.out_w;
        Self { kind, lighting, background: background(&env, crop), thumbnail: env.ldr_thumbnail(s, s).quantize8(), env }
    }

    pub fn id(&self) -> String {
        let k = match self.kind {
            ConditionKind::Environment => "env",
            ConditionKind::Background => "bg",
        };
        format!("{k}:{}@{:.4}", self.lighting.env_id, self.lighting.yaw)
    }
}

/// Produces a relit version of a real image's subject.
pub trait Relighter: Sync {
    fn supports(&self, kind: ConditionKind) -> bool;

    /// Full-frame relit image; only the mask region is used.
    fn relight(&self, real: &RealImage, cond: &Condition, seed: u64) -> Result<Image>;

    /// Identifies the weights used, for provenance.
    fn checkpoint_hash(&self) -> String;
}

/// Relights with a trained checkpoint and deterministic sampling.
pub struct ModelRelighter {
    pub checkpoint: Checkpoint,
    pub steps: usize,
    weights_hash: String,
}

impl ModelRelighter {
    pub fn new(checkpoint: Checkpoint, steps: usize) -> Result<Self> {
        checkpoint.require_stage(&[StageTag::Stage1Bg, StageTag::Stage1Env, StageTag::Final, StageTag::Finetuned])?;
        let weights_hash = checkpoint.weights_hash();
        Ok(Self { checkpoint, steps, weights_hash })
    }

    fn stage_for(&self, kind: ConditionKind) -> Option<StageTag> {
        match (self.checkpoint.stage, kind) {
            (StageTag::Stage1Env, ConditionKind::Environment) => Some(StageTag::Stage1Env),
            (StageTag::Stage1Bg, ConditionKind::Background) => Some(StageTag::Stage1Bg),
            // The environment extractor of an assembled model is the one the
            // denoiser was trained with.
            (StageTag::Final | StageTag::Finetuned, ConditionKind::Environment) => Some(StageTag::Stage1Env),
            (StageTag::Final | StageTag::Finetuned, ConditionKind::Background) => Some(StageTag::Final),
            _ => None,
        }
    }
}

impl Relighter for ModelRelighter {
    fn supports(&self, kind: ConditionKind) -> bool {
        self.stage_for(kind).is_some()
    }

    fn relight(&self, real: &RealImage, cond: &Condition, seed: u64) -> Result<Image> {
        let stage = self.stage_for(cond.kind).ok_or_else(|| {
            Error::StageMismatch(format!("{} checkpoint cannot use {:?} conditioning", self.checkpoint.stage, cond.kind))
        })?;
        debug_assert!(CondSource::for_stage(stage).is_ok());
        let x_a = composite(&real.image, &real.mask, &cond.background)?;
        let c = match cond.kind {
            ConditionKind::Environment => &cond.thumbnail,
            ConditionKind::Background => &cond.background,
        };
        let params = SamplerParams { mode: SamplerMode::Ddim, steps: self.steps, seed };
        let out = harmonize_batch(&self.checkpoint.model, stage, &[x_a], std::slice::from_ref(&real.mask), std::slice::from_ref(c), &params)?;
        Ok(out.into_iter().next().expect("one item"))
    }

    fn checkpoint_hash(&self) -> String {
        self.weights_hash.clone()
    }
}

/// Physically re-renders the subject under the condition envmap. A
/// reference relighter that needs no trained model.
pub struct SimRelighter {
    pub image_size: usize,
}

impl Relighter for SimRelighter {
    fn supports(&self, _: ConditionKind) -> bool {
        true
    }

    fn relight(&self, real: &RealImage, cond: &Condition, _seed: u64) -> Result<Image> {
        let scene = real.scene.as_ref().ok_or_else(|| Error::MissingScene(real.id.clone()))?;
        Ok(render_subject(&scene.subject, &cond.env, self.image_size)?.0)
    }

    fn checkpoint_hash(&self) -> String {
        "simulator".into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Held-out natural-style scenes.
    pub scenes: DatasetConfig,
    /// Pool the random relighting conditions are drawn from.
    pub conditions: DatasetConfig,
    /// Probability of an envmap (rather than background) condition.
    pub env_probability: f64,
    /// Minimum mean absolute foreground change for a pair to be kept.
    pub min_fg_diff: f64,
    pub max_resamples: usize,
    pub sampler_steps: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: DatasetConfig {
                env_style: crate::stagesim::EnvStyle::Natural,
                pool_seed: 1,
                ..Default::default()
            },
            conditions: DatasetConfig::default(),
            env_probability: 0.5,
            min_fg_diff: 0.02,
            max_resamples: 10,
            sampler_steps: 20,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenes.validate()?;
        self.conditions.validate()?;
        if !(0.0..=1.0).contains(&self.env_probability) {
            return Err(Error::Config("env_probability must lie in [0, 1]".into()));
        }
        if self.sampler_steps == 0 {
            return Err(Error::Config("sampler_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean absolute difference over the pixels with `mask > 0.5`.
pub fn foreground_diff(a: &Image, b: &Image, mask: &Mask) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &m) in mask.data.iter().enumerate() {
        if m > 0.5 {
            for k in 0..a.channels {
                let j = i * a.channels + k;
                sum += (a.data[j] - b.data[j]).abs() as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Relights `real` and composites the result onto `clean_bg`. Draws a new
/// condition from `draw` each time the foreground barely changed; gives up
/// after `max_resamples` redraws.
pub fn relight_input(
    real: &RealImage,
    clean_bg: &Image,
    relighter: &dyn Relighter,
    min_fg_diff: f64,
    max_resamples: usize,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<Condition>,
) -> Result<(Image, Condition)> {
    for _ in 0..=max_resamples {
        let cond = draw(rng)?;
        let relit = relighter.relight(real, &cond, rng.next_u64())?;
        let input = composite(&relit, &real.mask, clean_bg)?.quantize8();
        if foreground_diff(&input, &real.image, &real.mask)? > min_fg_diff {
            return Ok((input, cond));
        }
    }
    Err(Error::TooManyRejections(max_resamples + 1))
}

fn draw_condition(
    cfg: &SynthConfig,
    cond_pool: &SubjectPool,
    relighter: &dyn Relighter,
    crop: &CropSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Condition> {
    let env_ok = relighter.supports(ConditionKind::Environment);
    let bg_ok = relighter.supports(ConditionKind::Background);
    let want_env = rng.random_bool(cfg.env_probability);
    let kind = match (env_ok, bg_ok) {
        (true, true) if want_env => ConditionKind::Environment,
        (true, true) => ConditionKind::Background,
        (true, false) => ConditionKind::Environment,
        (false, true) => ConditionKind::Background,
        (false, false) => return Err(Error::StageMismatch("relighter supports no conditioning".into())),
    };
    let env_id = rng.random_range(0..cond_pool.envs.len() as u32);
    let w = 2 * cfg.conditions.env_height;
    let yaw = if cfg.conditions.rotate_envs { rng.random_range(0..w) as f64 * 2.0 * PI / w as f64 } else { 0.0 };
    let lighting = LightingRef { env_id, yaw };
    Ok(Condition::new(kind, lighting, cond_pool.lit(&lighting), crop))
}

fn synth_pair(
    cfg: &SynthConfig,
    scenes: &SceneSet,
    cond_pool: &SubjectPool,
    relighter: &dyn Relighter,
    index: usize,
    seed: u64,
) -> Result<TrainingTuple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = format!("{index:06}");
    let scene = scenes.sample_scene(&mut rng)?;
    let real = scenes.render_real(&id, &scene)?;
    let clean = scenes.make_clean_background(&real)?;
    let (x_a, cond) = relight_input(&real, &clean, relighter, cfg.min_fg_diff, cfg.max_resamples, &mut rng, |r| {
        draw_condition(cfg, cond_pool, relighter, &scene.crop, r)
    })?;
    let env = scenes.env(&scene);
    let s = scenes.config.image_size;
    let provenance = format!("source={id};cond={};ckpt={}", cond.id(), relighter.checkpoint_hash());
    Ok(TrainingTuple {
        x_a,
        m: real.mask.clone(),
        y_b: clean,
        z_b_thumb: env.ldr_thumbnail(s, s).quantize8(),
        z_b: env,
        x_b: real.image,
        meta: TupleMeta {
            id,
            subject: scene.subject,
            lighting_a: cond.lighting,
            lighting_b: scene.lighting,
            crop: scene.crop,
            seed,
        },
        provenance: Some(provenance),
    })
}

/// Writes `n` synthesized pairs in the stagesim dataset layout, with a
/// provenance column. Deterministic in `(config, relighter weights, seed)`.
pub fn build_synth_dataset(
    cfg: &SynthConfig,
    relighter: &dyn Relighter,
    n: usize,
    seed: u64,
    root: &Path,
) -> Result<Vec<ManifestRow>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput("n must be >= 1".into()));
    }
    let scenes = SceneSet::new(cfg.scenes.clone())?;
    let cond_pool = SubjectPool::new(&cfg.conditions);
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n).map(|_| master.next_u64()).collect();
    let pairs: Vec<TrainingTuple> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| synth_pair(cfg, &scenes, &cond_pool, relighter, i, s))
        .collect::<Result<_>>()?;
    crate::stagesim::create_root(root)?;
    let rows = pairs.iter().map(|t| write_tuple(root, t)).collect::<Result<Vec<_>>>()?;
    write_config(root, DATASET_FILE, &cfg.scenes)?;
    write_config(root, SYNTH_FILE, cfg)?;
    write_manifest(root, &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests;
