//! The full harmonizer: denoiser, conditioning branch, both extractors and
//! the alignment network, sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{make_schedule, sample, DenoiserConfig, NoiseSchedule, SamplerParams, ScheduleKind, UNet};
use crate::error::{Error, Result};
use crate::lightcond::{feature_shape, AlignNet, ConditioningBranch, Extractor, LightCondConfig, FEATURE_STRIDE};
use crate::nn::{ParamStore, Scalar, Tape, Tensor, Var};

pub const UNET: &str = "unet.";
pub const BRANCH: &str = "branch.";
pub const EXTRACT_BG: &str = "extract_bg.";
pub const EXTRACT_ENV: &str = "extract_env.";
pub const ALIGN: &str = "align.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub lightcond: LightCondConfig,
    pub schedule_steps: usize,
    pub schedule: ScheduleKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            lightcond: LightCondConfig::default(),
            schedule_steps: 1000,
            schedule: ScheduleKind::Linear,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if !self.denoiser.image_size.is_multiple_of(FEATURE_STRIDE) {
            return Err(Error::Config(format!("image size must be a multiple of {FEATURE_STRIDE}")));
        }
        if self.lightcond.feature_channels == 0 || self.lightcond.extractor_hidden.contains(&0) {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        self.denoiser.image_size
    }
}

/// Which training stage produced a set of weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Stage1Bg,
    Stage1Env,
    Align,
    Final,
    Finetuned,
}

impl StageTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageTag::Stage1Bg => "stage1_bg",
            StageTag::Stage1Env => "stage1_env",
            StageTag::Align => "align",
            StageTag::Final => "final",
            StageTag::Finetuned => "finetuned",
        }
    }
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the lighting feature comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondSource {
    /// `F_bg(y)`.
    Background,
    /// `F_env(z)`, from an LDR envmap thumbnail.
    Environment,
    /// `align(F_bg(y))`.
    Aligned,
}

impl CondSource {
    /// Conditioning used at inference by a model of the given stage.
    pub fn for_stage(stage: StageTag) -> Result<Self> {
        match stage {
            StageTag::Stage1Bg => Ok(CondSource::Background),
            StageTag::Stage1Env => Ok(CondSource::Environment),
            StageTag::Final | StageTag::Finetuned => Ok(CondSource::Aligned),
            StageTag::Align => Err(Error::StageMismatch(
                "an align checkpoint has no trained denoiser; assemble a final model first".into(),
            )),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HarmonyModel<F: Scalar = f32> {
    pub config: ModelConfig,
    pub schedule: NoiseSchedule,
    pub store: ParamStore<F>,
    pub unet: UNet,
    pub branch: ConditioningBranch,
    pub extract_bg: Extractor,
    pub extract_env: Extractor,
    pub align: AlignNet,
}

impl<F: Scalar> HarmonyModel<F> {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = config.image_size();
        let unet = UNet::new(&mut store, "unet", &config.denoiser, &mut rng)?;
        let branch = ConditioningBranch::new(&mut store, "branch", &config.denoiser, &config.lightcond, &mut rng);
        let extract_bg = Extractor::new(&mut store, "extract_bg", s, &config.lightcond, &mut rng)?;
        let extract_env = Extractor::new(&mut store, "extract_env", s, &config.lightcond, &mut rng)?;
        let align = AlignNet::new(&mut store, "align", &config.lightcond, &mut rng);
        let schedule = make_schedule(config.schedule_steps, config.schedule)?;
        Ok(Self { config: config.clone(), schedule, store, unet, branch, extract_bg, extract_env, align })
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size()
    }

    pub fn feature_shape(&self, n: usize) -> [usize; 4] {
        feature_shape(n, self.image_size(), &self.config.lightcond)
    }

    /// Lighting feature from a background `y` or an envmap thumbnail `z`,
    /// both `[n, 3, S, S]` in `[-1, 1]`.
    pub fn feature(&self, t: &mut Tape<'_, F>, source: CondSource, cond: Var) -> Result<Var> {
        match source {
            CondSource::Background => self.extract_bg.forward(t, cond),
            CondSource::Environment => self.extract_env.forward(t, cond),
            CondSource::Aligned => {
                let f = self.extract_bg.forward(t, cond)?;
                self.align.forward(t, f)
            }
        }
    }

    /// Noise prediction; `feature = None` runs the bare denoiser.
    pub fn eps(
        &self,
        t: &mut Tape<'_, F>,
        x_t: Var,
        steps: &[usize],
        x_a: Var,
        m: Var,
        feature: Option<Var>,
    ) -> Result<Var> {
        match feature {
            Some(f) => {
                let b = self.branch.forward(t, f, x_t, steps, x_a, m)?;
                self.unet.forward_with(t, x_t, steps, x_a, m, Some(&b.residuals), Some(b.emb_shift))
            }
            None => self.unet.forward(t, x_t, steps, x_a, m, None),
        }
    }

    pub fn compute_feature(&self, source: CondSource, cond: &Tensor<F>) -> Result<Tensor<F>> {
        let mut t = Tape::inference(&self.store);
        let c = t.constant(cond.clone());
        let f = self.feature(&mut t, source, c)?;
        let out = t.value(f).clone();
        if !out.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(out)
    }

    /// Samples `x_b` given `x_a`, `m` and a precomputed lighting feature.
    pub fn sample_with_feature(
        &self,
        x_a: &Tensor<F>,
        m: &Tensor<F>,
        feature: Option<&Tensor<F>>,
        params: &SamplerParams,
    ) -> Result<Tensor<F>> {
        let n = x_a.n();
        if let Some(f) = feature {
            if f.shape != self.feature_shape(n) {
                return Err(Error::shape(self.feature_shape(n), f.shape));
            }
        }
        let eps_fn = |x: &Tensor<F>, ts: &[usize]| {
            let mut t = Tape::inference(&self.store);
            let (xv, av, mv) = (t.constant(x.clone()), t.constant(x_a.clone()), t.constant(m.clone()));
            let fv = feature.map(|f| t.constant(f.clone()));
            let out = self.eps(&mut t, xv, ts, av, mv, fv)?;
            Ok(t.value(out).clone())
        };
        let s = self.image_size();
        sample(eps_fn, &self.schedule, [n, 3, s, s], params)
    }

    pub fn sample(
        &self,
        source: CondSource,
        x_a: &Tensor<F>,
        m: &Tensor<F>,
        cond: &Tensor<F>,
        params: &SamplerParams,
    ) -> Result<Tensor<F>> {
        let f = self.compute_feature(source, cond)?;
        self.sample_with_feature(x_a, m, Some(&f), params)
    }
}
