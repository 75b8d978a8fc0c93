use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Conv2d, GroupNorm, Linear, ParamStore, ResBlock, Scalar, Tape, Var};

/// Channels of the denoiser input: noisy target, input composite, mask.
pub const INPUT_CHANNELS: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    pub emb_dim: usize,
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { image_size: 64, base_channels: 32, channel_mults: vec![1, 2, 2], res_blocks: 1, emb_dim: 64, groups: 8 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mults.len();
        if levels < 3 {
            return Err(Error::Config(format!("need at least 3 resolution levels, got {levels}")));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << (levels - 1)) {
            return Err(Error::Config(format!(
                "image size {} not divisible by 2^{}",
                self.image_size,
                levels - 1
            )));
        }
        if self.base_channels == 0 || self.res_blocks == 0 || self.channel_mults.contains(&0) {
            return Err(Error::Config("channel widths and block counts must be positive".into()));
        }
        if self.emb_dim < 2 || !self.emb_dim.is_multiple_of(2) {
            return Err(Error::Config("emb_dim must be even".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    /// `(channels, side)` of the encoder activation at each level.
    pub fn encoder_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.levels()).map(|l| (self.level_channels(l), self.image_size >> l)).collect()
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }
}

/// Two-layer MLP on the sinusoidal timestep embedding; output is activated.
#[derive(Clone, Debug)]
pub struct TimeMlp {
    emb_dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeMlp {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, cfg: &DenoiserConfig, rng: &mut impl Rng) -> Self {
        let td = cfg.time_dim();
        Self {
            emb_dim: cfg.emb_dim,
            l1: Linear::new(store, &format!("{name}.l1"), cfg.emb_dim, td, rng),
            l2: Linear::new(store, &format!("{name}.l2"), td, td, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<'_, F>, steps: &[usize]) -> Var {
        let e = t.constant(timestep_embedding(steps, self.emb_dim));
        let h = self.l1.forward(t, e);
        let h = t.silu(h);
        let h = self.l2.forward(t, h);
        t.silu(h)
    }
}

/// Encoder shared by the denoiser and the conditioning branch: `conv_in`,
/// then per level `res_blocks` residual blocks and (except at the last
/// level) a stride-2 convolution.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub conv_in: Conv2d,
    pub levels: Vec<Vec<ResBlock>>,
    pub downs: Vec<Conv2d>,
}

impl Encoder {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, cfg: &DenoiserConfig, rng: &mut impl Rng) -> Self {
        let td = Some(cfg.time_dim());
        let conv_in = Conv2d::new(store, &format!("{name}.conv_in"), INPUT_CHANNELS, cfg.base_channels, 3, 1, rng);
        let mut ch = cfg.base_channels;
        let mut levels = Vec::new();
        let mut downs = Vec::new();
        for l in 0..cfg.levels() {
            let out = cfg.level_channels(l);
            let blocks = (0..cfg.res_blocks)
                .map(|b| {
                    let cin = if b == 0 { ch } else { out };
                    ResBlock::new(store, &format!("{name}.enc{l}.res{b}"), cin, out, td, cfg.groups, rng)
                })
                .collect();
            levels.push(blocks);
            ch = out;
            if l + 1 < cfg.levels() {
                downs.push(Conv2d::new(store, &format!("{name}.enc{l}.down"), ch, ch, 3, 2, rng));
            }
        }
        Self { conv_in, levels, downs }
    }

    /// Runs the encoder, calling `inject(level, activation)` on the output of
    /// each level before it is stored and downsampled. `after_in` is added to
    /// the `conv_in` output when present. Returns the per-level activations.
    pub fn forward<F: Scalar>(
        &self,
        t: &mut Tape<'_, F>,
        x: Var,
        emb: Var,
        after_in: Option<Var>,
        mut inject: impl FnMut(&mut Tape<'_, F>, usize, Var) -> Var,
    ) -> Vec<Var> {
        let mut h = self.conv_in.forward(t, x);
        if let Some(a) = after_in {
            h = t.add(h, a);
        }
        let mut acts = Vec::with_capacity(self.levels.len());
        for (l, blocks) in self.levels.iter().enumerate() {
            for b in blocks {
                h = b.forward(t, h, Some(emb));
            }
            h = inject(t, l, h);
            acts.push(h);
            if let Some(d) = self.downs.get(l) {
                h = d.forward(t, h);
            }
        }
        acts
    }
}

/// U-shaped noise predictor `eps_hat = U(x_t, t, x_a, m)` with optional
/// additive residuals on the encoder activations.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: DenoiserConfig,
    time: TimeMlp,
    encoder: Encoder,
    mid: ResBlock,
    decoder: Vec<Vec<ResBlock>>,
    ups: Vec<Conv2d>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    /// Time-dependent `3 x 7` linear map of the raw input added to the
    /// output. Starts at zero.
    skip: Linear,
}

impl UNet {
    /// Registers parameters under `name` (e.g. `"unet"`).
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, cfg: &DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let td = Some(cfg.time_dim());
        let time = TimeMlp::new(store, &format!("{name}.time"), cfg, rng);
        let encoder = Encoder::new(store, name, cfg, rng);
        let top = cfg.level_channels(cfg.levels() - 1);
        let mid = ResBlock::new(store, &format!("{name}.mid"), top, top, td, cfg.groups, rng);
        let mut decoder = vec![Vec::new(); cfg.levels()];
        let mut ups = vec![None; cfg.levels()];
        let mut ch = top;
        for l in (0..cfg.levels()).rev() {
            let out = cfg.level_channels(l);
            decoder[l] = (0..cfg.res_blocks)
                .map(|b| {
                    let cin = if b == 0 { ch + out } else { out };
                    ResBlock::new(store, &format!("{name}.dec{l}.res{b}"), cin, out, td, cfg.groups, rng)
                })
                .collect();
            ch = out;
            if l > 0 {
                ups[l] = Some(Conv2d::new(store, &format!("{name}.dec{l}.up"), ch, ch, 3, 1, rng));
            }
        }
        let out_norm = GroupNorm::new(store, &format!("{name}.out_norm"), cfg.base_channels, cfg.groups);
        let out_conv = Conv2d::new(store, &format!("{name}.out_conv"), cfg.base_channels, 3, 3, 1, rng);
        let skip = Linear::zeroed(store, &format!("{name}.skip"), cfg.time_dim(), 3 * INPUT_CHANNELS);
        let ups = ups.into_iter().flatten().collect();
        Ok(Self { config: cfg.clone(), time, encoder, mid, decoder, ups, out_norm, out_conv, skip })
    }

    /// Concatenates the 7-channel input.
    pub fn input<F: Scalar>(t: &mut Tape<'_, F>, x_t: Var, x_a: Var, m: Var) -> Var {
        let h = t.concat_channels(x_t, x_a);
        t.concat_channels(h, m)
    }

    pub fn check_input<F: Scalar>(&self, t: &Tape<'_, F>, x_t: Var, x_a: Var, m: Var) -> Result<()> {
        let s = self.config.image_size;
        let n = t.value(x_t).n();
        for (v, c) in [(x_t, 3), (x_a, 3), (m, 1)] {
            let shape = t.value(v).shape;
            if shape != [n, c, s, s] {
                return Err(Error::shape([n, c, s, s], shape));
            }
        }
        Ok(())
    }

    /// Checks residuals against [`DenoiserConfig::encoder_shapes`].
    pub fn check_residuals<F: Scalar>(&self, t: &Tape<'_, F>, n: usize, residuals: &[Var]) -> Result<()> {
        let shapes = self.config.encoder_shapes();
        if residuals.len() != shapes.len() {
            return Err(Error::shape(shapes.len(), residuals.len()));
        }
        for (r, (c, s)) in residuals.iter().zip(shapes) {
            let got = t.value(*r).shape;
            if got != [n, c, s, s] {
                return Err(Error::shape([n, c, s, s], got));
            }
        }
        Ok(())
    }

    pub fn time_embedding<F: Scalar>(&self, t: &mut Tape<'_, F>, steps: &[usize]) -> Var {
        self.time.forward(t, steps)
    }

    pub fn forward<F: Scalar>(
        &self,
        t: &mut Tape<'_, F>,
        x_t: Var,
        steps: &[usize],
        x_a: Var,
        m: Var,
        residuals: Option<&[Var]>,
    ) -> Result<Var> {
        self.forward_with(t, x_t, steps, x_a, m, residuals, None)
    }

    /// [`forward`](Self::forward) with an optional `[n, time_dim, 1, 1]`
    /// offset added to the timestep embedding.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_with<F: Scalar>(
        &self,
        t: &mut Tape<'_, F>,
        x_t: Var,
        steps: &[usize],
        x_a: Var,
        m: Var,
        residuals: Option<&[Var]>,
        emb_shift: Option<Var>,
    ) -> Result<Var> {
        self.check_input(t, x_t, x_a, m)?;
        let n = t.value(x_t).n();
        if steps.len() != n {
            return Err(Error::shape(n, steps.len()));
        }
        if let Some(r) = residuals {
            self.check_residuals(t, n, r)?;
        }
        let mut emb = self.time.forward(t, steps);
        if let Some(e) = emb_shift {
            let want = [n, self.config.time_dim(), 1, 1];
            if t.value(e).shape != want {
                return Err(Error::shape(want, t.value(e).shape));
            }
            emb = t.add(emb, e);
        }
        let x = Self::input(t, x_t, x_a, m);
        let skips = self.encoder.forward(t, x, emb, None, |t, l, h| match residuals {
            Some(r) => t.add(h, r[l]),
            None => h,
        });
        let mut h = self.mid.forward(t, *skips.last().expect("at least one level"), Some(emb));
        for l in (0..self.config.levels()).rev() {
            h = t.concat_channels(h, skips[l]);
            for b in &self.decoder[l] {
                h = b.forward(t, h, Some(emb));
            }
            if l > 0 {
                let side = self.config.image_size >> (l - 1);
                h = t.resize_nearest(h, side, side);
                h = self.ups[l - 1].forward(t, h);
            }
        }
        let h = self.out_norm.forward(t, h);
        let h = t.silu(h);
        let out = self.out_conv.forward(t, h);
        let mix = self.skip.forward(t, emb);
        let lin = t.channel_mix(x, mix);
        Ok(t.add(out, lin))
    }
}
