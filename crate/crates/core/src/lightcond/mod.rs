//! Lighting representations: the 4-layer feature extractors, the
//! multiscale conditioning branch, and the background-to-environment
//! alignment network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DenoiserConfig, Encoder, TimeMlp, UNet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Conv2d, Linear, ParamStore, ResBlock, Scalar, Tape, Tensor, Var};

/// Spatial downsampling of the extractors (three stride-2 layers).
pub const FEATURE_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LightCondConfig {
    /// Channels `C` of the lighting feature.
    pub feature_channels: usize,
    /// Hidden widths of the first two extractor layers.
    pub extractor_hidden: [usize; 2],
    pub groups: usize,
}

impl Default for LightCondConfig {
    fn default() -> Self {
        Self { feature_channels: 64, extractor_hidden: [16, 32], groups: 8 }
    }
}

/// `[n, C, S/8, S/8]` shape of a lighting feature.
pub fn feature_shape(n: usize, image_size: usize, cfg: &LightCondConfig) -> [usize; 4] {
    let side = image_size / FEATURE_STRIDE;
    [n, cfg.feature_channels, side, side]
}

/// Four convolutions, strides 2, 2, 2, 1, SiLU in between. He-initialised:
/// with the default init the output is dominated by the biases and barely
/// depends on the input.
#[derive(Clone, Debug)]
pub struct Extractor {
    convs: [Conv2d; 4],
    pub image_size: usize,
}

impl Extractor {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        image_size: usize,
        cfg: &LightCondConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !image_size.is_multiple_of(FEATURE_STRIDE) {
            return Err(Error::Config(format!("image size {image_size} not divisible by {FEATURE_STRIDE}")));
        }
        let [h1, h2] = cfg.extractor_hidden;
        let c = cfg.feature_channels;
        let convs = [
            Conv2d::he(store, &format!("{name}.conv0"), 3, h1, 3, 2, rng),
            Conv2d::he(store, &format!("{name}.conv1"), h1, h2, 3, 2, rng),
            Conv2d::he(store, &format!("{name}.conv2"), h2, c, 3, 2, rng),
            Conv2d::he(store, &format!("{name}.conv3"), c, c, 3, 1, rng),
        ];
        Ok(Self { convs, image_size })
    }

    /// `image` is `[n, 3, S, S]` in `[-1, 1]`.
    pub fn forward<F: Scalar>(&self, t: &mut Tape<'_, F>, image: Var) -> Result<Var> {
        let shape = t.value(image).shape;
        let s = self.image_size;
        if shape[1..] != [3, s, s] {
            return Err(Error::shape([shape[0], 3, s, s], shape));
        }
        let mut h = image;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(t, h);
            if i + 1 < self.convs.len() {
                h = t.silu(h);
            }
        }
        Ok(h)
    }
}

/// What the branch adds to the denoiser: one residual per encoder level and
/// an offset of the timestep embedding.
pub struct BranchOutput {
    pub residuals: Vec<Var>,
    pub emb_shift: Var,
}

/// Trainable copy of the denoiser encoder fed `(x_t, x_a, m, t)` plus the
/// lighting feature; emits one zero-initialized residual per encoder level.
#[derive(Clone, Debug)]
pub struct ConditioningBranch {
    time: TimeMlp,
    hint_in: Conv2d,
    hint_out: Conv2d,
    encoder: Encoder,
    zero_convs: Vec<Conv2d>,
    /// Flattened feature to a timestep-embedding offset; starts at zero.
    global: Linear,
    image_size: usize,
    feature_channels: usize,
}

impl ConditioningBranch {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        unet: &DenoiserConfig,
        cfg: &LightCondConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let base = unet.base_channels;
        let side = unet.image_size / FEATURE_STRIDE;
        let zero_convs = unet
            .encoder_shapes()
            .iter()
            .enumerate()
            .map(|(l, &(c, _))| Conv2d::zeroed(store, &format!("{name}.zero{l}"), c, c, 1))
            .collect();
        Self {
            time: TimeMlp::new(store, &format!("{name}.time"), unet, rng),
            hint_in: Conv2d::new(store, &format!("{name}.hint_in"), cfg.feature_channels, base, 3, 1, rng),
            hint_out: Conv2d::new(store, &format!("{name}.hint_out"), base, base, 3, 1, rng),
            encoder: Encoder::new(store, name, unet, rng),
            zero_convs,
            global: Linear::zeroed(store, &format!("{name}.global"), cfg.feature_channels * side * side, unet.time_dim()),
            image_size: unet.image_size,
            feature_channels: cfg.feature_channels,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        t: &mut Tape<'_, F>,
        feature: Var,
        x_t: Var,
        steps: &[usize],
        x_a: Var,
        m: Var,
    ) -> Result<BranchOutput> {
        let n = t.value(x_t).n();
        let want = [n, self.feature_channels, self.image_size / FEATURE_STRIDE, self.image_size / FEATURE_STRIDE];
        if t.value(feature).shape != want {
            return Err(Error::shape(want, t.value(feature).shape));
        }
        let emb = self.time.forward(t, steps);
        let h = self.hint_in.forward(t, feature);
        let h = t.silu(h);
        let h = self.hint_out.forward(t, h);
        let hint = t.resize_nearest(h, self.image_size, self.image_size);
        let x = UNet::input(t, x_t, x_a, m);
        let zero_convs = &self.zero_convs;
        let mut outs = Vec::with_capacity(zero_convs.len());
        self.encoder.forward(t, x, emb, Some(hint), |t, l, h| {
            outs.push(zero_convs[l].forward(t, h));
            h
        });
        let emb_shift = self.global.forward(t, feature);
        Ok(BranchOutput { residuals: outs, emb_shift })
    }
}

/// Maps `f_bg` toward `f_env` with the same shape: three residual blocks,
/// each followed by a stride-2 convolution, a mirrored decoder (nearest
/// upsampling to the recorded encoder sizes, then a convolution and a
/// residual block), and a global skip through a zero-initialized output
/// convolution, so a fresh network is the identity.
#[derive(Clone, Debug)]
pub struct AlignNet {
    enc: Vec<(ResBlock, Conv2d)>,
    dec: Vec<(Conv2d, ResBlock)>,
    out: Conv2d,
    channels: usize,
}

pub const ALIGN_DEPTH: usize = 3;

impl AlignNet {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, cfg: &LightCondConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.feature_channels;
        let g = cfg.groups;
        let enc = (0..ALIGN_DEPTH)
            .map(|i| {
                (
                    ResBlock::new(store, &format!("{name}.enc{i}.res"), c, c, None, g, rng),
                    Conv2d::new(store, &format!("{name}.enc{i}.down"), c, c, 3, 2, rng),
                )
            })
            .collect();
        let dec = (0..ALIGN_DEPTH)
            .map(|i| {
                (
                    Conv2d::new(store, &format!("{name}.dec{i}.up"), c, c, 3, 1, rng),
                    ResBlock::new(store, &format!("{name}.dec{i}.res"), c, c, None, g, rng),
                )
            })
            .collect();
        let out = Conv2d::zeroed(store, &format!("{name}.out"), c, c, 3);
        Self { enc, dec, out, channels: c }
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<'_, F>, f: Var) -> Result<Var> {
        let shape = t.value(f).shape;
        if shape[1] != self.channels {
            return Err(Error::shape(self.channels, shape[1]));
        }
        let mut sizes = Vec::with_capacity(ALIGN_DEPTH);
        let mut h = f;
        for (res, down) in &self.enc {
            h = res.forward(t, h, None);
            let v = t.value(h);
            sizes.push((v.h(), v.w()));
            h = down.forward(t, h);
        }
        for ((up, res), &(hh, ww)) in self.dec.iter().zip(sizes.iter().rev()) {
            h = t.resize_nearest(h, hh, ww);
            h = up.forward(t, h);
            h = res.forward(t, h, None);
        }
        let delta = self.out.forward(t, h);
        Ok(t.add(f, delta))
    }
}

/// Per-cell L2 norm over channels of batch item `n`, scaled so the largest
/// cell is 1 (an all-zero feature stays zero).
pub fn feature_norm_map<F: Scalar>(f: &Tensor<F>, n: usize) -> Image {
    let [_, c, h, w] = f.shape;
    let item = f.item(n);
    let mut norms = vec![0.0f64; h * w];
    for ch in 0..c {
        for (i, v) in item[ch * h * w..(ch + 1) * h * w].iter().enumerate() {
            norms[i] += v.as_f64().powi(2);
        }
    }
    let norms: Vec<f64> = norms.into_iter().map(f64::sqrt).collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    let data = norms.iter().map(|&v| if max > 0.0 { (v / max) as f32 } else { 0.0 }).collect();
    Image::new(w, h, 1, data).expect("sizes agree")
}

pub const FEATURE_MAGIC: &[u8; 4] = b"FEAT";

/// Batch item `n` of a feature in the envmap container layout: magic
/// `FEAT`, `u32` C, H, W, then little-endian `f32` values in CHW order.
pub fn encode_feature<F: Scalar>(f: &Tensor<F>, n: usize) -> Vec<u8> {
    let [_, c, h, w] = f.shape;
    let mut out = Vec::with_capacity(16 + c * h * w * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in f.item(n) {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

/// Inverse of [`encode_feature`]; returns a `[1, C, H, W]` tensor.
pub fn decode_feature(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |detail: String| Error::Format { what: "feature", detail };
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("missing FEAT header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if bytes.len() != 16 + c * h * w * 4 {
        return Err(bad(format!("expected {} bytes for {c}x{h}x{w}, found {}", 16 + c * h * w * 4, bytes.len())));
    }
    let data = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(Tensor::from_vec([1, c, h, w], data))
}

/// Mean absolute difference between two features of equal shape.
pub fn feature_l1<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::shape(a.shape, b.shape));
    }
    Ok(a.l1_distance(b))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::gaussian;
    use crate::nn::Adam;

    #[test]
    fn feature_container_round_trips() {
        let f: Tensor<f32> = gaussian([2, 3, 2, 4], &mut ChaCha8Rng::seed_from_u64(0));
        let bytes = encode_feature(&f, 1);
        assert_eq!(&bytes[..4], b"FEAT");
        assert_eq!(bytes.len(), 16 + 24 * 4);
        let back = decode_feature(&bytes).unwrap();
        assert_eq!(back.shape, [1, 3, 2, 4]);
        assert_eq!(back.data, f.item(1));
        assert!(decode_feature(&bytes[..20]).is_err());
    }

    fn small() -> (DenoiserConfig, LightCondConfig) {
        (
            DenoiserConfig { image_size: 16, base_channels: 4, channel_mults: vec![1, 2, 2], res_blocks: 1, emb_dim: 8, groups: 2 },
            LightCondConfig { feature_channels: 8, extractor_hidden: [4, 8], groups: 2 },
        )
    }

    #[test]
    fn extractor_shape_and_determinism() {
        let cfg = LightCondConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let ex = Extractor::new(&mut store, "extract_bg", 64, &cfg, &mut rng).unwrap();
        let img: Tensor<f32> = gaussian::<f32>([1, 3, 64, 64], &mut rng).map(|v| v.clamp(-1.0, 1.0));
        let run = || {
            let mut t = Tape::inference(&store);
            let x = t.constant(img.clone());
            let f = ex.forward(&mut t, x).unwrap();
            t.value(f).clone()
        };
        let f = run();
        assert_eq!(f.shape, [1, 64, 8, 8]);
        assert_eq!(f.shape, feature_shape(1, 64, &cfg));
        assert!(f.is_finite());
        assert_eq!(f, run());
        let mut t = Tape::inference(&store);
        let bad = t.constant(Tensor::zeros([1, 3, 32, 32]));
        assert!(ex.forward(&mut t, bad).is_err());
    }

    #[test]
    fn fresh_branch_emits_zero_injections() {
        let (ucfg, lcfg) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let branch = ConditioningBranch::new(&mut store, "branch", &ucfg, &lcfg, &mut rng);
        let mut t = Tape::inference(&store);
        let f = t.constant(gaussian(feature_shape(2, 16, &lcfg), &mut rng));
        let x = t.constant(gaussian([2, 3, 16, 16], &mut rng));
        let m = t.constant(gaussian([2, 1, 16, 16], &mut rng));
        let out = branch.forward(&mut t, f, x, &[1, 2], x, m).unwrap();
        assert_eq!(t.value(out.emb_shift).shape, [2, ucfg.time_dim(), 1, 1]);
        assert!(t.value(out.emb_shift).data.iter().all(|&v| v == 0.0));
        let res = out.residuals;
        assert_eq!(res.len(), ucfg.levels());
        assert!(res.len() >= 3);
        for (r, (c, s)) in res.iter().zip(ucfg.encoder_shapes()) {
            assert_eq!(t.value(*r).shape, [2, c, s, s]);
            assert!(t.value(*r).data.iter().all(|&v| v == 0.0));
        }
        let bad = t.constant(Tensor::zeros([2, 8, 4, 3]));
        assert!(branch.forward(&mut t, bad, x, &[1, 2], x, m).is_err());
    }

    #[test]
    fn align_preserves_shape_for_various_sizes() {
        for (c, side) in [(8, 4), (8, 8), (16, 2), (8, 1)] {
            let cfg = LightCondConfig { feature_channels: c, extractor_hidden: [4, 8], groups: 4 };
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut store = ParamStore::<f32>::new();
            let align = AlignNet::new(&mut store, "align", &cfg, &mut rng);
            let mut t = Tape::inference(&store);
            let f = t.constant(gaussian([2, c, side, side], &mut rng));
            let out = align.forward(&mut t, f).unwrap();
            assert_eq!(t.value(out).shape, [2, c, side, side]);
            assert!(t.value(out).is_finite());
        }
    }

    #[test]
    fn align_trained_on_identity_stays_below_threshold() {
        let cfg = LightCondConfig { feature_channels: 8, extractor_hidden: [4, 8], groups: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let align = AlignNet::new(&mut store, "align", &cfg, &mut rng);
        let mut adam = Adam::new(1e-3);
        for _ in 0..50 {
            let f: Tensor<f32> = gaussian([4, 8, 4, 4], &mut rng);
            let mut t = Tape::new(&store);
            let x = t.constant(f.clone());
            let out = align.forward(&mut t, x).unwrap();
            let target = t.constant(f);
            let loss = t.l1(out, target);
            let g = t.backward(loss);
            adam.step(&mut store, &g);
        }
        let held: Tensor<f32> = gaussian([4, 8, 4, 4], &mut rng);
        let mut t = Tape::inference(&store);
        let x = t.constant(held.clone());
        let out = align.forward(&mut t, x).unwrap();
        assert!(feature_l1(t.value(out), &held).unwrap() < 1e-3);
    }

    #[test]
    fn align_learns_a_fixed_offset() {
        let cfg = LightCondConfig { feature_channels: 8, extractor_hidden: [4, 8], groups: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let align = AlignNet::new(&mut store, "align", &cfg, &mut rng);
        let mut adam = Adam::new(3e-3);
        let pairs = |rng: &mut ChaCha8Rng| {
            let f: Tensor<f32> = gaussian([4, 8, 4, 4], rng);
            let target = f.map(|v| 0.5 * v + 0.3);
            (f, target)
        };
        for _ in 0..150 {
            let (f, target) = pairs(&mut rng);
            let mut t = Tape::new(&store);
            let (x, y) = (t.constant(f), t.constant(target));
            let out = align.forward(&mut t, x).unwrap();
            let loss = t.l1(out, y);
            let g = t.backward(loss);
            adam.step(&mut store, &g);
        }
        let (f, target) = pairs(&mut rng);
        let mut t = Tape::inference(&store);
        let x = t.constant(f.clone());
        let out = align.forward(&mut t, x).unwrap();
        assert!(feature_l1(t.value(out), &target).unwrap() < feature_l1(&f, &target).unwrap());
    }

    #[test]
    fn norm_map_contracts() {
        let zero = Tensor::<f32>::zeros([1, 4, 3, 3]);
        assert!(feature_norm_map(&zero, 0).data.iter().all(|&v| v == 0.0));
        let mut one = zero.clone();
        one.data[2 * 9 + 4] = -3.0;
        let map = feature_norm_map(&one, 0);
        assert_eq!(map.data.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(map.pixel(1, 1)[0], 1.0);
    }
}
