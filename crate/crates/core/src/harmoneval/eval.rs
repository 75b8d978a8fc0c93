use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{masked_mse, mse, psnr_from_mse, ssim};
use super::probe::light_azimuth_probe;
use super::composite;
use crate::checkpoint::Checkpoint;
use crate::diffcore::SamplerParams;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::model::{CondSource, HarmonyModel, StageTag};
use crate::nn::Tensor;
use crate::stagesim::TrainingTuple;

/// Items harmonized per sampler call.
pub const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug)]
pub struct HarmonizeRequest {
    pub foreground: Image,
    pub mask: Mask,
    pub background: Image,
    pub checkpoint: PathBuf,
    pub sampler: SamplerParams,
}

fn resized(img: &Image, s: usize) -> Image {
    if img.width == s && img.height == s {
        img.clone()
    } else {
        img.resize(s, s)
    }
}

/// Harmonizes composites with an in-memory model.
///
/// `cond` holds one conditioning image per item: the background for
/// background-conditioned stages, the LDR envmap thumbnail for
/// `stage1_env`. Every image must already be `S x S`.
pub fn harmonize_batch(
    model: &HarmonyModel,
    stage: StageTag,
    x_a: &[Image],
    masks: &[Mask],
    cond: &[Image],
    params: &SamplerParams,
) -> Result<Vec<Image>> {
    let source = CondSource::for_stage(stage)?;
    if x_a.len() != masks.len() || x_a.len() != cond.len() {
        return Err(Error::shape(x_a.len(), (masks.len(), cond.len())));
    }
    let s = model.image_size();
    for img in x_a.iter().chain(cond) {
        if img.width != s || img.height != s || img.channels != 3 {
            return Err(Error::shape((s, s, 3), (img.width, img.height, img.channels)));
        }
    }
    let stack = |v: &[Image]| Tensor::stack(&v.iter().map(Image::to_tensor::<f32>).collect::<Vec<_>>());
    let out = model.sample(source, &stack(x_a), &stack(masks), &stack(cond), params)?;
    Ok((0..x_a.len()).map(|i| Image::from_tensor(&out, i).clamp01()).collect())
}

/// Composites `fg` over `bg` and relights it for the background.
///
/// Inputs are resized to the model size; the output is returned at the
/// size of `bg`.
pub fn harmonize_with(ckpt: &Checkpoint, fg: &Image, mask: &Mask, bg: &Image, params: &SamplerParams) -> Result<Image> {
    if ckpt.stage == StageTag::Stage1Env {
        return Err(Error::StageMismatch(
            "stage1_env models are conditioned on an environment map, not a background".into(),
        ));
    }
    ckpt.require_stage(&[StageTag::Final, StageTag::Finetuned, StageTag::Stage1Bg])?;
    let x_a = composite(fg, mask, bg)?;
    let s = ckpt.model.image_size();
    let out = harmonize_batch(&ckpt.model, ckpt.stage, &[resized(&x_a, s)], &[resized(mask, s)], &[resized(bg, s)], params)?;
    let out = out.into_iter().next().expect("one item");
    Ok(if out.width == bg.width && out.height == bg.height { out } else { out.resize(bg.width, bg.height).clamp01() })
}

pub fn harmonize(req: &HarmonizeRequest) -> Result<Image> {
    let ckpt = Checkpoint::load(&req.checkpoint)?;
    ckpt.require_stage(&[StageTag::Final, StageTag::Finetuned, StageTag::Stage1Bg, StageTag::Stage1Env])?;
    harmonize_with(&ckpt, &req.foreground, &req.mask, &req.background, &req.sampler)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sample_id: String,
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Foreground-only MSE (`mask > 0.5`); `None` for an empty mask.
    pub fg_mse: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        Self { mean, std: var.sqrt() }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ({:.4})", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mse: MeanStd,
    pub psnr_db: MeanStd,
    pub ssim: MeanStd,
    pub fg_mse: MeanStd,
    pub fg_psnr_db: MeanStd,
    pub config_hash: String,
}

pub const REPORT_HEADER: &str = "sample_id\tmse\tpsnr_db\tssim\tlpips";

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, config_hash: String) -> Self {
        let fg: Vec<f64> = rows.iter().filter_map(|r| r.fg_mse).collect();
        Self {
            mse: MeanStd::of(rows.iter().map(|r| r.mse)),
            psnr_db: MeanStd::of(rows.iter().map(|r| r.psnr_db)),
            ssim: MeanStd::of(rows.iter().map(|r| r.ssim)),
            fg_mse: MeanStd::of(fg.iter().copied()),
            fg_psnr_db: MeanStd::of(fg.iter().map(|&m| psnr_from_mse(m))),
            rows,
            config_hash,
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(s, "{}\t{:.6}\t{:.4}\t{:.6}\tn/a", r.sample_id, r.mse, r.psnr_db, r.ssim).unwrap();
        }
        s
    }

    /// Aligned table of means and standard deviations.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(s, "samples     {}", self.rows.len()).unwrap();
        writeln!(s, "config      {}", &self.config_hash[..self.config_hash.len().min(16)]).unwrap();
        writeln!(s, "metric      mean (std)").unwrap();
        writeln!(s, "MSE         {}", self.mse).unwrap();
        writeln!(s, "PSNR (dB)   {}", self.psnr_db).unwrap();
        writeln!(s, "SSIM        {}", self.ssim).unwrap();
        writeln!(s, "LPIPS       n/a").unwrap();
        writeln!(s, "fg MSE      {}", self.fg_mse).unwrap();
        writeln!(s, "fg PSNR     {}", self.fg_psnr_db).unwrap();
        s
    }

    /// Writes the per-sample TSV to `path` and the summary next to it
    /// (`<path>.summary.txt`).
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))?;
        let mut sp = path.as_os_str().to_owned();
        sp.push(".summary.txt");
        let sp = PathBuf::from(sp);
        fs::write(&sp, self.summary()).map_err(|e| Error::io(&sp, e))
    }
}

pub fn score(sample_id: &str, pred: &Image, target: &Image, mask: &Mask) -> Result<EvalRow> {
    let m = mse(pred, target)?;
    let fg_mse = match masked_mse(pred, target, mask) {
        Ok(v) => Some(v),
        Err(Error::EmptyMask) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalRow { sample_id: sample_id.to_string(), mse: m, psnr_db: psnr_from_mse(m), ssim: ssim(pred, target)?, fg_mse })
}

/// Scores precomputed predictions against the tuples' targets.
pub fn score_predictions(tuples: &[TrainingTuple], preds: &[Image], config_hash: String) -> Result<EvalReport> {
    if tuples.len() != preds.len() {
        return Err(Error::shape(tuples.len(), preds.len()));
    }
    let rows = tuples.iter().zip(preds).map(|(t, p)| score(&t.meta.id, p, &t.x_b, &t.m)).collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows, config_hash))
}

/// Conditioning image a stage expects for a tuple.
pub fn condition_for(stage: StageTag, t: &TrainingTuple) -> Result<&Image> {
    Ok(match CondSource::for_stage(stage)? {
        CondSource::Environment => &t.z_b_thumb,
        _ => &t.y_b,
    })
}

/// Harmonizes every tuple's `x_a` against its own condition.
pub fn predict(ckpt: &Checkpoint, tuples: &[TrainingTuple], params: &SamplerParams) -> Result<Vec<Image>> {
    let s = ckpt.model.image_size();
    let mut preds = Vec::with_capacity(tuples.len());
    for (b, chunk) in tuples.chunks(EVAL_BATCH).enumerate() {
        let x_a: Vec<Image> = chunk.iter().map(|t| resized(&t.x_a, s)).collect();
        let m: Vec<Image> = chunk.iter().map(|t| resized(&t.m, s)).collect();
        let c: Vec<Image> = chunk.iter().map(|t| condition_for(ckpt.stage, t).map(|c| resized(c, s))).collect::<Result<_>>()?;
        let p = SamplerParams { seed: params.seed.wrapping_add(b as u64), ..*params };
        preds.extend(harmonize_batch(&ckpt.model, ckpt.stage, &x_a, &m, &c, &p)?);
    }
    Ok(preds)
}

/// Evaluates a checkpoint on a test set; predictions are scored at the
/// model resolution against resized targets.
pub fn evaluate(ckpt: &Checkpoint, tuples: &[TrainingTuple], params: &SamplerParams) -> Result<EvalReport> {
    let s = ckpt.model.image_size();
    let preds = predict(ckpt, tuples, params)?;
    let rows = tuples
        .iter()
        .zip(&preds)
        .map(|(t, p)| score(&t.meta.id, p, &resized(&t.x_b, s), &resized(&t.m, s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows, ckpt.config_hash()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipCase {
    pub sample_id: String,
    pub azimuth: Option<f64>,
    pub azimuth_flipped: Option<f64>,
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub cases: Vec<FlipCase>,
}

impl FlipReport {
    pub fn flipped(&self) -> usize {
        self.cases.iter().filter(|c| c.flipped).count()
    }

    pub fn rate(&self) -> f64 {
        self.flipped() as f64 / self.cases.len().max(1) as f64
    }
}

/// Harmonizes each tuple's foreground against its background and against
/// the mirrored background, and checks whether the probed light azimuth of
/// the result changes sign. Flat (non-directional) results count as not
/// flipped.
pub fn flip_probe(ckpt: &Checkpoint, tuples: &[TrainingTuple], params: &SamplerParams) -> Result<FlipReport> {
    if ckpt.stage == StageTag::Stage1Env {
        return Err(Error::StageMismatch("flip probe needs a background-conditioned model".into()));
    }
    let s = ckpt.model.image_size();
    let mut cases = Vec::with_capacity(tuples.len());
    for chunk in tuples.chunks(EVAL_BATCH / 2) {
        let mut x_a = Vec::new();
        let mut m = Vec::new();
        let mut c = Vec::new();
        for t in chunk {
            let (mask, bg) = (resized(&t.m, s), resized(&t.y_b, s));
            let flipped_bg = bg.flip_horizontal();
            let fg = resized(&t.x_a, s);
            x_a.push(composite(&fg, &mask, &bg)?);
            x_a.push(composite(&fg, &mask, &flipped_bg)?);
            m.push(mask.clone());
            m.push(mask);
            c.push(bg);
            c.push(flipped_bg);
        }
        let out = harmonize_batch(&ckpt.model, ckpt.stage, &x_a, &m, &c, params)?;
        for (i, t) in chunk.iter().enumerate() {
            let a = light_azimuth_probe(&out[2 * i], &m[2 * i])?;
            let b = light_azimuth_probe(&out[2 * i + 1], &m[2 * i + 1])?;
            let flipped = matches!((a.side(), b.side()), (Some(x), Some(y)) if x != y);
            cases.push(FlipCase {
                sample_id: t.meta.id.clone(),
                azimuth: a.is_directional().then_some(a.azimuth),
                azimuth_flipped: b.is_directional().then_some(b.azimuth),
                flipped,
            });
        }
    }
    Ok(FlipReport { cases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stagesim::{build_dataset, load_dataset, DatasetConfig};

    fn tuples() -> (tempfile::TempDir, Vec<TrainingTuple>) {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&DatasetConfig { image_size: 16, env_height: 8, ..Default::default() }, 5, 0, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        (dir, ds.tuples)
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let (_d, t) = tuples();
        let preds: Vec<Image> = t.iter().map(|t| t.x_b.clone()).collect();
        let r = score_predictions(&t, &preds, "h".into()).unwrap();
        assert_eq!(r.rows.len(), t.len());
        for row in &r.rows {
            assert_eq!(row.mse, 0.0);
            assert_eq!(row.psnr_db, 99.0);
            assert!((row.ssim - 1.0).abs() < 1e-9);
        }
        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().count(), t.len() + 1);
        assert_eq!(tsv.lines().next().unwrap(), REPORT_HEADER);
        assert!(tsv.lines().nth(1).unwrap().ends_with("\tn/a"));
        assert!(score_predictions(&t, &preds[1..], "h".into()).is_err());
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of([1.0, 3.0].into_iter());
        assert_eq!((m.mean, m.std), (2.0, 1.0));
    }

    #[test]
    fn report_files() {
        let (_d, t) = tuples();
        let preds: Vec<Image> = t.iter().map(|t| t.x_a.clone()).collect();
        let r = score_predictions(&t, &preds, "abc".into()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.tsv");
        r.write(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), r.to_tsv());
        assert!(fs::read_to_string(dir.path().join("r.tsv.summary.txt")).unwrap().contains("PSNR"));
    }

    #[test]
    fn stage_contracts() {
        let model = HarmonyModel::<f32>::new(&crate::model::tests::tiny(), 0).unwrap();
        let img = Image::filled(16, 16, 3, 0.5);
        let m = Image::filled(16, 16, 1, 1.0);
        let p = SamplerParams { steps: 2, ..Default::default() };
        for (stage, ok) in [(StageTag::Stage1Env, false), (StageTag::Align, false), (StageTag::Final, true), (StageTag::Stage1Bg, true)] {
            let ck = Checkpoint::new(stage, model.clone(), 0);
            let r = harmonize_with(&ck, &img, &m, &img, &p);
            assert_eq!(r.is_ok(), ok, "{stage}");
            if !ok {
                assert!(matches!(r, Err(Error::StageMismatch(_))));
            }
        }
    }

    #[test]
    fn harmonize_keeps_dimensions_and_range() {
        let model = HarmonyModel::<f32>::new(&crate::model::tests::tiny(), 0).unwrap();
        let ck = Checkpoint::new(StageTag::Final, model, 0);
        let fg = Image::filled(24, 20, 3, 0.9);
        let m = Image::filled(24, 20, 1, 0.5);
        let bg = Image::filled(24, 20, 3, 0.1);
        let p = SamplerParams { steps: 3, seed: 4, ..Default::default() };
        let a = harmonize_with(&ck, &fg, &m, &bg, &p).unwrap();
        assert_eq!((a.width, a.height, a.channels), (24, 20, 3));
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, harmonize_with(&ck, &fg, &m, &bg, &p).unwrap());
    }
}
