//! Compositing, metrics, the light-direction probe, and test-set evaluation.

mod eval;
mod metrics;
mod probe;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

pub use eval::{
    condition_for, evaluate, flip_probe, harmonize, harmonize_batch, harmonize_with, predict, score, score_predictions,
    EvalReport, EvalRow, FlipCase, FlipReport, HarmonizeRequest, MeanStd, EVAL_BATCH, REPORT_HEADER,
};
pub use metrics::{masked_mse, mse, psnr, psnr_from_mse, ssim, PSNR_CAP_DB};
pub use probe::{light_azimuth_probe, ProbeReading, DIRECTIONAL_CV};

/// `alpha * fg + (1 - alpha) * bg` per pixel and channel.
pub fn composite(fg: &Image, alpha: &Mask, bg: &Image) -> Result<Image> {
    fg.ensure_same_shape(bg)?;
    if alpha.channels != 1 || alpha.width != fg.width || alpha.height != fg.height {
        return Err(Error::shape((fg.width, fg.height, 1), (alpha.width, alpha.height, alpha.channels)));
    }
    let c = fg.channels;
    let mut out = bg.clone();
    for (i, &a) in alpha.data.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for k in 0..c {
            let j = i * c + k;
            out.data[j] = if a == 1.0 { fg.data[j] } else { a * fg.data[j] + (1.0 - a) * bg.data[j] };
        }
    }
    Ok(out)
}
