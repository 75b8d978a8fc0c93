//! Pixel-space denoising diffusion: noise schedule, forward noising, the
//! U-shaped noise predictor and the DDPM/DDIM samplers.

mod sampler;
mod schedule;
mod unet;

pub use sampler::{gaussian, respaced_timesteps, sample, SamplerMode, SamplerParams};
pub use schedule::{
    make_schedule, q_sample, q_sample_batch, q_sample_with, NoiseSchedule, ScheduleKind, LINEAR_BETA_END,
    LINEAR_BETA_START,
};
pub use unet::{DenoiserConfig, Encoder, TimeMlp, UNet, INPUT_CHANNELS};

use crate::nn::{Scalar, Tape, Var};

/// Noise-prediction objective `mean ||eps - eps_hat||^2`.
pub fn denoising_loss<F: Scalar>(t: &mut Tape<'_, F>, eps_hat: Var, eps: Var) -> Var {
    t.mse(eps_hat, eps)
}
