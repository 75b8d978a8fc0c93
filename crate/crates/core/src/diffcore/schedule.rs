use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Betas linear from `1e-4` to `2e-2`.
    Linear,
    /// Squared-cosine alpha-bar with offset 0.008, betas capped at 0.999.
    Cosine,
}

/// Diffusion noise levels indexed by `t in 0..=T`; index 0 is the clean
/// image (`alpha_bar = 1`, `beta = 0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub steps: usize,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps < 10 {
        return Err(Error::InvalidInput(format!("schedule needs T >= 10, got {steps}")));
    }
    let mut betas = vec![0.0; steps + 1];
    match kind {
        ScheduleKind::Linear => {
            for (t, b) in betas.iter_mut().enumerate().skip(1) {
                *b = LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * (t - 1) as f64 / (steps - 1) as f64;
            }
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| ((t / steps as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
            for (t, b) in betas.iter_mut().enumerate().skip(1) {
                *b = (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, 0.999);
            }
        }
    }
    let mut alpha_bar = vec![1.0; steps + 1];
    for t in 1..=steps {
        alpha_bar[t] = alpha_bar[t - 1] * (1.0 - betas[t]);
    }
    Ok(NoiseSchedule { kind, steps, betas, alpha_bar })
}

impl NoiseSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::InvalidInput(format!("timestep {t} outside [1, {}]", self.steps)));
        }
        Ok(())
    }
}

/// `x_t = sqrt(ab) * x0 + sqrt(1 - ab) * eps` for an explicit `alpha_bar`.
pub fn q_sample_with<F: Scalar>(x0: &Tensor<F>, alpha_bar: f64, eps: &Tensor<F>) -> Result<Tensor<F>> {
    if x0.shape != eps.shape {
        return Err(Error::shape(x0.shape, eps.shape));
    }
    let (a, s) = (F::of(alpha_bar.sqrt()), F::of((1.0 - alpha_bar).sqrt()));
    let data = x0.data.iter().zip(&eps.data).map(|(&x, &e)| a * x + s * e).collect();
    Ok(Tensor::from_vec(x0.shape, data))
}

/// Forward noising of `x0` to timestep `t in [1, T]`.
pub fn q_sample<F: Scalar>(x0: &Tensor<F>, t: usize, eps: &Tensor<F>, sched: &NoiseSchedule) -> Result<Tensor<F>> {
    sched.check_t(t)?;
    q_sample_with(x0, sched.alpha_bar(t), eps)
}

/// Per-item forward noising: item `i` of the batch goes to `ts[i]`.
pub fn q_sample_batch<F: Scalar>(x0: &Tensor<F>, ts: &[usize], eps: &Tensor<F>, sched: &NoiseSchedule) -> Result<Tensor<F>> {
    if x0.shape != eps.shape {
        return Err(Error::shape(x0.shape, eps.shape));
    }
    if ts.len() != x0.n() {
        return Err(Error::shape(x0.n(), ts.len()));
    }
    let len = x0.item_len();
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let ab = sched.alpha_bar(t);
        let (a, s) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
        out.extend(x0.data[i * len..(i + 1) * len].iter().zip(&eps.data[i * len..(i + 1) * len]).map(|(&x, &e)| a * x + s * e));
    }
    Ok(Tensor::from_vec(x0.shape, out))
}
