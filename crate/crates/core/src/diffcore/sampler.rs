use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Ancestral sampling on the respaced chain.
    Ddpm,
    /// Deterministic (eta = 0) implicit sampling.
    Ddim,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            _ => Err(Error::InvalidInput(format!("unknown sampler {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    pub mode: SamplerMode,
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self { mode: SamplerMode::Ddim, steps: 20, seed: 0 }
    }
}

/// Descending timesteps `T = t_0 > ... > t_{k-1} >= 1`, evenly spaced.
pub fn respaced_timesteps(total: usize, steps: usize) -> Vec<usize> {
    if steps == 1 {
        return vec![total];
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| (total as f64 - (total - 1) as f64 * i as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}

pub fn gaussian<F: Scalar>(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<F> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| F::of(StandardNormal.sample(rng))).collect())
}

/// Reverse diffusion from pure noise of `shape`.
///
/// `eps_fn(x_t, ts)` predicts the noise for every batch item at the given
/// timesteps. The result is clamped to `[-1, 1]`.
pub fn sample<F: Scalar>(
    mut eps_fn: impl FnMut(&Tensor<F>, &[usize]) -> Result<Tensor<F>>,
    sched: &NoiseSchedule,
    shape: [usize; 4],
    params: &SamplerParams,
) -> Result<Tensor<F>> {
    if params.steps == 0 || params.steps > sched.steps {
        return Err(Error::InvalidInput(format!("sampler steps {} outside [1, {}]", params.steps, sched.steps)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut x: Tensor<F> = gaussian(shape, &mut rng);
    let ts = respaced_timesteps(sched.steps, params.steps);
    let n = shape[0];
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = eps_fn(&x, &vec![t; n])?;
        if eps.shape != shape {
            return Err(Error::shape(shape, eps.shape));
        }
        if !eps.is_finite() {
            return Err(Error::NonFinite);
        }
        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(prev));
        let (sa, s1a) = (ab.sqrt(), (1.0 - ab).sqrt());
        let noise = match params.mode {
            SamplerMode::Ddpm if prev > 0 => Some(gaussian::<F>(shape, &mut rng)),
            _ => None,
        };
        for j in 0..x.data.len() {
            let xt = x.data[j].as_f64();
            let e = eps.data[j].as_f64();
            let x0 = ((xt - s1a * e) / sa).clamp(-1.0, 1.0);
            let next = match params.mode {
                SamplerMode::Ddim => ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * (xt - sa * x0) / s1a,
                SamplerMode::Ddpm => {
                    let beta = 1.0 - ab / ab_prev;
                    let mean = ab_prev.sqrt() * beta / (1.0 - ab) * x0 + (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab) * xt;
                    let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
                    mean + noise.as_ref().map_or(0.0, |z| var.sqrt() * z.data[j].as_f64())
                }
            };
            x.data[j] = F::of(next);
        }
    }
    Ok(x.map(|v| if v > F::one() { F::one() } else if v < -F::one() { -F::one() } else { v }))
}
