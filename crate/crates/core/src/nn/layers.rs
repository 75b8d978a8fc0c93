use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    /// Uniform `1/sqrt(fan_in)` init.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = store.uniform(format!("{name}.w"), [cout, cin, k, k], bound, rng);
        let b = store.uniform(format!("{name}.b"), [cout, 1, 1, 1], bound, rng);
        Self { w, b, stride, pad: k / 2, cin, cout }
    }

    /// He-uniform weights (`sqrt(6 / fan_in)`) and zero bias, which keeps
    /// the activation scale through a stack of SiLU layers.
    pub fn he<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let w = store.uniform(format!("{name}.w"), [cout, cin, k, k], bound, rng);
        let b = store.zeros(format!("{name}.b"), [cout, 1, 1, 1]);
        Self { w, b, stride, pad: k / 2, cin, cout }
    }

    /// All-zero weights and bias: the layer starts as the zero map.
    pub fn zeroed<F: Scalar>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let w = store.zeros(format!("{name}.w"), [cout, cin, k, k]);
        let b = store.zeros(format!("{name}.b"), [cout, 1, 1, 1]);
        Self { w, b, stride: 1, pad: k / 2, cin, cout }
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<'_, F>, x: Var) -> Var {
        let w = t.param(self.w);
        let b = t.param(self.b);
        t.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fin as f64).sqrt();
        let w = store.uniform(format!("{name}.w"), [fout, fin, 1, 1], bound, rng);
        let b = store.uniform(format!("{name}.b"), [fout, 1, 1, 1], bound, rng);
        Self { w, b }
    }

    pub fn zeroed<F: Scalar>(store: &mut ParamStore<F>, name: &str, fin: usize, fout: usize) -> Self {
        let w = store.zeros(format!("{name}.w"), [fout, fin, 1, 1]);
        let b = store.zeros(format!("{name}.b"), [fout, 1, 1, 1]);
        Self { w, b }
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<'_, F>, x: Var) -> Var {
        let w = t.param(self.w);
        let b = t.param(self.b);
        t.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize, groups: usize) -> Self {
        let groups = largest_divisor_at_most(channels, groups);
        let gamma = store.ones(format!("{name}.gamma"), [channels, 1, 1, 1]);
        let beta = store.zeros(format!("{name}.beta"), [channels, 1, 1, 1]);
        Self { gamma, beta, groups }
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<'_, F>, x: Var) -> Var {
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        t.group_norm(x, g, b, self.groups)
    }
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}

/// Pre-activation residual block, optionally modulated by a per-item
/// embedding vector (the diffusion timestep).
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: Option<usize>,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            emb: emb_dim.map(|d| Linear::new(store, &format!("{name}.emb"), d, cout, rng)),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    /// `emb` must be the already-activated embedding when the block has one.
    pub fn forward<F: Scalar>(&self, t: &mut Tape<'_, F>, x: Var, emb: Option<Var>) -> Var {
        let h = self.norm1.forward(t, x);
        let h = t.silu(h);
        let mut h = self.conv1.forward(t, h);
        if let (Some(proj), Some(e)) = (&self.emb, emb) {
            let e = proj.forward(t, e);
            h = t.add_channel(h, e);
        }
        let h = self.norm2.forward(t, h);
        let h = t.silu(h);
        let h = self.conv2.forward(t, h);
        let s = match &self.skip {
            Some(c) => c.forward(t, x),
            None => x,
        };
        t.add(s, h)
    }
}

/// Sinusoidal embedding of integer timesteps, `[n, dim, 1, 1]`.
pub fn timestep_embedding<F: Scalar>(steps: &[usize], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &s in steps {
        let mut row = vec![F::zero(); dim];
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let a = s as f64 * freq;
            row[i] = F::of(a.sin());
            row[half + i] = F::of(a.cos());
        }
        data.extend(row);
    }
    Tensor::from_vec([steps.len(), dim, 1, 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_embedding_is_bounded_and_distinct() {
        let e = timestep_embedding::<f64>(&[1, 2, 500], 16);
        assert_eq!(e.shape, [3, 16, 1, 1]);
        assert!(e.data.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e.item(0), e.item(1));
    }

    #[test]
    fn group_count_falls_back_to_divisor() {
        assert_eq!(largest_divisor_at_most(12, 8), 6);
        assert_eq!(largest_divisor_at_most(16, 8), 8);
        assert_eq!(largest_divisor_at_most(3, 8), 3);
    }
}
