use std::collections::BTreeMap;

use super::params::{ParamId, ParamStore};
use super::tape::Gradients;
use super::tensor::{Scalar, Tensor};

/// Adaptive moment estimation with the usual default moments.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates by parameter.
    pub fn moments(&self) -> &BTreeMap<ParamId, (Tensor<F>, Tensor<F>)> {
        &self.moments
    }

    /// Rebuilds an optimizer from saved state.
    pub fn restore(lr: f64, step: u64, moments: BTreeMap<ParamId, (Tensor<F>, Tensor<F>)>) -> Self {
        Self { step, moments, ..Self::new(lr) }
    }

    /// Applies one update. Frozen parameters are skipped even when a
    /// gradient is present.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let step_size = F::of(self.lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(self.eps);
        for (&id, g) in &grads.by_param {
            if store.get(id).frozen {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape), Tensor::zeros(g.shape)));
            let p = store.value_mut(id);
            for (((pv, mv), vv), &gv) in p.data.iter_mut().zip(&mut m.data).zip(&mut v.data).zip(&g.data) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }
}
