use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::stagesim::{Dataset, TrainingTuple};

/// A dataset converted once to network tensors (`[-1, 1]`, NCHW).
#[derive(Clone, Debug)]
pub struct TupleTensors {
    pub x_a: Tensor<f32>,
    pub m: Tensor<f32>,
    pub y_b: Tensor<f32>,
    pub z_thumb: Tensor<f32>,
    pub x_b: Tensor<f32>,
}

/// One training batch gathered from [`TupleTensors`].
pub type Batch = TupleTensors;

impl TupleTensors {
    pub fn from_tuples(tuples: &[TrainingTuple], size: usize) -> Result<Self> {
        if tuples.is_empty() {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        for t in tuples {
            if t.size() != size || t.z_b_thumb.width != size {
                return Err(Error::shape(size, t.size()));
            }
        }
        let stack = |f: &dyn Fn(&TrainingTuple) -> Tensor<f32>| Tensor::stack(&tuples.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            x_a: stack(&|t| t.x_a.to_tensor()),
            m: stack(&|t| t.m.to_tensor()),
            y_b: stack(&|t| t.y_b.to_tensor()),
            z_thumb: stack(&|t| t.z_b_thumb.to_tensor()),
            x_b: stack(&|t| t.x_b.to_tensor()),
        })
    }

    pub fn from_dataset(ds: &Dataset, size: usize) -> Result<Self> {
        Self::from_tuples(&ds.tuples, size)
    }

    pub fn len(&self) -> usize {
        self.x_b.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let pick = |t: &Tensor<f32>| Tensor::stack(&idx.iter().map(|&i| t.select(i)).collect::<Vec<_>>());
        Batch { x_a: pick(&self.x_a), m: pick(&self.m), y_b: pick(&self.y_b), z_thumb: pick(&self.z_thumb), x_b: pick(&self.x_b) }
    }

    /// Concatenates several batches along the batch axis.
    pub fn concat(parts: &[Batch]) -> Batch {
        let cat = |f: &dyn Fn(&Batch) -> &Tensor<f32>| {
            let items: Vec<Tensor<f32>> = parts.iter().flat_map(|b| (0..b.len()).map(|i| f(b).select(i))).collect();
            Tensor::stack(&items)
        };
        Batch {
            x_a: cat(&|b| &b.x_a),
            m: cat(&|b| &b.m),
            y_b: cat(&|b| &b.y_b),
            z_thumb: cat(&|b| &b.z_thumb),
            x_b: cat(&|b| &b.x_b),
        }
    }
}

/// Several datasets sampled with fixed mixing weights.
#[derive(Clone, Debug)]
pub struct MixedData {
    pub sources: Vec<(f64, TupleTensors)>,
}

impl MixedData {
    pub fn single(data: TupleTensors) -> Self {
        Self { sources: vec![(1.0, data)] }
    }

    pub fn new(sources: Vec<(f64, TupleTensors)>) -> Result<Self> {
        if sources.is_empty() || sources.iter().any(|(w, d)| !(*w > 0.0) || d.is_empty()) {
            return Err(Error::Config("mixed data needs non-empty sources with positive weights".into()));
        }
        Ok(Self { sources })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.sources.iter().map(|s| s.0).collect()
    }

    /// Draws `batch` `(source, index)` pairs; each item picks its source
    /// with probability proportional to the source weight.
    pub fn sample_indices(&self, rng: &mut ChaCha8Rng, batch: usize) -> Vec<(usize, usize)> {
        let weights = self.weights();
        (0..batch)
            .map(|_| {
                let s = pick_weighted(rng, &weights);
                (s, rng.random_range(0..self.sources[s].1.len()))
            })
            .collect()
    }

    pub fn batch(&self, picks: &[(usize, usize)]) -> Batch {
        let parts: Vec<Batch> = picks.iter().map(|&(s, i)| self.sources[s].1.gather(&[i])).collect();
        TupleTensors::concat(&parts)
    }
}

pub fn pick_weighted(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn toy(n: usize, v: f32) -> TupleTensors {
        let t = |c| Tensor::full([n, c, 2, 2], v);
        TupleTensors { x_a: t(3), m: t(1), y_b: t(3), z_thumb: t(3), x_b: t(3) }
    }

    #[test]
    fn mixing_ratio_is_honoured() {
        let data = MixedData::new(vec![(2.0, toy(5, 0.0)), (1.0, toy(7, 1.0))]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 2];
        for _ in 0..1000 {
            for (s, i) in data.sample_indices(&mut rng, 8) {
                counts[s] += 1;
                assert!(i < data.sources[s].1.len());
            }
        }
        let frac = counts[0] as f64 / (counts[0] + counts[1]) as f64;
        assert!((frac - 2.0 / 3.0).abs() < 0.05 * 2.0 / 3.0, "{frac}");
    }

    #[test]
    fn batches_follow_their_picks() {
        let data = MixedData::new(vec![(1.0, toy(2, 0.0)), (1.0, toy(2, 1.0))]).unwrap();
        let b = data.batch(&[(1, 0), (0, 1), (1, 1)]);
        assert_eq!(b.x_b.shape, [3, 3, 2, 2]);
        assert_eq!(b.x_b.item(0)[0], 1.0);
        assert_eq!(b.x_b.item(1)[0], 0.0);
        assert!(MixedData::new(vec![(0.0, toy(1, 0.0))]).is_err());
    }
}
