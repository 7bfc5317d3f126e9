//! Adam with global-norm clipping, and a minibatch training step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Linear warmup steps; `0` disables warmup.
    pub warmup: usize,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 1.0,
            warmup: 0,
            batch_size: 16,
            epochs: 12,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config("lr must be positive and batch_size at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(cfg: OptimConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn learning_rate(&self) -> f64 {
        if self.cfg.warmup == 0 {
            self.cfg.lr
        } else {
            self.cfg.lr * (self.steps as f64 / self.cfg.warmup as f64).min(1.0)
        }
    }

    /// Applies one update. Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<f64> {
        if grads.len() != self.m.len() {
            return Err(Error::dim("adam", &[grads.len()], &[self.m.len()]));
        }
        let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient" });
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.steps += 1;
        let lr = self.learning_rate();
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads[k].data();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((p, &g), m), v) in store.get_mut(id).data_mut().iter_mut().zip(g).zip(m).zip(v) {
                let g = g * clip;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.cfg.eps);
            }
        }
        Ok(norm)
    }
}

impl Model {
    /// Mean loss and mean parameter gradients over a minibatch of
    /// `(frames, targets)` pairs.
    pub fn batch_gradients<R: Rng>(&self, batch: &[(&Tensor, &[usize])], rng: &mut R) -> Result<(f64, Vec<Tensor>)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("empty minibatch"));
        }
        let mut total = 0.0;
        let mut acc: Vec<Tensor> = self.store().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        for (frames, targets) in batch {
            let mut tape = Tape::new();
            let bound = self.store().bind(&mut tape, true)?;
            let loss = self.loss(&mut tape, &bound, frames, targets, Some(&mut *rng))?;
            total += tape.value(loss).data()[0];
            let mut grads = tape.backward(loss)?;
            for (a, g) in acc.iter_mut().zip(self.store().collect_grads(&bound, &mut grads)) {
                a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g);
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for a in &mut acc {
            a.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        Ok((total * scale, acc))
    }

    /// One optimiser step on a minibatch; returns its mean loss.
    pub fn train_batch<R: Rng>(&mut self, adam: &mut Adam, batch: &[(&Tensor, &[usize])], rng: &mut R) -> Result<f64> {
        let (loss, grads) = self.batch_gradients(batch, rng)?;
        adam.step(self.store_mut(), &grads)?;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::row(vec![1.0, -1.0]));
        let mut adam = Adam::new(OptimConfig { lr: 0.1, clip_norm: 0.0, ..Default::default() }, &store);
        let norm = adam.step(&mut store, &[Tensor::row(vec![2.0, -3.0])]).unwrap();
        assert!((norm - 13f64.sqrt()).abs() < 1e-12);
        // First Adam step moves each coordinate by lr against sign(g).
        let x = store.iter().next().unwrap().1.data().to_vec();
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(0.0));
        let mut adam = Adam::new(OptimConfig::default(), &store);
        assert!(adam.step(&mut store, &[Tensor::scalar(f64::NAN)]).is_err());
    }
}
