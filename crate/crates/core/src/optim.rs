//! Adam and the warmup/exponential-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `4 · 0.5^0.1 · 1e-4`
pub fn default_peak_lr() -> f64 {
    4.0 * 0.5f64.powf(0.1) * 1e-4
}

/// `lr(t) = peak · min(t / warmup, 1) · 2^(−max(t − warmup, 0) / half_life)`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub half_life: usize,
}

impl LrSchedule {
    pub fn at(&self, t: usize) -> f64 {
        let ramp = if self.warmup == 0 {
            1.0
        } else {
            (t as f64 / self.warmup as f64).min(1.0)
        };
        let decay_steps = t.saturating_sub(self.warmup) as f64;
        let decay = if self.half_life == 0 {
            if decay_steps > 0.0 {
                0.0
            } else {
                1.0
            }
        } else {
            (-decay_steps / self.half_life as f64).exp2()
        };
        self.peak * ramp * decay
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |t: &Tensor| vec![0.0; t.numel()];
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.iter().map(|(_, t)| zeros(t)).collect(),
            v: store.iter().map(|(_, t)| zeros(t)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update; `grads` is in store order, `None` for
    /// parameters the loss does not depend on (treated as zero gradient).
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::contract(
                "Adam::update",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let value = store.get(id);
            let zero;
            let g = match &grads[i] {
                Some(g) => {
                    if g.shape() != value.shape() {
                        return Err(Error::shape(
                            "Adam::update",
                            format!(
                                "{}: gradient {:?} vs {:?}",
                                store.name(id),
                                g.shape(),
                                value.shape()
                            ),
                        ));
                    }
                    g.data()
                }
                None => {
                    zero = vec![0.0; value.numel()];
                    &zero
                }
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = value.data().to_vec();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
            let shape = value.shape().to_vec();
            store.set(id, Tensor::from_parts(shape, data))?;
        }
        Ok(())
    }
}
