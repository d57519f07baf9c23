use alloc::vec::Vec;

use super::{ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl OptimizerSettings {
    pub const fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
        }
    }

    pub const fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::adam(),
            learning_rate,
        }
    }
}

/// Update rule plus its per-parameter state (moments for Adam).
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    settings: OptimizerSettings,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(settings: OptimizerSettings) -> Self {
        Self {
            settings,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn settings(&self) -> OptimizerSettings {
        self.settings
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.settings.learning_rate = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from the store's gradient slots, then zero them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !store.grads_populated() {
            return Err(Error::GradsAbsent);
        }
        let lr = self.settings.learning_rate;
        self.step += 1;
        match self.settings.kind {
            OptimizerKind::Sgd => {
                for (value, grad) in store.entries_mut() {
                    for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
                        *v -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.is_empty() {
                    for id in store.ids() {
                        self.m.push(Tensor::zeros(store.value(id).shape()));
                        self.v.push(Tensor::zeros(store.value(id).shape()));
                    }
                }
                let t = self.step as i32;
                let c1 = 1.0 - libm::pow(beta1, t as f64);
                let c2 = 1.0 - libm::pow(beta2, t as f64);
                for (i, (value, grad)) in store.entries_mut().enumerate() {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for (j, (p, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        *p -= lr * mh / (libm::sqrt(vh) + eps);
                    }
                }
            }
        }
        store.zero_grads();
        for id in store.ids() {
            super::ensure_finite("optimizer_step", store.value(id).data())?;
        }
        Ok(())
    }

    /// Moment tensors and step count, for checkpointing.
    pub fn state(&self) -> (u64, &[Tensor], &[Tensor]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != v.len() {
            return Err(Error::invalid("moment lists differ in length"));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Clamp every value of `store` into `[-epsilon, epsilon]`.
pub fn clip_to_box(store: &mut ParamStore, epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("clip bound must be positive"));
    }
    for (value, _) in store.entries_mut() {
        for v in value.data_mut() {
            *v = v.clamp(-epsilon, epsilon);
        }
    }
    Ok(())
}
