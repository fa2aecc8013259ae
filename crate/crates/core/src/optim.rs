//! Bias-corrected Adam and the per-epoch learning-rate schedule.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for each trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<E: Element = f32> {
    pub ids: Vec<ParamId>,
    pub m: Vec<Vec<E>>,
    pub v: Vec<Vec<E>>,
    pub step: u64,
}

impl<E: Element> AdamState<E> {
    pub fn new(store: &ParamStore<E>) -> Self {
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        let zeros = |id: &ParamId| vec![E::zero(); store.tensor(*id).numel()];
        Self {
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
            step: 0,
        }
    }
}

/// `learning_rate * decay^epoch` (epoch counted from 0).
pub fn epoch_learning_rate(learning_rate: f64, decay: f64, epoch: usize) -> f64 {
    learning_rate * decay.powi(epoch as i32)
}

#[derive(Debug, Clone)]
pub struct Adam<E: Element = f32> {
    pub config: AdamConfig,
    pub state: AdamState<E>,
}

impl<E: Element> Adam<E> {
    pub fn new(store: &ParamStore<E>, config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::new(store),
        }
    }

    /// Applies one update from the gradients held in `store`. Gradients are
    /// left in place.
    pub fn step(&mut self, store: &mut ParamStore<E>, lr: f64) -> Result<()> {
        for &id in &self.state.ids {
            let g = store.tensor(id).grad().ok_or_else(|| Error::Autograd(format!("{} has no gradient buffer", store.name(id))))?;
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} at flat index {i}", store.name(id))));
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let (b1, b2) = (E::from_f64_lossy(beta1), E::from_f64_lossy(beta2));
        let (c1, c2) = (E::one() - b1, E::one() - b2);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (slot, &id) in self.state.ids.iter().enumerate() {
            let name = store.name(id).to_string();
            let tensor = store.tensor_mut(id);
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.state.m[slot], &mut self.state.v[slot]);
            for (((p, &g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                let m_hat = m.to_f64_lossy() / bc1;
                let v_hat = v.to_f64_lossy() / bc2;
                let update = lr * m_hat / (v_hat.sqrt() + eps);
                *p = E::from_f64_lossy(p.to_f64_lossy() - update);
            }
            tensor.check_finite(&format!("parameter {name} after Adam step"))?;
        }
        Ok(())
    }
}
