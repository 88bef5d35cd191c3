//! Adam with decoupled weight decay, and global-norm gradient clipping.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{ParamGroup, ParamStore};
use crate::{Error, Result};

/// Learning rate for each [`ParamGroup`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub film: f64,
    pub encoder: f64,
    pub coattention: f64,
}

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            film: lr,
            encoder: lr,
            coattention: lr,
        }
    }

    pub fn rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Film => self.film,
            ParamGroup::Encoder => self.encoder,
            ParamGroup::CoAttention => self.coattention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub rates: GroupRates,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(rates: GroupRates, weight_decay: f64) -> Self {
        Self {
            rates,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter of one store.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let first: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value().numel()]).collect();
        Self {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients currently held by `store`.
    ///
    /// Parameters first shrink by `lr * weight_decay`, then take the
    /// bias-corrected Adam step. Gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::State {
                name: format!("<{} parameters>", store.len()),
                detail: format!("optimizer tracks {} parameters", self.first.len()),
            });
        }
        for ((param, m), v) in store.params_mut().zip(&self.first).zip(&self.second) {
            if param.value().numel() != m.len() || m.len() != v.len() {
                return Err(Error::State {
                    name: param.name().into(),
                    detail: format!("parameter has {} values, moments have {}", param.value().numel(), m.len()),
                });
            }
        }

        self.step += 1;
        let AdamConfig {
            rates,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - libm::pow(beta1, t as f64);
        let correction2 = 1.0 - libm::pow(beta2, t as f64);

        for ((param, m), v) in store.params_mut().zip(&mut self.first).zip(&mut self.second) {
            let lr = rates.rate(param.group());
            let decay = 1.0 - lr * weight_decay;
            let (value, grad) = param.update();
            for (((theta, &g), m), v) in value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *theta *= decay;
                *theta -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so that their joint L2 norm does not exceed
/// `max_norm`, returning the norm measured before rescaling.
pub fn clip_global_norm<'a>(grads: impl IntoIterator<Item = &'a mut [f64]>, max_norm: f64) -> f64 {
    let mut grads: Vec<&mut [f64]> = grads.into_iter().collect();
    let norm = libm::sqrt(grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum::<f64>());
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *g *= scale;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn store_with(values: &[f64], group: ParamGroup) -> (ParamStore, super::super::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(values.to_vec()), group);
        (store, id)
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameters() {
        let (mut store, id) = store_with(&[0.3, -1.2, 4.0], ParamGroup::Film);
        let mut adam = Adam::new(AdamConfig::new(GroupRates::uniform(0.1), 0.0), &store);
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[0.3, -1.2, 4.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = store_with(&[2.0], ParamGroup::Film);
        store.grad_mut(id)[0] = 1.0;
        let mut adam = Adam::new(AdamConfig::new(GroupRates::uniform(0.1), 0.0), &store);
        adam.step(&mut store).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let expected = 2.0 - 0.1 / (1.0 + 1e-8);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-15);
        assert!((store.value(id).data()[0] - 1.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let (mut store, id) = store_with(&[5.0, -2.0], ParamGroup::Film);
        let mut adam = Adam::new(AdamConfig::new(GroupRates::uniform(3e-4), 1e-2), &store);
        adam.step(&mut store).unwrap();
        let factor = 1.0 - 3e-6;
        assert_eq!(store.value(id).data(), &[5.0 * factor, -2.0 * factor]);
    }

    #[test]
    fn group_rates_apply_per_parameter() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(alloc::vec![0.0]), ParamGroup::Film);
        let b = store.add("b", Tensor::vector(alloc::vec![0.0]), ParamGroup::Encoder);
        let c = store.add("c", Tensor::vector(alloc::vec![0.0]), ParamGroup::CoAttention);
        for id in [a, b, c] {
            store.grad_mut(id)[0] = -1.0;
        }
        let rates = GroupRates {
            film: 3e-4,
            encoder: 1e-6,
            coattention: 1e-4,
        };
        let mut adam = Adam::new(AdamConfig::new(rates, 0.0), &store);
        adam.step(&mut store).unwrap();
        for (id, lr) in [(a, 3e-4), (b, 1e-6), (c, 1e-4)] {
            assert!((store.value(id).data()[0] - lr).abs() < lr * 1e-7);
        }
    }

    #[test]
    fn mismatched_store_is_rejected() {
        let (store, _) = store_with(&[1.0], ParamGroup::Film);
        let mut adam = Adam::new(AdamConfig::new(GroupRates::uniform(0.1), 0.0), &store);
        let mut other = ParamStore::new();
        other.add("w", Tensor::vector(alloc::vec![1.0, 2.0]), ParamGroup::Film);
        assert!(matches!(adam.step(&mut other), Err(Error::State { .. })));
    }

    #[test]
    fn clip_three_four_five() {
        let mut g = [3.0, 4.0];
        let norm = clip_global_norm([&mut g[..]], 1.0);
        assert_eq!(norm, 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_below_threshold_is_noop() {
        let mut a = [0.1, -0.2];
        let mut b = [0.3];
        let before = (a, b);
        let norm = clip_global_norm([&mut a[..], &mut b[..]], 1.0);
        assert!((norm - libm::sqrt(0.14)).abs() < 1e-15);
        assert_eq!((a, b), before);
    }
}
