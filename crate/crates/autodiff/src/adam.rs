use crate::error::{Result, TensorError};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are laid out like the store
/// they were created for.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Adam {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Changes the step size; moment estimates are kept.
    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter, then zeroes the gradients.
    /// Fails without touching anything if some parameter has no gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, name, _)) = store.iter().find(|(_, _, t)| t.grad().is_none()) {
            return Err(TensorError::MissingGrad(name.to_string()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (m, v) = (&mut self.first[id.index()], &mut self.second[id.index()]);
            let tensor = store.get_mut(id);
            let (data, grad) = tensor.split_mut();
            let grad = grad.expect("checked above");
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                grad[j] = 0.0;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store_with(&[0.5, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        for _ in 0..5 {
            s.zero_grads();
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.get(s.id("p").unwrap()).data(), &[0.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 after one bias-corrected step.
        let mut s = store_with(&[1.0]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &s);
        let id = s.id("p").unwrap();
        s.get_mut(id).accumulate_grad(&[1.0]);
        adam.step(&mut s).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.get(id).data()[0] - expected).abs() < 1e-12);
        assert_eq!(s.get(id).grad().unwrap(), &[0.0]);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut s = store_with(&[1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let err = adam.step(&mut s).unwrap_err();
        assert!(err.to_string().contains("`p`"));
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut s = ParamStore::new();
        let a = s.insert("a", Tensor::new(vec![2], vec![0.3, 0.7]).unwrap()).unwrap();
        let b = s.insert("b", Tensor::new(vec![2], vec![0.3, 0.7]).unwrap()).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &s);
        for step in 0..20 {
            let g = [(step as f64).sin(), 0.1 * step as f64];
            s.get_mut(a).accumulate_grad(&g);
            s.get_mut(b).accumulate_grad(&g);
            adam.step(&mut s).unwrap();
            assert_eq!(s.get(a).data(), s.get(b).data());
        }
    }
}
