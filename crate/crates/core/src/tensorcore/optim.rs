//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{ParamStore, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Optimizer state: first/second moments per parameter plus the step count.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0f32; p.value.len()]).collect::<Vec<_>>();
        Self { config, step: 0, first: zeros(), second: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update to every trainable parameter and clears all
    /// gradients. Frozen parameters are never modified.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), TensorError> {
        if let Some(p) = params.iter().find(|p| !p.frozen && p.grad.is_none()) {
            return Err(TensorError::Usage(format!("no gradient for trainable parameter {}", p.name)));
        }
        if self.first.len() != params.len() {
            return Err(TensorError::Usage("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = (1.0 - c.beta1.powi(t)) as f32;
        let bias2 = (1.0 - c.beta2.powi(t)) as f32;
        let (lr, b1, b2, eps) = (c.lr as f32, c.beta1 as f32, c.beta2 as f32, c.eps as f32);
        let decay = 1.0 - (c.lr * c.weight_decay) as f32;

        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad.take();
            if p.frozen {
                continue;
            }
            let grad = grad.expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::{Graph, Tensor};

    fn store(w: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(&[w]));
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store(0.7);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &s);
        let id = s.find("w").unwrap();
        s.get_mut(id).grad = Some(Tensor::vector(&[0.0]));
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(id).value.data(), &[0.7]);
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn frozen_parameter_ignores_gradient() {
        let mut s = store(0.7);
        let id = s.find("w").unwrap();
        s.get_mut(id).frozen = true;
        s.get_mut(id).grad = Some(Tensor::vector(&[5.0]));
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(id).value.data(), &[0.7]);
    }

    #[test]
    fn missing_gradient_is_a_usage_error() {
        let mut s = store(0.7);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        assert!(matches!(opt.step(&mut s), Err(TensorError::Usage(_))));
    }

    #[test]
    fn descends_on_a_parabola() {
        let mut s = store(1.0);
        let id = s.find("w").unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, ..Default::default() }, &s);
        let mut g = Graph::<f32>::new();
        let b = s.bind(&mut g);
        let sq = g.mul(b[id], b[id]).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        s.accumulate(&b, &grads, 1.0);
        assert_eq!(s.get(id).grad.as_ref().unwrap().data(), &[2.0]);
        opt.step(&mut s).unwrap();
        let w = s.get(id).value.data()[0];
        assert!(w < 1.0, "w = {w}");
        // First bias-corrected step moves by lr plus decay lr·wd·w.
        assert!((w - (1.0 * (1.0 - 0.1 * 0.01) - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut s = store(0.3);
            let id = s.find("w").unwrap();
            let mut opt = AdamW::new(AdamWConfig { lr: 0.05, ..Default::default() }, &s);
            for k in 0..10 {
                s.get_mut(id).grad = Some(Tensor::vector(&[(k as f32).sin()]));
                opt.step(&mut s).unwrap();
            }
            s.get(id).value.data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
