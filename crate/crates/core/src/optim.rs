//! Adam with coupled L2 weight decay (the penalty is added to the gradient
//! before the moment updates).

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    /// Parameters this optimizer updates, by name.
    params: Vec<(String, Var)>,
    pub(crate) state: BTreeMap<String, Moments>,
    pub(crate) step: u64,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = (&'a String, &'a Var)>) -> Self {
        Self {
            config,
            params: params.into_iter().map(|(n, v)| (n.clone(), v.clone())).collect(),
            state: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.iter().map(|(n, _)| n)
    }

    /// Apply one update from `grads`. Parameters absent from `grads` are
    /// left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let theta = var.as_tensor().detach();
            // Stored gradients can still carry their backward graph; keeping
            // that alive through the moments would grow memory every step.
            let g = g.detach();
            let g = if weight_decay != 0.0 {
                (g + (&theta * weight_decay)?)?
            } else {
                g.clone()
            };
            let (m, v) = match self.state.get(name) {
                Some(s) => (
                    ((&s.m * beta1)? + (&g * (1.0 - beta1))?)?,
                    ((&s.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                ),
                None => ((&g * (1.0 - beta1))?, (g.sqr()? * (1.0 - beta2))?),
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(theta - (update * lr)?)?)?;
            self.state.insert(name.clone(), Moments { m: m.detach(), v: v.detach() });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    /// Scalar reference implementation.
    fn adam_scalar(theta0: f64, grads: &[f64], cfg: AdamConfig) -> f64 {
        let (mut m, mut v, mut th) = (0.0, 0.0, theta0);
        for (i, g) in grads.iter().enumerate() {
            let g = g + cfg.weight_decay * th;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let t = (i + 1) as i32;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            th -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        th
    }

    #[test]
    fn matches_scalar_reference_on_quadratic() {
        let cfg = AdamConfig {
            lr: 0.05,
            weight_decay: 1e-2,
            ..Default::default()
        };
        let var = Var::from_tensor(&Tensor::new(&[1.5f64], &Device::Cpu).unwrap()).unwrap();
        let name = "x".to_string();
        let mut opt = Adam::new(cfg, [(&name, &var)]);
        let mut seen = Vec::new();
        for _ in 0..20 {
            let x = var.as_tensor();
            let loss = (x.sqr().unwrap() * 3.0).unwrap().sum_all().unwrap();
            let th: f64 = x.to_vec1::<f64>().unwrap()[0];
            seen.push(6.0 * th);
            let grads = loss.backward().unwrap();
            opt.step(&grads).unwrap();
        }
        let got = var.as_tensor().to_vec1::<f64>().unwrap()[0];
        let want = adam_scalar(1.5, &seen, cfg);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(got.abs() < 1.5);
    }
}
