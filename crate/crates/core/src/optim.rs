//! Adam over named parameter tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// DCGAN settings.
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    steps: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Advance the shared step counter; call once per optimizer step before
    /// the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) {
        debug_assert_eq!(param.shape(), grad.shape(), "{name}");
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let t = self.steps.max(1) as i32;
        let bc1 = T::one() - T::lit(c.beta1.powi(t));
        let bc2 = T::one() - T::lit(c.beta2.powi(t));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape().to_vec()), Tensor::zeros(param.shape().to_vec())));
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            md[i] = b1 * md[i] + (T::one() - b1) * g;
            vd[i] = b2 * vd[i] + (T::one() - b2) * g * g;
            let mh = md[i] / bc1;
            let vh = vd[i] / bc2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }

    /// Moment tensors keyed `"<name>.m"` / `"<name>.v"`, plus the step count.
    pub fn state(&self) -> (u64, Vec<(String, &Tensor<T>)>) {
        let mut out = Vec::with_capacity(self.moments.len() * 2);
        for (name, (m, v)) in &self.moments {
            out.push((format!("{name}.m"), m));
            out.push((format!("{name}.v"), v));
        }
        (self.steps, out)
    }

    pub fn restore(&mut self, steps: u64, mut tensors: BTreeMap<String, Tensor<T>>) {
        self.steps = steps;
        self.moments.clear();
        let names: Vec<String> = tensors
            .keys()
            .filter_map(|k| k.strip_suffix(".m").map(str::to_string))
            .collect();
        for name in names {
            if let (Some(m), Some(v)) = (tensors.remove(&format!("{name}.m")), tensors.remove(&format!("{name}.v"))) {
                self.moments.insert(name, (m, v));
            }
        }
    }
}
