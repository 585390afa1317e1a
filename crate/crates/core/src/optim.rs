//! AdamW with decoupled weight decay and a linear warm-up schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::numeric::{GradientMap, ParameterSet};
use crate::tensor::Tensor;

/// `lr·t/warm` for `t < warm`, `lr` afterwards (`t` counts from 0).
pub fn warmup_lr(base: f64, step: usize, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        base * step as f64 / warmup_steps as f64
    } else {
        base
    }
}

/// Number of warm-up steps for a run of `total` steps.
pub fn warmup_steps(total: usize, fraction: f64) -> usize {
    (total as f64 * fraction).ceil() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    t: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. Parameters without a gradient entry
    /// still decay.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &GradientMap, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return arg_err(format!("learning rate must be non-negative, got {lr}"));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let g = grads.get(name);
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let update = (md[i] / bc1) / ((vd[i] / bc2).sqrt() + c.eps);
                pd[i] -= lr * (update + c.weight_decay * pd[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::numeric::{grad, Bindings};

    #[test]
    fn schedule_is_linear_then_flat() {
        assert_eq!(warmup_lr(1e-3, 0, 10), 0.0);
        assert!((warmup_lr(1e-3, 5, 10) - 5e-4).abs() < 1e-18);
        assert_eq!(warmup_lr(1e-3, 10, 10), 1e-3);
        assert_eq!(warmup_lr(1e-3, 3, 0), 1e-3);
        assert_eq!(warmup_steps(100, 0.1), 10);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let mut p = ParameterSet::new().with("x", Tensor::vector(vec![1.0, -2.0]));
        let before = p.clone();
        let obj = |g: &mut Graph, b: &Bindings| {
            let s = g.square(b.var("x"));
            Ok(g.sum(s))
        };
        let gr = grad(&obj, &p).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut p, &gr, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_the_rate() {
        // bias-corrected first step is sign(g)·lr, plus the decay term
        let mut p = ParameterSet::new().with("x", Tensor::vector(vec![2.0]));
        let obj = |g: &mut Graph, b: &Bindings| {
            let s = g.square(b.var("x"));
            Ok(g.sum(s))
        };
        let gr = grad(&obj, &p).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut p, &gr, 0.1).unwrap();
        let expected = 2.0 - 0.1 * (4.0 / (4.0 + 1e-8) + 0.01 * 2.0);
        assert!((p.get("x").unwrap().data()[0] - expected).abs() < 1e-12);
    }
}
