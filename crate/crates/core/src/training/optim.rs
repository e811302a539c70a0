use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ParamStore;

/// Linear warmup to `peak`, then linear decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub peak: f64,
}

impl Schedule {
    pub fn new(total_steps: usize, warmup_fraction: f64, peak: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction {warmup_fraction} outside [0, 1)")));
        }
        if !(peak >= 0.0 && peak.is_finite()) {
            return Err(Error::Config(format!("learning rate {peak} must be non-negative")));
        }
        Ok(Self {
            total_steps,
            warmup_fraction,
            peak,
        })
    }

    pub fn warmup_end(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }

    /// Learning rate at (possibly fractional) step `t`, clamped to `[0, T]`.
    pub fn lr_at(&self, t: f64) -> f64 {
        let total = self.total_steps as f64;
        let t = t.clamp(0.0, total);
        let w = self.warmup_end();
        if t < w {
            self.peak * t / w
        } else {
            self.peak * (total - t) / (total - w)
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        self.lr_at(step as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 1e-5,
        }
    }
}

/// Adam with decoupled weight decay. Moments mirror the parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || params.iter().map(|(_, a)| vec![0.0; a.len()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moment_shapes(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }

    /// One update from the gradients held in `params`; a parameter without a
    /// gradient slot is treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::dim("optimizer state does not match the parameter store"));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let arr = params.get_mut(id);
            let grad = arr.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let w = arr.values_mut();
            for i in 0..w.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::DiffArray;

    #[test]
    fn schedule_shape() {
        let s = Schedule::new(1000, 0.06, 5e-4).unwrap();
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr_at(60.0) - 5e-4).abs() < 1e-18);
        assert_eq!(s.lr(1000), 0.0);
        assert!((s.lr(30) - 2.5e-4).abs() < 1e-18);
        assert!((s.lr(530) - 2.5e-4).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=1000).map(|t| s.lr(t)).collect();
        assert!(lrs[..=60].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[60..].windows(2).all(|w| w[1] <= w[0]));
        assert!(Schedule::new(0, 0.06, 1e-3).is_err());
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut store = ParamStore::new();
        let id = store.insert("w", DiffArray::vector(vec![1.0, -2.0, 0.5]));
        store.get_mut(id).accumulate_grad(&[0.0; 3]).unwrap();
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        opt.step(&mut store, 0.1).unwrap();
        let factor = 1.0 - 0.1 * 1e-5;
        for (a, b) in store.get(id).values().iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b * factor).abs() < 1e-15);
        }
        assert_eq!(opt.moment_shapes(), vec![3]);
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut store = ParamStore::new();
        let id = store.insert("w", DiffArray::vector(vec![0.0, 0.0]));
        store.get_mut(id).accumulate_grad(&[3.0, -0.2]).unwrap();
        let mut opt = AdamW::new(
            &store,
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        opt.step(&mut store, 0.01).unwrap();
        let w = store.get(id).values();
        assert!((w[0] + 0.01).abs() < 1e-8 && (w[1] - 0.01).abs() < 1e-7);
    }
}
