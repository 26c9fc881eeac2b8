//! AdamW, the warm-up cosine schedule, and global-norm clipping over one or
//! more parameter registries.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParameterRegistry;

#[derive(Clone, Copy, Debug, PartialEq)]
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
            weight_decay: 0.005,
        }
    }
}

/// Moment state keyed by `(group, path)`.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    steps: u64,
    moments: HashMap<(String, String), (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every trainable entry in `groups` at learning rate
    /// `lr`. All gradients are checked before anything is modified.
    pub fn step(&mut self, groups: &mut [(&str, &mut ParameterRegistry)], lr: f64) -> Result<()> {
        for (name, reg) in groups.iter() {
            for (path, p) in reg.iter().filter(|(_, p)| p.trainable) {
                let g = p
                    .tensor
                    .grad()
                    .ok_or_else(|| Error::contract(format!("no gradient for {name}/{path}")))?;
                if !g.is_finite() {
                    return Err(Error::Diverged(format!("non-finite gradient in {name}/{path}")));
                }
            }
        }
        self.steps += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (name, reg) in groups.iter_mut() {
            for (path, p) in reg.iter_mut().filter(|(_, p)| p.trainable) {
                let g = p.tensor.take_grad().expect("checked above");
                let (m, v) = self
                    .moments
                    .entry((name.to_string(), path.to_string()))
                    .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
                for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                    *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                    let mh = *mi / bc1;
                    let vh = *vi / bc2;
                    *w -= lr * (c.weight_decay * *w + mh / (vh.sqrt() + c.eps));
                }
            }
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `lr_max` over `warmup` steps, then half-cosine
/// decay reaching 0 at `horizon`.
pub fn lr_schedule(step: usize, warmup: usize, horizon: usize, lr_max: f64) -> f64 {
    if step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    if horizon <= warmup {
        return lr_max;
    }
    let progress = ((step - warmup) as f64 / (horizon - warmup) as f64).min(1.0);
    lr_max * (1.0 + (PI * progress).cos()) / 2.0
}

/// Scales every stored gradient so the global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(groups: &mut [&mut ParameterRegistry], max_norm: f64) -> f64 {
    let sq: f64 = groups
        .iter()
        .flat_map(|r| r.iter())
        .filter_map(|(_, p)| p.tensor.grad())
        .map(|g| g.sum_of_squares())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for r in groups.iter_mut() {
            for (_, p) in r.iter_mut() {
                if let Some(g) = p.tensor.grad_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn reg(w: &[f64]) -> ParameterRegistry {
        let mut r = ParameterRegistry::new();
        r.insert("w", Tensor::new([w.len()], w.to_vec()).unwrap(), true).unwrap();
        r
    }

    fn set_grad(r: &mut ParameterRegistry, g: &[f64]) {
        r.get_mut("w").unwrap().set_grad(Tensor::new([g.len()], g.to_vec()).unwrap()).unwrap();
    }

    #[test]
    fn zero_grad_no_decay_is_a_no_op() {
        let mut r = reg(&[1.5, -2.0]);
        set_grad(&mut r, &[0.0, 0.0]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        opt.step(&mut [("g", &mut r)], 0.1).unwrap();
        assert_eq!(r.get("w").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn step_descends() {
        let mut r = reg(&[1.0]);
        set_grad(&mut r, &[1.0]); // d/dw w^2/2 at w = 1
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut [("g", &mut r)], 0.1).unwrap();
        assert!(r.get("w").unwrap().data()[0] < 1.0);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = sum (w - t)^2 / 2 with t = [3, -1]
        let target = [3.0, -1.0];
        let mut r = reg(&[0.0, 0.0]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        for step in 0..200 {
            let w = r.get("w").unwrap().data().to_vec();
            set_grad(&mut r, &[w[0] - target[0], w[1] - target[1]]);
            opt.step(&mut [("g", &mut r)], lr_schedule(step + 1, 10, 200, 0.5)).unwrap();
        }
        let w = r.get("w").unwrap().data();
        assert!((w[0] - 3.0).abs() < 1e-3 && (w[1] + 1.0).abs() < 1e-3, "{w:?}");
    }

    #[test]
    fn nan_gradient_names_the_path() {
        let mut r = reg(&[1.0]);
        r.get_mut("w").unwrap().set_grad(Tensor::zeros([1])).unwrap();
        r.get_mut("w").unwrap().grad_mut().unwrap().data_mut()[0] = f64::NAN;
        let err = AdamW::new(AdamWConfig::default())
            .step(&mut [("student", &mut r)], 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("student/w"), "{err}");
        assert_eq!(r.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut r = reg(&[1.0]);
        assert!(AdamW::new(AdamWConfig::default()).step(&mut [("g", &mut r)], 0.1).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 10, 100, 0.3), 0.0);
        assert_eq!(lr_schedule(10, 10, 100, 0.3), 0.3);
        assert!(lr_schedule(100, 10, 100, 0.3).abs() < 1e-15);
        assert!((lr_schedule(55, 10, 100, 0.3) - 0.15).abs() < 1e-12);
        assert_eq!(lr_schedule(0, 0, 100, 0.3), 0.3);
    }

    #[test]
    fn clipping() {
        let mut r = reg(&[0.0, 0.0]);
        set_grad(&mut r, &[3.0, 0.0]);
        assert_eq!(clip_global_norm(&mut [&mut r], 5.0), 3.0);
        assert_eq!(r.get("w").unwrap().grad().unwrap().data(), &[3.0, 0.0]);

        set_grad(&mut r, &[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut [&mut r], 5.0), 5.0);
        assert_eq!(r.get("w").unwrap().grad().unwrap().data(), &[3.0, 4.0]);

        let mut other = reg(&[0.0]);
        set_grad(&mut r, &[6.0, 0.0]);
        set_grad(&mut other, &[8.0]);
        assert_eq!(clip_global_norm(&mut [&mut r, &mut other], 5.0), 10.0);
        let post = (r.get("w").unwrap().grad().unwrap().sum_of_squares()
            + other.get("w").unwrap().grad().unwrap().sum_of_squares())
        .sqrt();
        assert!((post - 5.0).abs() < 1e-12);
    }
}
