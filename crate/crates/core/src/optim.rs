//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use mubert_tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { config, step: 0, first: zeros(), second: zeros() }
    }

    /// One update. `grads[i]` belongs to parameter `i`; `None` marks a
    /// frozen parameter, which is left untouched.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::usage(format!(
                "optimizer tracks {} parameters, got {} gradients for {}",
                self.first.len(),
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (param, grad)) in store.params_mut().iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            if grad.shape() != param.value.shape() {
                return Err(Error::usage(format!(
                    "gradient for {} has shape {:?}, parameter has {:?}",
                    param.name,
                    grad.shape(),
                    param.value.shape()
                )));
            }
            let decay = if param.decay { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (k, (w, g)) in param.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g.as_f64();
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                let mut x = w.as_f64();
                x -= lr * decay * x;
                x -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                *w = T::lit(x);
            }
        }
        Ok(())
    }
}

/// Cosine annealing to zero after an optional linear warmup. Steps past
/// the end return 0.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup: usize) -> f64 {
    if step >= total_steps {
        if step > total_steps {
            log::warn!("learning-rate step {step} is past the schedule end {total_steps}");
        }
        return 0.0;
    }
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total_steps - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales all gradients so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && total > max_norm {
        let s = T::lit(max_norm / total);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(value: f64, decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![1], vec![value]).unwrap(), decay);
        s
    }

    #[test]
    fn zero_gradients_without_decay_leave_params() {
        let mut s = store(0.7, false);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.step(&mut s, &[Some(Tensor::zeros(vec![1]))], 0.1).unwrap();
        assert_eq!(s.get(s.find("w").unwrap()).data(), &[0.7]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(0.0, false);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.step(&mut s, &[Some(Tensor::full(vec![1], 1.0))], 0.1).unwrap();
        let w = s.params()[0].value.data()[0];
        assert!((w + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn decay_only_shrinks() {
        let mut s = store(2.0, true);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.step(&mut s, &[Some(Tensor::zeros(vec![1]))], 0.1).unwrap();
        let w = s.params()[0].value.data()[0];
        assert!((w - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-12);
    }

    #[test]
    fn frozen_and_mismatched() {
        let mut s = store(1.0, true);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.step(&mut s, &[None], 0.1).unwrap();
        assert_eq!(s.params()[0].value.data(), &[1.0]);
        assert!(opt.step(&mut s, &[], 0.1).is_err());
        assert!(opt.step(&mut s, &[Some(Tensor::zeros(vec![2]))], 0.1).is_err());
    }

    #[test]
    fn schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 0), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4, 0).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4, 0) - 5e-5).abs() < 1e-15);
        assert_eq!(cosine_lr(150, 100, 1e-4, 0), 0.0);
        assert!((cosine_lr(0, 100, 1.0, 10) - 0.1).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 1.0, 0);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn clipping() {
        let mut g: Vec<Option<Tensor<f64>>> = vec![Some(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let n = g[0].as_ref().unwrap().norm();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
