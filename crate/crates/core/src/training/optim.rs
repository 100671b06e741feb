//! Adam, global-norm gradient clipping and the step-decay schedule.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::tasnet::SeparatorModel;

/// Anything exposing its parameter tensors in a fixed order.
pub trait Parameters<F> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Tensor<F>));
}

impl<F: Real> Parameters<F> for SeparatorModel<F> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Tensor<F>)) {
        self.visit_mut(f);
    }
}

impl<F: Real> Parameters<F> for Vec<Tensor<F>> {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Tensor<F>)) {
        self.iter_mut().for_each(f);
    }
}

/// Joint L2 norm of several tensors.
pub fn global_norm<F: Real>(grads: &[Tensor<F>]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
/// Returns the applied scale (1 when nothing was clipped).
pub fn clip_grad_norm<F: Real>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(F::of(scale)));
        scale
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<F: Real, P: Parameters<F> + ?Sized>(&mut self, params: &mut P, grads: &[Tensor<F>], lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        if grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let mut i = 0;
        let mut mismatch = None;
        params.for_each_param(&mut |p| {
            let Some(g) = grads.get(i) else {
                mismatch.get_or_insert(i);
                return;
            };
            if g.shape() != p.shape() {
                mismatch.get_or_insert(i);
                i += 1;
                return;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k].f64();
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let update = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                *w = F::of(w.f64() - update);
            }
            i += 1;
        });
        if let Some(idx) = mismatch.or((i != grads.len()).then_some(i)) {
            return Err(Error::InvalidArgument(format!(
                "gradient {idx} does not match its parameter"
            )));
        }
        Ok(())
    }
}

/// `lr_init · decay^⌊epoch / every⌋`, epochs counted from 0.
pub fn lr_at(lr_init: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    lr_init * decay.powi((epoch / every.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_rescales_to_the_bound() {
        let mut g = vec![Tensor::<f64>::from_vec(vec![30.0, 40.0])];
        assert_eq!(clip_grad_norm(&mut g, 5.0), 0.1);
        assert!((global_norm(&g) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_gradients() {
        let mut g = vec![Tensor::<f64>::from_vec(vec![0.3, 0.4])];
        assert_eq!(clip_grad_norm(&mut g, 5.0), 1.0);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::from_vec(vec![1.0, -2.0])];
        let g = vec![Tensor::from_vec(vec![0.5, -3.0])];
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &g, 0.01).unwrap();
        // m̂ = g and v̂ = g², so each weight moves by lr·sign(g).
        assert!((p[0].data()[0] - 0.99).abs() < 1e-9);
        assert!((p[0].data()[1] + 1.99).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![Tensor::<f64>::from_vec(vec![3.0])];
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let g = vec![p[0].map(|x| 2.0 * x)];
            adam.step(&mut p, &g, 0.05).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-2);
    }

    #[test]
    fn schedule_halves_every_other_epoch() {
        assert_eq!(lr_at(1e-3, 0.98, 2, 0), 1e-3);
        assert_eq!(lr_at(1e-3, 0.98, 2, 1), 1e-3);
        assert!((lr_at(1e-3, 0.98, 2, 2) - 0.98e-3).abs() < 1e-15);
        assert!((lr_at(1e-3, 0.98, 2, 5) - 1e-3 * 0.98f64.powi(2)).abs() < 1e-15);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = vec![Tensor::<f64>::from_vec(vec![1.0])];
        let g = vec![Tensor::from_vec(vec![1.0, 2.0])];
        assert!(Adam::new(AdamConfig::default()).step(&mut p, &g, 0.1).is_err());
    }
}
