//! SGD with momentum and the warmup-then-cosine learning-rate schedule.

use super::Tensor;
use crate::error::{Error, Result};

/// SGD with classical momentum and decoupled-from-nothing L2 weight decay
/// (decay is added to the raw gradient before the momentum update).
pub struct Sgd {
    params: Vec<Tensor>,
    velocity: Vec<Vec<f32>>,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Sgd {
    pub fn new(params: Vec<Tensor>, momentum: f32, weight_decay: f32) -> Sgd {
        let velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Sgd {
            params,
            velocity,
            momentum,
            weight_decay,
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// One update over every parameter. Each must carry a gradient.
    pub fn step(&mut self, lr: f32) -> Result<()> {
        for (idx, p) in self.params.iter().enumerate() {
            let g = p.grad().ok_or_else(|| {
                Error::contract("sgd_step", format!("parameter {idx} has no gradient"))
            })?;
            let v = &mut self.velocity[idx];
            let (mu, wd) = (self.momentum, self.weight_decay);
            p.update_data(|data| {
                for i in 0..data.len() {
                    let grad = g[i] + wd * data[i];
                    v[i] = mu * v[i] + grad;
                    data[i] -= lr * v[i];
                }
            });
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

/// Learning rate at `epoch`: linear ramp `base * (epoch+1) / warmup` for
/// the first `warmup` epochs, then cosine decay toward zero over the rest.
pub fn lr_schedule(epoch: usize, total_epochs: usize, base: f32, warmup: usize) -> f32 {
    if epoch < warmup || total_epochs <= warmup {
        let w = warmup.max(1) as f32;
        return base * ((epoch + 1) as f32).min(w) / w;
    }
    let t = (epoch - warmup) as f32;
    let span = (total_epochs - warmup) as f32;
    0.5 * base * (1.0 + (std::f32::consts::PI * t / span).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_single_step() {
        let p = Tensor::param(vec![1.0], &[1]).unwrap();
        let loss = p.sum().unwrap(); // d/dp = 1
        loss.backward().unwrap();
        let mut opt = Sgd::new(vec![p.clone()], 0.0, 0.0);
        opt.step(0.1).unwrap();
        assert_eq!(p.to_vec(), vec![0.9]);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let p = Tensor::param(vec![1.0], &[1]).unwrap();
        let mut opt = Sgd::new(vec![p.clone()], 0.9, 0.0);
        for _ in 0..2 {
            opt.zero_grad();
            let loss = p.sum().unwrap();
            loss.backward().unwrap();
            opt.step(0.1).unwrap();
        }
        // v1 = 1 -> p = 0.9; v2 = 1.9 -> p = 0.9 - 0.19 = 0.71
        assert!((p.to_vec()[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let p = Tensor::param(vec![2.0], &[1]).unwrap();
        let loss = p.sum().unwrap().scale(0.0).sum().unwrap();
        loss.backward().unwrap();
        let mut opt = Sgd::new(vec![p.clone()], 0.0, 0.5);
        opt.step(0.1).unwrap();
        // grad = 0 + 0.5 * 2.0 = 1.0 -> p = 2.0 - 0.1
        assert!((p.to_vec()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let p = Tensor::param(vec![1.0], &[1]).unwrap();
        let mut opt = Sgd::new(vec![p], 0.9, 0.0);
        assert!(matches!(opt.step(0.1), Err(Error::Contract { .. })));
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let base = 5e-5;
        assert!((lr_schedule(0, 90, base, 3) - base / 3.0).abs() < 1e-12);
        assert!((lr_schedule(1, 90, base, 3) - base * 2.0 / 3.0).abs() < 1e-12);
        assert!((lr_schedule(3, 90, base, 3) - base).abs() < 1e-12);
        let last = lr_schedule(89, 90, base, 3);
        assert!(last > 0.0 && last < 0.01 * base);
        // monotone non-increasing after warmup
        let mut prev = f32::INFINITY;
        for e in 3..90 {
            let lr = lr_schedule(e, 90, base, 3);
            assert!(lr <= prev + 1e-12);
            prev = lr;
        }
    }
}
