use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
///
/// Returns the joint norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 || !max_norm.is_finite() {
        return Err(Error::InvalidConfig("max_norm must be positive".into()));
    }
    let norm = libm::sqrt(grads.iter().map(Tensor::sum_squares).sum::<f64>());
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
    Ok(norm)
}

/// Adam hyperparameters shared by every parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// AdamW optimizer state for an ordered list of parameters.
///
/// Weight decay is decoupled and applied after the Adam update.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    weight_decay: Vec<f64>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    /// One entry of `weight_decay` and `shapes` per parameter, in update order.
    pub fn new(config: AdamWConfig, shapes: &[Vec<usize>], weight_decay: Vec<f64>) -> Result<Self> {
        if shapes.len() != weight_decay.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw",
                left: alloc::vec![shapes.len()],
                right: alloc::vec![weight_decay.len()],
            });
        }
        Ok(AdamW {
            config,
            step: 0,
            weight_decay,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn weight_decay(&self) -> &[f64] {
        &self.weight_decay
    }

    pub fn moments(&self, index: usize) -> (&Tensor, &Tensor) {
        (&self.first[index], &self.second[index])
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                left: alloc::vec![self.first.len()],
                right: alloc::vec![params.len(), grads.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, epsilon } = self.config;
        let t = self.step as f64;
        let bias1 = 1.0 - libm::pow(beta1, t);
        let bias2 = 1.0 - libm::pow(beta2, t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = self.weight_decay[i];
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                pd[j] -= lr * m_hat / (libm::sqrt(v_hat) + epsilon);
                pd[j] -= lr * decay * pd[j];
            }
            p.ensure_finite("adamw_step")?;
        }
        Ok(())
    }
}

/// Linear warmup, constant plateau, then per-step exponential decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub constant_until_frac: f64,
    pub decay_rate: f64,
    pub total_steps: u64,
}

/// Step count of the original full-length schedule.
pub const REFERENCE_TOTAL_STEPS: u64 = 500_000;
pub const REFERENCE_WARMUP_STEPS: u64 = 5_000;
pub const REFERENCE_DECAY_RATE: f64 = 0.99995;

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::scaled(2_000)
    }
}

impl LrSchedule {
    /// Full-length schedule: 5000 warmup steps to 1e-3 over 500k steps.
    pub fn reference() -> Self {
        LrSchedule {
            peak_lr: 1e-3,
            warmup_steps: REFERENCE_WARMUP_STEPS,
            constant_until_frac: 0.8,
            decay_rate: REFERENCE_DECAY_RATE,
            total_steps: REFERENCE_TOTAL_STEPS,
        }
    }

    /// The reference schedule compressed to `total_steps`, keeping the warmup
    /// fraction and the overall decay factor at the final step.
    pub fn scaled(total_steps: u64) -> Self {
        let reference = Self::reference();
        let ratio = REFERENCE_TOTAL_STEPS as f64 / total_steps.max(1) as f64;
        LrSchedule {
            warmup_steps: (total_steps * REFERENCE_WARMUP_STEPS) / REFERENCE_TOTAL_STEPS,
            decay_rate: libm::pow(reference.decay_rate, ratio),
            total_steps,
            ..reference
        }
    }

    /// Last step of the constant phase.
    pub fn constant_end(&self) -> u64 {
        let end = libm::floor(self.constant_until_frac * self.total_steps as f64) as u64;
        end.max(self.warmup_steps)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_lr >= 0.0
            && self.peak_lr.is_finite()
            && self.constant_until_frac > 0.0
            && self.constant_until_frac <= 1.0
            && self.decay_rate > 0.0
            && self.decay_rate <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("learning-rate schedule out of range".into()))
        }
    }

    pub fn lr_at_step(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        let end = self.constant_end();
        if step <= end {
            return Ok(self.peak_lr);
        }
        Ok(self.peak_lr * libm::pow(self.decay_rate, (step - end) as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn clip_scales_down_large_gradients() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        let norm = clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(norm, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[0].data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_leaves_small_gradients() {
        let mut g = vec![Tensor::vector(vec![0.3, 0.4])];
        clip_global_norm(&mut g, 1.0).unwrap();
        assert_eq!(g[0].data(), &[0.3, 0.4]);
        assert!(clip_global_norm(&mut g, 0.0).is_err());
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &[vec![]], vec![0.0]).unwrap();
        opt.step(&mut [&mut p], &[Tensor::scalar(0.0)], 0.01).unwrap();
        assert_eq!(p.item(), 1.0);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn pure_decay_step() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &[vec![]], vec![0.1]).unwrap();
        opt.step(&mut [&mut p], &[Tensor::scalar(0.0)], 0.01).unwrap();
        assert!((p.item() - 0.999).abs() < 1e-15);
    }

    #[test]
    fn moments_start_at_zero_and_shapes_are_checked() {
        let opt = AdamW::new(AdamWConfig::default(), &[vec![2, 2]], vec![0.0]).unwrap();
        let (m, v) = opt.moments(0);
        assert!(m.data().iter().chain(v.data()).all(|&x| x == 0.0));
        let mut opt = opt;
        let mut p = Tensor::zeros(&[2, 2]);
        assert!(opt.step(&mut [&mut p], &[Tensor::zeros(&[4])], 0.1).is_err());
    }

    #[test]
    fn reference_schedule_values() {
        let s = LrSchedule::reference();
        assert_eq!(s.lr_at_step(0).unwrap(), 0.0);
        assert!((s.lr_at_step(2500).unwrap() - 5e-4).abs() < 1e-18);
        assert_eq!(s.lr_at_step(5000).unwrap(), 1e-3);
        assert!(s.lr_at_step(500_001).is_err());
    }

    #[test]
    fn final_step_matches_closed_form() {
        let s = LrSchedule::reference();
        let end = s.constant_end();
        assert_eq!(end, 400_000);
        let expected = 1e-3 * libm::pow(s.decay_rate, (s.total_steps - end) as f64);
        assert_eq!(s.lr_at_step(s.total_steps).unwrap(), expected);
    }

    #[test]
    fn scaled_schedule_keeps_shape() {
        let s = LrSchedule::scaled(2000);
        assert_eq!(s.warmup_steps, 20);
        assert_eq!(s.constant_end(), 1600);
        let full = LrSchedule::reference();
        let a = s.lr_at_step(2000).unwrap();
        let b = full.lr_at_step(500_000).unwrap();
        assert!((a - b).abs() / b < 1e-9);
    }
}
