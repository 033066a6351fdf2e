use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
}

impl<S: Scalar> AdamMoments<S> {
    pub fn zeros(len: usize) -> Self {
        AdamMoments { m: vec![S::zero(); len], v: vec![S::zero(); len] }
    }
}

/// One bias-corrected Adam update. `step` is the 1-based count including this update.
///
/// `eps` is added to `sqrt(v_hat)`, outside the square root.
pub fn adam_update<S: Scalar>(
    param: &mut [S],
    grad: &[S],
    moments: &mut AdamMoments<S>,
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || moments.m.len() != param.len() || moments.v.len() != param.len() {
        return Err(Error::dim("adam_step", &[param.len()], &[grad.len(), moments.m.len()]));
    }
    if step == 0 {
        return Err(Error::Usage("adam step counter starts at 1".into()));
    }
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let bc1 = S::one() - b1.powi(step as i32);
    let bc2 = S::one() - b2.powi(step as i32);
    let (lr, eps) = (S::lit(lr), S::lit(cfg.eps));
    for i in 0..param.len() {
        let g = grad[i];
        moments.m[i] = b1 * moments.m[i] + (S::one() - b1) * g;
        moments.v[i] = b2 * moments.v[i] + (S::one() - b2) * g * g;
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Linear warmup from `base_lr` to `peak_lr`, then linear decay towards zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl LrSchedule {
    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_epoch == 0 || self.total_epochs == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warmup of {} epochs exceeds {} total epochs",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.base_lr < 0.0 || self.peak_lr < 0.0 {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        Ok(())
    }

    /// Learning rate for a zero-based global step.
    ///
    /// Step 0 is `base_lr`, the last warmup step is `peak_lr`; the decay phase
    /// falls linearly and would reach zero one step past the end.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        self.validate()?;
        let total = self.total_steps();
        if step >= total {
            return Err(Error::Usage(format!("step {step} outside schedule of {total} steps")));
        }
        let warm = self.warmup_steps();
        if warm > 1 && step < warm {
            let t = step as f64 / (warm - 1) as f64;
            return Ok(self.base_lr + (self.peak_lr - self.base_lr) * t);
        }
        if warm <= 1 && step == 0 {
            return Ok(self.base_lr);
        }
        let last_warm = warm.max(1) - 1;
        let span = (total - last_warm) as f64;
        let progress = (step - last_warm) as f64 / span;
        Ok(self.peak_lr * (1.0 - progress))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule(steps_per_epoch: usize) -> LrSchedule {
        LrSchedule { base_lr: 1e-5, peak_lr: 1e-4, warmup_epochs: 5, total_epochs: 20, steps_per_epoch }
    }

    #[test]
    fn schedule_landmarks() {
        let s = default_schedule(1);
        assert_eq!(s.lr_at(0).unwrap(), 1e-5);
        assert!((s.lr_at(4).unwrap() - 1e-4).abs() < 1e-20);
        // decay spans steps 4..20, midpoint at step 12
        assert!((s.lr_at(12).unwrap() - 5e-5).abs() < 1e-18);
        assert!(s.lr_at(19).unwrap() > 0.0);
        assert!(s.lr_at(20).is_err());
    }

    #[test]
    fn schedule_is_monotone_in_each_phase() {
        let s = default_schedule(16);
        let lrs: Vec<f64> = (0..s.total_steps()).map(|i| s.lr_at(i).unwrap()).collect();
        let w = s.warmup_steps();
        assert!(lrs[..w].windows(2).all(|p| p[0] < p[1]));
        assert!(lrs[w - 1..].windows(2).all(|p| p[0] > p[1]));
        assert!(lrs.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0f64, -2.0];
        let mut m = AdamMoments::zeros(2);
        adam_update(&mut p, &[0.0, 0.0], &mut m, 1, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = vec![0.0f64, 0.0, 0.0];
        let mut m = AdamMoments::zeros(3);
        adam_update(&mut p, &[0.3, -5.0, 1e3], &mut m, 1, 1e-3, &AdamConfig::default()).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-10);
        assert!((p[1] - 1e-3).abs() < 1e-10);
        assert!((p[2] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![0.0f64; 2];
        let mut m = AdamMoments::zeros(2);
        assert!(adam_update(&mut p, &[1.0], &mut m, 1, 1e-3, &AdamConfig::default()).is_err());
    }

    #[test]
    fn three_steps_on_a_quadratic() {
        // f(x) = 1.5 (x - 2)^2 from x = -1, lr 0.1; reference computed at 50 digits
        let want = [-0.900_000_000_111_111_1, -0.800_102_707_302_867_4, -0.700_381_523_281_721];
        let mut x = vec![-1.0f64];
        let mut m = AdamMoments::zeros(1);
        for (t, w) in want.iter().enumerate() {
            let g = 3.0 * (x[0] - 2.0);
            adam_update(&mut x, &[g], &mut m, t as u64 + 1, 0.1, &AdamConfig::default()).unwrap();
            assert!((x[0] - w).abs() < 1e-12, "step {}: {}", t + 1, x[0]);
        }
    }
}
