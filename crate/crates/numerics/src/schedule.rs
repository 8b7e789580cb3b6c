use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};

/// Learning-rate decay and KL warm-up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub base_lr: f64,
    pub final_lr: f64,
    pub decay_steps: u64,
    pub kl_anneal_steps: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            final_lr: 5e-5,
            decay_steps: 15_000,
            kl_anneal_steps: 3_000,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.final_lr > 0.0 && self.final_lr <= self.base_lr && self.base_lr.is_finite()) {
            return Err(NumericsError::InvalidArgument(format!(
                "need 0 < final_lr <= base_lr, got {} and {}",
                self.final_lr, self.base_lr
            )));
        }
        if self.decay_steps == 0 {
            return Err(NumericsError::InvalidArgument(
                "decay_steps must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Half-cosine from `base_lr` to `final_lr`, flat afterwards.
    pub fn lr_at(&self, it: u64) -> f64 {
        if it >= self.decay_steps {
            return self.final_lr;
        }
        let frac = it as f64 / self.decay_steps as f64;
        let lr = self.final_lr
            + (self.base_lr - self.final_lr) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0;
        lr.clamp(self.final_lr, self.base_lr)
    }

    /// Linear KL warm-up, `min(1, it / kl_anneal_steps)`.
    pub fn kl_beta(&self, it: u64) -> f64 {
        if self.kl_anneal_steps == 0 {
            return 1.0;
        }
        (it as f64 / self.kl_anneal_steps as f64).min(1.0)
    }
}
