//! Learning-rate schedules: constant, or one-cycle (30% linear warmup to the
//! peak, then cosine annealing down to peak/25).

use crate::error::{GcrlError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant { base_lr: f64 },
    OneCycle { base_lr: f64, peak_lr: f64, total_steps: u64 },
}

pub const WARMUP_FRACTION: f64 = 0.3;
pub const FINAL_DIV: f64 = 25.0;

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Self {
        assert!(base_lr > 0.0);
        LrSchedule::Constant { base_lr }
    }

    pub fn one_cycle(base_lr: f64, peak_lr: f64, total_steps: u64) -> Self {
        assert!(base_lr > 0.0 && peak_lr > 0.0 && total_steps > 0);
        LrSchedule::OneCycle {
            base_lr,
            peak_lr,
            total_steps,
        }
    }

    /// Learning rate at `step` ∈ [0, total_steps].
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        match *self {
            LrSchedule::Constant { base_lr } => Ok(base_lr),
            LrSchedule::OneCycle {
                base_lr,
                peak_lr,
                total_steps,
            } => {
                if step > total_steps {
                    return Err(GcrlError::Config(format!(
                        "schedule step {step} out of range (total {total_steps})"
                    )));
                }
                let warm_end = WARMUP_FRACTION * total_steps as f64;
                let lr = if (step as f64) <= warm_end {
                    base_lr + (peak_lr - base_lr) * step as f64 / warm_end
                } else {
                    let floor = peak_lr / FINAL_DIV;
                    let frac = (step as f64 - warm_end) / (total_steps as f64 - warm_end);
                    floor + (peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
                };
                debug_assert!(lr > 0.0);
                Ok(lr)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_ignores_step() {
        let s = LrSchedule::constant(5e-3);
        for step in [0, 7, 1000] {
            assert_eq!(s.lr_at(step).unwrap(), 5e-3);
        }
    }

    #[test]
    fn one_cycle_endpoints() {
        let s = LrSchedule::one_cycle(1e-4, 5e-3, 1000);
        assert!((s.lr_at(0).unwrap() - 1e-4).abs() < 1e-15);
        assert!((s.lr_at(300).unwrap() - 5e-3).abs() < 1e-12);
        assert!((s.lr_at(1000).unwrap() - 5e-3 / 25.0).abs() < 1e-9);
    }

    #[test]
    fn one_cycle_positive_everywhere() {
        let s = LrSchedule::one_cycle(2e-4, 5e-3, 777);
        for step in 0..=777 {
            assert!(s.lr_at(step).unwrap() > 0.0);
        }
    }

    #[test]
    fn out_of_range_step_errors() {
        let s = LrSchedule::one_cycle(1e-4, 5e-3, 10);
        assert!(s.lr_at(11).is_err());
    }
}
