//! Piecewise training schedule: adversarial weight ramp and lr phases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All schedule knobs for one training run. Epochs are numbered `1..=total`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    /// Last epoch with the adversarial coupling off (alpha = 0).
    pub e1: usize,
    /// Epoch at which alpha reaches `alpha_max` (linear ramp in between).
    pub e2: usize,
    pub alpha_max: f64,
    /// First epoch of the refinement phase (segmenter lr decays from here).
    pub refine_start: usize,
    pub total_epochs: usize,
    pub seg_lr: f64,
    /// Per-epoch multiplicative lr decay during refinement.
    pub refine_decay: f64,
    pub disc_lr: f64,
    pub batches_per_epoch: usize,
    /// Labelled segments per segmentation batch.
    pub n_seg: usize,
    /// Unlabelled segments per adversarial batch (half per domain).
    pub n_adv: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            e1: 10,
            e2: 35,
            alpha_max: 0.05,
            refine_start: 43,
            total_epochs: 50,
            seg_lr: 0.01,
            refine_decay: 0.8,
            disc_lr: 0.001,
            batches_per_epoch: 20,
            n_seg: 10,
            n_adv: 20,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.e1 < self.e2 && self.e2 <= self.refine_start
            && self.refine_start <= self.total_epochs)
        {
            return fail(format!(
                "schedule epochs must satisfy e1 < e2 <= refine_start <= total, got {} / {} / {} / {}",
                self.e1, self.e2, self.refine_start, self.total_epochs
            ));
        }
        if self.alpha_max < 0.0 {
            return fail(format!("alpha_max must be >= 0, got {}", self.alpha_max));
        }
        if self.seg_lr <= 0.0 || self.disc_lr <= 0.0 {
            return fail("learning rates must be positive".into());
        }
        if !(0.0 < self.refine_decay && self.refine_decay <= 1.0) {
            return fail(format!("refine_decay must be in (0, 1], got {}", self.refine_decay));
        }
        if self.batches_per_epoch == 0 || self.n_seg == 0 {
            return fail("batches_per_epoch and n_seg must be >= 1".into());
        }
        if self.n_adv == 0 || self.n_adv % 2 != 0 {
            return fail(format!("n_adv must be even and positive, got {}", self.n_adv));
        }
        Ok(())
    }

    /// Adversarial weight at `epoch`: 0 through `e1`, linear up to
    /// `alpha_max` at `e2`, constant from there on (also during refinement).
    pub fn alpha_at(&self, epoch: usize) -> f64 {
        if epoch <= self.e1 {
            0.0
        } else if epoch >= self.e2 {
            self.alpha_max
        } else {
            self.alpha_max * (epoch - self.e1) as f64 / (self.e2 - self.e1) as f64
        }
    }

    /// `(segmenter lr, discriminator lr)` at `epoch`. The segmenter decays
    /// exponentially once refinement starts; the discriminator never does.
    pub fn lr_at(&self, epoch: usize) -> (f64, f64) {
        let seg = if epoch <= self.refine_start {
            self.seg_lr
        } else {
            self.seg_lr * self.refine_decay.powi((epoch - self.refine_start) as i32)
        };
        (seg, self.disc_lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_matches_the_piecewise_formula_exactly() {
        let s = TrainSchedule::default();
        for epoch in 0..=10 {
            assert_eq!(s.alpha_at(epoch), 0.0, "epoch {epoch}");
        }
        assert_eq!(s.alpha_at(20), 0.05 * 10.0 / 25.0);
        assert!((s.alpha_at(20) - 0.02).abs() < 1e-15);
        for epoch in 35..=60 {
            assert_eq!(s.alpha_at(epoch), 0.05, "epoch {epoch}");
        }
        // Strictly increasing on the ramp.
        for epoch in 11..35 {
            assert!(s.alpha_at(epoch) < s.alpha_at(epoch + 1));
        }
    }

    #[test]
    fn lr_phases_match_the_formula() {
        let s = TrainSchedule::default();
        for epoch in 0..=43 {
            assert_eq!(s.lr_at(epoch), (0.01, 0.001), "epoch {epoch}");
        }
        assert_eq!(s.lr_at(44), (0.01 * 0.8, 0.001));
        assert_eq!(s.lr_at(46).0, 0.01 * 0.8f64.powi(3));
        // Discriminator lr constant everywhere.
        for epoch in 0..=80 {
            assert_eq!(s.lr_at(epoch).1, 0.001);
        }
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let ok = TrainSchedule::default();
        assert!(ok.validate().is_ok());
        assert!(TrainSchedule { e1: 35, e2: 35, ..ok.clone() }.validate().is_err());
        assert!(TrainSchedule { refine_start: 30, ..ok.clone() }.validate().is_err());
        assert!(TrainSchedule { total_epochs: 40, ..ok.clone() }.validate().is_err());
        assert!(TrainSchedule { alpha_max: -0.1, ..ok.clone() }.validate().is_err());
        assert!(TrainSchedule { n_adv: 7, ..ok.clone() }.validate().is_err());
        assert!(TrainSchedule { refine_decay: 0.0, ..ok.clone() }.validate().is_err());
    }

    #[test]
    fn schedule_roundtrips_through_json_with_defaults() {
        let s: TrainSchedule = serde_json::from_str("{}").unwrap();
        assert_eq!(s, TrainSchedule::default());
        let s: TrainSchedule = serde_json::from_str(r#"{"alpha_max": 0.1, "e2": 20}"#).unwrap();
        assert_eq!(s.alpha_max, 0.1);
        assert_eq!(s.e2, 20);
        assert_eq!(s.e1, 10);
    }
}
