use std::f64::consts::PI;

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_epochs: usize, epochs: usize, steps_per_epoch: usize) -> Self {
        let total_steps = epochs * steps_per_epoch;
        LrSchedule {
            base_lr,
            warmup_steps: (warmup_epochs * steps_per_epoch).min(total_steps),
            total_steps,
        }
    }

    pub fn decay_steps(&self) -> usize {
        self.total_steps - self.warmup_steps
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let decay = self.decay_steps();
        if decay == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / decay as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anchor_points() {
        let s = LrSchedule::new(1e-4, 10, 60, 10);
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.at(100), 1e-4);
        // Cosine phase covers steps 100..600; its midpoint is 350.
        assert!((s.at(350) - 0.5e-4).abs() < 1e-18);
        assert!(s.at(600).abs() < 1e-20);
    }

    #[test]
    fn warmup_longer_than_training_is_clipped() {
        let s = LrSchedule::new(1.0, 10, 2, 5);
        assert_eq!(s.warmup_steps, 10);
        assert_eq!(s.at(5), 0.5);
        assert_eq!(s.at(10), 1.0);
    }

    proptest! {
        #[test]
        fn schedule_is_lipschitz(warmup in 1usize..20, extra in 1usize..40, spe in 1usize..20) {
            let s = LrSchedule::new(1.0, warmup, warmup + extra, spe);
            let warm_bound = 1.0 / s.warmup_steps as f64 + 1e-12;
            let decay_bound = PI / (2.0 * s.decay_steps() as f64) + 1e-12;
            for step in 0..s.total_steps {
                let jump = (s.at(step + 1) - s.at(step)).abs();
                let bound = if step < s.warmup_steps { warm_bound } else { decay_bound };
                prop_assert!(jump <= bound, "step {step}: {jump} > {bound}");
            }
        }
    }
}
