use serde::{Deserialize, Serialize};

use crate::numcore::Float;

/// Linear warmup from 0 to `peak`, then half-cosine decay to `floor` at
/// `total_steps`. Steps past the end stay at `floor`.
pub fn cosine_warmup_lr(
    step: usize,
    warmup_steps: usize,
    total_steps: usize,
    peak: Float,
    floor: Float,
) -> Float {
    if step < warmup_steps {
        return peak * step as Float / warmup_steps as Float;
    }
    if step >= total_steps || total_steps <= warmup_steps {
        return floor;
    }
    let progress = (step - warmup_steps) as Float / (total_steps - warmup_steps) as Float;
    let pi = std::f64::consts::PI as Float;
    floor + (peak - floor) * 0.5 * (1.0 + (pi * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineWarmup {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub peak: Float,
    pub floor: Float,
}

impl CosineWarmup {
    /// Clamps warmup below the total so the precondition `warmup < total` holds.
    pub fn new(warmup_steps: usize, total_steps: usize, peak: Float, floor: Float) -> Self {
        let warmup_steps = warmup_steps.min(total_steps.saturating_sub(1));
        Self {
            warmup_steps,
            total_steps,
            peak,
            floor,
        }
    }

    pub fn at(&self, step: usize) -> Float {
        cosine_warmup_lr(step, self.warmup_steps, self.total_steps, self.peak, self.floor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn landmarks() {
        let (w, t, p, f) = (10, 110, 1e-3, 1e-5);
        assert_eq!(cosine_warmup_lr(0, w, t, p, f), 0.0);
        assert_eq!(cosine_warmup_lr(w, w, t, p, f), p);
        assert_eq!(cosine_warmup_lr(t, w, t, p, f), f);
        let mid = cosine_warmup_lr((w + t) / 2, w, t, p, f);
        assert!((mid - (p + f) / 2.0).abs() < 1e-15);
        assert!((cosine_warmup_lr(5, w, t, p, f) - p / 2.0).abs() < 1e-18);
    }

    #[test]
    fn monotone_after_warmup() {
        let s = CosineWarmup::new(5, 50, 1.0, 0.1);
        let mut prev = s.at(5);
        for step in 6..=50 {
            let lr = s.at(step);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
