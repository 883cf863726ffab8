//! Linear-warmup cosine-decay learning-rate schedule.

/// Learning rate at `step`: linear from 0 to `base_lr` over the first
/// `warmup_steps`, then cosine decay to 0 at `total_steps`. Continuous at
/// the warmup boundary.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    debug_assert!(step <= total_steps);
    debug_assert!(warmup_steps <= total_steps);
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let decay_steps = total_steps.saturating_sub(warmup_steps);
    if decay_steps == 0 {
        return if step >= total_steps { 0.0 } else { base_lr };
    }
    let progress = ((step - warmup_steps) as f64 / decay_steps as f64).clamp(0.0, 1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: f64 = 0.00015;

    #[test]
    fn starts_at_zero() {
        assert_eq!(lr_at(0, 1000, 40, BASE), 0.0);
    }

    #[test]
    fn peak_at_warmup_boundary() {
        assert_eq!(lr_at(40, 1000, 40, BASE), BASE);
    }

    #[test]
    fn ends_at_zero() {
        assert!(lr_at(1000, 1000, 40, BASE).abs() < 1e-12);
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        // Left and right limits both equal base_lr.
        let left = lr_at(39, 1000, 40, BASE) + BASE / 40.0;
        let right = lr_at(40, 1000, 40, BASE);
        assert!((left - right).abs() < 1e-15);
        // And one step past the boundary stays close.
        let after = lr_at(41, 1000, 40, BASE);
        assert!((after - BASE).abs() < BASE * 0.01);
    }

    #[test]
    fn monotone_up_then_down() {
        let total = 200;
        let warmup = 50;
        for step in 1..=warmup {
            assert!(lr_at(step, total, warmup, BASE) >= lr_at(step - 1, total, warmup, BASE));
        }
        for step in (warmup + 1)..=total {
            assert!(lr_at(step, total, warmup, BASE) <= lr_at(step - 1, total, warmup, BASE));
        }
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        assert_eq!(lr_at(0, 100, 0, BASE), BASE);
        assert!(lr_at(100, 100, 0, BASE).abs() < 1e-12);
    }
}
