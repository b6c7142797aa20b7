/// Linear scaling rule: `base_lr * batch_size / 256`.
pub fn scaled_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Cosine decay from `lr0` at step 0 to zero at `total_steps`, no warmup.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_scaling() {
        assert_eq!(scaled_lr(0.03, 512), 0.06);
        assert_eq!(scaled_lr(0.03, 256), 0.03);
        assert_eq!(scaled_lr(0.05, 64), 0.0125);
    }

    #[test]
    fn cosine_points() {
        assert_eq!(cosine_lr(0, 100, 0.2), 0.2);
        assert_eq!(cosine_lr(100, 100, 0.2), 0.0);
        assert!((cosine_lr(50, 100, 0.2) - 0.1).abs() < 1e-15);
    }
}
