use super::TrainConfig;

/// Fraction of the peak rate reached at the end of cosine decay.
pub const FINAL_LR_FRACTION: f64 = 0.1;

/// Linear warmup from 0 to `lr_peak` over `warmup_steps`, then cosine decay to
/// `0.1·lr_peak` at `steps`. Steps beyond `steps` keep the final rate.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.lr_peak;
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return peak;
    }
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let floor = FINAL_LR_FRACTION * peak;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
