//! Per-step learning-rate, weight-decay and EMA-momentum schedules.
//!
//! Boundary steps return the configured endpoint values exactly rather than
//! whatever the interpolation formula rounds to.

use std::f64::consts::PI;

use super::TrainConfig;

/// Warmup length in steps: `warmup_epochs / epochs` of the run.
pub fn warmup_steps(total_steps: u64, config: &TrainConfig) -> u64 {
    if config.epochs == 0 {
        return 0;
    }
    (total_steps as f64 * config.warmup_epochs as f64 / config.epochs as f64).round() as u64
}

/// Linear warmup from `lr_init` to `lr_peak`, then cosine decay to `lr_final`.
pub fn lr_schedule(step: u64, total_steps: u64, config: &TrainConfig) -> f64 {
    let step = step.min(total_steps);
    let warmup = warmup_steps(total_steps, config);
    if step == total_steps && total_steps > warmup {
        return config.lr_final;
    }
    if step < warmup {
        let frac = step as f64 / warmup as f64;
        return config.lr_init + (config.lr_peak - config.lr_init) * frac;
    }
    if step == warmup {
        return config.lr_peak;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    config.lr_final + (config.lr_peak - config.lr_final) * (1.0 + (PI * progress).cos()) / 2.0
}

fn linear(step: u64, total_steps: u64, from: f64, to: f64) -> f64 {
    if total_steps == 0 || step == 0 {
        return from;
    }
    if step >= total_steps {
        return to;
    }
    from + (to - from) * (step as f64 / total_steps as f64)
}

/// Linear ramp from `wd_init` to `wd_final` over the whole run.
pub fn wd_schedule(step: u64, total_steps: u64, config: &TrainConfig) -> f64 {
    linear(step, total_steps, config.wd_init, config.wd_final)
}

/// Linear ramp from `ema_init` to 1 over the whole run.
pub fn ema_schedule(step: u64, total_steps: u64, config: &TrainConfig) -> f64 {
    linear(step, total_steps, config.ema_init, 1.0)
}
