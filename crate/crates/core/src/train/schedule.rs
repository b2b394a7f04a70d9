use super::{ScheduleKind, TrainConfig};

/// Learning rate at optimizer step `step` of `total_steps`.
///
/// Step schedule: `lr0` divided by `step_factor` once for every fraction
/// `f` with `step >= ceil(f * total_steps)`. Poly schedule:
/// `lr0 * (1 - step / total_steps)^poly_power`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let total = total_steps.max(1) as f64;
    match cfg.schedule {
        ScheduleKind::Step => {
            let drops = cfg
                .step_fractions
                .iter()
                .filter(|&&f| step as f64 >= (f * total - 1e-9).ceil())
                .count();
            cfg.lr0 / cfg.step_factor.powi(drops as i32)
        }
        ScheduleKind::Poly => cfg.lr0 * (1.0 - (step as f64 / total).min(1.0)).powf(cfg.poly_power),
    }
}
