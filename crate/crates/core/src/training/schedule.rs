use serde::{Deserialize, Serialize};

use super::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Learning rate applied at optimizer step `step` (0-based).
///
/// Linear warmup from 0 to `base_lr`, then cosine annealing to 0 at
/// `step == epochs * steps_per_epoch`. `Constant` keeps the warmup and holds
/// `base_lr` afterwards.
pub fn lr_at(config: &TrainConfig, step: usize, steps_per_epoch: usize) -> f64 {
    let warm = config.warmup_epochs * steps_per_epoch;
    let total = config.epochs * steps_per_epoch;
    if step < warm {
        return config.base_lr * step as f64 / warm as f64;
    }
    match config.schedule {
        Schedule::Constant => config.base_lr,
        Schedule::Cosine => {
            if total <= warm {
                return config.base_lr;
            }
            let t = ((step - warm) as f64 / (total - warm) as f64).min(1.0);
            config.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}
