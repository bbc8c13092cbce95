//! Supervision-branch maintenance: parameter momentum updates and the
//! annealing schedules for the momentum coefficient and learning rate.

use std::f64::consts::PI;

use crate::encoder::ParamStore;
use crate::error::Result;

/// Cosine schedule for the branch-momentum coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentumSchedule {
    pub mu_base: f64,
    pub mu_final: f64,
    pub total_steps: usize,
}

impl MomentumSchedule {
    pub fn new(mu_base: f64, mu_final: f64, total_steps: usize) -> Self {
        MomentumSchedule { mu_base, mu_final, total_steps }
    }
}

impl Default for MomentumSchedule {
    fn default() -> Self {
        MomentumSchedule { mu_base: 0.996, mu_final: 1.0, total_steps: 1 }
    }
}

/// `mu(t) = mu_final - (mu_final - mu_base) * (cos(pi t / T) + 1) / 2`.
pub fn mu_at(schedule: &MomentumSchedule, step: usize) -> f64 {
    if schedule.total_steps == 0 {
        return schedule.mu_final;
    }
    let progress = (step.min(schedule.total_steps)) as f64 / schedule.total_steps as f64;
    let cos_term = ((PI * progress).cos() + 1.0) / 2.0;
    schedule.mu_final - (schedule.mu_final - schedule.mu_base) * cos_term
}

/// Linear warmup to `base_lr`, then cosine annealing to `floor_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub floor_lr: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { base_lr: 0.3, warmup_epochs: 10.0, total_epochs: 50.0, floor_lr: 0.0 }
    }
}

/// Learning rate at a fractional epoch position.
pub fn lr_at(schedule: &LrSchedule, epoch_fraction: f64) -> f64 {
    let e = epoch_fraction.clamp(0.0, schedule.total_epochs);
    if schedule.warmup_epochs > 0.0 && e < schedule.warmup_epochs {
        return schedule.base_lr * e / schedule.warmup_epochs;
    }
    let span = schedule.total_epochs - schedule.warmup_epochs;
    if span <= 0.0 {
        return schedule.base_lr;
    }
    let progress = (e - schedule.warmup_epochs) / span;
    schedule.floor_lr
        + (schedule.base_lr - schedule.floor_lr) * ((PI * progress).cos() + 1.0) / 2.0
}

/// `phi <- mu * phi + (1 - mu) * theta`, elementwise over congruent stores.
pub fn momentum_update(theta: &ParamStore, phi: &mut ParamStore, mu: f64) -> Result<()> {
    theta.congruent_with(phi)?;
    for (t, p) in theta.params.iter().zip(&mut phi.params) {
        for (tv, pv) in t.data.iter().zip(&mut p.data) {
            *pv = mu * *pv + (1.0 - mu) * tv;
        }
    }
    Ok(())
}
