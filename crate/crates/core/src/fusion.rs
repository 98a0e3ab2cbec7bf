//! Alpha-gated fusion of encoder and causally refined latents.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSchedule {
    pub alpha0: f64,
    pub k_alpha: f64,
    pub tau: f64,
    pub gamma: f64,
    pub gate_enabled: bool,
}

impl Default for FusionSchedule {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            k_alpha: 0.0,
            tau: 1.0,
            gamma: 5.0,
            gate_enabled: true,
        }
    }
}

/// `α_t = α0 · exp(−k_α t)`.
pub fn fusion_alpha(schedule: &FusionSchedule, t: u64) -> f64 {
    schedule.alpha0 * (-schedule.k_alpha * t as f64).exp()
}

/// `k_α` such that `α` reaches `target · α0` after `steps` steps.
pub fn decay_rate_for(target: f64, steps: u64) -> f64 {
    if steps == 0 {
        0.0
    } else {
        -target.ln() / steps as f64
    }
}

/// Per-row `δ = ‖z̃ − z‖₂`.
pub fn gate_distance(z: &Array2<f64>, z_tilde: &Array2<f64>) -> Vec<f64> {
    (z_tilde - z)
        .map_axis(Axis(1), |r| r.dot(&r).sqrt())
        .to_vec()
}

/// Per-row `α_eff = g·α_t` with `g = σ((τ − δ)γ)`; `α_t` when the gate is off.
pub fn effective_alpha(schedule: &FusionSchedule, alpha_t: f64, delta: &[f64]) -> Vec<f64> {
    delta
        .iter()
        .map(|&d| {
            if schedule.gate_enabled {
                sigmoid((schedule.tau - d) * schedule.gamma) * alpha_t
            } else {
                alpha_t
            }
        })
        .collect()
}

/// `z_gate = (1 − α_eff) z + α_eff z̃` row by row; returns the mixed latents and
/// the per-row `α_eff`.
pub fn fusion_gate(
    z: &Array2<f64>,
    z_tilde: &Array2<f64>,
    schedule: &FusionSchedule,
    t: u64,
) -> (Array2<f64>, Vec<f64>) {
    let alpha_t = fusion_alpha(schedule, t);
    let delta = gate_distance(z, z_tilde);
    let alpha = effective_alpha(schedule, alpha_t, &delta);
    (mix(z, z_tilde, &alpha), alpha)
}

pub fn mix(z: &Array2<f64>, z_tilde: &Array2<f64>, alpha: &[f64]) -> Array2<f64> {
    let mut out = z.clone();
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let a = alpha[r];
        for (c, x) in row.iter_mut().enumerate() {
            *x = (1.0 - a) * *x + a * z_tilde[[r, c]];
        }
    }
    out
}
