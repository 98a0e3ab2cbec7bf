//! 2-D gravitational n-body system with softened forces and Euler steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::render::{PixelBuffer, PALETTE};
use super::{sample_one_hot, Action, EnvConfig, Environment, ObsMode, SimState};
use crate::error::{Error, Result};

/// Per-body state layout is `[x, y, vx, vy]`.
pub const VARS_PER_BODY: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsConfig {
    pub bodies: usize,
    /// Euler step per integration substep.
    pub dt: f64,
    /// Integration substeps per environment step.
    pub substeps: usize,
    pub gravity: f64,
    pub softening: f64,
    /// Half-width of the square arena `[-arena, arena]²`.
    pub arena: f64,
    pub init_position_range: f64,
    pub init_velocity_std: f64,
    /// Minimum pairwise distance at reset.
    pub min_separation: f64,
    /// Exogenous velocity kicks (`bodies × 4` one-hot actions) instead of the null action.
    pub impulse_actions: bool,
    pub impulse: f64,
    pub obs_mode: ObsMode,
    pub image_size: usize,
    pub body_radius_px: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            bodies: 3,
            dt: 0.01,
            substeps: 10,
            gravity: 1.0,
            softening: 0.1,
            arena: 5.0,
            init_position_range: 3.0,
            init_velocity_std: 0.5,
            min_separation: 0.5,
            impulse_actions: false,
            impulse: 0.5,
            obs_mode: ObsMode::Pixels,
            image_size: 50,
            body_radius_px: 3.0,
        }
    }
}

pub struct PhysicsEnv {
    cfg: PhysicsConfig,
}

impl PhysicsEnv {
    pub fn new(cfg: PhysicsConfig) -> Result<Self> {
        if cfg.bodies == 0 || cfg.substeps == 0 || !(cfg.dt > 0.0) || !(cfg.arena > 0.0) {
            return Err(Error::config(
                "physics-nbody needs bodies ≥ 1, substeps ≥ 1, dt > 0 and arena > 0",
            ));
        }
        if cfg.softening < 0.0 {
            return Err(Error::config("softening must be non-negative"));
        }
        Ok(Self { cfg })
    }

    pub fn cfg(&self) -> &PhysicsConfig {
        &self.cfg
    }

    fn accelerations(&self, s: &[f64]) -> Vec<f64> {
        let n = self.cfg.bodies;
        let eps2 = self.cfg.softening * self.cfg.softening;
        let mut acc = vec![0.0; 2 * n];
        for i in 0..n {
            let (xi, yi) = (s[VARS_PER_BODY * i], s[VARS_PER_BODY * i + 1]);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dx = s[VARS_PER_BODY * j] - xi;
                let dy = s[VARS_PER_BODY * j + 1] - yi;
                let r2 = dx * dx + dy * dy + eps2;
                let inv_r3 = self.cfg.gravity / (r2 * r2.sqrt());
                acc[2 * i] += dx * inv_r3;
                acc[2 * i + 1] += dy * inv_r3;
            }
        }
        acc
    }

    fn reflect(&self, s: &mut [f64]) {
        let a = self.cfg.arena;
        for b in 0..self.cfg.bodies {
            for axis in 0..2 {
                let p = VARS_PER_BODY * b + axis;
                let v = VARS_PER_BODY * b + 2 + axis;
                // repeated folding handles overshoots larger than the arena
                for _ in 0..8 {
                    if s[p] > a {
                        s[p] = 2.0 * a - s[p];
                        s[v] = -s[v];
                    } else if s[p] < -a {
                        s[p] = -2.0 * a - s[p];
                        s[v] = -s[v];
                    } else {
                        break;
                    }
                }
                s[p] = s[p].clamp(-a, a);
            }
        }
    }

    /// Pixel coordinates `(row, col)` of a position.
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let size = self.cfg.image_size as f64;
        let scale = size / (2.0 * self.cfg.arena);
        ((y + self.cfg.arena) * scale, (x + self.cfg.arena) * scale)
    }
}

impl Environment for PhysicsEnv {
    fn config(&self) -> EnvConfig {
        EnvConfig::PhysicsNbody(self.cfg.clone())
    }

    fn state_dim(&self) -> usize {
        VARS_PER_BODY * self.cfg.bodies
    }

    fn num_objects(&self) -> usize {
        self.cfg.bodies
    }

    fn vars_per_object(&self) -> usize {
        VARS_PER_BODY
    }

    fn action_dim(&self) -> usize {
        4 * self.cfg.bodies
    }

    fn obs_mode(&self) -> ObsMode {
        self.cfg.obs_mode
    }

    fn pixel_shape(&self) -> (usize, usize, usize) {
        (self.cfg.image_size, self.cfg.image_size, 3)
    }

    fn initial_state(&self, seed: u64) -> SimState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.cfg.bodies;
        let r = self.cfg.init_position_range;
        let vel = Normal::new(0.0, self.cfg.init_velocity_std).expect("velocity std");
        let mut pos: Vec<(f64, f64)> = Vec::with_capacity(n);
        let mut attempts = 0;
        while pos.len() < n {
            let cand = (rng.gen_range(-r..r), rng.gen_range(-r..r));
            attempts += 1;
            let ok = pos.iter().all(|&(x, y)| {
                ((x - cand.0).powi(2) + (y - cand.1).powi(2)).sqrt() >= self.cfg.min_separation
            });
            if ok || attempts > 1000 {
                pos.push(cand);
            }
        }
        let mut values = Vec::with_capacity(self.state_dim());
        for (x, y) in pos {
            values.extend_from_slice(&[x, y, vel.sample(&mut rng), vel.sample(&mut rng)]);
        }
        SimState::new(values, 0)
    }

    fn advance(&self, state: &SimState, action: &Action) -> Result<SimState> {
        action.validate(self.action_dim())?;
        if state.dim() != self.state_dim() {
            return Err(Error::input(format!(
                "state has dimension {}, expected {}",
                state.dim(),
                self.state_dim()
            )));
        }
        let mut s = state.values.clone();
        if let Some(k) = action.active() {
            if !self.cfg.impulse_actions {
                return Err(Error::input("physics environment configured with null actions only"));
            }
            let (body, dir) = (k / 4, k % 4);
            let (axis, sign) = (dir / 2, if dir % 2 == 0 { 1.0 } else { -1.0 });
            s[VARS_PER_BODY * body + 2 + axis] += sign * self.cfg.impulse;
        }
        let n = self.cfg.bodies;
        let dt = self.cfg.dt;
        for _ in 0..self.cfg.substeps {
            let acc = self.accelerations(&s);
            for b in 0..n {
                let o = VARS_PER_BODY * b;
                s[o] += dt * s[o + 2];
                s[o + 1] += dt * s[o + 3];
                s[o + 2] += dt * acc[2 * b];
                s[o + 3] += dt * acc[2 * b + 1];
            }
            self.reflect(&mut s);
        }
        let next = SimState::new(s, state.time_index + 1);
        if !next.is_finite() {
            return Err(Error::numeric("non-finite physics state after step"));
        }
        Ok(next)
    }

    fn render(&self, state: &SimState) -> PixelBuffer {
        let size = self.cfg.image_size;
        let mut img = PixelBuffer::blank(size, size, 3);
        for b in 0..self.cfg.bodies.min(state.dim() / VARS_PER_BODY) {
            let (py, px) = self.to_pixel(state.values[VARS_PER_BODY * b], state.values[VARS_PER_BODY * b + 1]);
            img.fill_disc(py, px, self.cfg.body_radius_px, &PALETTE[b % PALETTE.len()]);
        }
        img
    }

    fn sample_action(&self, rng: &mut dyn rand::RngCore) -> Action {
        if self.cfg.impulse_actions {
            sample_one_hot(rng, self.action_dim())
        } else {
            Action::null(self.action_dim())
        }
    }

    fn vector_field(&self, s: &[f64]) -> Option<Vec<f64>> {
        let acc = self.accelerations(s);
        let mut f = vec![0.0; s.len()];
        for b in 0..self.cfg.bodies {
            let o = VARS_PER_BODY * b;
            f[o] = s[o + 2];
            f[o + 1] = s[o + 3];
            f[o + 2] = acc[2 * b];
            f[o + 3] = acc[2 * b + 1];
        }
        Some(f)
    }

    fn sim_dt(&self) -> f64 {
        self.cfg.dt
    }

    fn is_valid(&self, state: &SimState) -> bool {
        let a = self.cfg.arena;
        state.is_finite()
            && state.dim() == self.state_dim()
            && (0..self.cfg.bodies).all(|b| {
                let o = VARS_PER_BODY * b;
                state.values[o].abs() <= a && state.values[o + 1].abs() <= a
            })
    }

    fn magnitude_levels(&self) -> [f64; 3] {
        [0.5, 1.5, 3.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(mode: ObsMode) -> PhysicsEnv {
        PhysicsEnv::new(PhysicsConfig {
            obs_mode: mode,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn reset_is_deterministic_and_sized() {
        let e = env(ObsMode::State);
        let (a, oa) = e.reset(42);
        let (b, ob) = e.reset(42);
        assert_eq!(a, b);
        assert_eq!(oa, ob);
        let e7 = PhysicsEnv::new(PhysicsConfig {
            bodies: 3,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(e7.reset(7).0.dim(), 12);
        assert_ne!(e.reset(43).0, a);
    }

    #[test]
    fn positions_stay_in_arena() {
        let e = env(ObsMode::State);
        let mut s = e.initial_state(3);
        for _ in 0..500 {
            s = e.advance(&s, &Action::null(12)).unwrap();
            assert!(e.is_valid(&s));
        }
    }

    #[test]
    fn isolated_body_moves_ballistically() {
        let e = PhysicsEnv::new(PhysicsConfig {
            bodies: 1,
            substeps: 1,
            ..Default::default()
        })
        .unwrap();
        let s = SimState::new(vec![0.0, 0.0, 1.0, -2.0], 0);
        let n = e.advance(&s, &Action::null(4)).unwrap();
        assert_eq!(n.values, vec![0.01, -0.02, 1.0, -2.0]);
        assert_eq!(n.time_index, 1);
    }

    #[test]
    fn wall_reflection_flips_velocity() {
        let e = PhysicsEnv::new(PhysicsConfig {
            bodies: 1,
            substeps: 1,
            dt: 1.0,
            ..Default::default()
        })
        .unwrap();
        let s = SimState::new(vec![4.5, 0.0, 1.0, 0.0], 0);
        let n = e.advance(&s, &Action::null(4)).unwrap();
        assert!((n.values[0] - 4.5).abs() < 1e-12);
        assert_eq!(n.values[2], -1.0);
    }

    #[test]
    fn rejects_active_action_without_impulses() {
        let e = env(ObsMode::State);
        let s = e.initial_state(0);
        assert!(e.advance(&s, &Action::one_hot(12, 0)).is_err());
        assert!(e.advance(&s, &Action::null(11)).is_err());
    }

    #[test]
    fn render_draws_each_body_in_its_colour() {
        let e = env(ObsMode::Pixels);
        let s = SimState::new(vec![0.0, 0.0, 0.0, 0.0, -3.0, 2.0, 0.0, 0.0, 3.0, -3.0, 0.0, 0.0], 0);
        let img = e.render(&s);
        assert_eq!((img.height, img.width, img.channels), (50, 50, 3));
        let (py, px) = e.to_pixel(-3.0, 2.0);
        assert_eq!(img.get(py as usize, px as usize, 1), PALETTE[1][1]);
        assert_eq!(img, e.render(&s));
    }
}
