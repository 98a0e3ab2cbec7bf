//! Chain of unit-mass harmonic oscillators with nearest-neighbour springs.
//!
//! Per-oscillator layout is `[p, v]`; `f(p, v) = (v, −k·p − c·Σ_nbr (p − p_nbr))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{PixelBuffer, PALETTE};
use super::{Action, EnvConfig, Environment, ObsMode, SimState};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OscillatorConfig {
    pub oscillators: usize,
    pub stiffness: f64,
    pub coupling: f64,
    pub dt: f64,
    pub init_amplitude: f64,
    pub obs_mode: ObsMode,
    pub image_size: usize,
}

impl Default for OscillatorConfig {
    fn default() -> Self {
        Self {
            oscillators: 1,
            stiffness: 1.0,
            coupling: 0.5,
            dt: 0.1,
            init_amplitude: 1.0,
            obs_mode: ObsMode::State,
            image_size: 32,
        }
    }
}

pub struct OscillatorEnv {
    cfg: OscillatorConfig,
}

impl OscillatorEnv {
    pub fn new(cfg: OscillatorConfig) -> Result<Self> {
        if cfg.oscillators == 0 {
            return Err(Error::config("harmonic-oscillator needs at least one oscillator"));
        }
        if !(cfg.dt > 0.0) || !cfg.dt.is_finite() {
            return Err(Error::config(format!("dt must be positive, got {}", cfg.dt)));
        }
        Ok(Self { cfg })
    }
}

impl Environment for OscillatorEnv {
    fn config(&self) -> EnvConfig {
        EnvConfig::HarmonicOscillator(self.cfg.clone())
    }

    fn state_dim(&self) -> usize {
        2 * self.cfg.oscillators
    }

    fn num_objects(&self) -> usize {
        self.cfg.oscillators
    }

    fn vars_per_object(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        self.cfg.oscillators
    }

    fn obs_mode(&self) -> ObsMode {
        self.cfg.obs_mode
    }

    fn pixel_shape(&self) -> (usize, usize, usize) {
        (self.cfg.image_size, self.cfg.image_size, 3)
    }

    fn initial_state(&self, seed: u64) -> SimState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = self.cfg.init_amplitude;
        let values = (0..self.state_dim()).map(|_| rng.gen_range(-a..=a)).collect();
        SimState::new(values, 0)
    }

    fn vector_field(&self, s: &[f64]) -> Option<Vec<f64>> {
        let n = self.cfg.oscillators;
        let (k, c) = (self.cfg.stiffness, self.cfg.coupling);
        let mut f = vec![0.0; 2 * n];
        for i in 0..n {
            let p = s[2 * i];
            let mut acc = -k * p;
            if i > 0 {
                acc -= c * (p - s[2 * (i - 1)]);
            }
            if i + 1 < n {
                acc -= c * (p - s[2 * (i + 1)]);
            }
            f[2 * i] = s[2 * i + 1];
            f[2 * i + 1] = acc;
        }
        Some(f)
    }

    fn sim_dt(&self) -> f64 {
        self.cfg.dt
    }

    fn advance(&self, state: &SimState, action: &Action) -> Result<SimState> {
        if !action.null_flag {
            return Err(Error::input("harmonic-oscillator accepts only the null action"));
        }
        action.validate(self.action_dim())?;
        if state.dim() != self.state_dim() {
            return Err(Error::input(format!(
                "state has dimension {}, expected {}",
                state.dim(),
                self.state_dim()
            )));
        }
        let f = self.vector_field(&state.values).expect("continuous dynamics");
        let values = state
            .values
            .iter()
            .zip(&f)
            .map(|(s, d)| s + self.cfg.dt * d)
            .collect();
        Ok(SimState::new(values, state.time_index + 1))
    }

    fn render(&self, state: &SimState) -> PixelBuffer {
        let size = self.cfg.image_size;
        let mut img = PixelBuffer::blank(size, size, 3);
        let n = self.cfg.oscillators.min(state.dim() / 2);
        let span = 3.0 * self.cfg.init_amplitude.max(1e-6);
        for i in 0..n {
            let row = (i as f64 + 0.5) * size as f64 / self.cfg.oscillators as f64;
            let col = (0.5 + state.values[2 * i] / (2.0 * span)) * size as f64;
            img.fill_disc(row, col, (size as f64 / 16.0).max(1.0), &PALETTE[i % PALETTE.len()]);
        }
        img
    }

    fn sample_action(&self, _rng: &mut dyn rand::RngCore) -> Action {
        Action::null(self.action_dim())
    }

    fn magnitude_levels(&self) -> [f64; 3] {
        [0.5, 1.5, 3.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euler_step_matches_hand_evaluation() {
        let e = OscillatorEnv::new(OscillatorConfig::default()).unwrap();
        let s = SimState::new(vec![1.0, 0.0], 0);
        let n = e.advance(&s, &Action::null(1)).unwrap();
        assert_eq!(n.values, vec![1.0, -0.1]);
        assert_eq!(n.time_index, 1);
    }

    #[test]
    fn coupled_chain_dimension() {
        let e = OscillatorEnv::new(OscillatorConfig {
            oscillators: 3,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(e.reset(1).0.dim(), 6);
        assert!(e.advance(&e.initial_state(1), &Action::one_hot(3, 0)).is_err());
    }
}
