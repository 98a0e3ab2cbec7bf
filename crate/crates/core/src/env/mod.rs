//! Deterministic simulators with ground-truth state access and additive
//! do-interventions.

mod dataset;
mod jacobian;
mod oscillator;
mod physics;
mod pushing;
mod render;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{episode_seed, Dataset, DatasetMeta, Episode, Split};
pub use jacobian::{jacobian_template, JacobianTemplate};
pub use oscillator::{OscillatorConfig, OscillatorEnv};
pub use physics::{PhysicsConfig, PhysicsEnv};
pub use pushing::{PushingConfig, PushingEnv, Direction};
pub use render::{PixelBuffer, PALETTE};

/// Simulator state `s_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub values: Vec<f64>,
    pub time_index: usize,
}

impl SimState {
    pub fn new(values: Vec<f64>, time_index: usize) -> Self {
        Self { values, time_index }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObsMode {
    Pixels,
    State,
}

/// Observation `o_t`: either a rendered image or a copy of the state vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    Pixels(PixelBuffer),
    State(Vec<f64>),
}

impl Observation {
    pub fn mode(&self) -> ObsMode {
        match self {
            Observation::Pixels(_) => ObsMode::Pixels,
            Observation::State(_) => ObsMode::State,
        }
    }

    /// Flat model input. Pixels are emitted channel-major (`C·H·W`).
    pub fn features(&self) -> Vec<f64> {
        match self {
            Observation::Pixels(p) => p.channel_major(),
            Observation::State(s) => s.clone(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Observation::Pixels(p) => p.data.len(),
            Observation::State(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One-hot action `a_t`, or the all-zero null action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub encoding: Vec<f64>,
    pub null_flag: bool,
}

impl Action {
    pub fn null(dim: usize) -> Self {
        Self {
            encoding: vec![0.0; dim],
            null_flag: true,
        }
    }

    pub fn one_hot(dim: usize, index: usize) -> Self {
        let mut encoding = vec![0.0; dim];
        encoding[index] = 1.0;
        Self {
            encoding,
            null_flag: false,
        }
    }

    /// Index of the active entry, `None` for the null action.
    pub fn active(&self) -> Option<usize> {
        if self.null_flag {
            None
        } else {
            self.encoding.iter().position(|&x| x == 1.0)
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.encoding.len() != dim {
            return Err(Error::input(format!(
                "action has length {}, expected {dim}",
                self.encoding.len()
            )));
        }
        let nonzero: Vec<f64> = self.encoding.iter().copied().filter(|&x| x != 0.0).collect();
        match (self.null_flag, nonzero.as_slice()) {
            (true, []) => Ok(()),
            (false, [x]) if *x == 1.0 => Ok(()),
            _ => Err(Error::input(format!(
                "invalid action encoding (null_flag={}, nonzero entries {:?})",
                self.null_flag, nonzero
            ))),
        }
    }
}

/// An addressed state coordinate: object `i`, variable `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub object: usize,
    pub variable: usize,
}

/// `do(s^(i,j)) := s^(i,j) + Δ` at time `t0`, on one or several coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub targets: Vec<Target>,
    pub magnitude: f64,
    pub t0: usize,
}

impl InterventionSpec {
    pub fn single(object: usize, variable: usize, magnitude: f64, t0: usize) -> Self {
        Self {
            targets: vec![Target { object, variable }],
            magnitude,
            t0,
        }
    }

    pub fn object_index(&self) -> usize {
        self.targets[0].object
    }

    pub fn variable_index(&self) -> usize {
        self.targets[0].variable
    }
}

/// Environment selection plus its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum EnvConfig {
    PhysicsNbody(PhysicsConfig),
    PushingGrid(PushingConfig),
    HarmonicOscillator(OscillatorConfig),
}

impl EnvConfig {
    /// Registered environment names.
    pub const NAMES: [&'static str; 3] = ["physics-nbody", "pushing-grid", "harmonic-oscillator"];

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "physics-nbody" | "physics" => Ok(EnvConfig::PhysicsNbody(PhysicsConfig::default())),
            "pushing-grid" | "pushing" => Ok(EnvConfig::PushingGrid(PushingConfig::default())),
            "harmonic-oscillator" | "oscillator" => {
                Ok(EnvConfig::HarmonicOscillator(OscillatorConfig::default()))
            }
            other => Err(Error::config(format!(
                "unknown environment '{other}'; registered: {}",
                Self::NAMES.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::PhysicsNbody(_) => "physics-nbody",
            EnvConfig::PushingGrid(_) => "pushing-grid",
            EnvConfig::HarmonicOscillator(_) => "harmonic-oscillator",
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvConfig::PhysicsNbody(c) => Box::new(PhysicsEnv::new(c.clone())?),
            EnvConfig::PushingGrid(c) => Box::new(PushingEnv::new(c.clone())?),
            EnvConfig::HarmonicOscillator(c) => Box::new(OscillatorEnv::new(c.clone())?),
        })
    }

    pub fn obs_mode(&self) -> ObsMode {
        match self {
            EnvConfig::PhysicsNbody(c) => c.obs_mode,
            EnvConfig::PushingGrid(c) => c.obs_mode,
            EnvConfig::HarmonicOscillator(c) => c.obs_mode,
        }
    }

    pub fn set_obs_mode(&mut self, mode: ObsMode) {
        match self {
            EnvConfig::PhysicsNbody(c) => c.obs_mode = mode,
            EnvConfig::PushingGrid(c) => c.obs_mode = mode,
            EnvConfig::HarmonicOscillator(c) => c.obs_mode = mode,
        }
    }
}

/// Common simulator interface.
pub trait Environment: Send + Sync {
    fn config(&self) -> EnvConfig;
    fn state_dim(&self) -> usize;
    fn num_objects(&self) -> usize;
    fn vars_per_object(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn obs_mode(&self) -> ObsMode;
    /// `(height, width, channels)` of rendered images.
    fn pixel_shape(&self) -> (usize, usize, usize);

    /// Initial state for `seed`.
    fn initial_state(&self, seed: u64) -> SimState;

    /// Deterministic transition of the state vector (no observation).
    fn advance(&self, state: &SimState, action: &Action) -> Result<SimState>;

    /// Rasterised image of a state.
    fn render(&self, state: &SimState) -> PixelBuffer;

    /// Action used when generating episodes.
    fn sample_action(&self, rng: &mut dyn rand::RngCore) -> Action;

    /// Continuous-time vector field `f(s)`; `None` for discrete environments.
    fn vector_field(&self, _s: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Integration step used by `advance` for continuous environments.
    fn sim_dt(&self) -> f64 {
        1.0
    }

    /// Whether a (possibly intervened) state is admissible.
    fn is_valid(&self, state: &SimState) -> bool {
        state.is_finite() && state.dim() == self.state_dim()
    }

    /// Small / medium / large intervention magnitudes.
    fn magnitude_levels(&self) -> [f64; 3];

    fn reset(&self, seed: u64) -> (SimState, Observation) {
        let s = self.initial_state(seed);
        let o = self.observe(&s);
        (s, o)
    }

    fn step(&self, state: &SimState, action: &Action) -> Result<(SimState, Observation)> {
        let next = self.advance(state, action)?;
        let o = self.observe(&next);
        Ok((next, o))
    }

    fn observe(&self, state: &SimState) -> Observation {
        match self.obs_mode() {
            ObsMode::Pixels => Observation::Pixels(self.render(state)),
            ObsMode::State => Observation::State(state.values.clone()),
        }
    }

    fn obs_dim(&self) -> usize {
        match self.obs_mode() {
            ObsMode::Pixels => {
                let (h, w, c) = self.pixel_shape();
                h * w * c
            }
            ObsMode::State => self.state_dim(),
        }
    }

    fn coordinate(&self, target: Target) -> Result<usize> {
        if target.object >= self.num_objects() || target.variable >= self.vars_per_object() {
            return Err(Error::input(format!(
                "intervention target (object {}, variable {}) outside {}×{} state layout",
                target.object,
                target.variable,
                self.num_objects(),
                self.vars_per_object()
            )));
        }
        Ok(target.object * self.vars_per_object() + target.variable)
    }

    fn apply_intervention(&self, state: &SimState, spec: &InterventionSpec) -> Result<SimState> {
        apply_intervention(state, spec, self.num_objects(), self.vars_per_object())
    }

    /// Rolls the intervened state forward `horizon` steps under `actions`.
    fn resimulate_counterfactual(
        &self,
        prefix_state: &SimState,
        spec: &InterventionSpec,
        actions: &[Action],
        horizon: usize,
    ) -> Result<Vec<(SimState, Observation)>> {
        if horizon == 0 {
            return Err(Error::input("counterfactual horizon must be ≥ 1"));
        }
        if actions.len() < horizon {
            return Err(Error::input(format!(
                "need {horizon} actions for the counterfactual rollout, got {}",
                actions.len()
            )));
        }
        let mut state = self.apply_intervention(prefix_state, spec)?;
        let mut out = Vec::with_capacity(horizon);
        for a in &actions[..horizon] {
            let (next, obs) = self.step(&state, a)?;
            out.push((next.clone(), obs));
            state = next;
        }
        Ok(out)
    }
}

/// Additive intervention on a `objects × vars` state layout. The input state is
/// left untouched.
pub fn apply_intervention(
    state: &SimState,
    spec: &InterventionSpec,
    objects: usize,
    vars: usize,
) -> Result<SimState> {
    let mut out = state.clone();
    for t in &spec.targets {
        if t.object >= objects || t.variable >= vars {
            return Err(Error::input(format!(
                "intervention target (object {}, variable {}) outside {objects}×{vars} state layout",
                t.object, t.variable
            )));
        }
        let k = t.object * vars + t.variable;
        if k >= out.values.len() {
            return Err(Error::input(format!("coordinate {k} outside state of length {}", out.values.len())));
        }
        out.values[k] += spec.magnitude;
    }
    Ok(out)
}

pub(crate) fn sample_one_hot(rng: &mut dyn rand::RngCore, dim: usize) -> Action {
    Action::one_hot(dim, rng.gen_range(0..dim))
}
