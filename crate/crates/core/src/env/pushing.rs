//! Block pushing on a small grid: each action pushes one object by one cell.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{PixelBuffer, PALETTE};
use super::{sample_one_hot, Action, EnvConfig, Environment, ObsMode, SimState};
use crate::error::{Error, Result};

/// Push directions; action index is `object * 4 + direction`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Right = 0,
    Left = 1,
    Down = 2,
    Up = 3,
}

impl Direction {
    pub fn offset(self) -> (i64, i64) {
        match self {
            Direction::Right => (1, 0),
            Direction::Left => (-1, 0),
            Direction::Down => (0, 1),
            Direction::Up => (0, -1),
        }
    }

    fn from_index(i: usize) -> Self {
        [Direction::Right, Direction::Left, Direction::Down, Direction::Up][i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PushingConfig {
    pub grid: usize,
    pub objects: usize,
    pub obs_mode: ObsMode,
    pub cell_px: usize,
}

impl Default for PushingConfig {
    fn default() -> Self {
        Self {
            grid: 5,
            objects: 5,
            obs_mode: ObsMode::Pixels,
            cell_px: 10,
        }
    }
}

pub struct PushingEnv {
    cfg: PushingConfig,
}

impl PushingEnv {
    pub fn new(cfg: PushingConfig) -> Result<Self> {
        if cfg.objects == 0 || cfg.grid == 0 || cfg.objects > cfg.grid * cfg.grid {
            return Err(Error::config(format!(
                "pushing-grid cannot place {} objects on a {}×{} grid",
                cfg.objects, cfg.grid, cfg.grid
            )));
        }
        Ok(Self { cfg })
    }

    /// Action pushing `object` in `dir`.
    pub fn push_action(&self, object: usize, dir: Direction) -> Action {
        Action::one_hot(self.action_dim(), object * 4 + dir as usize)
    }

    fn cell(&self, s: &[f64], k: usize) -> (i64, i64) {
        (s[2 * k].round() as i64, s[2 * k + 1].round() as i64)
    }

    fn occupied(&self, s: &[f64], x: i64, y: i64) -> bool {
        (0..self.cfg.objects).any(|k| self.cell(s, k) == (x, y))
    }
}

impl Environment for PushingEnv {
    fn config(&self) -> EnvConfig {
        EnvConfig::PushingGrid(self.cfg.clone())
    }

    fn state_dim(&self) -> usize {
        2 * self.cfg.objects
    }

    fn num_objects(&self) -> usize {
        self.cfg.objects
    }

    fn vars_per_object(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        4 * self.cfg.objects
    }

    fn obs_mode(&self) -> ObsMode {
        self.cfg.obs_mode
    }

    fn pixel_shape(&self) -> (usize, usize, usize) {
        let side = self.cfg.grid * self.cfg.cell_px;
        (side, side, 3)
    }

    fn initial_state(&self, seed: u64) -> SimState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = self.cfg.grid;
        let mut cells: Vec<usize> = (0..g * g).collect();
        cells.shuffle(&mut rng);
        let values = cells[..self.cfg.objects]
            .iter()
            .flat_map(|&c| [(c % g) as f64, (c / g) as f64])
            .collect();
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
            let (obj, dir) = (k / 4, Direction::from_index(k % 4));
            let (x, y) = self.cell(&s, obj);
            let (dx, dy) = dir.offset();
            let (nx, ny) = (x + dx, y + dy);
            let g = self.cfg.grid as i64;
            let inside = (0..g).contains(&nx) && (0..g).contains(&ny);
            if inside && !self.occupied(&s, nx, ny) {
                s[2 * obj] = nx as f64;
                s[2 * obj + 1] = ny as f64;
            }
        }
        Ok(SimState::new(s, state.time_index + 1))
    }

    fn render(&self, state: &SimState) -> PixelBuffer {
        let (h, w, c) = self.pixel_shape();
        let mut img = PixelBuffer::blank(h, w, c);
        let px = self.cfg.cell_px as i64;
        for k in 0..self.cfg.objects.min(state.dim() / 2) {
            let (x, y) = self.cell(&state.values, k);
            img.fill_rect(y * px, x * px, px, px, &PALETTE[k % PALETTE.len()]);
        }
        img
    }

    fn sample_action(&self, rng: &mut dyn rand::RngCore) -> Action {
        sample_one_hot(rng, self.action_dim())
    }

    fn is_valid(&self, state: &SimState) -> bool {
        if state.dim() != self.state_dim() || !state.is_finite() {
            return false;
        }
        let g = self.cfg.grid as f64;
        let mut seen = std::collections::HashSet::new();
        (0..self.cfg.objects).all(|k| {
            let (x, y) = (state.values[2 * k], state.values[2 * k + 1]);
            x.fract() == 0.0
                && y.fract() == 0.0
                && (0.0..g).contains(&x)
                && (0.0..g).contains(&y)
                && seen.insert((x as i64, y as i64))
        })
    }

    fn magnitude_levels(&self) -> [f64; 3] {
        [1.0, 2.0, 3.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> PushingEnv {
        PushingEnv::new(PushingConfig::default()).unwrap()
    }

    #[test]
    fn reset_dimension_and_determinism() {
        let e = env();
        let (s, o) = e.reset(0);
        assert_eq!(s.dim(), 10);
        assert!(e.is_valid(&s));
        assert_eq!(e.reset(0), (s, o));
    }

    #[test]
    fn push_right_into_empty_cell() {
        let e = env();
        let s = SimState::new(vec![2.0, 2.0, 0.0, 0.0, 4.0, 4.0, 0.0, 4.0, 4.0, 0.0], 0);
        let n = e.advance(&s, &e.push_action(0, Direction::Right)).unwrap();
        assert_eq!((n.values[0], n.values[1]), (3.0, 2.0));
    }

    #[test]
    fn push_into_occupied_or_wall_is_blocked() {
        let e = env();
        let s = SimState::new(vec![2.0, 2.0, 3.0, 2.0, 4.0, 4.0, 0.0, 4.0, 4.0, 0.0], 0);
        let n = e.advance(&s, &e.push_action(0, Direction::Right)).unwrap();
        assert_eq!(n.values, s.values);
        let n = e.advance(&s, &e.push_action(4, Direction::Up)).unwrap();
        assert_eq!(n.values, s.values);
    }

    #[test]
    fn occupancy_is_conserved() {
        let e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = e.initial_state(1);
        for _ in 0..300 {
            let a = e.sample_action(&mut rng);
            s = e.advance(&s, &a).unwrap();
            assert!(e.is_valid(&s));
        }
    }

    #[test]
    fn sprite_moves_by_one_cell_width() {
        let e = env();
        let s = SimState::new(vec![2.0, 2.0, 0.0, 0.0, 4.0, 4.0, 0.0, 4.0, 4.0, 0.0], 0);
        let n = e.advance(&s, &e.push_action(0, Direction::Right)).unwrap();
        let before = object_centroid(&e.render(&s), 0);
        let after = object_centroid(&e.render(&n), 0);
        assert_eq!(after.0, before.0);
        assert_eq!(after.1 - before.1, 10.0);
    }

    fn object_centroid(img: &PixelBuffer, k: usize) -> (f64, f64) {
        let colour = PALETTE[k];
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
        for y in 0..img.height {
            for x in 0..img.width {
                if (0..3).all(|c| img.get(y, x, c) == colour[c]) {
                    sy += y as f64 + 0.5;
                    sx += x as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        (sy / n, sx / n)
    }

    #[test]
    fn empty_scene_renders_background() {
        let e = PushingEnv::new(PushingConfig {
            objects: 1,
            ..Default::default()
        })
        .unwrap();
        let img = e.render(&SimState::new(vec![], 0));
        assert!(img.data.iter().all(|&v| v == 0.0));
    }
}
