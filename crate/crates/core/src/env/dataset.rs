//! Episode datasets: generation, train/val/test split and on-disk layout.
//!
//! ```text
//! <dir>/meta.json
//! <dir>/episodes/ep_00000.safetensors
//! ```

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Action, EnvConfig, Environment, ObsMode, Observation, PixelBuffer, SimState};
use crate::archive::{Archive, NamedArray};
use crate::error::{Error, Result};

pub const EPISODE_KIND: &str = "cwlab-episode";
pub const DATASET_VERSION: u32 = 1;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-episode seed; independent of generation order.
pub fn episode_seed(master: u64, index: usize) -> u64 {
    splitmix64(master ^ splitmix64(index as u64 ^ 0xA5A5_5A5A_C3C3_3C3C))
}

/// One trajectory: `T + 1` states and observations, `T` actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub index: usize,
    pub seed: u64,
    pub states: Vec<SimState>,
    pub actions: Vec<Action>,
    pub obs_mode: ObsMode,
    pub pixel_shape: (usize, usize, usize),
    /// Quantised frames (pixel mode only).
    pub frames: Vec<Vec<u8>>,
}

impl Episode {
    pub fn generate(env: &dyn Environment, master_seed: u64, index: usize, length: usize) -> Result<Self> {
        let seed = episode_seed(master_seed, index);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
        let mut state = env.initial_state(seed);
        let mut states = Vec::with_capacity(length + 1);
        let mut actions = Vec::with_capacity(length);
        states.push(state.clone());
        for _ in 0..length {
            let a = env.sample_action(&mut rng);
            state = env.advance(&state, &a)?;
            if !state.is_finite() {
                return Err(Error::numeric(format!("episode {index} diverged")));
            }
            states.push(state.clone());
            actions.push(a);
        }
        let frames = match env.obs_mode() {
            ObsMode::Pixels => states.iter().map(|s| env.render(s).to_u8()).collect(),
            ObsMode::State => Vec::new(),
        };
        Ok(Self {
            index,
            seed,
            states,
            actions,
            obs_mode: env.obs_mode(),
            pixel_shape: env.pixel_shape(),
            frames,
        })
    }

    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn observation(&self, t: usize) -> Observation {
        match self.obs_mode {
            ObsMode::Pixels => {
                let (h, w, c) = self.pixel_shape;
                Observation::Pixels(PixelBuffer::from_u8(h, w, c, &self.frames[t]))
            }
            ObsMode::State => Observation::State(self.states[t].values.clone()),
        }
    }

    pub fn features(&self, t: usize) -> Vec<f64> {
        self.observation(t).features()
    }

    fn to_archive(&self) -> Archive {
        let header = json!({
            "index": self.index,
            "seed": self.seed,
            "obs_mode": self.obs_mode,
            "pixel_shape": [self.pixel_shape.0, self.pixel_shape.1, self.pixel_shape.2],
        });
        let mut a = Archive::new(EPISODE_KIND, DATASET_VERSION, header);
        let d = self.states.first().map_or(0, |s| s.dim());
        a.insert(
            "states",
            NamedArray::f64(
                vec![self.states.len(), d],
                self.states.iter().flat_map(|s| s.values.iter().copied()).collect(),
            ),
        );
        let ad = self.actions.first().map_or(0, |x| x.encoding.len());
        a.insert(
            "actions",
            NamedArray::f64(
                vec![self.actions.len(), ad],
                self.actions.iter().flat_map(|x| x.encoding.iter().copied()).collect(),
            ),
        );
        a.insert(
            "null_flags",
            NamedArray::u8(vec![self.actions.len()], self.actions.iter().map(|x| x.null_flag as u8).collect()),
        );
        if self.obs_mode == ObsMode::Pixels {
            let (h, w, c) = self.pixel_shape;
            a.insert(
                "observations",
                NamedArray::u8(vec![self.frames.len(), h, w, c], self.frames.concat()),
            );
        } else {
            a.insert("observations", a.get("states").expect("just inserted").clone());
        }
        a
    }

    fn from_archive(a: &Archive) -> Result<Self> {
        let h = &a.header;
        let get_u64 = |k: &str| {
            h.get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::format(format!("episode header lacks '{k}'")))
        };
        let obs_mode: ObsMode = serde_json::from_value(h["obs_mode"].clone())
            .map_err(|e| Error::format(format!("episode obs_mode: {e}")))?;
        let ps: Vec<usize> = serde_json::from_value(h["pixel_shape"].clone())
            .map_err(|e| Error::format(format!("episode pixel_shape: {e}")))?;
        if ps.len() != 3 {
            return Err(Error::format("pixel_shape must have three entries"));
        }
        let states_arr = a.get("states")?;
        let sv = states_arr.as_f64()?;
        let d = states_arr.shape.get(1).copied().unwrap_or(0);
        let states: Vec<SimState> = if d == 0 {
            vec![SimState::new(vec![], 0); states_arr.shape[0]]
        } else {
            sv.chunks(d).enumerate().map(|(t, c)| SimState::new(c.to_vec(), t)).collect()
        };
        let actions_arr = a.get("actions")?;
        let ad = actions_arr.shape.get(1).copied().unwrap_or(0);
        let flags = a.get("null_flags")?.as_u8()?;
        let enc = actions_arr.as_f64()?;
        let actions = (0..flags.len())
            .map(|t| Action {
                encoding: enc[t * ad..(t + 1) * ad].to_vec(),
                null_flag: flags[t] != 0,
            })
            .collect();
        let frames = if obs_mode == ObsMode::Pixels {
            let px = ps[0] * ps[1] * ps[2];
            a.get("observations")?.as_u8()?.chunks(px).map(<[u8]>::to_vec).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            index: get_u64("index")? as usize,
            seed: get_u64("seed")?,
            states,
            actions,
            obs_mode,
            pixel_shape: (ps[0], ps[1], ps[2]),
            frames,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub env: EnvConfig,
    pub master_seed: u64,
    pub num_episodes: usize,
    pub episode_length: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub obs_mode: ObsMode,
    pub obs_dim: usize,
    pub pixel_shape: [usize; 3],
    pub episode_seeds: Vec<u64>,
}

/// Deterministic episode-level split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// 80/10/10 split of a seeded permutation. Every part gets at least one
    /// episode when `n ≥ 3`.
    pub fn new(n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5EED)));
        let mut n_val = n / 10;
        let mut n_test = n / 10;
        if n >= 3 {
            n_val = n_val.max(1);
            n_test = n_test.max(1);
        }
        let n_train = n - n_val - n_test;
        let mut train = idx[..n_train].to_vec();
        let mut val = idx[n_train..n_train + n_val].to_vec();
        let mut test = idx[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Self { train, val, test }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn generate(env_cfg: &EnvConfig, num_episodes: usize, episode_length: usize, seed: u64) -> Result<Self> {
        if num_episodes == 0 {
            return Err(Error::input("dataset needs at least one episode"));
        }
        if episode_length == 0 {
            return Err(Error::input("episodes need at least one transition"));
        }
        let env = env_cfg.build()?;
        let episodes = (0..num_episodes)
            .map(|i| Episode::generate(env.as_ref(), seed, i, episode_length))
            .collect::<Result<Vec<_>>>()?;
        let (h, w, c) = env.pixel_shape();
        let meta = DatasetMeta {
            schema_version: DATASET_VERSION,
            env: env_cfg.clone(),
            master_seed: seed,
            num_episodes,
            episode_length,
            state_dim: env.state_dim(),
            action_dim: env.action_dim(),
            obs_mode: env.obs_mode(),
            obs_dim: env.obs_dim(),
            pixel_shape: [h, w, c],
            episode_seeds: episodes.iter().map(|e| e.seed).collect(),
        };
        Ok(Self { meta, episodes })
    }

    pub fn env(&self) -> Result<Box<dyn Environment>> {
        self.meta.env.build()
    }

    pub fn split(&self) -> Split {
        Split::new(self.episodes.len(), self.meta.master_seed)
    }

    pub fn episode_path(dir: &Path, index: usize) -> PathBuf {
        dir.join("episodes").join(format!("ep_{index:05}.safetensors"))
    }

    /// Writes the dataset. A non-empty `dir` is refused unless `force`.
    pub fn save(&self, dir: &Path, force: bool) -> Result<()> {
        if dir.exists() && std::fs::read_dir(dir)?.next().is_some() {
            if !force {
                return Err(Error::validation(format!(
                    "{} exists and is not empty (use --force to overwrite)",
                    dir.display()
                )));
            }
            let ep = dir.join("episodes");
            if ep.exists() {
                std::fs::remove_dir_all(&ep)?;
            }
        }
        std::fs::create_dir_all(dir.join("episodes"))?;
        for e in &self.episodes {
            e.to_archive().write(&Self::episode_path(dir, e.index))?;
        }
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = std::fs::read_to_string(&meta_path)
            .map_err(|e| Error::input(format!("cannot read {}: {e}", meta_path.display())))?;
        let meta: DatasetMeta = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", meta_path.display())))?;
        if meta.schema_version != DATASET_VERSION {
            return Err(Error::format(format!(
                "dataset schema version {} is not supported (expected {DATASET_VERSION})",
                meta.schema_version
            )));
        }
        let episodes = (0..meta.num_episodes)
            .map(|i| {
                let a = Archive::read(&Self::episode_path(dir, i), EPISODE_KIND, DATASET_VERSION)?;
                Episode::from_archive(&a)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { meta, episodes })
    }

    /// Per-dimension mean of all states.
    pub fn mean_state(&self) -> SimState {
        let d = self.meta.state_dim;
        let mut m = vec![0.0; d];
        let mut n = 0.0;
        for e in &self.episodes {
            for s in &e.states {
                for (acc, v) in m.iter_mut().zip(&s.values) {
                    *acc += v;
                }
                n += 1.0;
            }
        }
        SimState::new(m.into_iter().map(|x| x / n).collect(), 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{PhysicsConfig, PushingConfig};

    #[test]
    fn episode_seeds_do_not_depend_on_order() {
        assert_eq!(episode_seed(42, 7), episode_seed(42, 7));
        assert_ne!(episode_seed(42, 7), episode_seed(42, 8));
        assert_ne!(episode_seed(42, 7), episode_seed(43, 7));
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let s = Split::new(50, 3);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!((s.val.len(), s.test.len()), (5, 5));
        assert_eq!(s, Split::new(50, 3));
    }

    #[test]
    fn dataset_round_trip_pixels() {
        let cfg = EnvConfig::PushingGrid(PushingConfig::default());
        let ds = Dataset::generate(&cfg, 3, 4, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), true).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.meta, ds.meta);
        assert_eq!(back.episodes, ds.episodes);
        assert!(ds.save(dir.path(), false).is_err());
    }

    #[test]
    fn dataset_round_trip_state_mode() {
        let cfg = EnvConfig::PhysicsNbody(PhysicsConfig {
            obs_mode: ObsMode::State,
            ..Default::default()
        });
        let ds = Dataset::generate(&cfg, 2, 5, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), false).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.episodes, ds.episodes);
        assert_eq!(back.episodes[1].features(3), ds.episodes[1].states[3].values);
    }
}
