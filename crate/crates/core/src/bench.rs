//! Counterfactual query groups: a factual prefix, a do-intervention at `t0`,
//! re-simulated futures and retrieval candidate sets.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{Archive, NamedArray};
use crate::env::{
    Action, Dataset, EnvConfig, Environment, Episode, InterventionSpec, ObsMode, Observation, PixelBuffer, SimState,
    Target,
};
use crate::error::{Error, Result};

pub const BENCH_KIND: &str = "cwlab-benchmark";
pub const BENCH_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// One coordinate: `(obj_index, axis)`.
    Single,
    /// The same axis of every object.
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub max_samples: usize,
    pub num_candidates: usize,
    pub horizons: Vec<usize>,
    /// Intervention magnitudes, cycled over groups.
    pub magnitudes: Vec<f64>,
    pub obj_index: usize,
    /// Variable index within the object (physics: 0 = x, 1 = y).
    pub axis: usize,
    pub target_mode: TargetMode,
    /// Include the query's own factual future among the counterfactual candidates.
    pub hard_negative: bool,
    /// First admissible `t0`.
    pub min_t0: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            max_samples: 2000,
            num_candidates: 11,
            horizons: vec![1, 5, 10],
            magnitudes: vec![3.0],
            obj_index: 0,
            axis: 0,
            target_mode: TargetMode::Single,
            hard_negative: true,
            min_t0: 3,
            seed: 42,
        }
    }
}

impl BenchSpec {
    pub fn h_max(&self) -> usize {
        self.horizons.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_candidates < 2 {
            return Err(Error::config("benchmark needs at least 2 candidates"));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::config("horizons must be a non-empty set of positive steps"));
        }
        if self.magnitudes.is_empty() {
            return Err(Error::config("at least one intervention magnitude is required"));
        }
        if self.max_samples == 0 {
            return Err(Error::config("max_samples must be ≥ 1"));
        }
        Ok(())
    }

    /// Parses `axis` names `x`/`y` or a numeric index.
    pub fn parse_axis(text: &str) -> Result<usize> {
        match text {
            "x" => Ok(0),
            "y" => Ok(1),
            other => other.parse().map_err(|_| Error::config(format!("bad axis '{other}'"))),
        }
    }
}

/// Observations referenced by index from the query groups.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTable {
    pub mode: ObsMode,
    pub pixel_shape: (usize, usize, usize),
    pub dim: usize,
    states: Vec<Vec<f64>>,
    pixels: Vec<Vec<u8>>,
}

impl FrameTable {
    fn new(mode: ObsMode, pixel_shape: (usize, usize, usize), dim: usize) -> Self {
        Self { mode, pixel_shape, dim, states: Vec::new(), pixels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.states.len() + self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&mut self, obs: &Observation) -> usize {
        match obs {
            Observation::State(v) => self.states.push(v.clone()),
            Observation::Pixels(p) => self.pixels.push(p.to_u8()),
        }
        self.len() - 1
    }

    pub fn observation(&self, i: usize) -> Observation {
        match self.mode {
            ObsMode::State => Observation::State(self.states[i].clone()),
            ObsMode::Pixels => {
                let (h, w, c) = self.pixel_shape;
                Observation::Pixels(PixelBuffer::from_u8(h, w, c, &self.pixels[i]))
            }
        }
    }

    pub fn features(&self, i: usize) -> Vec<f64> {
        self.observation(i).features()
    }

    /// Exact equality of two stored frames.
    pub fn same(&self, a: usize, b: usize) -> bool {
        match self.mode {
            ObsMode::State => self.states[a] == self.states[b],
            ObsMode::Pixels => self.pixels[a] == self.pixels[b],
        }
    }
}

/// One retrieval task: `N` frame indices with the positive at `positive`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub horizon: usize,
    pub frames: Vec<usize>,
    pub positive: usize,
    /// Source episode of each candidate.
    pub episodes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryGroup {
    pub episode_id: usize,
    pub t0: usize,
    pub spec: InterventionSpec,
    /// Frames `o_0..o_t0`.
    pub prefix: Vec<usize>,
    /// Actions `a_0..a_{t0+H−1}`; the first `t0` belong to the prefix.
    pub actions: Vec<Vec<f64>>,
    pub factual_future: Vec<usize>,
    pub cf_future: Vec<usize>,
    /// `o_t0^do`, rendered from the intervened state.
    pub intervened_obs: usize,
    pub state_t0: Vec<f64>,
    pub intervened_state: Vec<f64>,
    pub candidates: Vec<CandidateSet>,
    pub cf_candidates: CandidateSet,
}

impl QueryGroup {
    pub fn prefix_end(&self) -> usize {
        *self.prefix.last().expect("prefix holds o_t0")
    }

    pub fn future_actions(&self, h: usize) -> &[Vec<f64>] {
        &self.actions[self.t0..self.t0 + h]
    }

    pub fn candidate_set(&self, h: usize) -> Option<&CandidateSet> {
        self.candidates.iter().find(|c| c.horizon == h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub spec: BenchSpec,
    pub env: EnvConfig,
    pub dataset_seed: u64,
    pub episode_length: usize,
    pub frames: FrameTable,
    pub groups: Vec<QueryGroup>,
}

/// `N−1` negatives from distinct episodes other than `query`, plus the positive
/// at a uniformly drawn index. Returns `(episode ids, positive index)`, with
/// the query episode at the positive slot.
pub fn sample_candidates<R: Rng>(pool: &[usize], query: usize, n: usize, rng: &mut R) -> Result<(Vec<usize>, usize)> {
    let others: Vec<usize> = pool.iter().copied().filter(|&e| e != query).collect::<BTreeSet<_>>().into_iter().collect();
    if n < 2 {
        return Err(Error::input("candidate lists need N ≥ 2"));
    }
    if others.len() < n - 1 {
        return Err(Error::input(format!(
            "candidate pool has {} episodes besides the query, need {}",
            others.len(),
            n - 1
        )));
    }
    let mut chosen: Vec<usize> = others.choose_multiple(rng, n - 1).copied().collect();
    let pos = rng.gen_range(0..n);
    chosen.insert(pos, query);
    Ok((chosen, pos))
}

fn episode_frames(table: &mut FrameTable, cache: &mut BTreeMap<(usize, usize), usize>, ep: &Episode, e: usize, t: usize) -> usize {
    *cache.entry((e, t)).or_insert_with(|| table.push(&ep.observation(t)))
}

/// Builds up to `max_samples` query groups from every episode of `dataset`.
pub fn build_benchmark(dataset: &Dataset, spec: &BenchSpec) -> Result<Benchmark> {
    spec.validate()?;
    let env = dataset.env()?;
    let h_max = spec.h_max();
    let t_len = dataset.meta.episode_length;
    let short: Vec<usize> = dataset
        .episodes
        .iter()
        .filter(|e| e.len() < spec.min_t0 + h_max + 2)
        .map(|e| e.index)
        .collect();
    if !short.is_empty() {
        return Err(Error::input(format!(
            "episodes too short for t0 ≥ {} and horizon {h_max}: {short:?}",
            spec.min_t0
        )));
    }
    let targets: Vec<Target> = match spec.target_mode {
        TargetMode::Single => vec![Target { object: spec.obj_index, variable: spec.axis }],
        TargetMode::Multi => (0..env.num_objects()).map(|o| Target { object: o, variable: spec.axis }).collect(),
    };
    for t in &targets {
        env.coordinate(*t)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut slots: Vec<(usize, usize)> = (0..dataset.episodes.len())
        .flat_map(|e| (spec.min_t0..=t_len - h_max - 1).map(move |t| (e, t)))
        .collect();
    slots.shuffle(&mut rng);
    let pool: Vec<usize> = (0..dataset.episodes.len()).collect();
    let ps = dataset.episodes[0].pixel_shape;
    let mut frames = FrameTable::new(dataset.meta.obs_mode, ps, env.obs_dim());
    let mut cache = BTreeMap::new();
    let mut groups = Vec::new();
    for (e, t0) in slots {
        if groups.len() == spec.max_samples {
            break;
        }
        let ep = &dataset.episodes[e];
        let magnitude = spec.magnitudes[groups.len() % spec.magnitudes.len()];
        let ispec = InterventionSpec { targets: targets.clone(), magnitude, t0 };
        let s0 = &ep.states[t0];
        let intervened = env.apply_intervention(s0, &ispec)?;
        if !env.is_valid(&intervened) {
            continue;
        }
        let cf = match env.resimulate_counterfactual(s0, &ispec, &ep.actions[t0..], h_max) {
            Ok(cf) => cf,
            Err(Error::Numeric(_)) => continue,
            Err(e) => return Err(e),
        };
        let mut g_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ((e as u64) << 32 | t0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let prefix: Vec<usize> = (0..=t0).map(|t| episode_frames(&mut frames, &mut cache, ep, e, t)).collect();
        let factual_future: Vec<usize> = (1..=h_max).map(|k| episode_frames(&mut frames, &mut cache, ep, e, t0 + k)).collect();
        let cf_future: Vec<usize> = cf.iter().map(|(_, o)| frames.push(o)).collect();
        let intervened_obs = frames.push(&env.observe(&intervened));
        let mut candidates = Vec::new();
        for &h in &spec.horizons {
            let (eps, pos) = sample_candidates(&pool, e, spec.num_candidates, &mut g_rng)?;
            let fr = eps
                .iter()
                .map(|&o| episode_frames(&mut frames, &mut cache, &dataset.episodes[o], o, t0 + h))
                .collect();
            candidates.push(CandidateSet { horizon: h, frames: fr, positive: pos, episodes: eps });
        }
        let one = candidates
            .iter()
            .find(|c| c.horizon == 1)
            .cloned()
            .map_or_else(
                || {
                    let (eps, pos) = sample_candidates(&pool, e, spec.num_candidates, &mut g_rng)?;
                    let fr = eps
                        .iter()
                        .map(|&o| episode_frames(&mut frames, &mut cache, &dataset.episodes[o], o, t0 + 1))
                        .collect();
                    Ok::<_, Error>(CandidateSet { horizon: 1, frames: fr, positive: pos, episodes: eps })
                },
                Ok,
            )?;
        let mut cf_set = one.clone();
        cf_set.frames[cf_set.positive] = cf_future[0];
        if spec.hard_negative && !frames.same(cf_future[0], factual_future[0]) {
            let slot = if cf_set.positive == spec.num_candidates - 1 { spec.num_candidates - 2 } else { spec.num_candidates - 1 };
            cf_set.frames[slot] = factual_future[0];
            cf_set.episodes[slot] = e;
        }
        groups.push(QueryGroup {
            episode_id: ep.index,
            t0,
            spec: ispec,
            prefix,
            actions: ep.actions[..t0 + h_max].iter().map(|a| a.encoding.clone()).collect(),
            factual_future,
            cf_future,
            intervened_obs,
            state_t0: s0.values.clone(),
            intervened_state: intervened.values,
            candidates,
            cf_candidates: cf_set,
        });
    }
    Ok(Benchmark {
        spec: spec.clone(),
        env: dataset.meta.env.clone(),
        dataset_seed: dataset.meta.master_seed,
        episode_length: t_len,
        frames,
        groups,
    })
}

impl Benchmark {
    pub fn env(&self) -> Result<Box<dyn Environment>> {
        self.env.build()
    }

    /// Re-simulates a group's counterfactual future from its episode seed.
    pub fn regenerate_cf(&self, g: &QueryGroup) -> Result<Vec<Observation>> {
        let env = self.env()?;
        let ep = Episode::generate(env.as_ref(), self.dataset_seed, g.episode_id, self.episode_length)?;
        let out = env.resimulate_counterfactual(&ep.states[g.t0], &g.spec, &ep.actions[g.t0..], self.spec.h_max())?;
        Ok(out.into_iter().map(|(_, o)| o).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = json!({
            "spec": self.spec,
            "env": self.env,
            "dataset_seed": self.dataset_seed,
            "episode_length": self.episode_length,
            "obs_mode": self.frames.mode,
            "pixel_shape": [self.frames.pixel_shape.0, self.frames.pixel_shape.1, self.frames.pixel_shape.2],
            "obs_dim": self.frames.dim,
            "groups": self.groups,
        });
        let mut a = Archive::new(BENCH_KIND, BENCH_VERSION, header);
        let n = self.frames.len();
        match self.frames.mode {
            ObsMode::State => a.insert(
                "frames",
                NamedArray::f64(vec![n, self.frames.dim], self.frames.states.iter().flatten().copied().collect()),
            ),
            ObsMode::Pixels => {
                let d = self.frames.pixels.first().map_or(0, Vec::len);
                a.insert("frames", NamedArray::u8(vec![n, d], self.frames.pixels.iter().flatten().copied().collect()))
            }
        }
        a.write(path)
    }
}

/// Reads a benchmark written by [`Benchmark::save`].
pub fn load_benchmark(path: &Path) -> Result<Benchmark> {
    let a = Archive::read(path, BENCH_KIND, BENCH_VERSION)?;
    let field = |k: &str| {
        a.header
            .get(k)
            .cloned()
            .ok_or_else(|| Error::format(format!("benchmark header lacks '{k}'")))
    };
    let parse = |k: &str| -> Result<serde_json::Value> { field(k) };
    let spec: BenchSpec = serde_json::from_value(parse("spec")?).map_err(|e| Error::format(format!("spec: {e}")))?;
    let env: EnvConfig = serde_json::from_value(parse("env")?).map_err(|e| Error::format(format!("env: {e}")))?;
    let groups: Vec<QueryGroup> =
        serde_json::from_value(parse("groups")?).map_err(|e| Error::format(format!("groups: {e}")))?;
    let mode: ObsMode = serde_json::from_value(parse("obs_mode")?).map_err(|e| Error::format(format!("obs_mode: {e}")))?;
    let ps: [usize; 3] =
        serde_json::from_value(parse("pixel_shape")?).map_err(|e| Error::format(format!("pixel_shape: {e}")))?;
    let dim: usize = serde_json::from_value(parse("obs_dim")?).map_err(|e| Error::format(format!("obs_dim: {e}")))?;
    let dataset_seed: u64 =
        serde_json::from_value(parse("dataset_seed")?).map_err(|e| Error::format(format!("dataset_seed: {e}")))?;
    let episode_length: usize =
        serde_json::from_value(parse("episode_length")?).map_err(|e| Error::format(format!("episode_length: {e}")))?;
    let mut frames = FrameTable::new(mode, (ps[0], ps[1], ps[2]), dim);
    let arr = a.get("frames")?;
    let n = arr.shape.first().copied().unwrap_or(0);
    let width = arr.shape.get(1).copied().unwrap_or(0);
    match mode {
        ObsMode::State => {
            let v = arr.as_f64()?;
            frames.states = (0..n).map(|i| v[i * width..(i + 1) * width].to_vec()).collect();
        }
        ObsMode::Pixels => {
            let v = arr.as_u8()?;
            frames.pixels = (0..n).map(|i| v[i * width..(i + 1) * width].to_vec()).collect();
        }
    }
    for g in &groups {
        let all = g
            .prefix
            .iter()
            .chain(&g.factual_future)
            .chain(&g.cf_future)
            .chain(g.candidates.iter().flat_map(|c| c.frames.iter()))
            .chain(&g.cf_candidates.frames);
        if all.copied().any(|i| i >= n) {
            return Err(Error::format("benchmark group references a missing frame"));
        }
    }
    Ok(Benchmark { spec, env, dataset_seed, episode_length, frames, groups })
}

/// Annotation record per group (for inspection tooling).
pub fn annotations(b: &Benchmark) -> serde_json::Value {
    json!(b
        .groups
        .iter()
        .map(|g| json!({
            "episode_id": g.episode_id,
            "t0": g.t0,
            "spec": g.spec,
            "cf_positive": g.cf_candidates.positive,
            "factual_positive": g.candidates.iter().map(|c| (c.horizon, c.positive)).collect::<Vec<_>>(),
        }))
        .collect::<Vec<_>>())
}

/// Episode actions of a group as [`Action`] values.
pub fn group_actions(g: &QueryGroup, from: usize, h: usize) -> Vec<Action> {
    g.actions[from..from + h]
        .iter()
        .map(|a| {
            let null = a.iter().all(|&x| x == 0.0);
            Action { encoding: a.clone(), null_flag: null }
        })
        .collect()
}

/// Factual and counterfactual simulator states are kept for the oracle scorer.
pub fn group_state(g: &QueryGroup, intervened: bool) -> SimState {
    SimState::new(if intervened { g.intervened_state.clone() } else { g.state_t0.clone() }, g.t0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::PhysicsConfig;

    fn small_dataset() -> Dataset {
        let cfg = EnvConfig::PhysicsNbody(PhysicsConfig { obs_mode: ObsMode::State, ..Default::default() });
        Dataset::generate(&cfg, 14, 16, 5).unwrap()
    }

    #[test]
    fn candidate_lists_have_one_positive_and_distinct_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pool: Vec<usize> = (0..20).collect();
        let (eps, pos) = sample_candidates(&pool, 7, 11, &mut rng).unwrap();
        assert_eq!(eps.len(), 11);
        assert_eq!(eps[pos], 7);
        assert_eq!(eps.iter().filter(|&&e| e == 7).count(), 1);
        assert_eq!(eps.iter().collect::<BTreeSet<_>>().len(), 11);
        let (eps, _) = sample_candidates(&pool, 3, 2, &mut rng).unwrap();
        assert_eq!(eps.len(), 2);
        assert!(matches!(sample_candidates(&pool[..5], 0, 11, &mut rng), Err(Error::Input(_))));
    }

    #[test]
    fn zero_delta_cf_equals_factual() {
        let d = small_dataset();
        let spec = BenchSpec { max_samples: 30, magnitudes: vec![0.0], ..Default::default() };
        let b = build_benchmark(&d, &spec).unwrap();
        assert_eq!(b.groups.len(), 30);
        for g in &b.groups {
            for (a, c) in g.factual_future.iter().zip(&g.cf_future) {
                assert!(b.frames.same(*a, *c));
            }
            let one = g.candidate_set(1).unwrap();
            assert_eq!(one.positive, g.cf_candidates.positive);
            for (a, c) in one.frames.iter().zip(&g.cf_candidates.frames) {
                assert!(b.frames.same(*a, *c));
            }
        }
    }

    #[test]
    fn default_spec_targets_object_zero_x() {
        let d = small_dataset();
        let b = build_benchmark(&d, &BenchSpec { max_samples: 5, ..Default::default() }).unwrap();
        for g in &b.groups {
            assert_eq!(g.spec.targets, vec![Target { object: 0, variable: 0 }]);
            assert_eq!(g.spec.magnitude, 3.0);
            assert!(g.t0 >= 3 && g.t0 + 10 < 16);
            let diff: Vec<usize> = (0..g.state_t0.len()).filter(|&k| g.state_t0[k] != g.intervened_state[k]).collect();
            assert_eq!(diff, vec![0]);
        }
    }

    #[test]
    fn short_episodes_are_rejected() {
        let cfg = EnvConfig::PhysicsNbody(PhysicsConfig { obs_mode: ObsMode::State, ..Default::default() });
        let d = Dataset::generate(&cfg, 14, 8, 5).unwrap();
        assert!(matches!(build_benchmark(&d, &BenchSpec::default()), Err(Error::Input(_))));
    }
}
