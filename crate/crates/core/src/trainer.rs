//! Three-stage schedule: S1 backbone pretraining, S2 causal branch on a frozen
//! backbone, S3 transition refinement on gated latents with multi-step
//! rollouts. Baseline runs use the S1 objective for the whole budget.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{
    kl_standard_normal, loss_contrastive, loss_nll, BackboneConfig, Family, InputSpec, Objective,
    GROUP_DECODER, GROUP_ENCODER, GROUP_TRANSITION,
};
use crate::causal::{CausalBranch, CausalConfig, CausalLossWeights, Supervision, GROUP_CAUSAL};
use crate::env::{Dataset, EnvConfig, ObsMode};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionSchedule};
use crate::model::{CheckpointMeta, InferenceFusion, ModelConfig, StateNorm, WorldModel};
use crate::nn::{Adam, AdamConfig, ParamStore, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutPolicy {
    Fixed,
    Curriculum,
    Mixed,
    LateMixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub policy: RolloutPolicy,
    /// Horizon of the fixed policy and of the early late-mixed phase.
    pub horizon: usize,
    pub h_max: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            policy: RolloutPolicy::LateMixed,
            horizon: 5,
            h_max: 10,
        }
    }
}

impl RolloutConfig {
    /// Horizon for `epoch` of `epochs`; `rng` drives the mixed policies.
    pub fn horizon_for<R: Rng>(&self, epoch: usize, epochs: usize, rng: &mut R) -> usize {
        match self.policy {
            RolloutPolicy::Fixed => self.horizon,
            RolloutPolicy::Curriculum => {
                if epochs <= 1 {
                    self.h_max
                } else {
                    1 + (self.h_max - 1) * epoch / (epochs - 1)
                }
            }
            RolloutPolicy::Mixed => rng.gen_range(1..=self.h_max),
            RolloutPolicy::LateMixed => {
                if 3 * epoch >= 2 * epochs {
                    rng.gen_range(1..=self.h_max)
                } else {
                    self.horizon
                }
            }
        }
    }

    pub fn span(&self) -> usize {
        self.h_max.max(self.horizon).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSplit {
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
}

impl StageSplit {
    /// Parses `s1_8_s2_40` (S3 unchanged).
    pub fn parse(text: &str, s3: usize) -> Result<Self> {
        let parts: Vec<&str> = text.split('_').collect();
        match parts.as_slice() {
            ["s1", a, "s2", b] => {
                let s1 = a.parse().map_err(|_| Error::config(format!("bad stage split '{text}'")))?;
                let s2 = b.parse().map_err(|_| Error::config(format!("bad stage split '{text}'")))?;
                Ok(Self { s1, s2, s3 })
            }
            _ => Err(Error::config(format!("stage split must look like s1_8_s2_40, got '{text}'"))),
        }
    }

    pub fn total(&self) -> usize {
        self.s1 + self.s2 + self.s3
    }
}

/// What the mask head regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConceptTarget {
    /// Normalised one-step state increment.
    Increment,
    /// Normalised state.
    State,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub split: StageSplit,
    pub weights: CausalLossWeights,
    pub supervision: bool,
    pub branch_enabled: bool,
    pub joint: bool,
    pub alpha0: f64,
    /// `None`: decay to `0.1·α0` by the final S3 step.
    pub k_alpha: Option<f64>,
    pub gate_enabled: bool,
    /// `None`: median gate distance over the first S3 epoch.
    pub tau: Option<f64>,
    pub gamma: f64,
    pub rollout: RolloutConfig,
    pub lr: [f64; 3],
    pub batch: [usize; 3],
    pub dag_warmup_frac: f64,
    pub val_every: usize,
    pub val_candidates: usize,
    pub concept_target: ConceptTarget,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            split: StageSplit { s1: 20, s2: 80, s3: 60 },
            weights: CausalLossWeights::default(),
            supervision: true,
            branch_enabled: true,
            joint: false,
            alpha0: 1.0,
            k_alpha: None,
            gate_enabled: true,
            tau: None,
            gamma: 5.0,
            rollout: RolloutConfig::default(),
            lr: [5e-4, 5e-4, 1e-4],
            batch: [1024, 1024, 256],
            dag_warmup_frac: 0.1,
            val_every: 5,
            val_candidates: 11,
            concept_target: ConceptTarget::Increment,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha0) {
            return Err(Error::config(format!("alpha0 must lie in [0, 1], got {}", self.alpha0)));
        }
        if let Some(k) = self.k_alpha {
            if !(k >= 0.0) {
                return Err(Error::config("k_alpha must be ≥ 0"));
            }
        }
        if self.rollout.h_max == 0 || self.rollout.horizon == 0 {
            return Err(Error::config("rollout horizons must be ≥ 1"));
        }
        if self.rollout.horizon > self.rollout.h_max {
            return Err(Error::config("rollout horizon exceeds h_max"));
        }
        if self.batch.contains(&0) {
            return Err(Error::config("batch sizes must be ≥ 1"));
        }
        if self.lr.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::config("learning rates must be > 0"));
        }
        self.weights.validate()
    }
}

/// Backbone hyperparameters independent of the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: Family,
    pub objective: Objective,
    pub num_slots: usize,
    pub slot_dim: usize,
    pub hidden_dim: usize,
    pub hinge: f64,
    pub sigma: f64,
    pub vae_kl_weight: f64,
    pub cnn_channels: usize,
    pub cnn_kernel: usize,
}

impl BackboneSpec {
    pub fn new(family: Family, objective: Objective) -> Self {
        let (k, d) = if family.object_centric() { (5, 5) } else { (1, 25) };
        Self {
            family,
            objective,
            num_slots: k,
            slot_dim: d,
            hidden_dim: 64,
            hinge: 1.0,
            sigma: 0.5,
            vae_kl_weight: 1.0,
            cnn_channels: 16,
            cnn_kernel: 10,
        }
    }

    pub fn resolve(&self, input: InputSpec, action_dim: usize) -> BackboneConfig {
        BackboneConfig {
            family: self.family,
            objective: self.objective,
            num_slots: self.num_slots,
            slot_dim: self.slot_dim,
            hidden_dim: self.hidden_dim,
            action_dim,
            input,
            hinge: self.hinge,
            sigma: self.sigma,
            vae_kl_weight: self.vae_kl_weight,
            cnn_channels: self.cnn_channels,
            cnn_kernel: self.cnn_kernel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backbone: BackboneSpec,
    pub stages: StageConfig,
    pub with_causal: bool,
    pub mask_hidden: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(family: Family, objective: Objective, with_causal: bool) -> Self {
        Self {
            backbone: BackboneSpec::new(family, objective),
            stages: StageConfig::default(),
            with_causal,
            mask_hidden: 8,
            seed: 42,
        }
    }

    /// Stable SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        config_hash(&serde_json::to_value(self).expect("config serialises"))
    }

    pub fn label(&self) -> String {
        let base = format!("{}_{}", self.backbone.family.label(), self.backbone.objective.label());
        if self.with_causal {
            format!("{base}+CausalVAE")
        } else {
            base
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stages.validate()
    }

    /// Desk scale: epoch budgets divided by 4, batch 64, and for object-centric
    /// backbones one slot per object with one latent per object variable.
    pub fn apply_desk_preset(&mut self, env: &EnvConfig) -> Result<()> {
        let s = self.stages.split;
        self.stages.split = StageSplit { s1: s.s1 / 4, s2: s.s2 / 4, s3: s.s3 / 4 };
        self.stages.batch = [64; 3];
        if self.backbone.family.object_centric() {
            let e = env.build()?;
            self.backbone.num_slots = e.num_objects();
            self.backbone.slot_dim = e.vars_per_object();
        }
        Ok(())
    }

    /// Model configuration for a dataset.
    pub fn model_config(&self, dataset: &Dataset) -> Result<ModelConfig> {
        let meta = &dataset.meta;
        let input = match meta.obs_mode {
            ObsMode::State => InputSpec::State { dim: meta.state_dim },
            ObsMode::Pixels => InputSpec::Pixels {
                height: meta.pixel_shape[0],
                width: meta.pixel_shape[1],
                channels: meta.pixel_shape[2],
            },
        };
        let backbone = self.backbone.resolve(input, meta.action_dim);
        let causal = if self.with_causal && self.stages.branch_enabled {
            let latent = backbone.latent_dim();
            let sup = self.stages.supervision;
            let ds = if sup { meta.state_dim } else { latent };
            let mut c = CausalConfig::new(ds, latent, meta.state_dim, sup);
            c.mask_hidden = self.mask_hidden;
            c.weights = self.stages.weights;
            if !sup {
                c.weights.lambda[2] = 0.0;
            }
            Some(c)
        } else {
            None
        };
        Ok(ModelConfig { backbone, causal })
    }
}

/// SHA-256 over compact JSON with sorted keys.
pub fn config_hash(value: &serde_json::Value) -> String {
    let text = serde_json::to_string(value).expect("json serialises");
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
    pub wall_time: f64,
    pub config_hash: String,
    /// Digest of this epoch's sample order.
    pub batch_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeCheck {
    pub stage: String,
    pub group: String,
    pub unchanged: bool,
}

pub struct RunOutcome {
    pub model: WorldModel,
    pub records: Vec<RunRecord>,
    pub freeze_checks: Vec<FreezeCheck>,
    pub run_dir: Option<PathBuf>,
    pub config_hash: String,
}

impl RunOutcome {
    /// `(epoch, batch digest)` sequence used to verify pairing.
    pub fn batch_log(&self) -> Vec<(usize, String)> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            if seen.insert(r.epoch) {
                out.push((r.epoch, r.batch_digest.clone()));
            }
        }
        out
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Episode tensors of one split.
struct SplitData {
    obs: Vec<Array2<f64>>,
    actions: Vec<Array2<f64>>,
    states: Vec<Array2<f64>>,
}

impl SplitData {
    fn new(dataset: &Dataset, episodes: &[usize]) -> Self {
        let mut obs = Vec::new();
        let mut actions = Vec::new();
        let mut states = Vec::new();
        for &i in episodes {
            let e = &dataset.episodes[i];
            let f: Vec<Vec<f64>> = (0..e.states.len()).map(|t| e.features(t)).collect();
            obs.push(rows(&f));
            actions.push(rows(&e.actions.iter().map(|a| a.encoding.clone()).collect::<Vec<_>>()));
            states.push(rows(&e.states.iter().map(|s| s.values.clone()).collect::<Vec<_>>()));
        }
        Self { obs, actions, states }
    }

    fn gather(src: &[Array2<f64>], samples: &[(usize, usize)], offset: usize) -> Array2<f64> {
        let cols = src[0].ncols();
        let mut out = Array2::zeros((samples.len(), cols));
        for (r, &(e, t)) in samples.iter().enumerate() {
            out.row_mut(r).assign(&src[e].row(t + offset));
        }
        out
    }
}

fn rows(v: &[Vec<f64>]) -> Array2<f64> {
    let c = v.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((v.len(), c), |(i, j)| v[i][j])
}

fn column_stats(mats: &[Array2<f64>]) -> (Vec<f64>, Vec<f64>) {
    let all = ndarray::concatenate(Axis(0), &mats.iter().map(|m| m.view()).collect::<Vec<_>>())
        .expect("same column count");
    let mean = all.mean_axis(Axis(0)).expect("non-empty").to_vec();
    let std = all.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-8 { s } else { 1.0 }).to_vec();
    (mean, std)
}

fn mix_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    for x in [seed, tag, a, b] {
        h.update(x.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

const TAG_ORDER: u64 = 1;
const TAG_NOISE: u64 = 2;

/// Training pipeline over one dataset.
pub struct Pipeline<'a> {
    pub cfg: &'a TrainConfig,
    pub model: WorldModel,
    pub records: Vec<RunRecord>,
    pub freeze_checks: Vec<FreezeCheck>,
    config_hash: String,
    train: SplitData,
    val: SplitData,
    samples: Vec<(usize, usize)>,
    global_epoch: usize,
    run_dir: Option<PathBuf>,
    env_name: String,
    started: Instant,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a TrainConfig, dataset: &Dataset, run_dir: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let split = dataset.split();
        if split.train.is_empty() {
            return Err(Error::input("dataset has no training episodes"));
        }
        let span = cfg.stages.rollout.span();
        let t_len = dataset.meta.episode_length;
        if t_len < span {
            return Err(Error::input(format!(
                "rollout horizon {span} exceeds the episode length {t_len}"
            )));
        }
        let train = SplitData::new(dataset, &split.train);
        let val = SplitData::new(dataset, &split.val);
        let samples: Vec<(usize, usize)> = (0..train.obs.len())
            .flat_map(|e| (0..=t_len - span).map(move |t| (e, t)))
            .collect();
        if samples.is_empty() {
            return Err(Error::input("no training transitions"));
        }
        let model_cfg = cfg.model_config(dataset)?;
        let mut model = WorldModel::new(&model_cfg, cfg.seed)?;
        if dataset.meta.obs_mode == ObsMode::State {
            let (m, s) = column_stats(&train.obs);
            model.backbone.set_input_normalization(&mut model.store, &m, &s)?;
        }
        let (mean, std) = column_stats(&train.states);
        let deltas: Vec<Array2<f64>> = train
            .states
            .iter()
            .map(|s| {
                let n = s.nrows();
                &s.slice(ndarray::s![1..n, ..]) - &s.slice(ndarray::s![0..n - 1, ..])
            })
            .collect();
        let (delta_mean, delta_std) = column_stats(&deltas);
        model.state_norm = Some(StateNorm { mean, std, delta_mean, delta_std });
        if let Some(dir) = run_dir {
            std::fs::create_dir_all(dir)?;
            let resolved = serde_json::json!({
                "train": cfg,
                "model": model_cfg,
                "dataset": {
                    "env": dataset.meta.env,
                    "master_seed": dataset.meta.master_seed,
                    "num_episodes": dataset.meta.num_episodes,
                    "episode_length": dataset.meta.episode_length,
                },
                "config_hash": cfg.hash(),
            });
            std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&resolved)?)?;
            std::fs::write(dir.join("records.jsonl"), "")?;
        }
        Ok(Self {
            cfg,
            model,
            records: Vec::new(),
            freeze_checks: Vec::new(),
            config_hash: cfg.hash(),
            train,
            val,
            samples,
            global_epoch: 0,
            run_dir: run_dir.map(Path::to_path_buf),
            env_name: dataset.meta.env.name().to_string(),
            started: Instant::now(),
        })
    }

    fn epoch_order(&self) -> (Vec<usize>, String) {
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, TAG_ORDER, self.global_epoch as u64, 0));
        idx.shuffle(&mut rng);
        let mut h = Sha256::new();
        for i in &idx {
            h.update((*i as u64).to_le_bytes());
        }
        (idx, hex::encode(&h.finalize()[..8]))
    }

    fn batch_rng(&self, stage: u64, batch: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, TAG_NOISE + stage, self.global_epoch as u64, batch as u64))
    }

    fn push_record(&mut self, stage: &str, epoch: usize, loss: f64, components: BTreeMap<String, f64>, metrics: BTreeMap<String, f64>, digest: String) -> Result<()> {
        let rec = RunRecord {
            stage: stage.to_string(),
            epoch,
            loss,
            components,
            metrics,
            wall_time: self.started.elapsed().as_secs_f64(),
            config_hash: self.config_hash.clone(),
            batch_digest: digest,
        };
        if let Some(dir) = &self.run_dir {
            use std::io::Write;
            let mut f = std::fs::OpenOptions::new().append(true).open(dir.join("records.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        self.records.push(rec);
        Ok(())
    }

    fn save_checkpoint(&self, file: &str, stage: &str, epoch: usize) -> Result<()> {
        if let Some(dir) = &self.run_dir {
            let meta = CheckpointMeta {
                config_hash: self.config_hash.clone(),
                stage: stage.to_string(),
                epoch,
                seed: self.cfg.seed,
                env: self.env_name.clone(),
            };
            self.model.save(&dir.join(file), &meta)?;
        }
        Ok(())
    }

    fn frozen_hashes(&self, groups: &[&str]) -> BTreeMap<String, BTreeMap<String, String>> {
        groups
            .iter()
            .map(|g| (g.to_string(), self.model.store.group_hashes(g)))
            .collect()
    }

    fn check_frozen(&mut self, stage: &str, before: BTreeMap<String, BTreeMap<String, String>>) -> Result<()> {
        for (group, hashes) in before {
            let unchanged = self.model.store.group_hashes(&group) == hashes;
            self.freeze_checks.push(FreezeCheck {
                stage: stage.to_string(),
                group: group.clone(),
                unchanged,
            });
            if !unchanged {
                return Err(Error::validation(format!("frozen group '{group}' changed during {stage}")));
            }
        }
        Ok(())
    }

    /// Validation 1-step MRR on held-out episodes: each query ranks its true
    /// next observation against the same step of other validation episodes.
    pub fn validation_mrr(&self) -> Result<Option<f64>> {
        let n_ep = self.val.obs.len();
        if n_ep < 2 {
            return Ok(None);
        }
        let n_cand = self.cfg.stages.val_candidates.min(n_ep).max(2);
        let t_len = self.val.actions[0].nrows();
        let times: Vec<usize> = (0..t_len).step_by((t_len / 4).max(1)).collect();
        let mut rr = 0.0;
        let mut count = 0.0;
        for &t in &times {
            let cur = Array2::from_shape_fn((n_ep, self.val.obs[0].ncols()), |(e, j)| self.val.obs[e][[t, j]]);
            let nxt = Array2::from_shape_fn((n_ep, self.val.obs[0].ncols()), |(e, j)| self.val.obs[e][[t + 1, j]]);
            let act = Array2::from_shape_fn((n_ep, self.val.actions[0].ncols()), |(e, j)| self.val.actions[e][[t, j]]);
            let z = self.model.encode(&cur)?;
            let zin = self.model.transition_input(&z)?;
            let pred = self.model.rollout(&zin, &[act]).pop().expect("one step");
            let targets = self.model.encode(&nxt)?;
            for e in 0..n_ep {
                let p = pred.row(e).to_vec();
                let pos = self.model.score(&p, &targets.row(e).to_vec());
                let better = (1..n_cand)
                    .map(|k| (e + k) % n_ep)
                    .filter(|&o| self.model.score(&p, &targets.row(o).to_vec()) > pos)
                    .count();
                rr += 1.0 / (better + 1) as f64;
                count += 1.0;
            }
        }
        Ok(Some(rr / count))
    }

    fn should_validate(&self, epoch: usize, epochs: usize) -> bool {
        self.cfg.stages.val_every > 0 && ((epoch + 1) % self.cfg.stages.val_every == 0 || epoch + 1 == epochs)
    }

    /// One-step backbone objective on a batch of samples.
    fn backbone_loss(&self, s: &mut Session, batch: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Result<(crate::autodiff::Var, crate::autodiff::Var)> {
        let bb = &self.model.backbone;
        let cfg = &bb.cfg;
        let o_t = SplitData::gather(&self.train.obs, batch, 0);
        let o_n = SplitData::gather(&self.train.obs, batch, 1);
        let a_t = SplitData::gather(&self.train.actions, batch, 0);
        let noise = |rng: &mut ChaCha8Rng| -> Option<Array2<f64>> {
            (cfg.family == Family::Vae)
                .then(|| Array2::from_shape_fn((batch.len(), cfg.latent_dim()), |_| rng.sample(StandardNormal)))
        };
        let n1 = noise(rng);
        let n2 = noise(rng);
        let x_t = s.input(o_t);
        let x_n = s.input(o_n);
        let a = s.input(a_t);
        let e_t = bb.encode(s, x_t, n1.as_ref())?;
        let e_n = bb.encode(s, x_n, n2.as_ref())?;
        let pred = bb.transition(s, e_t.z, a).predicted;
        let mut loss = match cfg.objective {
            Objective::Contrastive => {
                let mut perm: Vec<usize> = (0..batch.len()).collect();
                perm.shuffle(rng);
                let neg = s.graph.gather_rows(e_n.z, &perm);
                loss_contrastive(&mut s.graph, pred, e_n.z, neg, cfg.hinge)
            }
            Objective::Nll => {
                let recon = bb.decode(s, e_t.z)?;
                let target = bb.normalize(s, x_t);
                let d = s.graph.row_sq_dist(recon, target);
                let rec = s.graph.mean(d);
                let rec = s.graph.scale(rec, 0.5);
                let dyn_ = loss_nll(&mut s.graph, pred, e_n.z, cfg.sigma);
                s.graph.add(rec, dyn_)
            }
        };
        if let Some(lv) = e_t.logvar {
            let kl = kl_standard_normal(&mut s.graph, e_t.mean, lv);
            let kl = s.graph.scale(kl, cfg.vae_kl_weight);
            loss = s.graph.add(loss, kl);
        }
        Ok((loss, e_t.z))
    }

    fn optimise_backbone(&mut self, stage: &str, stage_id: u64, epochs: usize, lr: f64, batch_size: usize) -> Result<()> {
        let trainable: BTreeSet<String> =
            [GROUP_ENCODER, GROUP_TRANSITION, GROUP_DECODER].iter().map(|s| s.to_string()).collect();
        let frozen = self.frozen_hashes(&[GROUP_CAUSAL]);
        let mut opt = Adam::new(AdamConfig { lr, ..Default::default() });
        let mut best: Option<(f64, ParamStore)> = None;
        for epoch in 0..epochs {
            let (order, digest) = self.epoch_order();
            let mut total = 0.0;
            let mut n = 0.0;
            for (b, chunk) in order.chunks(batch_size).enumerate() {
                let batch: Vec<(usize, usize)> = chunk.iter().map(|&i| self.samples[i]).collect();
                let mut rng = self.batch_rng(stage_id, b);
                let grads = {
                    let mut s = Session::new(&self.model.store, &trainable);
                    let (loss, _) = self.backbone_loss(&mut s, &batch, &mut rng)?;
                    let v = s.graph.scalar_value(loss);
                    if !v.is_finite() {
                        return Err(Error::numeric(format!("{stage} loss became non-finite at epoch {epoch}")));
                    }
                    total += v * batch.len() as f64;
                    n += batch.len() as f64;
                    s.gradients(loss)
                };
                opt.apply(&mut self.model.store, &grads);
            }
            let mut metrics = BTreeMap::new();
            if self.should_validate(epoch, epochs) {
                if let Some(mrr) = self.validation_mrr()? {
                    metrics.insert("val_mrr".to_string(), mrr);
                    if best.as_ref().map_or(true, |(b, _)| mrr > *b) {
                        best = Some((mrr, self.model.store.clone()));
                    }
                }
            }
            self.push_record(stage, self.global_epoch, total / n, BTreeMap::new(), metrics, digest)?;
            self.global_epoch += 1;
        }
        if let Some((_, store)) = best {
            self.model.store = store;
        }
        self.check_frozen(stage, frozen)
    }

    /// S1: encoder + transition (+ decoder) on the one-step objective.
    pub fn run_stage1(&mut self) -> Result<()> {
        let st = &self.cfg.stages;
        self.optimise_backbone("s1", 1, st.split.s1, st.lr[0], st.batch[0])?;
        self.save_checkpoint("ckpt_s1.bin", "s1", self.global_epoch)
    }

    /// Baseline: the S1 objective for the whole S1+S2+S3 budget.
    pub fn run_baseline(&mut self) -> Result<()> {
        let st = &self.cfg.stages;
        self.optimise_backbone("baseline", 1, st.split.total(), st.lr[0], st.batch[0])?;
        self.save_checkpoint("ckpt_s1.bin", "baseline", self.global_epoch)
    }

    fn supervision_rows(&self, batch: &[(usize, usize)]) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let norm = self.model.state_norm.as_ref().expect("state norm set");
        let s_t = SplitData::gather(&self.train.states, batch, 0);
        let s_n = SplitData::gather(&self.train.states, batch, 1);
        let state = Array2::from_shape_fn(s_t.dim(), |(r, j)| (s_t[[r, j]] - norm.mean[j]) / norm.std[j]);
        let concept = match self.cfg.stages.concept_target {
            ConceptTarget::State => state.clone(),
            ConceptTarget::Increment => Array2::from_shape_fn(s_t.dim(), |(r, j)| {
                (s_n[[r, j]] - s_t[[r, j]] - norm.delta_mean[j]) / norm.delta_std[j]
            }),
        };
        let causal = self.model.causal.as_ref().expect("causal branch");
        let map = &causal.cfg.slot_map;
        let ds = causal.cfg.structural_dim;
        let permute = |m: &Array2<f64>| {
            let mut out = Array2::zeros((m.nrows(), ds));
            for (k, &slot) in map.iter().enumerate() {
                out.column_mut(slot).assign(&m.column(k));
            }
            out
        };
        (permute(&state), permute(&concept), state)
    }

    /// S2: causal branch on the frozen backbone.
    pub fn run_stage2(&mut self) -> Result<()> {
        let Some(causal) = self.model.causal.clone() else {
            return Err(Error::config("stage 2 needs a causal branch"));
        };
        let st = self.cfg.stages.clone();
        let frozen = self.frozen_hashes(&[GROUP_ENCODER, GROUP_TRANSITION, GROUP_DECODER]);
        let mut opt = Adam::new(AdamConfig { lr: st.lr[1], ..Default::default() });
        let z_all: Vec<Array2<f64>> = self.train.obs.iter().map(|o| self.model.encode(o)).collect::<Result<_>>()?;
        let steps_per_epoch = self.samples.len().div_ceil(st.batch[1]);
        let total_steps = steps_per_epoch * st.split.s2;
        let warm = (st.dag_warmup_frac * total_steps as f64).ceil() as usize;
        let mut step = 0usize;
        for epoch in 0..st.split.s2 {
            let (order, digest) = self.epoch_order();
            let mut total = 0.0;
            let mut comps: BTreeMap<String, f64> = BTreeMap::new();
            let mut n = 0.0;
            for (b, chunk) in order.chunks(st.batch[1]).enumerate() {
                let batch: Vec<(usize, usize)> = chunk.iter().map(|&i| self.samples[i]).collect();
                let mut rng = self.batch_rng(2, b);
                let z = SplitData::gather(&z_all, &batch, 0);
                let noise = Array2::from_shape_fn((batch.len(), causal.cfg.structural_dim), |_| rng.sample(StandardNormal));
                let lambda_dag = warmup(st.weights.lambda[3], step, warm);
                let sup = causal.cfg.supervision.then(|| self.supervision_rows(&batch));
                let (v, c) = stage2_step(&causal, &mut self.model.store, &mut opt, z, &noise, sup, lambda_dag)
                    .map_err(|e| match e {
                        Error::Numeric(m) => Error::numeric(format!("stage 2, epoch {epoch}: {m}")),
                        other => other,
                    })?;
                total += v * batch.len() as f64;
                for (k, x) in c {
                    *comps.entry(k).or_default() += x * batch.len() as f64;
                }
                n += batch.len() as f64;
                step += 1;
            }
            comps.values_mut().for_each(|v| *v /= n);
            self.push_record("s2", self.global_epoch, total / n, comps, BTreeMap::new(), digest)?;
            self.global_epoch += 1;
        }
        self.check_frozen("s2", frozen)?;
        self.save_checkpoint("ckpt_s2.bin", "s2", self.global_epoch)?;
        self.write_adjacency()
    }

    fn write_adjacency(&self) -> Result<()> {
        if let (Some(dir), Some(a)) = (&self.run_dir, self.model.adjacency()) {
            std::fs::write(dir.join("adjacency.csv"), matrix_csv(&a))?;
        }
        Ok(())
    }

    /// S3: transition fine-tuning on gated latents with multi-step rollouts.
    pub fn run_stage3(&mut self) -> Result<()> {
        let st = self.cfg.stages.clone();
        let frozen = self.frozen_hashes(&[GROUP_ENCODER, GROUP_DECODER, GROUP_CAUSAL]);
        let trainable: BTreeSet<String> = [GROUP_TRANSITION.to_string()].into();
        let mut opt = Adam::new(AdamConfig { lr: st.lr[2], ..Default::default() });
        let z_all: Vec<Array2<f64>> = self.train.obs.iter().map(|o| self.model.encode(o)).collect::<Result<_>>()?;
        let use_branch = self.model.causal.is_some();
        let zt_all: Vec<Array2<f64>> = if use_branch {
            z_all.iter().map(|z| self.model.refine(z)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let steps_per_epoch = self.samples.len().div_ceil(st.batch[2]);
        let total_steps = (steps_per_epoch * st.split.s3) as u64;
        let mut schedule = FusionSchedule {
            alpha0: st.alpha0,
            k_alpha: st.k_alpha.unwrap_or_else(|| fusion::decay_rate_for(0.1, total_steps)),
            tau: st.tau.unwrap_or(0.0),
            gamma: st.gamma,
            gate_enabled: st.gate_enabled,
        };
        if use_branch && st.tau.is_none() {
            let (order, _) = self.epoch_order();
            let mut deltas: Vec<f64> = order
                .iter()
                .map(|&i| {
                    let (e, t) = self.samples[i];
                    let d = &zt_all[e].row(t) - &z_all[e].row(t);
                    d.dot(&d).sqrt()
                })
                .collect();
            schedule.tau = median(&mut deltas);
        }
        let mut t_step: u64 = 0;
        let mut best: Option<(f64, ParamStore, f64)> = None;
        for epoch in 0..st.split.s3 {
            let (order, digest) = self.epoch_order();
            let mut total = 0.0;
            let mut n = 0.0;
            let mut alpha_sum = 0.0;
            for (b, chunk) in order.chunks(st.batch[2]).enumerate() {
                let batch: Vec<(usize, usize)> = chunk.iter().map(|&i| self.samples[i]).collect();
                let mut rng = self.batch_rng(3, b);
                let h = st.rollout.horizon_for(epoch, st.split.s3, &mut rng);
                let z = SplitData::gather(&z_all, &batch, 0);
                let zin = if use_branch {
                    let zt = SplitData::gather(&zt_all, &batch, 0);
                    let (g, a) = fusion::fusion_gate(&z, &zt, &schedule, t_step);
                    alpha_sum += a.iter().sum::<f64>() / a.len() as f64;
                    g
                } else {
                    z
                };
                let grads = {
                    let mut s = Session::new(&self.model.store, &trainable);
                    let z0 = s.input(zin);
                    let loss = self.multistep_loss(&mut s, z0, &batch, h, &z_all, &mut rng)?;
                    let v = s.graph.scalar_value(loss);
                    if !v.is_finite() {
                        return Err(Error::numeric(format!("stage-3 loss became non-finite at epoch {epoch}")));
                    }
                    total += v * batch.len() as f64;
                    n += batch.len() as f64;
                    s.gradients(loss)
                };
                opt.apply(&mut self.model.store, &grads);
                t_step += 1;
            }
            if use_branch {
                self.model.fusion = Some(InferenceFusion {
                    schedule,
                    alpha: fusion::fusion_alpha(&schedule, t_step.saturating_sub(1)),
                });
            }
            let mut comps = BTreeMap::new();
            if use_branch {
                comps.insert("alpha_eff".to_string(), alpha_sum / steps_per_epoch as f64);
                comps.insert("tau".to_string(), schedule.tau);
            }
            let mut metrics = BTreeMap::new();
            if self.should_validate(epoch, st.split.s3) {
                if let Some(mrr) = self.validation_mrr()? {
                    metrics.insert("val_mrr".to_string(), mrr);
                    if best.as_ref().map_or(true, |(b, _, _)| mrr > *b) {
                        let alpha = self.model.fusion.map_or(0.0, |f| f.alpha);
                        best = Some((mrr, self.model.store.clone(), alpha));
                    }
                }
            }
            self.push_record("s3", self.global_epoch, total / n, comps, metrics, digest)?;
            self.global_epoch += 1;
        }
        if let Some((_, store, alpha)) = best {
            self.model.store = store;
            if let Some(f) = self.model.fusion.as_mut() {
                f.alpha = alpha;
            }
        }
        self.check_frozen("s3", frozen)?;
        self.save_checkpoint("ckpt_s3.bin", "s3", self.global_epoch)
    }

    /// `(1/H) Σ_k ℓ(ẑ_{t+k}, z_{t+k})` from `z0`.
    fn multistep_loss(
        &self,
        s: &mut Session,
        z0: crate::autodiff::Var,
        batch: &[(usize, usize)],
        h: usize,
        z_all: &[Array2<f64>],
        rng: &mut ChaCha8Rng,
    ) -> Result<crate::autodiff::Var> {
        let bb = &self.model.backbone;
        let acts: Vec<_> = (0..h)
            .map(|k| {
                let a = SplitData::gather(&self.train.actions, batch, k);
                s.input(a)
            })
            .collect();
        let preds = bb.rollout(s, z0, &acts);
        let mut terms = Vec::with_capacity(h);
        for (k, p) in preds.into_iter().enumerate() {
            let target = s.input(SplitData::gather(z_all, batch, k + 1));
            let l = match bb.cfg.objective {
                Objective::Contrastive => {
                    let mut perm: Vec<usize> = (0..batch.len()).collect();
                    perm.shuffle(rng);
                    let neg = s.graph.gather_rows(target, &perm);
                    loss_contrastive(&mut s.graph, p, target, neg, bb.cfg.hinge)
                }
                Objective::Nll => loss_nll(&mut s.graph, p, target, bb.cfg.sigma),
            };
            terms.push(l);
        }
        Ok(multistep_mean(&mut s.graph, &terms))
    }

    /// Joint ablation: every loss at once, no stage split.
    pub fn run_joint(&mut self) -> Result<()> {
        let Some(causal) = self.model.causal.clone() else {
            return Err(Error::config("joint training needs a causal branch"));
        };
        let st = self.cfg.stages.clone();
        let epochs = st.split.total();
        let all: BTreeSet<String> = [GROUP_ENCODER, GROUP_TRANSITION, GROUP_DECODER, GROUP_CAUSAL]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut opt = Adam::new(AdamConfig { lr: st.lr[0], ..Default::default() });
        let steps_per_epoch = self.samples.len().div_ceil(st.batch[0]);
        let total_steps = steps_per_epoch * epochs;
        let warm = (st.dag_warmup_frac * total_steps as f64).ceil() as usize;
        let schedule = FusionSchedule {
            alpha0: st.alpha0,
            k_alpha: st.k_alpha.unwrap_or_else(|| fusion::decay_rate_for(0.1, total_steps as u64)),
            tau: st.tau.unwrap_or(1.0),
            gamma: st.gamma,
            gate_enabled: st.gate_enabled,
        };
        let mut step = 0usize;
        let mut best: Option<(f64, ParamStore, f64)> = None;
        for epoch in 0..epochs {
            let (order, digest) = self.epoch_order();
            let mut total = 0.0;
            let mut n = 0.0;
            for (b, chunk) in order.chunks(st.batch[0]).enumerate() {
                let batch: Vec<(usize, usize)> = chunk.iter().map(|&i| self.samples[i]).collect();
                let mut rng = self.batch_rng(4, b);
                let h = st.rollout.horizon_for(epoch, epochs, &mut rng);
                let noise = Array2::from_shape_fn((batch.len(), causal.cfg.structural_dim), |_| rng.sample(StandardNormal));
                let lambda_dag = warmup(st.weights.lambda[3], step, warm);
                let alpha_t = fusion::fusion_alpha(&schedule, step as u64);
                let grads = {
                    let mut s = Session::new(&self.model.store, &all);
                    let (l1, z) = self.backbone_loss(&mut s, &batch, &mut rng)?;
                    let r = causal.refine(&mut s, z, Some(&noise))?;
                    let sup = if causal.cfg.supervision {
                        let (p, c, x) = self.supervision_rows(&batch);
                        Some(Supervision { prior: s.input(p), concept: s.input(c), state: s.input(x) })
                    } else {
                        None
                    };
                    let l2 = causal.stage2_loss(&mut s, z, &r, sup, lambda_dag)?;
                    let zt = causal.refine(&mut s, z, None)?.z_tilde;
                    let delta = fusion::gate_distance(s.graph.value(z), s.graph.value(zt));
                    let alpha = fusion::effective_alpha(&schedule, alpha_t, &delta);
                    let acol = s.input(Array2::from_shape_vec((batch.len(), 1), alpha).expect("column"));
                    let diff = s.graph.sub(zt, z);
                    let mixed = s.graph.mul_col(diff, acol);
                    let zg = s.graph.add(z, mixed);
                    let targets = self.encode_targets(&mut s, &batch, h)?;
                    let l3 = self.multistep_from_targets(&mut s, zg, &batch, &targets, &mut rng);
                    let l12 = s.graph.add(l1, l2.total);
                    let loss = s.graph.add(l12, l3);
                    let v = s.graph.scalar_value(loss);
                    if !v.is_finite() {
                        return Err(Error::numeric(format!("joint loss became non-finite at epoch {epoch}")));
                    }
                    total += v * batch.len() as f64;
                    n += batch.len() as f64;
                    s.gradients(loss)
                };
                opt.apply(&mut self.model.store, &grads);
                causal.guard_adjacency(&mut self.model.store);
                step += 1;
            }
            self.model.fusion = Some(InferenceFusion {
                schedule,
                alpha: fusion::fusion_alpha(&schedule, step.saturating_sub(1) as u64),
            });
            let mut metrics = BTreeMap::new();
            if self.should_validate(epoch, epochs) {
                if let Some(mrr) = self.validation_mrr()? {
                    metrics.insert("val_mrr".to_string(), mrr);
                    if best.as_ref().map_or(true, |(b, _, _)| mrr > *b) {
                        best = Some((mrr, self.model.store.clone(), self.model.fusion.map_or(0.0, |f| f.alpha)));
                    }
                }
            }
            self.push_record("joint", self.global_epoch, total / n, BTreeMap::new(), metrics, digest)?;
            self.global_epoch += 1;
        }
        if let Some((_, store, alpha)) = best {
            self.model.store = store;
            if let Some(f) = self.model.fusion.as_mut() {
                f.alpha = alpha;
            }
        }
        self.write_adjacency()?;
        self.save_checkpoint("ckpt_s3.bin", "joint", self.global_epoch)
    }

    fn encode_targets(&self, s: &mut Session, batch: &[(usize, usize)], h: usize) -> Result<Vec<crate::autodiff::Var>> {
        (1..=h)
            .map(|k| {
                let o = s.input(SplitData::gather(&self.train.obs, batch, k));
                Ok(self.model.backbone.encode(s, o, None)?.mean)
            })
            .collect()
    }

    fn multistep_from_targets(
        &self,
        s: &mut Session,
        z0: crate::autodiff::Var,
        batch: &[(usize, usize)],
        targets: &[crate::autodiff::Var],
        rng: &mut ChaCha8Rng,
    ) -> crate::autodiff::Var {
        let bb = &self.model.backbone;
        let acts: Vec<_> = (0..targets.len())
            .map(|k| s.input(SplitData::gather(&self.train.actions, batch, k)))
            .collect();
        let preds = bb.rollout(s, z0, &acts);
        let terms: Vec<_> = preds
            .into_iter()
            .zip(targets)
            .map(|(p, &t)| match bb.cfg.objective {
                Objective::Contrastive => {
                    let mut perm: Vec<usize> = (0..batch.len()).collect();
                    perm.shuffle(rng);
                    let neg = s.graph.gather_rows(t, &perm);
                    loss_contrastive(&mut s.graph, p, t, neg, bb.cfg.hinge)
                }
                Objective::Nll => loss_nll(&mut s.graph, p, t, bb.cfg.sigma),
            })
            .collect();
        multistep_mean(&mut s.graph, &terms)
    }

    /// Runs the configured schedule.
    pub fn run(mut self) -> Result<RunOutcome> {
        if !self.cfg.with_causal {
            self.run_baseline()?;
        } else if self.cfg.stages.joint {
            self.run_joint()?;
        } else {
            self.run_stage1()?;
            if self.model.causal.is_some() {
                self.run_stage2()?;
            }
            self.run_stage3()?;
        }
        Ok(RunOutcome {
            model: self.model,
            records: self.records,
            freeze_checks: self.freeze_checks,
            run_dir: self.run_dir,
            config_hash: self.config_hash,
        })
    }
}

/// One Adam step of the structural objective on the causal group only,
/// followed by the adjacency conditioning guard. `sup` holds
/// `(prior, concept, state)` rows.
pub fn stage2_step(
    causal: &CausalBranch,
    store: &mut ParamStore,
    opt: &mut Adam,
    z: Array2<f64>,
    noise: &Array2<f64>,
    sup: Option<(Array2<f64>, Array2<f64>, Array2<f64>)>,
    lambda_dag: f64,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let trainable: BTreeSet<String> = [GROUP_CAUSAL.to_string()].into();
    let (v, comps, grads) = {
        let mut s = Session::new(store, &trainable);
        let zv = s.input(z);
        let r = causal.refine(&mut s, zv, Some(noise))?;
        let sup = sup.map(|(p, c, x)| Supervision { prior: s.input(p), concept: s.input(c), state: s.input(x) });
        let l = causal.stage2_loss(&mut s, zv, &r, sup, lambda_dag)?;
        let v = s.graph.scalar_value(l.total);
        if !v.is_finite() {
            return Err(Error::numeric("structural loss became non-finite"));
        }
        (v, l.components(&s.graph), s.gradients(l.total))
    };
    opt.apply(store, &grads);
    causal.guard_adjacency(store);
    Ok((v, comps))
}

/// Linear warm-up: 0 at step 0, `target` from `warm` steps on.
pub fn warmup(target: f64, step: usize, warm: usize) -> f64 {
    if warm == 0 {
        target
    } else {
        target * (step as f64 / warm as f64).min(1.0)
    }
}

/// Mean of per-horizon loss terms.
pub fn multistep_mean(g: &mut crate::autodiff::Graph, terms: &[crate::autodiff::Var]) -> crate::autodiff::Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn matrix_csv(a: &Array2<f64>) -> String {
    a.rows()
        .into_iter()
        .map(|r| r.iter().map(|x| format!("{x:.10e}")).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

pub fn parse_matrix_csv(text: &str) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| Error::format(format!("bad number '{x}'"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::format("matrix rows have unequal lengths"));
    }
    let c = rows[0].len();
    Ok(Array2::from_shape_fn((n, c), |(i, j)| rows[i][j]))
}

/// Full run: baseline, staged, or joint according to `cfg`.
pub fn run_pipeline(cfg: &TrainConfig, dataset: &Dataset, run_dir: Option<&Path>) -> Result<RunOutcome> {
    Pipeline::new(cfg, dataset, run_dir)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_split_parses() {
        assert_eq!(StageSplit::parse("s1_8_s2_40", 60).unwrap(), StageSplit { s1: 8, s2: 40, s3: 60 });
        assert!(StageSplit::parse("s1_8", 60).is_err());
        assert!(StageSplit::parse("s1_x_s2_40", 60).is_err());
    }

    #[test]
    fn late_mixed_phases() {
        let r = RolloutConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for e in 0..20 {
            assert_eq!(r.horizon_for(e, 30, &mut rng), 5);
        }
        let hs: BTreeSet<usize> = (0..500).map(|_| r.horizon_for(29, 30, &mut rng)).collect();
        assert_eq!(hs, (1..=10).collect());
        let c = RolloutConfig { policy: RolloutPolicy::Curriculum, ..r };
        assert_eq!(c.horizon_for(0, 10, &mut rng), 1);
        assert_eq!(c.horizon_for(9, 10, &mut rng), 10);
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(warmup(3.0, 0, 10), 0.0);
        assert_eq!(warmup(3.0, 10, 10), 3.0);
        assert_eq!(warmup(3.0, 5, 10), 1.5);
    }

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a":1,"b":{"c":2,"d":3}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b":{"d":3,"c":2},"a":1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn csv_round_trip() {
        let a = Array2::from_shape_vec((2, 2), vec![0.1, -2.0, 1e-9, 3.5]).unwrap();
        assert_eq!(parse_matrix_csv(&matrix_csv(&a)).unwrap(), a);
    }
}
