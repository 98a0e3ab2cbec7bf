//! A backbone plus an optional causal branch, with checkpoint I/O.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{Archive, NamedArray};
use crate::backbone::{Backbone, BackboneConfig, Objective};
use crate::causal::{CausalBranch, CausalConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionSchedule};
use crate::nn::{ParamStore, Session};

pub const CHECKPOINT_KIND: &str = "cwlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub causal: Option<CausalConfig>,
}

/// Fusion used at inference: the schedule plus the final `α`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceFusion {
    pub schedule: FusionSchedule,
    pub alpha: f64,
}

/// Normalisation of simulator states used by the supervision targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub delta_mean: Vec<f64>,
    pub delta_std: Vec<f64>,
}

/// Header stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub stage: String,
    pub epoch: usize,
    pub seed: u64,
    pub env: String,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub causal: Option<CausalBranch>,
    pub fusion: Option<InferenceFusion>,
    pub state_norm: Option<StateNorm>,
}

impl WorldModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&cfg.backbone, &mut store, &mut rng)?;
        let causal = match &cfg.causal {
            Some(c) => {
                if c.latent_dim != cfg.backbone.latent_dim() {
                    return Err(Error::config(format!(
                        "causal branch expects latent dim {}, backbone has {}",
                        c.latent_dim,
                        cfg.backbone.latent_dim()
                    )));
                }
                Some(CausalBranch::new(c, &mut store, &mut rng)?)
            }
            None => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            causal,
            fusion: None,
            state_norm: None,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.backbone.latent_dim()
    }

    pub fn objective(&self) -> Objective {
        self.cfg.backbone.objective
    }

    fn frozen() -> BTreeSet<String> {
        BTreeSet::new()
    }

    /// Eval-mode encoder latents, one row per observation.
    pub fn encode(&self, obs: &Array2<f64>) -> Result<Array2<f64>> {
        let none = Self::frozen();
        let mut s = Session::new(&self.store, &none);
        let x = s.input(obs.clone());
        let e = self.backbone.encode(&mut s, x, None)?;
        Ok(s.graph.value(e.z).clone())
    }

    /// Eval-mode `z̃`; `z` itself when there is no branch.
    pub fn refine(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        match &self.causal {
            None => Ok(z.clone()),
            Some(c) => {
                let none = Self::frozen();
                let mut s = Session::new(&self.store, &none);
                let zv = s.input(z.clone());
                let r = c.refine(&mut s, zv, None)?;
                Ok(s.graph.value(r.z_tilde).clone())
            }
        }
    }

    /// Latent fed to the transition at inference: `z` for plain backbones,
    /// `z_gate` with the final fusion coefficient otherwise.
    pub fn transition_input(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        match (&self.causal, &self.fusion) {
            (Some(_), Some(f)) => {
                let zt = self.refine(z)?;
                let delta = fusion::gate_distance(z, &zt);
                let alpha = fusion::effective_alpha(&f.schedule, f.alpha, &delta);
                Ok(fusion::mix(z, &zt, &alpha))
            }
            _ => Ok(z.clone()),
        }
    }

    /// Recursive rollout from `z0` (already gated) under per-step actions.
    pub fn rollout(&self, z0: &Array2<f64>, actions: &[Array2<f64>]) -> Vec<Array2<f64>> {
        let none = Self::frozen();
        let mut s = Session::new(&self.store, &none);
        let z = s.input(z0.clone());
        let acts: Vec<_> = actions.iter().map(|a| s.input(a.clone())).collect();
        let out = self.backbone.rollout(&mut s, z, &acts);
        out.into_iter().map(|v| s.graph.value(v).clone()).collect()
    }

    /// Candidate score: negative squared distance for contrastive models,
    /// Gaussian log-likelihood (without constant) for NLL models.
    pub fn score(&self, pred: &[f64], candidate: &[f64]) -> f64 {
        let d2: f64 = pred.iter().zip(candidate).map(|(a, b)| (a - b) * (a - b)).sum();
        match self.objective() {
            Objective::Contrastive => -d2,
            Objective::Nll => {
                let s = self.cfg.backbone.sigma;
                -d2 / (2.0 * s * s)
            }
        }
    }

    pub fn adjacency(&self) -> Option<Array2<f64>> {
        self.causal.as_ref().map(|c| c.adjacency(&self.store))
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let header = json!({
            "meta": meta,
            "model": self.cfg,
            "fusion": self.fusion,
            "state_norm": self.state_norm,
        });
        let mut a = Archive::new(CHECKPOINT_KIND, CHECKPOINT_VERSION, header);
        for (name, _, value) in self.store.entries() {
            a.insert(name, NamedArray::from_matrix(value));
        }
        a.write(path)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let a = Archive::read(path, CHECKPOINT_KIND, CHECKPOINT_VERSION)?;
        let field = |k: &str| a.header.get(k).cloned().unwrap_or(serde_json::Value::Null);
        let cfg: ModelConfig = serde_json::from_value(field("model"))
            .map_err(|e| Error::format(format!("checkpoint model config: {e}")))?;
        let meta: CheckpointMeta = serde_json::from_value(field("meta"))
            .map_err(|e| Error::format(format!("checkpoint meta: {e}")))?;
        let mut m = Self::new(&cfg, 0)?;
        m.fusion = serde_json::from_value(field("fusion"))
            .map_err(|e| Error::format(format!("checkpoint fusion: {e}")))?;
        m.state_norm = serde_json::from_value(field("state_norm"))
            .map_err(|e| Error::format(format!("checkpoint state_norm: {e}")))?;
        let ids: Vec<_> = m.store.ids().collect();
        for id in ids {
            let name = m.store.name(id).to_string();
            let arr = a.get(&name)?.to_matrix()?;
            if arr.dim() != m.store.get(id).dim() {
                return Err(Error::format(format!("parameter {name} has shape {:?}", arr.dim())));
            }
            *m.store.get_mut(id) = arr;
        }
        if a.arrays.len() != m.store.len() {
            return Err(Error::format("checkpoint holds parameters unknown to this model"));
        }
        Ok((m, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Family, InputSpec};

    fn cfg(causal: bool) -> ModelConfig {
        let mut b = BackboneConfig::new(Family::Gnn, Objective::Contrastive, InputSpec::State { dim: 6 }, 6);
        b.num_slots = 3;
        b.slot_dim = 2;
        b.hidden_dim = 8;
        ModelConfig {
            backbone: b,
            causal: causal.then(|| CausalConfig::new(6, 6, 6, true)),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = WorldModel::new(&cfg(true), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.bin");
        let meta = CheckpointMeta {
            config_hash: "abc".into(),
            stage: "s1".into(),
            epoch: 4,
            seed: 3,
            env: "physics-nbody".into(),
        };
        m.save(&p, &meta).unwrap();
        let (back, meta2) = WorldModel::load(&p).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(back.store.hashes(), m.store.hashes());
    }

    #[test]
    fn refine_is_neutral_at_init() {
        let m = WorldModel::new(&cfg(true), 1).unwrap();
        let z = Array2::from_shape_fn((4, 6), |(i, j)| (i as f64 - 1.5) * 0.3 + j as f64 * 0.1);
        let zt = m.refine(&z).unwrap();
        let max = (&zt - &z).iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert_eq!(max, 0.0);
    }
}
