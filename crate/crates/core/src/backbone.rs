//! Encoder–transition world models: AE, VAE, Modular and GNN families with
//! NLL or contrastive objectives.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvShape, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{uniform_fan_in, Activation, Mlp, ParamId, ParamStore, Session};

pub const GROUP_ENCODER: &str = "encoder";
pub const GROUP_TRANSITION: &str = "transition";
pub const GROUP_DECODER: &str = "decoder";
pub const GROUP_NORM: &str = "norm";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Ae,
    Vae,
    Modular,
    Gnn,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Ae, Family::Vae, Family::Modular, Family::Gnn];

    pub fn label(self) -> &'static str {
        match self {
            Family::Ae => "AE",
            Family::Vae => "VAE",
            Family::Modular => "Modular",
            Family::Gnn => "GNN",
        }
    }

    pub fn object_centric(self) -> bool {
        matches!(self, Family::Modular | Family::Gnn)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Nll,
    Contrastive,
}

impl Objective {
    pub fn label(self) -> &'static str {
        match self {
            Objective::Nll => "NLL",
            Objective::Contrastive => "Contrastive",
        }
    }
}

/// Shape of the model input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum InputSpec {
    State { dim: usize },
    Pixels { height: usize, width: usize, channels: usize },
}

impl InputSpec {
    pub fn dim(&self) -> usize {
        match *self {
            InputSpec::State { dim } => dim,
            InputSpec::Pixels { height, width, channels } => height * width * channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub family: Family,
    pub objective: Objective,
    pub num_slots: usize,
    pub slot_dim: usize,
    pub hidden_dim: usize,
    pub action_dim: usize,
    pub input: InputSpec,
    /// Contrastive hinge margin `m`.
    pub hinge: f64,
    /// Energy scale `σ` of the latent Gaussian.
    pub sigma: f64,
    pub vae_kl_weight: f64,
    pub cnn_channels: usize,
    pub cnn_kernel: usize,
}

impl BackboneConfig {
    pub fn new(family: Family, objective: Objective, input: InputSpec, action_dim: usize) -> Self {
        Self {
            family,
            objective,
            num_slots: 5,
            slot_dim: 5,
            hidden_dim: 64,
            action_dim,
            input,
            hinge: 1.0,
            sigma: 0.5,
            vae_kl_weight: 1.0,
            cnn_channels: 16,
            cnn_kernel: 10,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.num_slots * self.slot_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_slots == 0 || self.slot_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::config("num_slots, slot_dim and hidden_dim must be positive"));
        }
        if !(self.hinge > 0.0) {
            return Err(Error::config(format!("hinge margin must be > 0, got {}", self.hinge)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if matches!(self.family, Family::Ae | Family::Vae) && self.num_slots != 1 {
            return Err(Error::config(format!(
                "{} is monolithic and needs num_slots = 1",
                self.family.label()
            )));
        }
        if let InputSpec::Pixels { height, width, .. } = self.input {
            if self.cnn_kernel == 0 || self.cnn_kernel > height || self.cnn_kernel > width {
                return Err(Error::config("cnn_kernel must fit inside the image"));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{}_{}", self.family.label(), self.objective.label())
    }
}

/// Latent state: `K × d` slots.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub slots: Array2<f64>,
}

impl LatentState {
    pub fn from_flat(flat: &[f64], k: usize, d: usize) -> Result<Self> {
        if flat.len() != k * d {
            return Err(Error::input(format!("latent of length {} is not {k}×{d}", flat.len())));
        }
        Ok(Self {
            slots: Array2::from_shape_vec((k, d), flat.to_vec()).expect("checked length"),
        })
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slots.iter().copied().collect()
    }

    pub fn num_slots(&self) -> usize {
        self.slots.nrows()
    }

    pub fn slot_dim(&self) -> usize {
        self.slots.ncols()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// Latent used downstream (sample in training, mean otherwise).
    pub z: Var,
    pub mean: Var,
    pub logvar: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct TransitionOutput {
    pub delta: Var,
    pub predicted: Var,
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    shape: ConvShape,
}

impl Conv {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, shape: ConvShape) -> Self {
        let fan_in = shape.patch_len();
        Self {
            weight: store.add(
                GROUP_ENCODER,
                &format!("{name}.weight"),
                uniform_fan_in(rng, fan_in, shape.out_channels, fan_in),
            ),
            bias: store.add(GROUP_ENCODER, &format!("{name}.bias"), uniform_fan_in(rng, fan_in, 1, shape.out_channels)),
            shape,
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.p(self.weight);
        let b = s.p(self.bias);
        s.graph.conv2d(x, w, b, self.shape)
    }
}

#[derive(Clone, Debug)]
enum EncoderNet {
    Mlp(Mlp),
    Cnn {
        conv: Conv,
        /// 1×1 convolution to one map per slot (object-centric families).
        to_slots: Option<Conv>,
        head: Mlp,
    },
}

#[derive(Clone, Debug)]
enum TransitionNet {
    Joint(Mlp),
    Modular(Vec<Mlp>),
    Gnn { edge: Option<Mlp>, node: Mlp },
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    norm_shift: ParamId,
    norm_scale: ParamId,
    encoder: EncoderNet,
    transition: TransitionNet,
    decoder: Option<Mlp>,
}

impl Backbone {
    pub fn new<R: Rng>(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (k, d, h) = (cfg.num_slots, cfg.slot_dim, cfg.hidden_dim);
        let latent = cfg.latent_dim();
        let out_mult = if cfg.family == Family::Vae { 2 } else { 1 };
        let in_dim = cfg.input.dim();
        let norm_shift = store.add(GROUP_NORM, "shift", Array2::zeros((1, in_dim)));
        let norm_scale = store.add(GROUP_NORM, "scale", Array2::ones((1, in_dim)));

        let encoder = match cfg.input {
            InputSpec::State { dim } => EncoderNet::Mlp(Mlp::new(
                store,
                rng,
                GROUP_ENCODER,
                "mlp",
                &[dim, h, latent * out_mult],
                Activation::Relu,
                false,
            )),
            InputSpec::Pixels { height, width, channels } => {
                let shape = ConvShape {
                    in_channels: channels,
                    height,
                    width,
                    out_channels: cfg.cnn_channels,
                    kernel: cfg.cnn_kernel,
                    stride: cfg.cnn_kernel,
                };
                let conv = Conv::new(store, rng, "conv1", shape);
                let positions = shape.out_height() * shape.out_width();
                if cfg.family.object_centric() {
                    let to_slots = Conv::new(
                        store,
                        rng,
                        "conv2",
                        ConvShape {
                            in_channels: cfg.cnn_channels,
                            height: shape.out_height(),
                            width: shape.out_width(),
                            out_channels: k,
                            kernel: 1,
                            stride: 1,
                        },
                    );
                    let head = Mlp::new(store, rng, GROUP_ENCODER, "head", &[positions, h, d * out_mult], Activation::Relu, false);
                    EncoderNet::Cnn { conv, to_slots: Some(to_slots), head }
                } else {
                    let head = Mlp::new(
                        store,
                        rng,
                        GROUP_ENCODER,
                        "head",
                        &[cfg.cnn_channels * positions, h, latent * out_mult],
                        Activation::Relu,
                        false,
                    );
                    EncoderNet::Cnn { conv, to_slots: None, head }
                }
            }
        };

        let a_slot = slot_action_dim(cfg);
        let transition = match cfg.family {
            Family::Ae | Family::Vae => TransitionNet::Joint(Mlp::new(
                store,
                rng,
                GROUP_TRANSITION,
                "joint",
                &[latent + cfg.action_dim, h, h, latent],
                Activation::Relu,
                true,
            )),
            Family::Modular => TransitionNet::Modular(
                (0..k)
                    .map(|i| {
                        Mlp::new(
                            store,
                            rng,
                            GROUP_TRANSITION,
                            &format!("slot{i}"),
                            &[latent + a_slot, h, d],
                            Activation::Relu,
                            true,
                        )
                    })
                    .collect(),
            ),
            Family::Gnn => {
                let edge = (k > 1).then(|| {
                    Mlp::new(store, rng, GROUP_TRANSITION, "edge", &[2 * d, h, h], Activation::Relu, false)
                });
                let node_in = d + a_slot + if k > 1 { h } else { 0 };
                let node = Mlp::new(store, rng, GROUP_TRANSITION, "node", &[node_in, h, d], Activation::Relu, true);
                TransitionNet::Gnn { edge, node }
            }
        };

        let decoder = (cfg.objective == Objective::Nll).then(|| {
            Mlp::new(store, rng, GROUP_DECODER, "mlp", &[latent, h, in_dim], Activation::Relu, false)
        });

        Ok(Self {
            cfg: cfg.clone(),
            norm_shift,
            norm_scale,
            encoder,
            transition,
            decoder,
        })
    }

    /// Sets per-feature input standardisation `(x − mean) / std`.
    pub fn set_input_normalization(&self, store: &mut ParamStore, mean: &[f64], std: &[f64]) -> Result<()> {
        let n = self.cfg.input.dim();
        if mean.len() != n || std.len() != n {
            return Err(Error::input(format!("normalisation vectors must have length {n}")));
        }
        *store.get_mut(self.norm_shift) = Array2::from_shape_fn((1, n), |(_, j)| -mean[j]);
        *store.get_mut(self.norm_scale) = Array2::from_shape_fn((1, n), |(_, j)| 1.0 / std[j].max(1e-6));
        Ok(())
    }

    pub fn has_decoder(&self) -> bool {
        self.decoder.is_some()
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim()
    }

    /// Standardised input.
    pub fn normalize(&self, s: &mut Session, obs: Var) -> Var {
        let shift = s.p(self.norm_shift);
        let scale = s.p(self.norm_scale);
        let x = s.graph.add_row(obs, shift);
        s.graph.mul_row(x, scale)
    }

    fn check_input(&self, s: &Session, obs: Var) -> Result<()> {
        let (_, cols) = s.graph.shape(obs);
        if cols != self.cfg.input.dim() {
            return Err(Error::input(format!(
                "observation has {cols} features, model expects {}",
                self.cfg.input.dim()
            )));
        }
        Ok(())
    }

    /// `z = E(o)`. For the VAE family `noise` (B × latent) turns on the
    /// reparameterised sample; without it the mean is returned.
    pub fn encode(&self, s: &mut Session, obs: Var, noise: Option<&Array2<f64>>) -> Result<Encoded> {
        self.check_input(s, obs)?;
        let x = self.normalize(s, obs);
        let (k, d) = (self.cfg.num_slots, self.cfg.slot_dim);
        let latent = k * d;
        let raw = match &self.encoder {
            EncoderNet::Mlp(m) => m.forward(s, x),
            EncoderNet::Cnn { conv, to_slots, head } => {
                let batch = s.graph.shape(x).0;
                let h1 = conv.forward(s, x);
                let h1 = s.graph.relu(h1);
                match to_slots {
                    Some(c2) => {
                        let maps = c2.forward(s, h1);
                        let maps = s.graph.sigmoid(maps);
                        let positions = c2.shape.height * c2.shape.width;
                        let per_obj = s.graph.reshape(maps, batch * k, positions);
                        let out = head.forward(s, per_obj);
                        let cols = s.graph.shape(out).1;
                        if self.cfg.family == Family::Vae {
                            let mean = s.graph.slice_cols(out, 0, d);
                            let logvar = s.graph.slice_cols(out, d, d);
                            let mean = s.graph.reshape(mean, batch, latent);
                            let logvar = s.graph.reshape(logvar, batch, latent);
                            s.graph.concat_cols(&[mean, logvar])
                        } else {
                            s.graph.reshape(out, batch, k * cols)
                        }
                    }
                    None => head.forward(s, h1),
                }
            }
        };
        if self.cfg.family != Family::Vae {
            return Ok(Encoded { z: raw, mean: raw, logvar: None });
        }
        let mean = s.graph.slice_cols(raw, 0, latent);
        let logvar = s.graph.slice_cols(raw, latent, latent);
        let z = match noise {
            Some(n) => {
                let half = s.graph.scale(logvar, 0.5);
                let std = s.graph.exp(half);
                let eps = s.input(n.clone());
                let jitter = s.graph.mul(std, eps);
                s.graph.add(mean, jitter)
            }
            None => mean,
        };
        Ok(Encoded { z, mean, logvar: Some(logvar) })
    }

    /// Residual transition `ẑ = z + Δz`.
    pub fn transition(&self, s: &mut Session, z: Var, action: Var) -> TransitionOutput {
        let (k, d) = (self.cfg.num_slots, self.cfg.slot_dim);
        let a_slot = slot_action_dim(&self.cfg);
        let batch = s.graph.shape(z).0;
        let delta = match &self.transition {
            TransitionNet::Joint(m) => {
                let x = s.graph.concat_cols(&[z, action]);
                m.forward(s, x)
            }
            TransitionNet::Modular(nets) => {
                let outs: Vec<Var> = nets
                    .iter()
                    .enumerate()
                    .map(|(i, m)| {
                        let a = slot_action(s, action, i, a_slot, self.cfg.action_dim);
                        let x = s.graph.concat_cols(&[z, a]);
                        m.forward(s, x)
                    })
                    .collect();
                s.graph.concat_cols(&outs)
            }
            TransitionNet::Gnn { edge, node } => {
                let nodes = s.graph.reshape(z, batch * k, d);
                let acts = if a_slot * k == self.cfg.action_dim {
                    s.graph.reshape(action, batch * k, a_slot)
                } else {
                    let rows: Vec<usize> = (0..batch * k).map(|r| r / k).collect();
                    s.graph.gather_rows(action, &rows)
                };
                let mut parts = vec![nodes];
                if let Some(edge) = edge {
                    let (src, dst) = edge_index(batch, k);
                    let hs = s.graph.gather_rows(nodes, &src);
                    let hd = s.graph.gather_rows(nodes, &dst);
                    let e_in = s.graph.concat_cols(&[hs, hd]);
                    let msg = edge.forward(s, e_in);
                    let msg = s.graph.relu(msg);
                    let agg = s.graph.scatter_add_rows(msg, &dst, batch * k);
                    parts.push(agg);
                }
                parts.push(acts);
                let x = s.graph.concat_cols(&parts);
                let out = node.forward(s, x);
                s.graph.reshape(out, batch, k * d)
            }
        };
        let predicted = s.graph.add(z, delta);
        TransitionOutput { delta, predicted }
    }

    /// Recursive rollout: one prediction per action.
    pub fn rollout(&self, s: &mut Session, z0: Var, actions: &[Var]) -> Vec<Var> {
        let mut z = z0;
        actions
            .iter()
            .map(|&a| {
                z = self.transition(s, z, a).predicted;
                z
            })
            .collect()
    }

    /// Reconstruction `ô = D(z)` in standardised input units.
    pub fn decode(&self, s: &mut Session, z: Var) -> Result<Var> {
        match &self.decoder {
            Some(m) => Ok(m.forward(s, z)),
            None => Err(Error::config(format!(
                "{} has no decoder; decode needs an NLL-route model",
                self.cfg.label()
            ))),
        }
    }
}

fn slot_action_dim(cfg: &BackboneConfig) -> usize {
    let k = cfg.num_slots;
    if cfg.action_dim % k == 0 && k > 1 {
        cfg.action_dim / k
    } else {
        cfg.action_dim
    }
}

fn slot_action(s: &mut Session, action: Var, slot: usize, a_slot: usize, a_dim: usize) -> Var {
    if a_slot == a_dim {
        action
    } else {
        s.graph.slice_cols(action, slot * a_slot, a_slot)
    }
}

/// Directed edges between all distinct slot pairs of every sample.
fn edge_index(batch: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::with_capacity(batch * k * (k - 1));
    let mut dst = Vec::with_capacity(batch * k * (k - 1));
    for b in 0..batch {
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    src.push(b * k + i);
                    dst.push(b * k + j);
                }
            }
        }
    }
    (src, dst)
}

/// Batch mean of `‖pred − target‖² / (2σ²)`.
pub fn loss_nll(g: &mut Graph, pred: Var, target: Var, sigma: f64) -> Var {
    let d = g.row_sq_dist(pred, target);
    let m = g.mean(d);
    g.scale(m, 1.0 / (2.0 * sigma * sigma))
}

/// Batch mean of `‖pred − target‖² + max(0, m − ‖pred − negative‖²)`.
pub fn loss_contrastive(g: &mut Graph, pred: Var, target: Var, negative: Var, margin: f64) -> Var {
    let pos = g.row_sq_dist(pred, target);
    let neg = g.row_sq_dist(pred, negative);
    let hinge = g.hinge(neg, margin);
    let total = g.add(pos, hinge);
    g.mean(total)
}

/// Batch mean of `KL(N(mean, exp(logvar)) ‖ N(0, I))`, summed over dimensions.
pub fn kl_standard_normal(g: &mut Graph, mean: Var, logvar: Var) -> Var {
    // ½ Σ (μ² + e^{lv} − 1 − lv)
    let m2 = g.square(mean);
    let ev = g.exp(logvar);
    let a = g.add(m2, ev);
    let b = g.sub(a, logvar);
    let c = g.add_scalar(b, -1.0);
    let r = g.row_sum(c);
    let m = g.mean(r);
    g.scale(m, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Session;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn build(family: Family, objective: Objective, input: InputSpec, k: usize, d: usize, a: usize) -> (ParamStore, Backbone) {
        let mut cfg = BackboneConfig::new(family, objective, input, a);
        cfg.num_slots = k;
        cfg.slot_dim = d;
        cfg.hidden_dim = 16;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&cfg, &mut store, &mut rng).unwrap();
        (store, bb)
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn encoder_shapes() {
        let none = BTreeSet::new();
        for (family, k, d) in [(Family::Ae, 1, 6), (Family::Gnn, 5, 5), (Family::Modular, 5, 5), (Family::Vae, 1, 4)] {
            let (store, bb) = build(family, Objective::Contrastive, InputSpec::State { dim: 10 }, k, d, 20);
            let mut s = Session::new(&store, &none);
            let x = s.input(random(3, 10, 1));
            let e = bb.encode(&mut s, x, None).unwrap();
            assert_eq!(s.graph.shape(e.z), (3, k * d));
        }
        let (store, bb) = build(
            Family::Gnn,
            Objective::Contrastive,
            InputSpec::Pixels { height: 20, width: 20, channels: 3 },
            3,
            2,
            12,
        );
        let mut s = Session::new(&store, &none);
        let x = s.input(random(2, 1200, 2).mapv(f64::abs));
        let e = bb.encode(&mut s, x, None).unwrap();
        assert_eq!(s.graph.shape(e.z), (2, 6));
        let wrong = s.input(random(2, 7, 3));
        assert!(matches!(bb.encode(&mut s, wrong, None), Err(Error::Input(_))));
    }

    #[test]
    fn residual_identity_at_init() {
        let none = BTreeSet::new();
        for family in Family::ALL {
            let k = if family.object_centric() { 3 } else { 1 };
            let (store, bb) = build(family, Objective::Nll, InputSpec::State { dim: 6 }, k, 2, 12);
            let mut s = Session::new(&store, &none);
            let z = s.input(random(4, 2 * k, 5));
            let acts: Vec<Var> = (0..5).map(|t| s.input(random(4, 12, 10 + t))).collect();
            let out = bb.rollout(&mut s, z, &acts);
            assert_eq!(out.len(), 5);
            for v in out {
                assert_eq!(s.graph.value(v), s.graph.value(z));
            }
        }
    }

    #[test]
    fn decode_requires_nll_route() {
        let none = BTreeSet::new();
        let (store, bb) = build(Family::Ae, Objective::Contrastive, InputSpec::State { dim: 6 }, 1, 4, 2);
        let mut s = Session::new(&store, &none);
        let z = s.input(random(1, 4, 0));
        assert!(matches!(bb.decode(&mut s, z), Err(Error::Config(_))));
        let (store, bb) = build(Family::Ae, Objective::Nll, InputSpec::State { dim: 6 }, 1, 4, 2);
        let mut s = Session::new(&store, &none);
        let z = s.input(random(1, 4, 0));
        let o = bb.decode(&mut s, z).unwrap();
        assert_eq!(s.graph.shape(o), (1, 6));
    }

    #[test]
    fn nll_closed_forms() {
        let mut g = Graph::new();
        let p = g.constant(Array2::ones((1, 8)));
        let t = g.constant(Array2::zeros((1, 8)));
        let l1 = loss_nll(&mut g, p, t, 1.0);
        let l2 = loss_nll(&mut g, p, t, 0.5);
        assert!((g.scalar_value(l1) - 4.0).abs() < 1e-12);
        assert!((g.scalar_value(l2) - 16.0).abs() < 1e-12);
        let z = loss_nll(&mut g, p, p, 0.5);
        assert_eq!(g.scalar_value(z), 0.0);
    }

    #[test]
    fn contrastive_closed_forms() {
        let mut g = Graph::new();
        let mut pred = Array2::zeros((1, 4));
        pred[[0, 0]] = 0.1;
        let p = g.constant(pred);
        let t = g.constant(Array2::zeros((1, 4)));
        let mut negv = Array2::zeros((1, 4));
        negv[[0, 0]] = 0.1 + 0.5f64.sqrt();
        let n = g.constant(negv);
        let l = loss_contrastive(&mut g, p, t, n, 1.0);
        assert!((g.scalar_value(l) - 0.51).abs() < 1e-12);
        let same = loss_contrastive(&mut g, t, t, t, 1.0);
        assert!((g.scalar_value(same) - 1.0).abs() < 1e-12);
    }
}
