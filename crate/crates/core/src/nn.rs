//! Parameter storage, layers and the Adam optimizer.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter arrays, each tagged with a module group used for freezing.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    groups: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: &str, name: &str, value: Array2<f64>) -> ParamId {
        let full = format!("{group}.{name}");
        assert!(
            !self.names.contains(&full),
            "duplicate parameter name {full}"
        );
        self.names.push(full);
        self.groups.push(group.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> &str {
        &self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn group_names(&self) -> BTreeSet<String> {
        self.groups.iter().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 of every parameter's little-endian bytes, keyed by name.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.ids()
            .map(|id| (self.names[id.0].clone(), hash_array(&self.values[id.0])))
            .collect()
    }

    /// Hashes restricted to one module group.
    pub fn group_hashes(&self, group: &str) -> BTreeMap<String, String> {
        self.ids()
            .filter(|id| self.groups[id.0] == group)
            .map(|id| (self.names[id.0].clone(), hash_array(&self.values[id.0])))
            .collect()
    }

    /// Copies values of every parameter whose name also exists in `other`.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for id in other.ids() {
            if let Some(mine) = self.find(other.name(id)) {
                assert_eq!(
                    self.values[mine.0].dim(),
                    other.get(id).dim(),
                    "shape mismatch loading {}",
                    other.name(id)
                );
                self.values[mine.0] = other.get(id).clone();
                n += 1;
            }
        }
        n
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, &Array2<f64>)> {
        self.names
            .iter()
            .zip(&self.groups)
            .zip(&self.values)
            .map(|((n, g), v)| (n.as_str(), g.as_str(), v))
    }
}

pub fn hash_array(a: &Array2<f64>) -> String {
    let mut h = Sha256::new();
    h.update((a.nrows() as u64).to_le_bytes());
    h.update((a.ncols() as u64).to_le_bytes());
    for x in a.iter() {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// One forward pass: a tape plus the binding of store parameters to tape leaves.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    trainable: &'a BTreeSet<String>,
    bound: HashMap<ParamId, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a BTreeSet<String>) -> Self {
        Self {
            graph: Graph::new(),
            store,
            trainable,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape leaf for a parameter; differentiable only if its group is trainable.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable.contains(self.store.group(id)) {
            self.graph.leaf(value)
        } else {
            self.graph.constant(value)
        };
        self.bound.insert(id, v);
        v
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.graph.constant(value)
    }

    /// Backward from `loss`; gradients of trainable parameters in id order.
    pub fn gradients(&self, loss: Var) -> Vec<(ParamId, Array2<f64>)> {
        let mut grads: Gradients = self.graph.backward(loss);
        let mut out: Vec<(ParamId, Array2<f64>)> = self
            .bound
            .iter()
            .filter(|(id, _)| self.trainable.contains(self.store.group(**id)))
            .filter_map(|(id, v)| grads.take(*v).map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Uniform fan-in initialisation `U(-1/√fan_in, 1/√fan_in)`.
pub fn uniform_fan_in<R: Rng>(rng: &mut R, fan_in: usize, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        group: &str,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = uniform_fan_in(rng, fan_in, fan_in, fan_out);
        let b = uniform_fan_in(rng, fan_in, 1, fan_out);
        Self {
            weight: store.add(group, &format!("{name}.weight"), w),
            bias: store.add(group, &format!("{name}.bias"), b),
            fan_in,
            fan_out,
        }
    }

    pub fn zeroed(store: &mut ParamStore, group: &str, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: store.add(group, &format!("{name}.weight"), Array2::zeros((fan_in, fan_out))),
            bias: store.add(group, &format!("{name}.bias"), Array2::zeros((1, fan_out))),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.p(self.weight);
        let b = s.p(self.bias);
        let m = s.graph.matmul(x, w);
        s.graph.add_row(m, b)
    }
}

/// Fully connected stack; activation between layers, none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`. When `zero_last` is set the output layer
    /// starts at zero.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        group: &str,
        name: &str,
        dims: &[usize],
        activation: Activation,
        zero_last: bool,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if zero_last && i == n - 1 {
                    Linear::zeroed(store, group, &lname, dims[i], dims[i + 1])
                } else {
                    Linear::new(store, rng, group, &lname, dims[i], dims[i + 1])
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h);
            if i + 1 < self.layers.len() {
                h = self.activation.apply(&mut s.graph, h);
            }
        }
        h
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<ParamId, (Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(ParamId, Array2<f64>)]) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads {
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Array2::zeros(g.dim()), Array2::zeros(g.dim())));
            m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let p = store.get_mut(*id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mh = m / bc1;
                let vh = v / bc2;
                *p -= c.lr * mh / (vh.sqrt() + c.eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_groups_are_constant_leaves() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Linear::new(&mut store, &mut rng, "enc", "l", 2, 2);
        let b = Linear::new(&mut store, &mut rng, "dec", "l", 2, 1);
        let trainable: BTreeSet<String> = ["dec".to_string()].into_iter().collect();
        let mut s = Session::new(&store, &trainable);
        let x = s.input(Array2::ones((3, 2)));
        let h = a.forward(&mut s, x);
        let y = b.forward(&mut s, h);
        let loss = s.graph.sum(y);
        let grads = s.gradients(loss);
        let names: Vec<&str> = grads.iter().map(|(id, _)| store.name(*id)).collect();
        assert_eq!(names, vec!["dec.l.weight", "dec.l.bias"]);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", "v", Array2::from_elem((1, 3), 4.0));
        let trainable: BTreeSet<String> = ["x".to_string()].into_iter().collect();
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..2000 {
            let grads = {
                let mut s = Session::new(&store, &trainable);
                let v = s.p(id);
                let sq = s.graph.square(v);
                let l = s.graph.sum(sq);
                s.gradients(l)
            };
            opt.apply(&mut store, &grads);
        }
        assert!(store.get(id).iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn hash_changes_with_value() {
        let a = Array2::zeros((2, 2));
        let mut b = a.clone();
        b[[1, 1]] = 1e-300;
        assert_ne!(hash_array(&a), hash_array(&b));
        assert_eq!(hash_array(&a), hash_array(&a.clone()));
    }
}
