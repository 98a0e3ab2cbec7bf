//! Structural causal branch: exogenous posterior, linear causal layer over a
//! learned adjacency, per-concept mask layer, and the Stage-2 objective.
//!
//! Adjacency convention: `A[i][j]` is the edge `i → j`, so the parents of
//! concept `j` are the non-zero entries of column `j`. Samples are rows, so
//! the structural pass `x = (I − Aᵀ)⁻¹ ε` reads `X = E (I − A)⁻¹`.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{Activation, Linear, Mlp, ParamId, ParamStore, Session};

pub const GROUP_CAUSAL: &str = "causal";

pub const TERM_NAMES: [&str; 5] = ["rec", "kl", "align", "dag", "mask"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalLossWeights {
    /// `λ1..λ5` for rec, KL, align, DAG and mask.
    pub lambda: [f64; 5],
    pub alpha_kl: f64,
}

impl Default for CausalLossWeights {
    fn default() -> Self {
        Self {
            lambda: [1.0, 1.0, 1.0, 3.0, 1.0],
            alpha_kl: 0.3,
        }
    }
}

impl CausalLossWeights {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda.iter().find(|l| !(**l >= 0.0)) {
            return Err(Error::config(format!("loss weights must be non-negative, got {l}")));
        }
        if !(self.alpha_kl >= 0.0) {
            return Err(Error::config("alpha_kl must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalConfig {
    /// Structural dimension `d_s`.
    pub structural_dim: usize,
    /// Flattened backbone latent `K·d`.
    pub latent_dim: usize,
    /// Output dimension of the alignment head.
    pub state_dim: usize,
    /// Hidden width of each per-concept mask network.
    pub mask_hidden: usize,
    pub weights: CausalLossWeights,
    /// State-conditioned terms and alignment are active.
    pub supervision: bool,
    /// Structural index of every state coordinate.
    pub slot_map: Vec<usize>,
    pub max_condition: f64,
    pub clip_spectral_norm: f64,
}

impl CausalConfig {
    pub fn new(structural_dim: usize, latent_dim: usize, state_dim: usize, supervision: bool) -> Self {
        Self {
            structural_dim,
            latent_dim,
            state_dim,
            mask_hidden: 8,
            weights: CausalLossWeights::default(),
            supervision,
            slot_map: (0..state_dim.min(structural_dim)).collect(),
            max_condition: 1e8,
            clip_spectral_norm: 0.95,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.structural_dim == 0 || self.latent_dim == 0 {
            return Err(Error::config("structural and latent dimensions must be positive"));
        }
        if self.supervision {
            if self.slot_map.len() != self.state_dim {
                return Err(Error::config(format!(
                    "slot_map has {} entries for a {}-dimensional state",
                    self.slot_map.len(),
                    self.state_dim
                )));
            }
            if let Some(k) = self.slot_map.iter().find(|&&k| k >= self.structural_dim) {
                return Err(Error::config(format!("slot_map entry {k} ≥ d_s = {}", self.structural_dim)));
            }
        } else if self.weights.lambda[2] > 0.0 {
            return Err(Error::config("alignment weight λ3 > 0 needs state supervision"));
        }
        Ok(())
    }
}

/// Branch outputs for one batch. Moments describe the diagonal Gaussians used
/// in the KL terms.
#[derive(Clone, Copy, Debug)]
pub struct Refined {
    pub z_tilde: Var,
    pub eps_mean: Var,
    pub eps_logvar: Var,
    pub endo_mean: Var,
    pub endo_var: Var,
    pub masked_mean: Var,
    pub adjacency: Var,
}

/// Training-time targets, already normalised and mapped to structural slots.
#[derive(Clone, Copy, Debug)]
pub struct Supervision {
    /// Centres of the state-conditioned prior (`B × d_s`).
    pub prior: Var,
    /// Mask-head targets `y_t` (`B × d_s`).
    pub concept: Var,
    /// Alignment targets (`B × state_dim`).
    pub state: Var,
}

#[derive(Clone, Debug)]
pub struct CausalBranch {
    pub cfg: CausalConfig,
    proj_mean: Linear,
    proj_logvar: Linear,
    adjacency: ParamId,
    mask_nets: Vec<Mlp>,
    decode: Linear,
    align: Linear,
    mask_weight: ParamId,
    mask_bias: ParamId,
}

impl CausalBranch {
    pub fn new<R: Rng>(cfg: &CausalConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (ds, dz) = (cfg.structural_dim, cfg.latent_dim);
        let g = GROUP_CAUSAL;
        let proj_mean = if ds == dz {
            Linear::zeroed(store, g, "proj_mean", dz, ds)
        } else {
            Linear::new(store, rng, g, "proj_mean", dz, ds)
        };
        let proj_logvar = Linear::zeroed(store, g, "proj_logvar", dz, ds);
        let adjacency = store.add(g, "adjacency", Array2::zeros((ds, ds)));
        let mask_nets = (0..ds)
            .map(|i| {
                let dims: Vec<usize> = if cfg.mask_hidden == 0 {
                    vec![ds, 1]
                } else {
                    vec![ds, cfg.mask_hidden, 1]
                };
                Mlp::new(store, rng, g, &format!("mask_layer{i}"), &dims, Activation::Tanh, true)
            })
            .collect();
        let decode = if ds == dz {
            Linear::zeroed(store, g, "decode", ds, dz)
        } else {
            Linear::new(store, rng, g, "decode", ds, dz)
        };
        let align = if dz == cfg.state_dim {
            let l = Linear::zeroed(store, g, "align", dz, cfg.state_dim);
            *store.get_mut(l.weight) = Array2::eye(dz);
            l
        } else {
            Linear::new(store, rng, g, "align", dz, cfg.state_dim)
        };
        let mask_weight = store.add(g, "mask_head.weight", Array2::ones((1, ds)));
        let mask_bias = store.add(g, "mask_head.bias", Array2::zeros((1, ds)));
        Ok(Self {
            cfg: cfg.clone(),
            proj_mean,
            proj_logvar,
            adjacency,
            mask_nets,
            decode,
            align,
            mask_weight,
            mask_bias,
        })
    }

    pub fn adjacency_id(&self) -> ParamId {
        self.adjacency
    }

    /// Adjacency with the diagonal forced to zero.
    pub fn adjacency(&self, store: &ParamStore) -> Array2<f64> {
        let mut a = store.get(self.adjacency).clone();
        for i in 0..a.nrows() {
            a[[i, i]] = 0.0;
        }
        a
    }

    fn masked_adjacency(&self, s: &mut Session) -> Var {
        let a = s.p(self.adjacency);
        let d = self.cfg.structural_dim;
        let off = s.input(Array2::from_shape_fn((d, d), |(i, j)| if i == j { 0.0 } else { 1.0 }));
        s.graph.mul(a, off)
    }

    /// Condition number of `I − A` and the inverse used by the solve.
    pub fn structural_inverse(&self, a: &Array2<f64>) -> Result<Array2<f64>> {
        let m = Array2::<f64>::eye(a.nrows()) - a;
        let cond = linalg::condition_number(&m);
        if !cond.is_finite() || cond > self.cfg.max_condition {
            return Err(Error::numeric(format!(
                "I − Aᵀ is numerically singular (condition number {cond:.3e} > {:.1e})",
                self.cfg.max_condition
            )));
        }
        linalg::inverse(&m).ok_or_else(|| Error::numeric("I − Aᵀ is singular"))
    }

    /// Rescales `A` to the configured spectral norm when the solve guard trips.
    /// Returns whether clipping happened.
    pub fn guard_adjacency(&self, store: &mut ParamStore) -> bool {
        let a = self.adjacency(store);
        let m = Array2::<f64>::eye(a.nrows()) - &a;
        let cond = linalg::condition_number(&m);
        if cond.is_finite() && cond <= self.cfg.max_condition {
            return false;
        }
        let norm = linalg::spectral_norm(&a);
        if norm > self.cfg.clip_spectral_norm {
            let f = self.cfg.clip_spectral_norm / norm;
            store.get_mut(self.adjacency).mapv_inplace(|x| x * f);
        }
        true
    }

    fn mask_layer(&self, s: &mut Session, a: Var, x: Var) -> Var {
        let cols: Vec<Var> = (0..self.cfg.structural_dim)
            .map(|i| {
                let col = s.graph.slice_cols(a, i, 1);
                let parents = s.graph.transpose(col);
                let masked = s.graph.mul_row(x, parents);
                self.mask_nets[i].forward(s, masked)
            })
            .collect();
        let h = s.graph.concat_cols(&cols);
        s.graph.add(x, h)
    }

    /// `z̃ = C(z)`. `noise` (B × d_s) selects the sampled training path; without
    /// it the posterior mean is propagated.
    pub fn refine(&self, s: &mut Session, z: Var, noise: Option<&Array2<f64>>) -> Result<Refined> {
        let (_, cols) = s.graph.shape(z);
        if cols != self.cfg.latent_dim {
            return Err(Error::input(format!(
                "latent has {cols} dims, causal branch expects {}",
                self.cfg.latent_dim
            )));
        }
        let a = self.masked_adjacency(s);
        let inv = self.structural_inverse(s.graph.value(a))?;

        let mut eps_mean = self.proj_mean.forward(s, z);
        if self.cfg.structural_dim == self.cfg.latent_dim {
            eps_mean = s.graph.add(z, eps_mean);
        }
        let eps_logvar = self.proj_logvar.forward(s, z);

        let d = self.cfg.structural_dim;
        let eye = s.input(Array2::eye(d));
        let m = s.graph.solve_right(eye, a, inv.clone());
        let endo_mean = s.graph.matmul(eps_mean, m);
        let eps_var = s.graph.exp(eps_logvar);
        let m2 = s.graph.square(m);
        let endo_var = s.graph.matmul(eps_var, m2);
        let masked_mean = self.mask_layer(s, a, endo_mean);

        let masked = match noise {
            Some(n) => {
                let half = s.graph.scale(eps_logvar, 0.5);
                let std = s.graph.exp(half);
                let nv = s.input(n.clone());
                let jitter = s.graph.mul(std, nv);
                let eps = s.graph.add(eps_mean, jitter);
                let endo = s.graph.solve_right(eps, a, inv);
                self.mask_layer(s, a, endo)
            }
            None => masked_mean,
        };
        let mut z_tilde = self.decode.forward(s, masked);
        if self.cfg.structural_dim == self.cfg.latent_dim {
            z_tilde = s.graph.add(masked, z_tilde);
        }
        Ok(Refined {
            z_tilde,
            eps_mean,
            eps_logvar,
            endo_mean,
            endo_var,
            masked_mean,
            adjacency: a,
        })
    }

    /// `g_align(z̃)`: prediction of the normalised simulator state.
    pub fn align_head(&self, s: &mut Session, z_tilde: Var) -> Result<Var> {
        if !self.cfg.supervision {
            return Err(Error::config("alignment head needs state supervision"));
        }
        Ok(self.align.forward(s, z_tilde))
    }

    /// `g_mask`: every concept predicted from its masked parents,
    /// `ŷ_i = w_i Σ_j x_j A_ji + b_i`. One gain per concept, so the relative
    /// parent weights live in `A` alone.
    pub fn mask_head(&self, s: &mut Session, x: Var, a: Var) -> Var {
        let w = s.p(self.mask_weight);
        let b = s.p(self.mask_bias);
        let y = s.graph.matmul(x, a);
        let y = s.graph.mul_row(y, w);
        s.graph.add_row(y, b)
    }

    /// Single-concept mask-head prediction.
    pub fn mask_head_slot(&self, s: &mut Session, x: Var, a: Var, slot: usize) -> Result<Var> {
        if slot >= self.cfg.structural_dim {
            return Err(Error::input(format!(
                "slot {slot} out of range for d_s = {}",
                self.cfg.structural_dim
            )));
        }
        let all = self.mask_head(s, x, a);
        Ok(s.graph.slice_cols(all, slot, 1))
    }

    /// Weighted Stage-2 objective. `lambda_dag` overrides `λ4` (warm-up).
    pub fn stage2_loss(
        &self,
        s: &mut Session,
        z: Var,
        r: &Refined,
        sup: Option<Supervision>,
        lambda_dag: f64,
    ) -> Result<Stage2Loss> {
        let w = self.cfg.weights;
        if w.lambda[2] > 0.0 && sup.is_none() {
            return Err(Error::config("λ3 > 0 but no state supervision was provided"));
        }
        let sup = if self.cfg.supervision { sup } else { None };
        let g = &mut s.graph;

        let d = g.row_sq_dist(r.z_tilde, z);
        let rec = g.mean(d);

        let kl_eps = kl_diag_to_standard(g, r.eps_mean, r.eps_logvar);
        let mut kl = g.scale(kl_eps, w.alpha_kl);
        let dag = g.trace_exp_hadamard(r.adjacency);

        let (align, mask) = match sup {
            Some(sp) => {
                let kl_endo = kl_diag_to_unit(g, r.endo_mean, r.endo_var, sp.prior);
                kl = g.add(kl, kl_endo);
                let pred = self.align_head(s, r.z_tilde)?;
                let g = &mut s.graph;
                let ad = g.row_sq_dist(pred, sp.state);
                let align = g.mean(ad);
                let kl_mask = kl_diag_to_unit(g, r.masked_mean, r.endo_var, sp.prior);
                let yhat = self.mask_head(s, r.endo_mean, r.adjacency);
                let g = &mut s.graph;
                let md = g.row_sq_dist(yhat, sp.concept);
                let mse = g.mean(md);
                (align, g.add(kl_mask, mse))
            }
            None => (g.scalar(0.0), g.scalar(0.0)),
        };
        let g = &mut s.graph;
        let terms = [rec, kl, align, dag, mask];
        let lambdas = [w.lambda[0], w.lambda[1], w.lambda[2], lambda_dag, w.lambda[4]];
        let mut total = g.scalar(0.0);
        for (t, l) in terms.iter().zip(lambdas) {
            let scaled = g.scale(*t, l);
            total = g.add(total, scaled);
        }
        Ok(Stage2Loss { total, terms, lambdas })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Stage2Loss {
    pub total: Var,
    /// rec, kl, align, dag, mask.
    pub terms: [Var; 5],
    pub lambdas: [f64; 5],
}

impl Stage2Loss {
    pub fn components(&self, g: &Graph) -> BTreeMap<String, f64> {
        TERM_NAMES
            .iter()
            .zip(self.terms)
            .map(|(n, v)| (n.to_string(), g.scalar_value(v)))
            .collect()
    }
}

/// Batch mean of `Σ_i ½(μ² + σ² − 1 − ln σ²)`.
fn kl_diag_to_standard(g: &mut Graph, mean: Var, logvar: Var) -> Var {
    crate::backbone::kl_standard_normal(g, mean, logvar)
}

/// Batch mean of `Σ_i KL(N(m_i, v_i) ‖ N(y_i, 1))`.
fn kl_diag_to_unit(g: &mut Graph, mean: Var, var: Var, centre: Var) -> Var {
    let diff = g.sub(mean, centre);
    let d2 = g.square(diff);
    let a = g.add(d2, var);
    let lv = g.log(var);
    let b = g.sub(a, lv);
    let c = g.add_scalar(b, -1.0);
    let r = g.row_sum(c);
    let m = g.mean(r);
    g.scale(m, 0.5)
}

/// Scalar reference of the acyclicity penalty `tr(exp(A ∘ A)) − d`.
pub fn dag_penalty(a: &Array2<f64>) -> f64 {
    let e = linalg::expm(&a.mapv(|x| x * x));
    (0..a.nrows()).map(|i| e[[i, i]]).sum::<f64>() - a.nrows() as f64
}

/// Gradient `exp(A ∘ A)ᵀ ∘ 2A` of [`dag_penalty`].
pub fn dag_penalty_grad(a: &Array2<f64>) -> Array2<f64> {
    let e = linalg::expm(&a.mapv(|x| x * x));
    let mut g = e.t().to_owned();
    g.zip_mut_with(a, |g, &x| *g *= 2.0 * x);
    g
}

/// Off-diagonal entries with `|A_ij| > max(ratio · max|A|, floor)`.
pub fn threshold_support(a: &Array2<f64>, ratio: f64, floor: f64) -> Array2<bool> {
    let d = a.nrows();
    let max = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .filter(|(i, j)| i != j)
        .fold(0.0f64, |m, (i, j)| m.max(a[[i, j]].abs()));
    Array2::from_shape_fn(a.dim(), |(i, j)| {
        i != j && a[[i, j]].abs() > (ratio * max).max(floor)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn branch(d: usize, sup: bool) -> (CausalBranch, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = CausalConfig::new(d, d, d, sup);
        if !sup {
            c.weights.lambda[2] = 0.0;
        }
        let b = CausalBranch::new(&c, &mut store, &mut rng).unwrap();
        (b, store)
    }

    #[test]
    fn single_edge_propagates_to_child() {
        let (b, mut store) = branch(2, true);
        store.get_mut(b.adjacency_id())[[0, 1]] = 0.5;
        let none = BTreeSet::new();
        let mut s = Session::new(&store, &none);
        let z = s.input(Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap());
        let r = b.refine(&mut s, z, None).unwrap();
        let e = s.graph.value(r.endo_mean);
        assert!((e[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((e[[0, 1]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn acyclicity_penalty_values() {
        let tri = Array2::from_shape_vec((3, 3), vec![0.0, 1.0, 2.0, 0.0, 0.0, -1.5, 0.0, 0.0, 0.0]).unwrap();
        assert!(dag_penalty(&tri).abs() < 1e-12);
        let cyc = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((dag_penalty(&cyc) - (2.0 * 1f64.cosh() - 2.0)).abs() < 1e-10);
        assert_eq!(dag_penalty(&Array2::zeros((4, 4))), 0.0);
    }

    #[test]
    fn mask_head_uses_parent_columns() {
        let (b, store) = branch(2, true);
        let none = BTreeSet::new();
        let mut s = Session::new(&store, &none);
        let x = s.input(Array2::from_shape_vec((1, 2), vec![1.0, 2.0]).unwrap());
        let a = s.input(Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 0.0, 0.0]).unwrap());
        let y = b.mask_head(&mut s, x, a);
        assert_eq!(s.graph.value(y).row(0).to_vec(), vec![0.0, 1.0]);
        let y1 = b.mask_head_slot(&mut s, x, a, 1).unwrap();
        assert_eq!(s.graph.value(y1)[[0, 0]], 1.0);
        assert!(matches!(b.mask_head_slot(&mut s, x, a, 2), Err(Error::Input(_))));
    }

    #[test]
    fn singular_structure_is_numeric_error() {
        let (b, mut store) = branch(2, true);
        *store.get_mut(b.adjacency_id()) = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let none = BTreeSet::new();
        let mut s = Session::new(&store, &none);
        let z = s.input(Array2::zeros((1, 2)));
        assert!(matches!(b.refine(&mut s, z, None), Err(Error::Numeric(_))));
        assert!(b.guard_adjacency(&mut store));
        let mut s = Session::new(&store, &none);
        let z = s.input(Array2::zeros((1, 2)));
        assert!(b.refine(&mut s, z, None).is_ok());
    }

    #[test]
    fn weight_validation() {
        let mut w = CausalLossWeights::default();
        w.lambda[1] = -1.0;
        assert!(matches!(w.validate(), Err(Error::Config(_))));
        let c = CausalConfig::new(2, 2, 2, false);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn total_is_weighted_sum_of_terms() {
        let (b, mut store) = branch(3, true);
        store.get_mut(b.adjacency_id())[[0, 2]] = 0.4;
        store.get_mut(b.adjacency_id())[[2, 1]] = -0.3;
        let none = BTreeSet::new();
        let mut s = Session::new(&store, &none);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = |r: usize| Array2::from_shape_fn((r, 3), |_| rng.gen_range(-1.0..1.0));
        let (zv, pv, cv, xv, nv) = (m(5), m(5), m(5), m(5), m(5));
        let z = s.input(zv);
        let r = b.refine(&mut s, z, Some(&nv)).unwrap();
        let sup = Supervision { prior: s.input(pv), concept: s.input(cv), state: s.input(xv) };
        let l = b.stage2_loss(&mut s, z, &r, Some(sup), 2.0).unwrap();
        let sum: f64 = l.terms.iter().zip(l.lambdas).map(|(t, w)| w * s.graph.scalar_value(*t)).sum();
        assert!((s.graph.scalar_value(l.total) - sum).abs() < 1e-12);
        assert_eq!(l.lambdas[3], 2.0);
        assert!((l.components(&s.graph)["dag"] - dag_penalty(&b.adjacency(&store))).abs() < 1e-10);
    }

    #[test]
    fn threshold_floor_empties_flat_matrices() {
        let a = Array2::from_elem((3, 3), 0.01);
        assert!(threshold_support(&a, 0.3, 0.1).iter().all(|x| !x));
        let mut b = Array2::zeros((3, 3));
        b[[0, 1]] = 1.0;
        b[[1, 2]] = 0.2;
        let s = threshold_support(&b, 0.3, 0.1);
        assert!(s[[0, 1]] && !s[[1, 2]]);
    }
}
