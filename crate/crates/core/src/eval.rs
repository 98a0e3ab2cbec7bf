//! Retrieval metrics, model and oracle scoring, structure diagnostics, the
//! synthetic identifiability test and the ablation grid.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bench::{group_actions, group_state, Benchmark, QueryGroup};
use crate::causal::{threshold_support, CausalBranch, CausalConfig, CausalLossWeights};
use crate::env::{Environment, JacobianTemplate};
use crate::error::{Error, Result};
use crate::model::WorldModel;
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::trainer::{self, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub h1: f64,
    pub mrr: f64,
}

/// `(H@1, MRR)` of a rank list.
pub fn compute_metrics(ranks: &[usize]) -> Result<Metric> {
    if ranks.is_empty() {
        return Err(Error::input("no ranks to aggregate"));
    }
    if ranks.contains(&0) {
        return Err(Error::input("ranks start at 1"));
    }
    let m = ranks.len() as f64;
    Ok(Metric {
        h1: ranks.iter().filter(|&&r| r == 1).count() as f64 / m,
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / m,
    })
}

/// Rank of `scores[positive]`: higher is better, ties go to the lower index.
pub fn rank_of(scores: &[f64], positive: usize) -> usize {
    let p = scores[positive];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > p || (s == p && j < positive))
        .count()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub factual: BTreeMap<usize, Vec<usize>>,
    pub cf: Vec<usize>,
    pub num_candidates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub factual: BTreeMap<usize, Metric>,
    pub cf: Metric,
    pub queries: usize,
    pub num_candidates: usize,
}

impl RetrievalResult {
    pub fn report(&self) -> Result<MetricsReport> {
        Ok(MetricsReport {
            factual: self
                .factual
                .iter()
                .map(|(h, r)| Ok((*h, compute_metrics(r)?)))
                .collect::<Result<_>>()?,
            cf: compute_metrics(&self.cf)?,
            queries: self.cf.len(),
            num_candidates: self.num_candidates,
        })
    }
}

/// Something that scores candidate observations for a query group.
pub trait Scorer {
    /// Scores of the factual candidates at horizon `h`, one per group.
    fn factual_scores(&self, bench: &Benchmark, groups: &[&QueryGroup], h: usize) -> Result<Vec<Vec<f64>>>;
    /// Scores of the counterfactual candidates, one per group.
    fn cf_scores(&self, bench: &Benchmark, groups: &[&QueryGroup]) -> Result<Vec<Vec<f64>>>;
}

/// Learned world model: encode, (gate), roll out, compare in latent space.
pub struct ModelScorer<'a> {
    pub model: &'a WorldModel,
    /// Cached encodings of every benchmark frame.
    latents: Array2<f64>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a WorldModel, bench: &Benchmark) -> Result<Self> {
        let n = bench.frames.len();
        if n == 0 {
            return Err(Error::input("benchmark holds no frames"));
        }
        let dim = bench.frames.features(0).len();
        let expected = match model.cfg.backbone.input {
            crate::backbone::InputSpec::State { dim } => dim,
            crate::backbone::InputSpec::Pixels { height, width, channels } => height * width * channels,
        };
        if dim != expected {
            return Err(Error::validation(format!(
                "benchmark observations have {dim} features, model expects {expected}"
            )));
        }
        let mut latents = Array2::zeros((n, model.latent_dim()));
        for start in (0..n).step_by(512) {
            let end = (start + 512).min(n);
            let mut obs = Array2::zeros((end - start, dim));
            for (r, i) in (start..end).enumerate() {
                for (j, x) in bench.frames.features(i).into_iter().enumerate() {
                    obs[[r, j]] = x;
                }
            }
            let z = model.encode(&obs)?;
            latents.slice_mut(ndarray::s![start..end, ..]).assign(&z);
        }
        Ok(Self { model, latents })
    }

    fn predict(&self, starts: &[usize], actions: &[&[Vec<f64>]], h: usize) -> Result<Array2<f64>> {
        let z0 = Array2::from_shape_fn((starts.len(), self.latents.ncols()), |(r, j)| self.latents[[starts[r], j]]);
        let zin = self.model.transition_input(&z0)?;
        let adim = actions[0][0].len();
        let steps: Vec<Array2<f64>> = (0..h)
            .map(|k| Array2::from_shape_fn((starts.len(), adim), |(r, j)| actions[r][k][j]))
            .collect();
        Ok(self.model.rollout(&zin, &steps).pop().expect("h ≥ 1"))
    }

    fn score_rows(&self, pred: &Array2<f64>, sets: &[&[usize]]) -> Vec<Vec<f64>> {
        sets.iter()
            .enumerate()
            .map(|(r, frames)| {
                let p = pred.row(r).to_vec();
                frames.iter().map(|&f| self.model.score(&p, &self.latents.row(f).to_vec())).collect()
            })
            .collect()
    }
}

impl Scorer for ModelScorer<'_> {
    fn factual_scores(&self, bench: &Benchmark, groups: &[&QueryGroup], h: usize) -> Result<Vec<Vec<f64>>> {
        if h > bench.spec.h_max() {
            return Err(Error::input(format!("horizon {h} exceeds the benchmark's {}", bench.spec.h_max())));
        }
        let starts: Vec<usize> = groups.iter().map(|g| g.prefix_end()).collect();
        let acts: Vec<&[Vec<f64>]> = groups.iter().map(|g| g.future_actions(h)).collect();
        let pred = self.predict(&starts, &acts, h)?;
        let sets: Vec<&[usize]> = groups
            .iter()
            .map(|g| g.candidate_set(h).map(|c| c.frames.as_slice()).ok_or_else(|| Error::input(format!("no candidates at horizon {h}"))))
            .collect::<Result<_>>()?;
        Ok(self.score_rows(&pred, &sets))
    }

    fn cf_scores(&self, _bench: &Benchmark, groups: &[&QueryGroup]) -> Result<Vec<Vec<f64>>> {
        let starts: Vec<usize> = groups.iter().map(|g| g.intervened_obs).collect();
        let acts: Vec<&[Vec<f64>]> = groups.iter().map(|g| g.future_actions(1)).collect();
        let pred = self.predict(&starts, &acts, 1)?;
        let sets: Vec<&[usize]> = groups.iter().map(|g| g.cf_candidates.frames.as_slice()).collect();
        Ok(self.score_rows(&pred, &sets))
    }
}

/// Ground-truth scorer: re-simulates with the true environment and scores by
/// negative squared distance in observation space.
pub struct OracleScorer {
    env: Box<dyn Environment>,
}

impl OracleScorer {
    pub fn new(bench: &Benchmark) -> Result<Self> {
        Ok(Self { env: bench.env()? })
    }

    fn simulate(&self, g: &QueryGroup, intervened: bool, h: usize) -> Result<Vec<f64>> {
        let mut s = group_state(g, intervened);
        let mut obs = None;
        for a in group_actions(g, g.t0, h) {
            let (n, o) = self.env.step(&s, &a)?;
            s = n;
            obs = Some(o);
        }
        Ok(obs.expect("h ≥ 1").features())
    }
}

fn neg_sq(a: &[f64], b: &[f64]) -> f64 {
    -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

fn quantised(bench: &Benchmark, features: Vec<f64>) -> Vec<f64> {
    match bench.frames.mode {
        crate::env::ObsMode::State => features,
        crate::env::ObsMode::Pixels => features.into_iter().map(|x| (x.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(),
    }
}

impl Scorer for OracleScorer {
    fn factual_scores(&self, bench: &Benchmark, groups: &[&QueryGroup], h: usize) -> Result<Vec<Vec<f64>>> {
        groups
            .iter()
            .map(|g| {
                let target = quantised(bench, self.simulate(g, false, h)?);
                let set = g.candidate_set(h).ok_or_else(|| Error::input(format!("no candidates at horizon {h}")))?;
                Ok(set.frames.iter().map(|&f| neg_sq(&target, &bench.frames.features(f))).collect())
            })
            .collect()
    }

    fn cf_scores(&self, bench: &Benchmark, groups: &[&QueryGroup]) -> Result<Vec<Vec<f64>>> {
        groups
            .iter()
            .map(|g| {
                let target = quantised(bench, self.simulate(g, true, 1)?);
                Ok(g.cf_candidates.frames.iter().map(|&f| neg_sq(&target, &bench.frames.features(f))).collect())
            })
            .collect()
    }
}

/// Factual ranks at every requested horizon plus counterfactual ranks.
pub fn evaluate(scorer: &dyn Scorer, bench: &Benchmark, horizons: &[usize], max_samples: usize) -> Result<RetrievalResult> {
    let groups: Vec<&QueryGroup> = bench.groups.iter().take(max_samples).collect();
    if groups.is_empty() {
        return Err(Error::input("benchmark has no query groups"));
    }
    let mut out = RetrievalResult { num_candidates: bench.spec.num_candidates, ..Default::default() };
    for &h in horizons {
        let scores = scorer.factual_scores(bench, &groups, h)?;
        let ranks = groups
            .iter()
            .zip(&scores)
            .map(|(g, s)| rank_of(s, g.candidate_set(h).expect("checked by scorer").positive))
            .collect();
        out.factual.insert(h, ranks);
    }
    let scores = scorer.cf_scores(bench, &groups)?;
    out.cf = groups.iter().zip(&scores).map(|(g, s)| rank_of(s, g.cf_candidates.positive)).collect();
    Ok(out)
}

/// Model evaluation on a benchmark.
pub fn counterfactual_eval(model: &WorldModel, bench: &Benchmark, horizons: &[usize], max_samples: usize) -> Result<MetricsReport> {
    let scorer = ModelScorer::new(model, bench)?;
    evaluate(&scorer, bench, horizons, max_samples)?.report()
}

/// `"b/c, Δ=+x"` with values scaled by 100.
pub fn paired_cell(baseline: f64, ours: f64) -> String {
    let (b, c) = (100.0 * baseline, 100.0 * ours);
    format!("{b:.1}/{c:.1}, Δ={:+.1}", c - b)
}

/// Aligned text table of a metrics report, scaled by 100.
pub fn report_table(label: &str, r: &MetricsReport) -> String {
    let mut head = format!("{:<28}", "model");
    let mut row = format!("{label:<28}");
    for (h, m) in &r.factual {
        head.push_str(&format!(" {:>9} {:>9}", format!("H@1@{h}"), format!("MRR@{h}")));
        row.push_str(&format!(" {:>9.2} {:>9.2}", 100.0 * m.h1, 100.0 * m.mrr));
    }
    head.push_str(&format!(" {:>9} {:>9}", "CF-H@1", "CF-MRR"));
    row.push_str(&format!(" {:>9.2} {:>9.2}", 100.0 * r.cf.h1, 100.0 * r.cf.mrr));
    format!("{head}\n{row}\n")
}

/// Baseline/+CausalVAE table with Δ columns.
pub fn paired_table(label: &str, baseline: &MetricsReport, ours: &MetricsReport) -> String {
    let mut lines = vec![format!("{:<28} {:>26} {:>26}", "model", "metric", "Baseline/+CausalVAE")];
    for (h, m) in &ours.factual {
        if let Some(b) = baseline.factual.get(h) {
            lines.push(format!("{label:<28} {:>26} {:>26}", format!("H@1 (h={h})"), paired_cell(b.h1, m.h1)));
            lines.push(format!("{label:<28} {:>26} {:>26}", format!("MRR (h={h})"), paired_cell(b.mrr, m.mrr)));
        }
    }
    lines.push(format!("{label:<28} {:>26} {:>26}", "CF-H@1", paired_cell(baseline.cf.h1, ours.cf.h1)));
    lines.push(format!("{label:<28} {:>26} {:>26}", "CF-MRR", paired_cell(baseline.cf.mrr, ours.cf.mrr)));
    lines.join("\n") + "\n"
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureDiagnostics {
    /// Learned adjacency, `A_ij` = edge `i → j`.
    pub learned: Array2<f64>,
    /// Template magnitudes in the same orientation as `learned`.
    pub reference: Array2<f64>,
    pub support: Array2<bool>,
    pub rank_correlation: f64,
    pub top_k: usize,
    pub top_k_overlap: f64,
    /// A row permutation of the learned matrix fits the template better.
    pub misaligned: bool,
}

fn off_diagonal(a: &Array2<f64>) -> Vec<(usize, usize)> {
    let d = a.nrows();
    (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).collect()
}

fn ranks_with_ties(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks_with_ties(a), ranks_with_ties(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// The `k` largest off-diagonal magnitudes; ties go to the earlier index.
pub fn top_k_edges(a: &Array2<f64>, k: usize) -> BTreeSet<(usize, usize)> {
    let mut e = off_diagonal(a);
    e.sort_by(|&(i, j), &(p, q)| a[[p, q]].abs().total_cmp(&a[[i, j]].abs()).then((i, j).cmp(&(p, q))));
    e.into_iter().take(k).collect()
}

pub fn top_k_overlap(learned: &Array2<f64>, reference: &Array2<f64>, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let a = top_k_edges(learned, k);
    let b = top_k_edges(reference, k);
    a.intersection(&b).count() as f64 / k as f64
}

fn greedy_row_matching(learned: &Array2<f64>, reference: &Array2<f64>) -> Vec<usize> {
    let d = learned.nrows();
    let norm = |m: &Array2<f64>| {
        let mut m = m.mapv(f64::abs);
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt();
            if n > 0.0 {
                r /= n;
            }
        }
        m
    };
    let (l, r) = (norm(learned), norm(reference));
    let sim = l.dot(&r.t());
    let mut pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).collect();
    pairs.sort_by(|&(a, b), &(c, e)| sim[[c, e]].total_cmp(&sim[[a, b]]).then((a, b).cmp(&(c, e))));
    let mut assign = vec![usize::MAX; d];
    let mut used = vec![false; d];
    for (i, j) in pairs {
        if assign[i] == usize::MAX && !used[j] {
            assign[i] = j;
            used[j] = true;
        }
    }
    assign
}

/// Compares a learned adjacency with the first-order template. The template
/// stores `|J_ij − δ_ij|` (influence of `s_j` on `s_i'`), so it is transposed
/// into the learned `i → j` orientation. `k = None` uses the template's
/// non-zero count.
pub fn structure_recovery(learned: &Array2<f64>, template: &JacobianTemplate, k: Option<usize>, ratio: f64, floor: f64) -> Result<StructureDiagnostics> {
    let reference = template.a_gt.t().to_owned();
    if learned.dim() != reference.dim() {
        return Err(Error::input(format!(
            "learned adjacency is {:?} but the template is {:?}; check the slot map",
            learned.dim(),
            reference.dim()
        )));
    }
    let k = k.unwrap_or_else(|| template.num_edges(1e-9));
    let offd = off_diagonal(learned);
    let la: Vec<f64> = offd.iter().map(|&(i, j)| learned[[i, j]].abs()).collect();
    let ra: Vec<f64> = offd.iter().map(|&(i, j)| reference[[i, j]]).collect();
    let overlap = top_k_overlap(learned, &reference, k);
    let perm = greedy_row_matching(learned, &reference);
    let mut permuted = Array2::zeros(learned.dim());
    for (i, &j) in perm.iter().enumerate() {
        permuted.row_mut(j).assign(&learned.row(i));
    }
    let misaligned = top_k_overlap(&permuted, &reference, k) > overlap + 1e-12;
    Ok(StructureDiagnostics {
        learned: learned.clone(),
        reference,
        support: threshold_support(learned, ratio, floor),
        rank_correlation: spearman(&la, &ra),
        top_k: k,
        top_k_overlap: overlap,
        misaligned,
    })
}

/// Structural Hamming distance: per unordered pair, a reversal costs 1,
/// otherwise every differing directed entry costs 1.
pub fn shd(a: &Array2<bool>, b: &Array2<bool>) -> usize {
    let d = a.nrows();
    let mut total = 0;
    for i in 0..d {
        for j in i + 1..d {
            let x = (a[[i, j]], a[[j, i]]);
            let y = (b[[i, j]], b[[j, i]]);
            if x == y {
                continue;
            }
            let reversed = x.0 != x.1 && x == (y.1, y.0);
            total += if reversed { 1 } else { (x.0 != y.0) as usize + (x.1 != y.1) as usize };
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityConfig {
    pub dim: usize,
    pub edges: usize,
    pub samples: usize,
    pub seeds: Vec<u64>,
    pub alignment: bool,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weights: CausalLossWeights,
    pub threshold_ratio: f64,
    pub threshold_floor: f64,
    /// Edge weight magnitudes are drawn from `[w_min, w_max]` with random sign.
    pub w_min: f64,
    pub w_max: f64,
}

impl Default for IdentifiabilityConfig {
    fn default() -> Self {
        Self {
            dim: 4,
            edges: 3,
            samples: 10_000,
            seeds: vec![0, 1, 2],
            alignment: true,
            epochs: 30,
            batch: 256,
            lr: 5e-3,
            weights: CausalLossWeights::default(),
            threshold_ratio: 0.3,
            threshold_floor: 0.1,
            w_min: 0.5,
            w_max: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityRun {
    pub seed: u64,
    pub planted: Array2<f64>,
    pub learned: Array2<f64>,
    pub shd: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    pub config: IdentifiabilityConfig,
    pub runs: Vec<IdentifiabilityRun>,
    pub mean_shd: f64,
}

/// Random DAG with `edges` edges consistent with a random node order.
pub fn random_dag<R: Rng>(dim: usize, edges: usize, w_min: f64, w_max: f64, rng: &mut R) -> Result<Array2<f64>> {
    let max = dim * dim.saturating_sub(1) / 2;
    if edges > max {
        return Err(Error::config(format!("{edges} edges do not fit a DAG on {dim} nodes")));
    }
    let mut order: Vec<usize> = (0..dim).collect();
    order.shuffle(rng);
    let mut pairs: Vec<(usize, usize)> = (0..dim).flat_map(|i| (i + 1..dim).map(move |j| (i, j))).collect();
    pairs.shuffle(rng);
    let mut a = Array2::zeros((dim, dim));
    for &(i, j) in pairs.iter().take(edges) {
        let w = rng.gen_range(w_min..=w_max) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        a[[order[i], order[j]]] = w;
    }
    Ok(a)
}

/// Rows `s = ε (I − A)⁻¹`, `ε ~ N(0, I)`.
pub fn sample_linear_scm<R: Rng>(a: &Array2<f64>, n: usize, rng: &mut R) -> Result<Array2<f64>> {
    let d = a.nrows();
    let m = crate::linalg::inverse(&(Array2::<f64>::eye(d) - a)).ok_or_else(|| Error::numeric("I − A is singular"))?;
    let eps = Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal));
    Ok(eps.dot(&m))
}

pub fn standardize(x: &Array2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("rows");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (x - &mean) / &std
}

/// Fits the structural branch on a linear-Gaussian SCM observed through a
/// random invertible mixing and reports SHD against the planted graph.
pub fn identifiability_test(cfg: &IdentifiabilityConfig) -> Result<IdentifiabilityReport> {
    if cfg.dim > 6 {
        return Err(Error::config("identifiability test is sized for d ≤ 6"));
    }
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planted = random_dag(cfg.dim, cfg.edges, cfg.w_min, cfg.w_max, &mut rng)?;
        let s = standardize(&sample_linear_scm(&planted, cfg.samples, &mut rng)?);
        let mix = loop {
            let m = Array2::from_shape_fn((cfg.dim, cfg.dim), |_| rng.sample::<f64, _>(StandardNormal));
            if crate::linalg::condition_number(&m) < 10.0 {
                break m;
            }
        };
        let z = standardize(&s.dot(&mix));
        let learned = fit_structure(cfg, &z, &s, seed)?;
        let support = threshold_support(&learned, cfg.threshold_ratio, cfg.threshold_floor);
        let truth = planted.mapv(|w| w != 0.0);
        runs.push(IdentifiabilityRun { seed, shd: shd(&support, &truth), planted, learned });
    }
    let mean_shd = runs.iter().map(|r| r.shd as f64).sum::<f64>() / runs.len().max(1) as f64;
    Ok(IdentifiabilityReport { config: cfg.clone(), runs, mean_shd })
}

fn fit_structure(cfg: &IdentifiabilityConfig, z: &Array2<f64>, s: &Array2<f64>, seed: u64) -> Result<Array2<f64>> {
    let d = cfg.dim;
    let mut c = CausalConfig::new(d, d, d, cfg.alignment);
    c.weights = cfg.weights;
    if !cfg.alignment {
        c.weights.lambda[2] = 0.0;
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let branch = CausalBranch::new(&c, &mut store, &mut rng)?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    let n = z.nrows();
    let steps = n.div_ceil(cfg.batch) * cfg.epochs;
    let warm = (0.1 * steps as f64).ceil() as usize;
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(cfg.batch) {
            let zb = z.select(Axis(0), chunk);
            let sb = s.select(Axis(0), chunk);
            let noise = Array2::from_shape_fn((chunk.len(), d), |_| rng.sample(StandardNormal));
            let sup = cfg.alignment.then(|| (sb.clone(), sb.clone(), sb));
            trainer::stage2_step(&branch, &mut store, &mut opt, zb, &noise, sup, trainer::warmup(c.weights.lambda[3], step, warm))?;
            step += 1;
        }
    }
    Ok(branch.adjacency(&store))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationBlock {
    Strategy,
    Removal,
    Sensitivity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub block: AblationBlock,
    pub config: TrainConfig,
}

/// The ablation rows, in table order, each derived from `base` by one factor.
pub fn ablation_variants(base: &TrainConfig) -> Vec<Variant> {
    use crate::backbone::Objective;
    use crate::trainer::{RolloutConfig, RolloutPolicy, StageSplit};
    let v = |name: &str, block, f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        Variant { name: name.to_string(), block, config: c }
    };
    let s3 = base.stages.split.s3;
    let scale = |x: usize| ((x as f64) * base.stages.split.s1 as f64 / 20.0).round().max(1.0) as usize;
    let scale2 = |x: usize| ((x as f64) * base.stages.split.s2 as f64 / 80.0).round().max(1.0) as usize;
    let h_max = base.stages.rollout.h_max;
    vec![
        v("three-stage training (ours)", AblationBlock::Strategy, &|_| {}),
        v("joint training (w/o stage split)", AblationBlock::Strategy, &|c| c.stages.joint = true),
        v(
            &format!("Baseline ({}_{})", base.backbone.family.label(), base.backbone.objective.label()),
            AblationBlock::Strategy,
            &|c| c.with_causal = false,
        ),
        v("w/o CausalVAE branch", AblationBlock::Removal, &|c| c.stages.branch_enabled = false),
        v("w/o state align loss", AblationBlock::Removal, &|c| c.stages.supervision = false),
        v("single-step rollout", AblationBlock::Removal, &|c| {
            c.stages.rollout = RolloutConfig { policy: RolloutPolicy::Fixed, horizon: 1, h_max };
        }),
        v("w/o contrastive loss", AblationBlock::Removal, &|c| c.backbone.objective = Objective::Nll),
        v("gate off", AblationBlock::Sensitivity, &|c| c.stages.gate_enabled = false),
        v("stage split: s1_8_s2_40", AblationBlock::Sensitivity, &|c| {
            c.stages.split = StageSplit { s1: scale(8), s2: scale2(40), s3 };
        }),
        v("stage split: s1_12_s2_48", AblationBlock::Sensitivity, &|c| {
            c.stages.split = StageSplit { s1: scale(12), s2: scale2(48), s3 };
        }),
        v("rollout policy: curriculum", AblationBlock::Sensitivity, &|c| c.stages.rollout.policy = RolloutPolicy::Curriculum),
        v("rollout policy: mixed", AblationBlock::Sensitivity, &|c| c.stages.rollout.policy = RolloutPolicy::Mixed),
    ]
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                flatten(&if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") }, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Leaf paths whose values differ.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten("", &serde_json::to_value(a).expect("serialises"), &mut fa);
    flatten("", &serde_json::to_value(b).expect("serialises"), &mut fb);
    let keys: BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    keys.into_iter().filter(|k| fa.get(*k) != fb.get(*k)).cloned().collect()
}

/// Factors are the first two path levels (`stages.split`, `backbone.objective`).
pub fn changed_factors(a: &TrainConfig, b: &TrainConfig) -> BTreeSet<String> {
    config_diff(a, b)
        .into_iter()
        .map(|p| p.split('.').take(2).collect::<Vec<_>>().join("."))
        .collect()
}

/// Rejects variants that change anything but a single factor.
pub fn check_single_factor(base: &TrainConfig, variant: &Variant) -> Result<()> {
    let f = changed_factors(base, &variant.config);
    if f.len() > 1 || (f.is_empty() && variant.name != ablation_variants(base)[0].name) {
        return Err(Error::config(format!("variant '{}' changes {} factors: {:?}", variant.name, f.len(), f)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub block: AblationBlock,
    pub h1: f64,
    pub mrr: f64,
    pub cf_h1: f64,
    pub cf_mrr: f64,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<36} {:>8} {:>8} {:>8} {:>8}\n", "Variant", "H@1", "MRR", "CF-H@1", "CF-MRR");
    let mut last = None;
    for r in rows {
        if last.is_some() && last != Some(r.block) {
            out.push_str(&"-".repeat(72));
            out.push('\n');
        }
        last = Some(r.block);
        out.push_str(&format!(
            "{:<36} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
            r.name,
            100.0 * r.h1,
            100.0 * r.mrr,
            100.0 * r.cf_h1,
            100.0 * r.cf_mrr
        ));
    }
    out
}

/// Trains and evaluates every variant; factual columns use horizon 1.
pub fn run_ablation_grid(
    base: &TrainConfig,
    variants: &[Variant],
    dataset: &crate::env::Dataset,
    bench: &Benchmark,
    max_samples: usize,
) -> Result<Vec<AblationRow>> {
    for v in variants {
        check_single_factor(base, v)?;
    }
    let mut rows = Vec::new();
    for v in variants {
        let out = trainer::run_pipeline(&v.config, dataset, None)?;
        let r = counterfactual_eval(&out.model, bench, &[1], max_samples)?;
        rows.push(AblationRow {
            name: v.name.clone(),
            block: v.block,
            h1: r.factual[&1].h1,
            mrr: r.factual[&1].mrr,
            cf_h1: r.cf.h1,
            cf_mrr: r.cf.mrr,
        });
    }
    let order = |b: AblationBlock| b as u8;
    rows.sort_by_key(|r| order(r.block));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_spot_values() {
        let m = compute_metrics(&[1, 2, 4]).unwrap();
        assert!((m.h1 - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.mrr - 1.75 / 3.0).abs() < 1e-12);
        assert_eq!(compute_metrics(&[1, 1, 1]).unwrap(), Metric { h1: 1.0, mrr: 1.0 });
        let worst = compute_metrics(&[11; 5]).unwrap();
        assert_eq!(worst.h1, 0.0);
        assert!((worst.mrr - 1.0 / 11.0).abs() < 1e-15);
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn ties_follow_index_order() {
        assert_eq!(rank_of(&[0.0; 5], 3), 4);
        assert_eq!(rank_of(&[-1.0, 0.0, -2.0], 1), 1);
        assert_eq!(rank_of(&[-1.0, -3.0, -2.0], 1), 3);
    }

    #[test]
    fn shd_counts_reversals_once() {
        let e = |v: &[(usize, usize)]| {
            let mut a = Array2::from_elem((3, 3), false);
            for &(i, j) in v {
                a[[i, j]] = true;
            }
            a
        };
        assert_eq!(shd(&e(&[(0, 1)]), &e(&[(0, 1)])), 0);
        assert_eq!(shd(&e(&[(0, 1)]), &e(&[(1, 0)])), 1);
        assert_eq!(shd(&e(&[(0, 1)]), &e(&[])), 1);
        assert_eq!(shd(&e(&[(0, 1), (1, 2)]), &e(&[(2, 0)])), 3);
    }

    #[test]
    fn spearman_extremes() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn paired_cell_format() {
        assert_eq!(paired_cell(0.11, 0.41), "11.0/41.0, Δ=+30.0");
        assert_eq!(paired_cell(0.5, 0.25), "50.0/25.0, Δ=-25.0");
    }

    #[test]
    fn ablation_rows_change_one_factor() {
        let base = TrainConfig::new(crate::backbone::Family::Gnn, crate::backbone::Objective::Contrastive, true);
        let vs = ablation_variants(&base);
        assert_eq!(vs.len(), 12);
        for v in &vs[1..] {
            assert_eq!(changed_factors(&base, &v.config).len(), 1, "{}", v.name);
            check_single_factor(&base, v).unwrap();
        }
        let gate = vs.iter().find(|v| v.name == "gate off").unwrap();
        assert_eq!(config_diff(&base, &gate.config), vec!["stages.gate_enabled".to_string()]);
        let mut two = gate.clone();
        two.config.stages.joint = true;
        assert!(matches!(check_single_factor(&base, &two), Err(Error::Config(_))));
    }
}
