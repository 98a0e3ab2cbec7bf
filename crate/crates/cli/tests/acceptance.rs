//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria that train models take several minutes each on one core. The
//! process always exits 0; the lines are the result.

use std::collections::BTreeSet;
use std::time::Instant;

use cwlab_cli::plot::{FigureWriter, PngFigures};
use cwlab_core::autodiff::{Graph, Var};
use cwlab_core::backbone::{loss_contrastive, loss_nll, Family, Objective};
use cwlab_core::bench::{build_benchmark, BenchSpec};
use cwlab_core::causal::{dag_penalty, dag_penalty_grad, CausalBranch, CausalConfig, Supervision, GROUP_CAUSAL};
use cwlab_core::env::{jacobian_template, Dataset, EnvConfig, ObsMode, OscillatorConfig, PhysicsConfig};
use cwlab_core::eval::{
    ablation_variants, check_single_factor, compute_metrics, counterfactual_eval, evaluate, identifiability_test,
    structure_recovery, IdentifiabilityConfig, OracleScorer,
};
use cwlab_core::model::WorldModel;
use cwlab_core::nn::{ParamId, ParamStore, Session};
use cwlab_core::trainer::{run_pipeline, RunOutcome, StageSplit, TrainConfig};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = (bool, String);

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|x| x * x).sum().sqrt();
    let scale = a.mapv(|x| x * x).sum().sqrt().max(b.mapv(|x| x * x).sum().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

// Central differences of a scalar function of one matrix.
fn numeric_grad(x: &Array2<f64>, f: &dyn Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let h = 1e-6;
    let mut g = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let mut p = x.clone();
        let mut m = x.clone();
        p.as_slice_mut().unwrap()[idx] += h;
        m.as_slice_mut().unwrap()[idx] -= h;
        g.as_slice_mut().unwrap()[idx] = (f(&p) - f(&m)) / (2.0 * h);
    }
    g
}

fn permuted_triangular(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(rng);
    let mut a = Array2::zeros((d, d));
    for i in 0..d {
        for j in i + 1..d {
            if rng.gen_bool(0.6) {
                a[[order[i], order[j]]] = rng.gen_range(-2.0..2.0);
            }
        }
    }
    a
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut dag_max = 0.0f64;
    for _ in 0..100 {
        let d = rng.gen_range(2..=6);
        dag_max = dag_max.max(dag_penalty(&permuted_triangular(&mut rng, d)));
    }
    let mut cyc_min = f64::INFINITY;
    for d in 2..=6 {
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    let mut a = Array2::zeros((d, d));
                    a[[i, j]] = 1.0;
                    a[[j, i]] = 1.0;
                    cyc_min = cyc_min.min(dag_penalty(&a));
                }
            }
        }
    }
    for _ in 0..50 {
        let d = rng.gen_range(2..=6);
        let mut a = permuted_triangular(&mut rng, d);
        // Close a directed cycle through a random node sequence.
        let len = rng.gen_range(2..=d);
        let mut nodes: Vec<usize> = (0..d).collect();
        nodes.shuffle(&mut rng);
        for k in 0..len {
            let (u, v) = (nodes[k], nodes[(k + 1) % len]);
            a[[u, v]] = rng.gen_range(0.5..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
        cyc_min = cyc_min.min(dag_penalty(&a));
    }
    let secs = t.elapsed().as_secs_f64();
    let ok = dag_max <= 1e-8 && cyc_min >= 1e-3 && secs < 5.0;
    (ok, format!("max on DAGs {dag_max:.2e}, min on cyclic {cyc_min:.2e}, {secs:.2}s"))
}

fn stage2_components(branch: &CausalBranch, store: &ParamStore, z: &Array2<f64>, noise: &Array2<f64>, sup: &[Array2<f64>; 3]) -> Vec<f64> {
    let trainable: BTreeSet<String> = [GROUP_CAUSAL.to_string()].into();
    let mut s = Session::new(store, &trainable);
    let zv = s.input(z.clone());
    let r = branch.refine(&mut s, zv, Some(noise)).unwrap();
    let sp = Supervision { prior: s.input(sup[0].clone()), concept: s.input(sup[1].clone()), state: s.input(sup[2].clone()) };
    let l = branch.stage2_loss(&mut s, zv, &r, Some(sp), 3.0).unwrap();
    l.terms.iter().map(|&v| s.graph.scalar_value(v)).collect()
}

fn stage2_gradients(
    branch: &CausalBranch,
    store: &ParamStore,
    z: &Array2<f64>,
    noise: &Array2<f64>,
    sup: &[Array2<f64>; 3],
    term: usize,
) -> Vec<(ParamId, Array2<f64>)> {
    let trainable: BTreeSet<String> = [GROUP_CAUSAL.to_string()].into();
    let mut s = Session::new(store, &trainable);
    let zv = s.input(z.clone());
    let r = branch.refine(&mut s, zv, Some(noise)).unwrap();
    let sp = Supervision { prior: s.input(sup[0].clone()), concept: s.input(sup[1].clone()), state: s.input(sup[2].clone()) };
    let l = branch.stage2_loss(&mut s, zv, &r, Some(sp), 3.0).unwrap();
    s.gradients(l.terms[term])
}

fn criterion_2() -> Outcome {
    let tol = 1e-4;
    let mut worst = [0.0f64; 4];
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    for _ in 0..20 {
        let d = rng.gen_range(2..=5);
        let a = randn(&mut rng, d, d) * 0.5;
        let n = numeric_grad(&a, &|x| dag_penalty(x));
        worst[0] = worst[0].max(rel_err(&dag_penalty_grad(&a), &n));
    }

    for trial in 0..20 {
        let (ds, latent, sd) = if trial % 2 == 0 { (3, 3, 3) } else { (3, 4, 2) };
        let mut cfg = CausalConfig::new(ds, latent, sd, true);
        cfg.mask_hidden = 4;
        let mut store = ParamStore::new();
        let branch = CausalBranch::new(&cfg, &mut store, &mut rng).unwrap();
        let mut a = randn(&mut rng, ds, ds) * 0.3;
        a.diag_mut().fill(0.0);
        *store.get_mut(branch.adjacency_id()) = a;
        let b = 5;
        let z = randn(&mut rng, b, latent);
        let noise = randn(&mut rng, b, ds);
        let sup = [randn(&mut rng, b, ds), randn(&mut rng, b, ds), randn(&mut rng, b, sd)];
        for term in 0..5 {
            let grads = stage2_gradients(&branch, &store, &z, &noise, &sup, term);
            for (id, g) in grads {
                let f = |x: &Array2<f64>| {
                    let mut st = store.clone();
                    *st.get_mut(id) = x.clone();
                    stage2_components(&branch, &st, &z, &noise, &sup)[term]
                };
                let n = numeric_grad(store.get(id), &f);
                worst[1] = worst[1].max(rel_err(&g, &n));
            }
        }
    }

    for _ in 0..20 {
        let (b, d) = (rng.gen_range(1..=6), rng.gen_range(1..=5));
        let pred = randn(&mut rng, b, d);
        let target = randn(&mut rng, b, d);
        let sigma = rng.gen_range(0.3..2.0);
        let f = |p: &Array2<f64>| {
            let mut g = Graph::new();
            let pv = g.leaf(p.clone());
            let tv = g.constant(target.clone());
            let l = loss_nll(&mut g, pv, tv, sigma);
            g.scalar_value(l)
        };
        let mut g = Graph::new();
        let pv = g.leaf(pred.clone());
        let tv = g.constant(target.clone());
        let l = loss_nll(&mut g, pv, tv, sigma);
        let analytic = g.backward(l).get(pv).unwrap().clone();
        worst[2] = worst[2].max(rel_err(&analytic, &numeric_grad(&pred, &f)));
    }

    let mut trials = 0;
    while trials < 20 {
        let (b, d) = (rng.gen_range(1..=6), rng.gen_range(1..=5));
        let pred = randn(&mut rng, b, d);
        let target = randn(&mut rng, b, d);
        let negative = randn(&mut rng, b, d);
        let margin = rng.gen_range(0.5..4.0);
        let off_kink = (0..b).all(|r| {
            let dn: f64 = (0..d).map(|j| (pred[[r, j]] - negative[[r, j]]).powi(2)).sum();
            (dn - margin).abs() > 1e-3
        });
        if !off_kink {
            continue;
        }
        trials += 1;
        let eval = |p: &Array2<f64>, g: &mut Graph| -> (Var, Var) {
            let pv = g.leaf(p.clone());
            let tv = g.constant(target.clone());
            let nv = g.constant(negative.clone());
            (pv, loss_contrastive(g, pv, tv, nv, margin))
        };
        let f = |p: &Array2<f64>| {
            let mut g = Graph::new();
            let (_, l) = eval(p, &mut g);
            g.scalar_value(l)
        };
        let mut g = Graph::new();
        let (pv, l) = eval(&pred, &mut g);
        let analytic = g.backward(l).get(pv).unwrap().clone();
        worst[3] = worst[3].max(rel_err(&analytic, &numeric_grad(&pred, &f)));
    }

    let ok = worst.iter().all(|w| *w <= tol);
    (
        ok,
        format!(
            "max relative error: dag {:.1e}, stage-2 terms {:.1e}, nll {:.1e}, contrastive {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// Every rank vector of length m over 1..=n, with reference metrics computed
// from the definitions in rational form.
fn criterion_3() -> Outcome {
    let mut checked = 0;
    let mut bad = 0;
    for n in 1..=5usize {
        for m in 1..=4usize {
            let total = n.pow(m as u32);
            for code in 0..total {
                let mut c = code;
                let ranks: Vec<usize> = (0..m)
                    .map(|_| {
                        let r = c % n + 1;
                        c /= n;
                        r
                    })
                    .collect();
                let hits = ranks.iter().filter(|&&r| r == 1).count();
                // Common denominator 60 covers every 1/r with r ≤ 5.
                let recip: usize = ranks.iter().map(|&r| 60 / r).sum();
                let h1 = hits as f64 / m as f64;
                let mrr = recip as f64 / (60.0 * m as f64);
                let got = compute_metrics(&ranks).unwrap();
                checked += 1;
                if (got.h1 - h1).abs() > 1e-12 || (got.mrr - mrr).abs() > 1e-12 {
                    bad += 1;
                }
            }
        }
    }
    let spot = compute_metrics(&[1, 2, 4]).unwrap();
    let spot_ok = (spot.h1 - 1.0 / 3.0).abs() < 1e-12 && (spot.mrr - 0.5833).abs() < 5e-5;
    (
        bad == 0 && spot_ok,
        format!("{checked} rank vectors, {bad} mismatches; [1,2,4] gives H@1 {:.4}, MRR {:.4}", spot.h1, spot.mrr),
    )
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let env = EnvConfig::PhysicsNbody(PhysicsConfig { obs_mode: ObsMode::State, ..Default::default() });
    let data = Dataset::generate(&env, 400, 20, 42).unwrap();
    let bench = build_benchmark(&data, &BenchSpec { max_samples: 2000, num_candidates: 11, ..Default::default() }).unwrap();
    let groups = bench.groups.len();
    let cfg = TrainConfig::new(Family::Gnn, Objective::Contrastive, false);
    let model = WorldModel::new(&cfg.model_config(&data).unwrap(), 0).unwrap();
    let r = counterfactual_eval(&model, &bench, &[1], 2000).unwrap();
    let h1 = r.factual[&1].h1;
    let p = 1.0 / 11.0;
    let se = (p * (1.0 - p) / groups as f64).sqrt();
    let null_ok = (h1 - p).abs() <= 3.0 * se;
    let oracle = evaluate(&OracleScorer::new(&bench).unwrap(), &bench, &[1], 2000).unwrap().report().unwrap();
    let secs = t.elapsed().as_secs_f64();
    let ok = groups == 2000 && null_ok && oracle.cf.h1 == 1.0 && secs < 600.0;
    (
        ok,
        format!(
            "{groups} groups; untrained H@1 {h1:.4} vs 1/11 ± 3·SE {:.4}; oracle CF-H@1 {:.4}; {secs:.0}s",
            3.0 * se,
            oracle.cf.h1
        ),
    )
}

fn criterion_5() -> Outcome {
    let env = EnvConfig::PhysicsNbody(PhysicsConfig { obs_mode: ObsMode::State, ..Default::default() });
    let data = Dataset::generate(&env, 60, 20, 5).unwrap();
    let spec = BenchSpec { max_samples: 300, magnitudes: vec![0.0], ..Default::default() };
    let bench = build_benchmark(&data, &spec).unwrap();
    let cfg = TrainConfig::new(Family::Gnn, Objective::Contrastive, false);
    let model = WorldModel::new(&cfg.model_config(&data).unwrap(), 3).unwrap();
    let r = counterfactual_eval(&model, &bench, &[1], 300).unwrap();
    let identity = r.cf == r.factual[&1];

    let live = build_benchmark(&data, &BenchSpec { max_samples: 300, ..Default::default() }).unwrap();
    let mut mismatched = 0;
    for g in &live.groups {
        let regen = live.regenerate_cf(g).unwrap();
        let same = regen.len() == g.cf_future.len()
            && regen.iter().zip(&g.cf_future).all(|(o, &f)| {
                let a = o.features();
                let b = live.frames.features(f);
                a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
            });
        mismatched += (!same) as usize;
    }
    (
        identity && mismatched == 0,
        format!(
            "Δ=0: CF (H@1 {:.4}, MRR {:.4}) vs step-1 (H@1 {:.4}, MRR {:.4}); {mismatched}/{} regenerated futures differ",
            r.cf.h1,
            r.cf.mrr,
            r.factual[&1].h1,
            r.factual[&1].mrr,
            live.groups.len()
        ),
    )
}

fn criterion_6() -> Outcome {
    let on = identifiability_test(&IdentifiabilityConfig::default()).unwrap();
    let off = identifiability_test(&IdentifiabilityConfig { alignment: false, ..Default::default() }).unwrap();
    let ok = on.mean_shd <= 1.0 && off.mean_shd > on.mean_shd;
    let per = |r: &cwlab_core::eval::IdentifiabilityReport| r.runs.iter().map(|x| x.shd.to_string()).collect::<Vec<_>>().join(",");
    (
        ok,
        format!(
            "mean SHD aligned {:.3} [{}], unaligned {:.3} [{}]",
            on.mean_shd,
            per(&on),
            off.mean_shd,
            per(&off)
        ),
    )
}

struct DeskPhysics {
    train: Dataset,
    bench: cwlab_core::bench::Benchmark,
}

fn desk_physics() -> DeskPhysics {
    let env = EnvConfig::PhysicsNbody(PhysicsConfig { obs_mode: ObsMode::Pixels, ..Default::default() });
    let train = Dataset::generate(&env, 200, 20, 42).unwrap();
    let eval = Dataset::generate(&env, 150, 20, 4242).unwrap();
    let bench = build_benchmark(&eval, &BenchSpec::default()).unwrap();
    DeskPhysics { train, bench }
}

fn desk_config(objective: Objective, with_causal: bool, seed: u64, env: &EnvConfig) -> TrainConfig {
    let mut c = TrainConfig::new(Family::Gnn, objective, with_causal);
    c.apply_desk_preset(env).unwrap();
    c.seed = seed;
    c
}

struct PairedRun {
    baseline: RunOutcome,
    causal: RunOutcome,
    base_h1: f64,
    base_cf: f64,
    causal_h1: f64,
    causal_cf: f64,
}

fn criterion_7(desk: &DeskPhysics) -> (Outcome, Vec<PairedRun>, Vec<(Objective, f64)>) {
    let t = Instant::now();
    let env = desk.train.meta.env.clone();
    let mut runs = Vec::new();
    let mut lines = Vec::new();
    let mut ok = true;
    let mut ours_h1 = Vec::new();
    for objective in [Objective::Contrastive, Objective::Nll] {
        let mut cf_delta = Vec::new();
        let mut h1_delta = Vec::new();
        for seed in 0..3 {
            let baseline = run_pipeline(&desk_config(objective, false, seed, &env), &desk.train, None).unwrap();
            let causal = run_pipeline(&desk_config(objective, true, seed, &env), &desk.train, None).unwrap();
            let rb = counterfactual_eval(&baseline.model, &desk.bench, &[1], 2000).unwrap();
            let rc = counterfactual_eval(&causal.model, &desk.bench, &[1], 2000).unwrap();
            cf_delta.push(rc.cf.h1 - rb.cf.h1);
            h1_delta.push(rc.factual[&1].h1 - rb.factual[&1].h1);
            if objective == Objective::Contrastive && seed == 0 {
                ours_h1.push((objective, rc.factual[&1].h1));
            }
            runs.push(PairedRun {
                base_h1: rb.factual[&1].h1,
                base_cf: rb.cf.h1,
                causal_h1: rc.factual[&1].h1,
                causal_cf: rc.cf.h1,
                baseline,
                causal,
            });
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (dcf, dh1) = (mean(&cf_delta), mean(&h1_delta));
        ok &= dcf > 0.0 && dh1 >= -0.05;
        lines.push(format!("GNN_{}: mean ΔCF-H@1 {:+.4}, mean ΔH@1 {:+.4}", objective.label(), dcf, dh1));
    }
    let detail = runs
        .iter()
        .map(|r| format!("({:.3}/{:.3} vs {:.3}/{:.3})", r.base_h1, r.base_cf, r.causal_h1, r.causal_cf))
        .collect::<Vec<_>>()
        .join(" ");
    lines.push(format!("H@1/CF-H@1 baseline vs causal {detail}"));
    lines.push(format!("{:.0}s", t.elapsed().as_secs_f64()));
    ((ok, lines.join("; ")), runs, ours_h1)
}

fn criterion_8(desk: &DeskPhysics, ours_h1: f64) -> Outcome {
    let env = desk.train.meta.env.clone();
    let base = desk_config(Objective::Contrastive, true, 0, &env);
    let variants = ablation_variants(&base);
    let names: Vec<&str> = variants.iter().map(|v| v.name.as_str()).collect();
    let expected = [
        "three-stage training (ours)",
        "joint training (w/o stage split)",
        "Baseline (GNN_Contrastive)",
        "w/o CausalVAE branch",
        "w/o state align loss",
        "single-step rollout",
        "w/o contrastive loss",
        "gate off",
        "stage split: s1_8_s2_40",
        "stage split: s1_12_s2_48",
        "rollout policy: curriculum",
        "rollout policy: mixed",
    ];
    let rows_ok = names == expected;
    let single = variants.iter().all(|v| check_single_factor(&base, v).is_ok());
    let mut parts = vec![format!("{} rows, order {}, single-factor {}", names.len(), rows_ok, single)];
    let mut ok = rows_ok && single;
    for name in ["w/o state align loss", "gate off"] {
        let v = variants.iter().find(|v| v.name == name).unwrap();
        let out = run_pipeline(&v.config, &desk.train, None).unwrap();
        let r = counterfactual_eval(&out.model, &desk.bench, &[1], 2000).unwrap();
        let h1 = r.factual[&1].h1;
        ok &= h1 < ours_h1;
        parts.push(format!("{name} H@1 {h1:.4} vs ours {ours_h1:.4}"));
    }
    (ok, parts.join("; "))
}

fn criterion_9() -> Outcome {
    let t = Instant::now();
    let env = EnvConfig::HarmonicOscillator(OscillatorConfig { oscillators: 2, ..Default::default() });
    let data = Dataset::generate(&env, 200, 30, 7).unwrap();
    let sim = env.build().unwrap();
    let template = jacobian_template(sim.as_ref(), &data.mean_state(), sim.sim_dt()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut overlaps = Vec::new();
    let mut files_ok = true;
    for seed in 0..3 {
        let mut c = TrainConfig::new(Family::Gnn, Objective::Contrastive, true);
        c.apply_desk_preset(&env).unwrap();
        c.backbone.slot_dim = 16;
        c.stages.split = StageSplit { s1: 20, s2: 80, s3: 0 };
        c.seed = seed;
        let out = run_pipeline(&c, &data, None).unwrap();
        let a = out.model.adjacency().unwrap();
        let d = structure_recovery(&a, &template, None, 0.3, 0.1).unwrap();
        overlaps.push(d.top_k_overlap);
        let files = PngFigures::default().heatmap_pair(dir.path(), &format!("structure_seed{seed}"), &d.learned, &d.reference).unwrap();
        files_ok &= files.len() == 3 && files.iter().all(|f| f.exists());
    }
    let mean = overlaps.iter().sum::<f64>() / overlaps.len() as f64;
    let k = template.a_gt.iter().filter(|x| **x != 0.0).count();
    (
        mean >= 0.75 && files_ok,
        format!(
            "top-{k} overlap per seed {:?}, mean {mean:.3}; heatmap pairs written {files_ok}; {:.0}s",
            overlaps.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            t.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_10(runs: &[PairedRun]) -> Outcome {
    let freeze: Vec<_> = runs.iter().flat_map(|r| r.causal.freeze_checks.iter()).collect();
    let frozen_ok = !freeze.is_empty() && freeze.iter().all(|c| c.unchanged);
    let paired_ok = runs.iter().all(|r| r.baseline.batch_log() == r.causal.batch_log());

    let env = EnvConfig::PhysicsNbody(PhysicsConfig { obs_mode: ObsMode::State, ..Default::default() });
    let data = Dataset::generate(&env, 40, 20, 11).unwrap();
    let mut c = desk_config(Objective::Contrastive, true, 9, &env);
    c.stages.split = StageSplit { s1: 2, s2: 2, s3: 2 };
    let a = run_pipeline(&c, &data, None).unwrap().loss_curve();
    let b = run_pipeline(&c, &data, None).unwrap().loss_curve();
    let repro = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    (
        frozen_ok && paired_ok && repro,
        format!(
            "{} freeze checks unchanged {frozen_ok}; paired batch logs identical {paired_ok}; rerun loss curve bit-identical {repro} ({} points)",
            freeze.len(),
            a.len()
        ),
    )
}

fn report(n: usize, (ok, detail): Outcome, results: &mut Vec<bool>) {
    println!("criterion {n:>2}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    results.push(ok);
}

fn main() {
    // Accept and ignore libtest arguments such as `--nocapture`.
    let filter: Vec<usize> = std::env::var("CWLAB_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let want = |n: usize| filter.is_empty() || filter.contains(&n);
    let mut results = Vec::new();
    if want(1) {
        report(1, criterion_1(), &mut results);
    }
    if want(2) {
        report(2, criterion_2(), &mut results);
    }
    if want(3) {
        report(3, criterion_3(), &mut results);
    }
    if want(4) {
        report(4, criterion_4(), &mut results);
    }
    if want(5) {
        report(5, criterion_5(), &mut results);
    }
    if want(6) {
        report(6, criterion_6(), &mut results);
    }
    if want(7) || want(8) || want(10) {
        let desk = desk_physics();
        let (c7, runs, ours) = criterion_7(&desk);
        if want(7) {
            report(7, c7, &mut results);
        }
        if want(8) {
            report(8, criterion_8(&desk, ours[0].1), &mut results);
        }
        if want(9) {
            report(9, criterion_9(), &mut results);
        }
        if want(10) {
            report(10, criterion_10(&runs), &mut results);
        }
    } else if want(9) {
        report(9, criterion_9(), &mut results);
    }
    let passed = results.iter().filter(|x| **x).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
}
