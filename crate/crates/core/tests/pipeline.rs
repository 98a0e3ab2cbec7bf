use cwlab_core::backbone::{Family, Objective};
use cwlab_core::bench::{build_benchmark, load_benchmark, BenchSpec};
use cwlab_core::env::{Dataset, EnvConfig, ObsMode, PhysicsConfig};
use cwlab_core::eval::counterfactual_eval;
use cwlab_core::model::WorldModel;
use cwlab_core::trainer::{run_pipeline, StageSplit, TrainConfig};
use cwlab_core::Error;

fn physics_state() -> EnvConfig {
    EnvConfig::PhysicsNbody(PhysicsConfig { obs_mode: ObsMode::State, ..Default::default() })
}

#[test]
fn dataset_generation_is_deterministic_and_round_trips() {
    let env = physics_state();
    let a = Dataset::generate(&env, 6, 16, 3).unwrap();
    let b = Dataset::generate(&env, 6, 16, 3).unwrap();
    assert_eq!(a.episodes.len(), 6);
    for (x, y) in a.episodes.iter().zip(&b.episodes) {
        assert_eq!(x.states, y.states);
    }
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path(), false).unwrap();
    assert!(a.save(dir.path(), false).is_err());
    let c = Dataset::load(dir.path()).unwrap();
    assert_eq!(c.meta, a.meta);
    assert_eq!(c.episodes[5].states, a.episodes[5].states);
}

#[test]
fn benchmark_round_trips() {
    let data = Dataset::generate(&physics_state(), 20, 20, 8).unwrap();
    let bench = build_benchmark(&data, &BenchSpec { max_samples: 30, ..Default::default() }).unwrap();
    assert_eq!(bench.groups.len(), 30);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.bin");
    bench.save(&path).unwrap();
    let back = load_benchmark(&path).unwrap();
    assert_eq!(back.groups, bench.groups);
    assert_eq!(back.spec, bench.spec);
}

#[test]
fn too_few_episodes_for_candidates_is_an_input_error() {
    let data = Dataset::generate(&physics_state(), 5, 20, 8).unwrap();
    let r = build_benchmark(&data, &BenchSpec::default());
    assert!(matches!(r, Err(Error::Input(_))));
}

#[test]
fn small_causal_run_freezes_backbone_and_saves_checkpoints() {
    let env = physics_state();
    let data = Dataset::generate(&env, 24, 20, 1).unwrap();
    let mut c = TrainConfig::new(Family::Gnn, Objective::Contrastive, true);
    c.apply_desk_preset(&env).unwrap();
    c.stages.split = StageSplit { s1: 1, s2: 2, s3: 1 };
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&c, &data, Some(dir.path())).unwrap();
    assert!(!out.freeze_checks.is_empty());
    assert!(out.freeze_checks.iter().all(|f| f.unchanged));
    let stages: Vec<&str> = out.records.iter().map(|r| r.stage.as_str()).collect();
    assert!(stages.contains(&"s1") && stages.contains(&"s2") && stages.contains(&"s3"));
    assert!(dir.path().join("ckpt_s1.bin").exists());
    let (model, _) = WorldModel::load(&dir.path().join("ckpt_s3.bin")).unwrap();
    assert_eq!(model.adjacency(), out.model.adjacency());

    let bench_data = Dataset::generate(&env, 20, 20, 99).unwrap();
    let bench = build_benchmark(&bench_data, &BenchSpec { max_samples: 20, ..Default::default() }).unwrap();
    let a = counterfactual_eval(&out.model, &bench, &[1, 5], 20).unwrap();
    let b = counterfactual_eval(&model, &bench, &[1, 5], 20).unwrap();
    assert_eq!(a, b);
}

#[test]
fn baseline_and_causal_runs_share_batch_order() {
    let env = physics_state();
    let data = Dataset::generate(&env, 24, 20, 2).unwrap();
    let mut c = TrainConfig::new(Family::Gnn, Objective::Nll, true);
    c.apply_desk_preset(&env).unwrap();
    c.stages.split = StageSplit { s1: 1, s2: 1, s3: 1 };
    let mut b = c.clone();
    b.with_causal = false;
    let causal = run_pipeline(&c, &data, None).unwrap();
    let base = run_pipeline(&b, &data, None).unwrap();
    assert_eq!(causal.batch_log(), base.batch_log());
    assert_eq!(base.batch_log().len(), 3);
}
