use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use cwlab_core::backbone::{Family, Objective};
use cwlab_core::bench::{annotations, build_benchmark, load_benchmark, BenchSpec, TargetMode};
use cwlab_core::env::{jacobian_template, Dataset, EnvConfig, ObsMode};
use cwlab_core::error::{Error, Result};
use cwlab_core::eval::{
    ablation_table, ablation_variants, counterfactual_eval, identifiability_test, paired_table, report_table,
    run_ablation_grid, structure_recovery, IdentifiabilityConfig, MetricsReport,
};
use cwlab_core::model::WorldModel;
use cwlab_core::trainer::{parse_matrix_csv, run_pipeline, RolloutPolicy, StageSplit, TrainConfig};
use serde_json::json;

use cwlab_cli::config::{output_path, parse_list, with_file, ResolvedConfig};
use cwlab_cli::plot;

#[derive(Parser)]
#[command(name = "cwlab", version, about = "Causal plug-in world models: data, training, counterfactual evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an episode dataset.
    GenData(GenDataArgs),
    /// Build a counterfactual retrieval benchmark from a dataset.
    Bench(BenchArgs),
    /// Train a backbone, optionally with the causal branch.
    Train(TrainArgs),
    /// Evaluate a trained run on a benchmark.
    Eval(EvalArgs),
    /// Structure diagnostics and the synthetic identifiability test.
    Analyze(AnalyzeArgs),
    /// Train and evaluate the ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
    /// JSON file with per-section overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path (relative paths resolve under $CWLAB_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "physics")]
    env: String,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 20)]
    length: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// `pixels` or `state`.
    #[arg(long)]
    obs_mode: Option<String>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long)]
    num_candidates: Option<usize>,
    #[arg(long)]
    horizons: Option<String>,
    #[arg(long)]
    obj_idx: Option<usize>,
    #[arg(long)]
    axis: Option<String>,
    #[arg(long)]
    delta: Option<f64>,
    /// Cycle through the environment's small/medium/large magnitudes.
    #[arg(long)]
    magnitude_sweep: bool,
    #[arg(long)]
    multi_target: bool,
    /// Leave the query's own factual future out of the counterfactual candidates.
    #[arg(long)]
    no_hard_negative: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("family").args(["vae", "gnn", "modular"]).multiple(false)))]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vae: bool,
    #[arg(long)]
    gnn: bool,
    #[arg(long)]
    modular: bool,
    /// Contrastive objective (NLL otherwise).
    #[arg(long)]
    contrastive: bool,
    #[arg(long)]
    with_causal: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// `s1_<n>_s2_<m>`.
    #[arg(long)]
    stage_split: Option<String>,
    #[arg(long)]
    s1: Option<usize>,
    #[arg(long)]
    s2: Option<usize>,
    #[arg(long)]
    s3: Option<usize>,
    /// Batch size for every stage.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    slot_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// fixed, curriculum, mixed or late-mixed.
    #[arg(long)]
    rollout_policy: Option<String>,
    #[arg(long)]
    joint: bool,
    #[arg(long)]
    gate_off: bool,
    #[arg(long)]
    no_align: bool,
    /// Desk scale: epochs / 4, batch 64, one slot per object.
    #[arg(long)]
    desk: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    bench: PathBuf,
    #[arg(long, default_value_t = 2000)]
    max_samples: usize,
    #[arg(long, default_value = "1,5,10")]
    horizons: String,
    /// Baseline run for the paired Δ report.
    #[arg(long)]
    paired_with: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    /// Run directory holding adjacency.csv and config.json.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Explicit adjacency CSV.
    #[arg(long)]
    adjacency: Option<PathBuf>,
    /// Environment for the template (defaults to the run's).
    #[arg(long)]
    env: Option<String>,
    /// Dataset whose mean state is the reference s*.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed of the initial state used as s* when no dataset is given.
    #[arg(long, default_value_t = 0)]
    ref_seed: u64,
    /// Compare the adjacency with itself.
    #[arg(long)]
    self_compare: bool,
    #[arg(long)]
    identifiability: bool,
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    edges: usize,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long)]
    no_align: bool,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
    #[arg(long, default_value_t = 0.1)]
    floor: f64,
    /// Emit CSV matrices only.
    #[arg(long)]
    csv_only: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    bench: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    desk: bool,
    #[arg(long, default_value_t = 2000)]
    max_samples: usize,
    /// Comma-separated subset of variant names.
    #[arg(long)]
    only: Option<String>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Input(_) | Error::Validation(_) | Error::Format(_) => 3,
        Error::Numeric(_) | Error::Io(_) | Error::Json(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Bench(a) => bench(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dry_run(r: &ResolvedConfig) {
    println!("{}", r.to_pretty());
}

fn parse_mode(text: &str) -> Result<ObsMode> {
    match text {
        "pixels" => Ok(ObsMode::Pixels),
        "state" => Ok(ObsMode::State),
        other => Err(Error::config(format!("obs mode must be 'pixels' or 'state', got '{other}'"))),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut env = with_file(&EnvConfig::by_name(&a.env)?, a.common.config.as_deref(), "env")?;
    if let Some(m) = &a.obs_mode {
        env.set_obs_mode(parse_mode(m)?);
    }
    if a.episodes == 0 {
        return Err(Error::config("--episodes must be ≥ 1"));
    }
    if a.length == 0 {
        return Err(Error::config("--length must be ≥ 1"));
    }
    let out = output_path(a.common.out.as_deref(), "data");
    let r = ResolvedConfig::new("gen-data", a.seed, out.clone())
        .section("env", &env)
        .section("data", &json!({"episodes": a.episodes, "length": a.length}))
        .finish(None);
    if a.common.dry_run {
        dry_run(&r);
        return Ok(());
    }
    let d = Dataset::generate(&env, a.episodes, a.length, a.seed)?;
    d.save(&out, a.force)?;
    r.write(&out.join("resolved_config.json"))?;
    println!("wrote {} episodes to {}", d.episodes.len(), out.display());
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut spec = with_file(&BenchSpec::default(), a.common.config.as_deref(), "bench")?;
    if let Some(x) = a.max_samples {
        spec.max_samples = x;
    }
    if let Some(x) = a.num_candidates {
        spec.num_candidates = x;
    }
    if let Some(x) = &a.horizons {
        spec.horizons = parse_list(x)?;
    }
    if let Some(x) = a.obj_idx {
        spec.obj_index = x;
    }
    if let Some(x) = &a.axis {
        spec.axis = BenchSpec::parse_axis(x)?;
    }
    if let Some(x) = a.delta {
        spec.magnitudes = vec![x];
    }
    if a.multi_target {
        spec.target_mode = TargetMode::Multi;
    }
    if a.no_hard_negative {
        spec.hard_negative = false;
    }
    if let Some(x) = a.seed {
        spec.seed = x;
    }
    let out = output_path(a.common.out.as_deref(), "bench.safetensors");
    let dataset = Dataset::load(&a.data)?;
    if a.magnitude_sweep {
        spec.magnitudes = dataset.env()?.magnitude_levels().to_vec();
    }
    spec.validate()?;
    let r = ResolvedConfig::new("bench", spec.seed, out.clone())
        .section("bench", &spec)
        .section("data", &json!({"path": a.data, "env": dataset.meta.env}))
        .finish(None);
    if a.common.dry_run {
        dry_run(&r);
        return Ok(());
    }
    let b = build_benchmark(&dataset, &spec)?;
    b.save(&out)?;
    let stem = out.with_extension("");
    r.write(&stem.with_extension("config.json"))?;
    std::fs::write(stem.with_extension("annotations.json"), serde_json::to_string_pretty(&annotations(&b))?)?;
    println!("wrote {} query groups to {}", b.groups.len(), out.display());
    Ok(())
}

fn parse_policy(text: &str) -> Result<RolloutPolicy> {
    serde_json::from_value(json!(text)).map_err(|_| {
        Error::config(format!("rollout policy must be fixed, curriculum, mixed or late-mixed, got '{text}'"))
    })
}

fn train_config(a: &TrainArgs, env: &EnvConfig) -> Result<TrainConfig> {
    let family = if a.vae {
        Family::Vae
    } else if a.gnn {
        Family::Gnn
    } else if a.modular {
        Family::Modular
    } else {
        Family::Ae
    };
    let objective = if a.contrastive { Objective::Contrastive } else { Objective::Nll };
    let mut cfg = TrainConfig::new(family, objective, a.with_causal);
    if a.desk {
        cfg.apply_desk_preset(env)?;
    }
    let mut cfg = with_file(&cfg, a.common.config.as_deref(), "train")?;
    cfg.seed = a.seed;
    if let Some(s) = &a.stage_split {
        cfg.stages.split = StageSplit::parse(s, cfg.stages.split.s3)?;
    }
    if let Some(x) = a.s1 {
        cfg.stages.split.s1 = x;
    }
    if let Some(x) = a.s2 {
        cfg.stages.split.s2 = x;
    }
    if let Some(x) = a.s3 {
        cfg.stages.split.s3 = x;
    }
    if let Some(b) = a.batch {
        cfg.stages.batch = [b; 3];
    }
    if let Some(x) = a.slots {
        cfg.backbone.num_slots = x;
    }
    if let Some(x) = a.slot_dim {
        cfg.backbone.slot_dim = x;
    }
    if let Some(x) = a.hidden {
        cfg.backbone.hidden_dim = x;
    }
    if let Some(p) = &a.rollout_policy {
        cfg.stages.rollout.policy = parse_policy(p)?;
    }
    if a.joint {
        cfg.stages.joint = true;
    }
    if a.gate_off {
        cfg.stages.gate_enabled = false;
    }
    if a.no_align {
        cfg.stages.supervision = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let dataset = Dataset::load(&a.data)?;
    let cfg = train_config(&a, &dataset.meta.env)?;
    let default = format!("runs/{}_seed{}", cfg.label().replace('+', "_"), cfg.seed);
    let out = output_path(a.common.out.as_deref(), &default);
    let r = ResolvedConfig::new("train", cfg.seed, out.clone())
        .section("train", &cfg)
        .section("data", &json!({"path": a.data, "env": dataset.meta.env}))
        .finish(Some(cfg.hash()));
    if a.common.dry_run {
        dry_run(&r);
        return Ok(());
    }
    let outcome = run_pipeline(&cfg, &dataset, Some(&out))?;
    r.write(&out.join("resolved_config.json"))?;
    let figures = plot::writer(false);
    figures.curve(&out, "loss_curve", &outcome.loss_curve())?;
    if let Some(adj) = outcome.model.adjacency() {
        figures.heatmap(&out, "adjacency_heatmap", &adj)?;
    }
    std::fs::write(
        out.join("train_summary.json"),
        serde_json::to_string_pretty(&json!({
            "config_hash": outcome.config_hash,
            "label": cfg.label(),
            "freeze_checks": outcome.freeze_checks,
            "batch_log": outcome.batch_log(),
        }))?,
    )?;
    println!("run written to {}", out.display());
    Ok(())
}

/// Latest checkpoint of a run directory.
fn load_run(dir: &Path) -> Result<(WorldModel, String, String)> {
    for name in ["ckpt_s3.bin", "ckpt_s1.bin"] {
        let p = dir.join(name);
        if p.exists() {
            let (m, meta) = WorldModel::load(&p)?;
            return Ok((m, meta.config_hash, meta.env));
        }
    }
    Err(Error::input(format!("no checkpoint in {}", dir.display())))
}

fn eval(a: EvalArgs) -> Result<()> {
    let horizons: Vec<usize> = parse_list(&a.horizons)?;
    let out = output_path(a.common.out.as_deref(), &a.run.to_string_lossy());
    let r = ResolvedConfig::new("eval", 0, out.clone())
        .section(
            "eval",
            &json!({"run": a.run, "bench": a.bench, "max_samples": a.max_samples, "horizons": horizons, "paired_with": a.paired_with}),
        )
        .finish(None);
    if a.common.dry_run {
        dry_run(&r);
        return Ok(());
    }
    let b = load_benchmark(&a.bench)?;
    let score = |dir: &Path| -> Result<(MetricsReport, String)> {
        let (model, hash, env) = load_run(dir)?;
        if env != b.env.name() {
            return Err(Error::validation(format!(
                "checkpoint was trained on {env} but the benchmark is {}",
                b.env.name()
            )));
        }
        Ok((counterfactual_eval(&model, &b, &horizons, a.max_samples)?, hash))
    };
    let (ours, hash) = score(&a.run)?;
    std::fs::create_dir_all(&out)?;
    let mut metrics = json!({"config_hash": hash, "eval_config_hash": r.config_hash, "report": ours});
    let mut text = report_table(&a.run.file_name().map_or("model".into(), |s| s.to_string_lossy().to_string()), &ours);
    if let Some(base_dir) = &a.paired_with {
        let (base, base_hash) = score(base_dir)?;
        let label = "paired";
        text.push('\n');
        text.push_str(&paired_table(label, &base, &ours));
        metrics["baseline"] = json!({"config_hash": base_hash, "report": base});
        metrics["delta"] = json!({
            "cf_h1": ours.cf.h1 - base.cf.h1,
            "cf_mrr": ours.cf.mrr - base.cf.mrr,
            "h1": ours.factual.iter().map(|(h, m)| (h.to_string(), json!(m.h1 - base.factual.get(h).map_or(0.0, |b| b.h1)))).collect::<serde_json::Map<_, _>>(),
        });
    }
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    std::fs::write(out.join("metrics.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let default = a.run.as_ref().map_or("analysis".to_string(), |r| r.join("analysis").to_string_lossy().to_string());
    let out = output_path(a.common.out.as_deref(), &default);
    let figures = plot::writer(a.csv_only);
    if a.identifiability {
        let mut cfg = with_file(&IdentifiabilityConfig::default(), a.common.config.as_deref(), "identifiability")?;
        cfg.dim = a.d;
        cfg.edges = a.edges;
        cfg.samples = a.samples;
        cfg.seeds = (0..a.seeds as u64).collect();
        cfg.alignment = !a.no_align;
        cfg.threshold_ratio = a.threshold;
        cfg.threshold_floor = a.floor;
        let r = ResolvedConfig::new("analyze", 0, out.clone()).section("identifiability", &cfg).finish(None);
        if a.common.dry_run {
            dry_run(&r);
            return Ok(());
        }
        let rep = identifiability_test(&cfg)?;
        std::fs::create_dir_all(&out)?;
        for run in &rep.runs {
            figures.heatmap_pair(&out, &format!("identifiability_seed{}", run.seed), &run.learned, &run.planted)?;
            println!("seed {}: SHD {}", run.seed, run.shd);
        }
        println!("mean SHD {:.3} over {} seeds (alignment {})", rep.mean_shd, rep.runs.len(), if cfg.alignment { "on" } else { "off" });
        std::fs::write(out.join("identifiability.json"), serde_json::to_string_pretty(&rep)?)?;
        return Ok(());
    }
    let adj_path = match (&a.adjacency, &a.run) {
        (Some(p), _) => p.clone(),
        (None, Some(r)) => r.join("adjacency.csv"),
        (None, None) => return Err(Error::config("analyze needs --run, --adjacency or --identifiability")),
    };
    let env = match (&a.env, &a.run) {
        (Some(name), _) => EnvConfig::by_name(name)?,
        (None, Some(r)) => {
            let text = std::fs::read_to_string(r.join("config.json"))
                .map_err(|e| Error::input(format!("cannot read run config: {e}")))?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            serde_json::from_value(v["dataset"]["env"].clone())
                .map_err(|e| Error::format(format!("run config env: {e}")))?
        }
        (None, None) => return Err(Error::config("--env is required without --run")),
    };
    let r = ResolvedConfig::new("analyze", a.ref_seed, out.clone())
        .section("analyze", &json!({"adjacency": adj_path, "env": env, "data": a.data, "ref_seed": a.ref_seed, "k": a.k, "threshold": a.threshold, "floor": a.floor, "self_compare": a.self_compare}))
        .finish(None);
    if a.common.dry_run {
        dry_run(&r);
        return Ok(());
    }
    let text = std::fs::read_to_string(&adj_path)
        .map_err(|e| Error::input(format!("missing adjacency {}: {e}", adj_path.display())))?;
    let learned = parse_matrix_csv(&text)?;
    let e = env.build()?;
    let s_star = match &a.data {
        Some(p) => Dataset::load(p)?.mean_state(),
        None => e.initial_state(a.ref_seed),
    };
    let mut template = jacobian_template(e.as_ref(), &s_star, e.sim_dt())?;
    if a.self_compare {
        template.a_gt = learned.t().mapv(f64::abs);
    }
    let d = structure_recovery(&learned, &template, a.k, a.threshold, a.floor)?;
    std::fs::create_dir_all(&out)?;
    figures.heatmap_pair(&out, "structure", &d.learned, &d.reference)?;
    std::fs::write(out.join("structure.json"), serde_json::to_string_pretty(&d)?)?;
    println!(
        "rank correlation {:.4}, top-{} overlap {:.4}{}",
        d.rank_correlation,
        d.top_k,
        d.top_k_overlap,
        if d.misaligned { " (slot map looks misaligned)" } else { "" }
    );
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let dataset = Dataset::load(&a.data)?;
    let mut base = TrainConfig::new(Family::Gnn, Objective::Contrastive, true);
    if a.desk {
        base.apply_desk_preset(&dataset.meta.env)?;
    }
    let mut base = with_file(&base, a.common.config.as_deref(), "train")?;
    base.seed = a.seed;
    let mut variants = ablation_variants(&base);
    if let Some(only) = &a.only {
        let keep: Vec<&str> = only.split(',').map(str::trim).collect();
        variants.retain(|v| keep.contains(&v.name.as_str()));
    }
    let out = output_path(a.common.out.as_deref(), "ablation");
    let r = ResolvedConfig::new("ablate", a.seed, out.clone())
        .section("train", &base)
        .section("variants", &variants.iter().map(|v| v.name.clone()).collect::<Vec<_>>())
        .finish(Some(base.hash()));
    if a.common.dry_run {
        dry_run(&r);
        return Ok(());
    }
    let b = load_benchmark(&a.bench)?;
    let rows = run_ablation_grid(&base, &variants, &dataset, &b, a.max_samples)?;
    std::fs::create_dir_all(&out)?;
    r.write(&out.join("resolved_config.json"))?;
    std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    let table = ablation_table(&rows);
    std::fs::write(out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}
