use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use clickseg::evaluation::{evaluate, EvalProtocol, ModelSegmenter};
use clickseg::io::{load_checkpoint, read_scene, write_scene, LabeledScene};
use clickseg::losses::SupervisionTargets;
use clickseg::model::{ModelConfig, ModelParams};
use clickseg::pipeline::{segment, PreparedScene};
use clickseg::sampling::{
    sample_click_candidates, subset_clicks, ClickSet, SamplerConfig, Strategy, SubsetSize,
};
use clickseg::service::{AppState, ModelRegistry, ServiceConfig, MODEL_DIR_ENV};
use clickseg::synthdata::{generate_scene, generate_scenes, SceneSpec};
use clickseg::training::{
    grad_check, precache_clicks, train, ClickCache, GradCheckOptions, LrSchedule, Optimizer,
    SceneAugmentation, TrainConfig, TrainingExample,
};

/// Interactive multi-object point-cloud segmentation from clicks.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic scenes as JSON files.
    GenScenes(GenScenes),
    /// Sample click candidates for every scene in a directory.
    CacheClicks(CacheClicks),
    /// Train a model on a scene directory.
    Train(Train),
    /// Run the simulated-click protocol and write metrics.
    Eval(Eval),
    /// Segment one scene from a click file.
    Infer(Infer),
    /// Serve the interactive HTTP API.
    Serve(Serve),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(Gradcheck),
}

#[derive(Args)]
struct GenScenes {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Seed of the first scene; scene i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minimum objects per scene.
    #[arg(long, default_value_t = 3)]
    instances_min: usize,
    /// Maximum objects per scene.
    #[arg(long, default_value_t = 6)]
    instances_max: usize,
    /// Minimum points per object.
    #[arg(long, default_value_t = 120)]
    points_min: usize,
    /// Maximum points per object.
    #[arg(long, default_value_t = 240)]
    points_max: usize,
    /// Floor points (0 disables the floor).
    #[arg(long, default_value_t = 400)]
    floor_points: usize,
    /// Wall points (0 disables the wall).
    #[arg(long, default_value_t = 0)]
    wall_points: usize,
    /// Minimum center spacing as a fraction of summed radii.
    #[arg(long, default_value_t = 0.9)]
    spacing: f64,
    /// Gaussian noise relative to the scene extent.
    #[arg(long, default_value_t = 0.003)]
    noise: f64,
}

#[derive(Args)]
struct CacheClicks {
    /// Directory of scene files.
    #[arg(long)]
    scenes: PathBuf,
    /// Output cache file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// fps, random or voxel.
    #[arg(long, default_value = "fps")]
    strategy: Strategy,
    #[arg(long, default_value_t = 1)]
    per_instance_min: usize,
    #[arg(long, default_value_t = 15)]
    per_instance_max: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Small,
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Args)]
struct Train {
    /// Directory of labeled scene files.
    #[arg(long)]
    scenes: PathBuf,
    /// Click cache; sampled on the fly when omitted.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Output directory for checkpoints and the loss curve.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerKind,
    /// Momentum for sgd.
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Architecture preset.
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// JSON model configuration; overrides --preset.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Write a checkpoint every N steps (0 disables).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Clip the global gradient norm (0 disables).
    #[arg(long, default_value_t = 1.0)]
    clip_norm: f64,
    /// Randomly rotate, mirror and stretch each training scene.
    #[arg(long)]
    augment: bool,
    /// Decay the learning rate along a half cosine down to this fraction of --lr.
    #[arg(long)]
    cosine_floor: Option<f64>,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct Eval {
    /// Checkpoint to evaluate.
    #[arg(long)]
    model: PathBuf,
    /// Directory of labeled scene files.
    #[arg(long)]
    scenes: PathBuf,
    /// Output directory for metrics.json, metrics.txt and plot.csv.
    #[arg(long)]
    out: PathBuf,
    /// Clicks-per-instance schedule.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,10")]
    schedule: Vec<usize>,
    /// NoC IoU targets.
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.85,0.9")]
    noc: Vec<f64>,
    /// Maximum clicks per scene for NoC.
    #[arg(long, default_value_t = 20)]
    cap: usize,
    /// Evaluate only the first N scenes.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct Infer {
    #[arg(long)]
    model: PathBuf,
    /// Scene file (.json or ASCII .ply).
    #[arg(long)]
    scene: PathBuf,
    /// Click file: {"clicks": [{"x","y","z","group"}]}.
    #[arg(long)]
    clicks: PathBuf,
    /// Output result file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Serve {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Directory of *.ckpt files.
    #[arg(long, env = MODEL_DIR_ENV)]
    model_dir: PathBuf,
    /// Directory of scenes addressable by id.
    #[arg(long)]
    scene_dir: Option<PathBuf>,
    /// Directory for per-session click logs.
    #[arg(long)]
    log_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Decoder stages of the tiny model.
    #[arg(long, default_value_t = 2)]
    stages: usize,
    /// Clicks (one per instance).
    #[arg(long, default_value_t = 4)]
    clicks: usize,
    /// Points per instance.
    #[arg(long, default_value_t = 14)]
    points_per_instance: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json" || e == "ply"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no scene files in {}", dir.display());
    }
    Ok(files)
}

fn load_scenes(dir: &Path) -> Result<Vec<LabeledScene>> {
    scene_files(dir)?
        .iter()
        .map(|p| read_scene(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn model_config(preset: Preset, file: Option<&Path>) -> Result<ModelConfig> {
    if let Some(f) = file {
        return Ok(serde_json::from_str(&fs::read_to_string(f)?)?);
    }
    Ok(match preset {
        Preset::Default => ModelConfig::default(),
        Preset::Small => ModelConfig::small(),
        Preset::Tiny => ModelConfig {
            num_classes: 8,
            num_prototypes: 8,
            ..ModelConfig::tiny(2)
        },
    })
}

fn gen_scenes(a: GenScenes) -> Result<()> {
    let spec = SceneSpec {
        instances: (a.instances_min, a.instances_max),
        points_per_instance: (a.points_min, a.points_max),
        floor: a.floor_points > 0,
        floor_points: a.floor_points,
        wall: a.wall_points > 0,
        wall_points: a.wall_points,
        spacing: a.spacing,
        noise: a.noise,
        seed: a.seed,
        ..Default::default()
    };
    fs::create_dir_all(&a.out)?;
    for (i, scene) in generate_scenes(&spec, a.count)?.iter().enumerate() {
        write_scene(
            &a.out.join(format!("scene-{:05}.json", a.seed + i as u64)),
            scene,
        )?;
    }
    println!("wrote {} scenes to {}", a.count, a.out.display());
    Ok(())
}

fn cache_clicks(a: CacheClicks) -> Result<()> {
    let scenes = load_scenes(&a.scenes)?;
    let cfg = SamplerConfig {
        strategy: a.strategy,
        per_instance_min: a.per_instance_min,
        per_instance_max: a.per_instance_max,
        seed: a.seed,
        ..Default::default()
    };
    let cache = precache_clicks(&scenes, &cfg)?;
    fs::write(&a.out, cache.to_json()?)?;
    println!(
        "cached clicks for {} scenes in {}",
        scenes.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: Train) -> Result<()> {
    let scenes = load_scenes(&a.scenes)?;
    let sampler = SamplerConfig {
        seed: a.seed,
        ..Default::default()
    };
    let cache = match &a.cache {
        Some(p) => ClickCache::from_json(&fs::read_to_string(p)?)?,
        None => precache_clicks(&scenes, &sampler)?,
    };
    let examples: Vec<TrainingExample> = scenes
        .iter()
        .map(|s| TrainingExample::new(s, &cache))
        .collect::<clickseg::Result<_>>()?;
    let config = ModelConfig {
        init_seed: a.seed,
        ..model_config(a.preset, a.model_config.as_deref())?
    };
    let model = ModelParams::new(config)?;
    log::info!(
        "model with {} parameters, {} scenes",
        model.num_parameters(),
        scenes.len()
    );
    let optimizer = match a.optimizer {
        OptimizerKind::Adam => Optimizer::default(),
        OptimizerKind::Sgd => Optimizer::Sgd {
            momentum: a.momentum,
        },
    };
    let cfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        optimizer,
        sampler,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        out_dir: Some(a.out.clone()),
        log_every: a.log_every,
        clip_norm: a.clip_norm,
        scene_augmentation: a.augment.then(SceneAugmentation::default),
        lr_schedule: a
            .cosine_floor
            .map_or(LrSchedule::Constant, |floor| LrSchedule::Cosine { floor }),
        ..Default::default()
    };
    let out = train(model, &examples, &cfg)?;
    println!(
        "trained {} steps in {:.1}s; final loss {:.4}, best {:.4} at step {}; wrote {}",
        a.steps,
        out.seconds,
        out.curve.last().map_or(f64::NAN, |r| r.total),
        out.best_loss,
        out.best_step,
        a.out.join("final.ckpt").display()
    );
    Ok(())
}

fn eval_cmd(a: Eval) -> Result<()> {
    let model =
        load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let mut scenes = load_scenes(&a.scenes)?;
    if let Some(n) = a.limit {
        scenes.truncate(n);
    }
    let protocol = EvalProtocol {
        schedule: a.schedule,
        noc_targets: a.noc,
        cap: a.cap,
        ..Default::default()
    };
    let report = evaluate(&ModelSegmenter::new(&model), &scenes, &protocol)?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("metrics.json"), &report)?;
    fs::write(a.out.join("metrics.txt"), report.to_table())?;
    fs::write(a.out.join("plot.csv"), report.plot_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn infer_cmd(a: Infer) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let scene = read_scene(&a.scene)?;
    let clicks = ClickSet::from_json(&fs::read_to_string(&a.clicks)?)?;
    let result = segment(&scene.cloud, &clicks, &model)?;
    fs::write(&a.out, result.to_json()?)?;
    println!(
        "segmented {} points into {} groups; wrote {}",
        result.num_points(),
        result.groups.len(),
        a.out.display()
    );
    Ok(())
}

fn serve_cmd(a: Serve) -> Result<()> {
    let registry = ModelRegistry::load_dir(&a.model_dir)
        .with_context(|| format!("loading models from {}", a.model_dir.display()))?;
    if registry.list().is_empty() {
        bail!("no *.ckpt files in {}", a.model_dir.display());
    }
    if let Some(d) = &a.log_dir {
        fs::create_dir_all(d)?;
    }
    let state = Arc::new(AppState::new(
        registry,
        ServiceConfig {
            scene_dir: a.scene_dir,
            log_dir: a.log_dir,
        },
    ));
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .context("bad host or port")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(clickseg::service::serve(addr, state))?;
    Ok(())
}

fn gradcheck_cmd(a: Gradcheck) -> Result<()> {
    let scene = generate_scene(&SceneSpec {
        instances: (a.clicks, a.clicks),
        points_per_instance: (a.points_per_instance, a.points_per_instance),
        floor_points: 8,
        seed: a.seed,
        ..Default::default()
    })?;
    let (inst, cls) = scene.labels()?;
    let model = ModelParams::new(ModelConfig {
        num_classes: 8,
        num_prototypes: 8,
        init_seed: a.seed,
        ..ModelConfig::tiny(a.stages)
    })?;
    let cands = sample_click_candidates(&scene.cloud, inst, &SamplerConfig::default())?;
    let clicks = subset_clicks(&cands, SubsetSize::Fixed(1), a.seed);
    let targets = SupervisionTargets::from_clicks(&clicks, inst, cls)?;
    let opts = GradCheckOptions {
        step: a.step,
        tolerance: a.tolerance,
        ..Default::default()
    };
    let report = grad_check(
        &model,
        &PreparedScene::new(&scene.cloud),
        &clicks,
        &targets,
        &Default::default(),
        &opts,
    )?;
    println!(
        "N = {}, K = {}, loss = {:.6}",
        scene.len(),
        clicks.len(),
        report.loss
    );
    for g in &report.groups {
        println!(
            "{:<24} {:>10.3e}  {:>6} coords  {}",
            g.group,
            g.max_rel_error,
            g.coords,
            if g.passed { "ok" } else { "FAIL" }
        );
    }
    if !report.passed {
        bail!("gradient check failed at tolerance {}", a.tolerance);
    }
    println!("all groups within {}", a.tolerance);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenScenes(a) => gen_scenes(a),
        Command::CacheClicks(a) => cache_clicks(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}
