//! Click pre-caching, the optimization loop and the gradient checker.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::StageOutput;
use crate::encoder::{encode_queries, encode_queries_backward};
use crate::error::{Error, Result};
use crate::io::{save_checkpoint, LabeledScene};
use crate::losses::{
    total_loss, total_loss_with_grads, LossBreakdown, LossWeights, SupervisionTargets,
};
use crate::model::ModelParams;
use crate::numerics::{finite_diff_grad, ParamStore};
use crate::pipeline::PreparedScene;
use crate::sampling::{sample_click_candidates, subset_clicks_with, ClickSet, SamplerConfig};

/// Candidate clicks for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub scene_id: String,
    pub seed: u64,
    pub candidates: ClickSet,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClickCache {
    pub entries: Vec<CacheEntry>,
}

impl ClickCache {
    pub fn get(&self, scene_id: &str) -> Result<&CacheEntry> {
        self.entries
            .iter()
            .find(|e| e.scene_id == scene_id)
            .ok_or_else(|| Error::NotFound(format!("no cached clicks for scene {scene_id:?}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Samples click candidates for every scene. The seed for scene `i` is
/// `cfg.seed + i`, so the cache depends only on the scene list and the seed.
pub fn precache_clicks(scenes: &[LabeledScene], cfg: &SamplerConfig) -> Result<ClickCache> {
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let (instances, _) = scene.labels()?;
        let seed = cfg.seed.wrapping_add(i as u64);
        let candidates = sample_click_candidates(
            &scene.cloud,
            instances,
            &SamplerConfig {
                seed,
                ..cfg.clone()
            },
        )?;
        entries.push(CacheEntry {
            scene_id: scene.cloud.id.clone(),
            seed,
            candidates,
        });
    }
    Ok(ClickCache { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub sampler: SamplerConfig,
    pub loss: LossWeights,
    pub seed: u64,
    /// Write `step-XXXXXX.ckpt` every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
    /// Log a progress line every this many steps (0 disables).
    pub log_every: usize,
    /// Clip the global gradient norm (0 disables).
    pub clip_norm: f64,
    pub lr_schedule: LrSchedule,
    /// Perturb each step's scene geometry (off when `None`).
    pub scene_augmentation: Option<SceneAugmentation>,
}

/// Random geometric perturbation of a training scene. Point order is kept, so
/// cached candidate clicks still index the right points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneAugmentation {
    /// Rotation about z drawn uniformly from `[0, rotation)`.
    pub rotation: f64,
    /// Mirror the x axis with probability 1/2.
    pub mirror: bool,
    /// Per-axis scale drawn uniformly from `[1 - stretch, 1 + stretch]`.
    pub stretch: f64,
}

impl Default for SceneAugmentation {
    fn default() -> Self {
        Self {
            rotation: std::f64::consts::TAU,
            mirror: true,
            stretch: 0.1,
        }
    }
}

impl SceneAugmentation {
    pub fn apply(&self, scene: &PreparedScene, rng: &mut ChaCha8Rng) -> PreparedScene {
        let angle = if self.rotation > 0.0 {
            rng.gen_range(0.0..self.rotation)
        } else {
            0.0
        };
        let (sin, cos) = angle.sin_cos();
        let flip = if self.mirror && rng.gen_bool(0.5) {
            -1.0
        } else {
            1.0
        };
        let k: [f64; 3] = std::array::from_fn(|_| {
            if self.stretch > 0.0 {
                rng.gen_range(1.0 - self.stretch..=1.0 + self.stretch)
            } else {
                1.0
            }
        });
        let cloud = scene.normalized.map_positions(|p| {
            let x = flip * p[0];
            [
                k[0] * (cos * x - sin * p[1]),
                k[1] * (sin * x + cos * p[1]),
                k[2] * p[2],
            ]
        });
        PreparedScene::new(&cloud)
    }
}

/// Learning-rate schedule over the training run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` at step 0 down to `lr * floor` at the last step.
    Cosine { floor: f64 },
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { floor } => {
                let t = if steps > 1 {
                    step as f64 / (steps - 1) as f64
                } else {
                    0.0
                };
                let c = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                base * (floor + (1.0 - floor) * c)
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-3,
            optimizer: Optimizer::default(),
            sampler: SamplerConfig::default(),
            loss: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            out_dir: None,
            log_every: 50,
            clip_norm: 0.0,
            lr_schedule: LrSchedule::Constant,
            scene_augmentation: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidInput("steps must be ≥ 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidInput(
                "learning rate must be non-negative".into(),
            ));
        }
        if let Some(a) = &self.scene_augmentation {
            if !(a.rotation >= 0.0 && a.rotation.is_finite()) || !(0.0..1.0).contains(&a.stretch) {
                return Err(Error::InvalidInput(
                    "scene augmentation needs rotation ≥ 0 and stretch in [0, 1)".into(),
                ));
            }
        }
        if let LrSchedule::Cosine { floor } = self.lr_schedule {
            if !(0.0..=1.0).contains(&floor) {
                return Err(Error::InvalidInput(
                    "cosine floor must lie in [0, 1]".into(),
                ));
            }
        }
        self.sampler.validate()
    }
}

/// Optimizer state with the same layout as the parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    first: ParamStore,
    second: ParamStore,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, params: &ParamStore) -> Self {
        Self {
            kind,
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }

    pub fn apply(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            match self.kind {
                Optimizer::Sgd { momentum } => {
                    let m = self.first.get_mut(id).data_mut();
                    let p = params.get_mut(id).data_mut();
                    for ((pv, mv), gv) in p.iter_mut().zip(m.iter_mut()).zip(g) {
                        *mv = momentum * *mv + gv;
                        *pv -= lr * *mv;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let m = self.first.get_mut(id).data_mut();
                    let v = self.second.get_mut(id).data_mut();
                    let p = params.get_mut(id).data_mut();
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Loss of the full model on one scene and click set.
pub fn compute_loss(
    model: &ModelParams,
    prepared: &PreparedScene,
    clicks: &ClickSet,
    targets: &SupervisionTargets,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<StageOutput>)> {
    let snapped = prepared.snap_clicks(clicks)?;
    let feats = model.encoder.encode(&model.store, &prepared.normalized)?;
    let queries = encode_queries(&snapped, &prepared.index, &feats, model.config.query_knn)?;
    let outputs = model.decoder.decode(&model.store, &feats, &queries)?;
    let loss = total_loss(&outputs, targets, weights)?;
    Ok((loss, outputs))
}

/// Loss and analytic gradients of every parameter.
pub fn loss_and_grads(
    model: &ModelParams,
    prepared: &PreparedScene,
    clicks: &ClickSet,
    targets: &SupervisionTargets,
    weights: &LossWeights,
) -> Result<(LossBreakdown, ParamStore)> {
    let store = &model.store;
    let snapped = prepared.snap_clicks(clicks)?;
    let (feats, ecache) = model.encoder.encode_cached(store, &prepared.normalized)?;
    let queries = encode_queries(&snapped, &prepared.index, &feats, model.config.query_knn)?;
    let (outputs, dcache) = model.decoder.decode_cached(store, &feats, &queries)?;
    let lg = total_loss_with_grads(&outputs, targets, weights)?;
    let mut grads = store.zeros_like();
    let dg = model.decoder.backward(
        store,
        &feats,
        &outputs,
        &dcache,
        &lg.d_masks,
        &lg.d_classes,
        &mut grads,
    );
    let mut d_full = dg.full;
    encode_queries_backward(&queries, &dg.queries, &mut d_full);
    model
        .encoder
        .backward(store, &feats, &ecache, &d_full, &dg.scales, &mut grads);
    Ok((lg.breakdown, grads))
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    pub ce: f64,
}

pub fn loss_curve_csv(curve: &[LossRecord]) -> String {
    let mut s = String::from("step,total,bce,dice,ce\n");
    for r in curve {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.total, r.bce, r.dice, r.ce
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub curve: Vec<LossRecord>,
    pub best_step: usize,
    pub best_loss: f64,
    pub seconds: f64,
}

/// A training scene with its normalization, index, labels and candidates.
pub struct TrainingExample {
    pub prepared: PreparedScene,
    pub instance_ids: Vec<i64>,
    pub class_ids: Vec<i64>,
    pub candidates: ClickSet,
}

impl TrainingExample {
    pub fn new(scene: &LabeledScene, cache: &ClickCache) -> Result<Self> {
        let (inst, cls) = scene.labels()?;
        let entry = cache.get(&scene.cloud.id)?;
        Ok(Self {
            prepared: PreparedScene::new(&scene.cloud),
            instance_ids: inst.to_vec(),
            class_ids: cls.to_vec(),
            candidates: entry.candidates.clone(),
        })
    }
}

/// Picks a per-step click subset: the scene total is drawn from the
/// configured range and clamped to `[instances, candidates]`; every instance
/// keeps at least one click and the rest are spread at random.
pub fn draw_training_clicks(
    candidates: &ClickSet,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> ClickSet {
    let mut avail: BTreeMap<i64, usize> = BTreeMap::new();
    for c in &candidates.clicks {
        *avail.entry(c.group).or_default() += 1;
    }
    let total_avail: usize = avail.values().sum();
    let target = rng
        .gen_range(cfg.clicks_per_scene_min..=cfg.clicks_per_scene_max)
        .clamp(avail.len(), total_avail);
    let mut alloc: BTreeMap<i64, usize> = avail.keys().map(|&g| (g, 1)).collect();
    let mut remaining = target - avail.len();
    while remaining > 0 {
        let open: Vec<i64> = avail
            .iter()
            .filter(|(g, &a)| alloc[*g] < a)
            .map(|(&g, _)| g)
            .collect();
        let g = open[rng.gen_range(0..open.len())];
        *alloc.get_mut(&g).expect("group") += 1;
        remaining -= 1;
    }
    subset_clicks_with(candidates, |g, _, _| alloc[&g], rng)
}

/// Trains on `examples`, one scene per step.
pub fn train(
    mut model: ModelParams,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidInput("no training scenes".into()));
    }
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer, &model.store);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut best = (0usize, f64::INFINITY);
    let mut best_model: Option<ParamStore> = None;
    for step in 0..cfg.steps {
        let ex = &examples[rng.gen_range(0..examples.len())];
        let clicks = draw_training_clicks(&ex.candidates, &cfg.sampler, &mut rng);
        let targets = SupervisionTargets::from_clicks(&clicks, &ex.instance_ids, &ex.class_ids)?;
        let augmented = cfg
            .scene_augmentation
            .map(|a| a.apply(&ex.prepared, &mut rng));
        let prepared = augmented.as_ref().unwrap_or(&ex.prepared);
        let (loss, mut grads) = loss_and_grads(&model, prepared, &clicks, &targets, &cfg.loss)?;
        if !loss.total.is_finite() || !grads.all_finite() {
            let dump = serde_json::json!({
                "step": step,
                "scene": ex.prepared.normalized.id,
                "loss": loss,
                "clicks": clicks,
                "params_finite": model.store.all_finite(),
                "grads_finite": grads.all_finite(),
            });
            log::error!("non-finite loss at step {step}: {dump}");
            if let Some(dir) = &cfg.out_dir {
                fs::write(dir.join("nonfinite-dump.json"), dump.to_string())?;
            }
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        if cfg.clip_norm > 0.0 {
            let norm = grads
                .iter()
                .flat_map(|(_, t)| t.data().iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                for (_, t) in grads.iter_mut() {
                    t.scale(s);
                }
            }
        }
        opt.apply(
            &mut model.store,
            &grads,
            cfg.lr_schedule.lr_at(cfg.lr, step, cfg.steps),
        );
        curve.push(LossRecord {
            step,
            total: loss.total,
            bce: loss.bce,
            dice: loss.dice,
            ce: loss.ce,
        });
        if loss.total < best.1 {
            best = (step, loss.total);
            if cfg.out_dir.is_some() {
                best_model = Some(model.store.clone());
            }
        }
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            let window = &curve[curve.len().saturating_sub(cfg.log_every)..];
            let mean = window.iter().map(|r| r.total).sum::<f64>() / window.len() as f64;
            log::info!(
                "step {:>6}  loss {:.4}  (bce {:.4} dice {:.4} ce {:.4})  mean {:.4}  {:.1}s",
                step + 1,
                loss.total,
                loss.bce,
                loss.dice,
                loss.ce,
                mean,
                start.elapsed().as_secs_f64()
            );
        }
        if let (Some(dir), true) = (
            &cfg.out_dir,
            cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0,
        ) {
            let mut snap = model.clone();
            snap.round_to_f32();
            save_checkpoint(&snap, &dir.join(format!("step-{:06}.ckpt", step + 1)))?;
        }
    }
    model.round_to_f32();
    if let Some(dir) = &cfg.out_dir {
        save_checkpoint(&model, &dir.join("final.ckpt"))?;
        if let Some(store) = best_model {
            let mut b = model.clone();
            b.store = store;
            b.round_to_f32();
            save_checkpoint(&b, &dir.join("best.ckpt"))?;
        }
        write_curve(&dir.join("loss.csv"), &curve)?;
    }
    Ok(TrainOutcome {
        model,
        curve,
        best_step: best.0,
        best_loss: best.1,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn write_curve(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(loss_curve_csv(curve).as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per tensor; `0` checks all of them.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            coords_per_tensor: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
    pub passed: bool,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn group(&self, name: &str) -> Option<&GroupError> {
        self.groups.iter().find(|g| g.group == name)
    }
}

/// Compares analytic gradients with central differences, grouped by
/// parameter block. The group error is `max|a − n| / max(max|n|, 1e-8)`.
pub fn grad_check(
    model: &ModelParams,
    scene: &PreparedScene,
    clicks: &ClickSet,
    targets: &SupervisionTargets,
    weights: &LossWeights,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    grad_check_with(model, scene, clicks, targets, weights, opts, |_| {})
}

/// `grad_check` with a hook that may alter the analytic gradients before
/// comparison.
pub fn grad_check_with(
    model: &ModelParams,
    scene: &PreparedScene,
    clicks: &ClickSet,
    targets: &SupervisionTargets,
    weights: &LossWeights,
    opts: &GradCheckOptions,
    alter: impl FnOnce(&mut ParamStore),
) -> Result<GradCheckReport> {
    let (loss, mut grads) = loss_and_grads(model, scene, clicks, targets, weights)?;
    alter(&mut grads);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    // (analytic, numeric) pairs per group
    let mut pairs: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut probe = model.clone();
    for id in model.store.ids() {
        let name = model.store.name(id).to_string();
        let t = model.store.get(id);
        let n = t.data().len();
        let coords: Vec<usize> = if opts.coords_per_tensor == 0 || opts.coords_per_tensor >= n {
            (0..n).collect()
        } else {
            let mut c = rand::seq::index::sample(&mut rng, n, opts.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let theta: Vec<f64> = coords.iter().map(|&i| t.data()[i]).collect();
        let numeric = finite_diff_grad(
            |v| {
                let data = probe.store.get_mut(id).data_mut();
                for (&i, &x) in coords.iter().zip(v) {
                    data[i] = x;
                }
                compute_loss(&probe, scene, clicks, targets, weights)
                    .map(|(l, _)| l.total)
                    .unwrap_or(f64::NAN)
            },
            &theta,
            opts.step,
        )?;
        *probe.store.get_mut(id) = t.clone();
        let analytic: Vec<f64> = coords.iter().map(|&i| grads.get(id).data()[i]).collect();
        let entry = pairs.entry(ModelParams::group_of(&name)).or_default();
        entry.0.extend(analytic);
        entry.1.extend(numeric);
    }
    let groups: Vec<GroupError> = pairs
        .into_iter()
        .map(|(group, (a, n))| {
            let scale = n.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
            let err = a
                .iter()
                .zip(&n)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
                / scale;
            GroupError {
                group,
                max_rel_error: err,
                coords: a.len(),
                passed: err <= opts.tolerance,
            }
        })
        .collect();
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradCheckReport {
        groups,
        tolerance: opts.tolerance,
        passed,
        loss: loss.total,
    })
}
