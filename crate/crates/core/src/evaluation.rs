//! IoU-based metrics, mAP and the simulated-user click protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::encoder::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::geometry::{sq_dist, SpatialIndex};
use crate::io::LabeledScene;
use crate::model::ModelParams;
use crate::pipeline::{encode_prepared, segment_with_features, PreparedScene, SegmentationResult};
use crate::sampling::{instance_members, Click, ClickSet};

/// `|pred ∧ gt| / |pred ∨ gt|`, with two empty masks scoring 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "mask lengths {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// IoU and binary accuracy of one ground-truth instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub instance: i64,
    pub class: i64,
    pub iou: f64,
    pub accuracy: f64,
}

/// Scores every ground-truth instance against the prediction group with the
/// same id (the group of the clicks generated from that instance).
pub fn instance_scores(
    result: &SegmentationResult,
    instance_ids: &[i64],
    class_ids: &[i64],
) -> Result<Vec<InstanceScore>> {
    if result.num_points() != instance_ids.len() || class_ids.len() != instance_ids.len() {
        return Err(Error::Shape(
            "result and ground truth differ in point count".into(),
        ));
    }
    let n = instance_ids.len() as f64;
    let mut out = Vec::new();
    for (inst, members) in instance_members(instance_ids) {
        let gt: Vec<bool> = instance_ids.iter().map(|&i| i == inst).collect();
        let pred = result.mask_of(inst);
        let correct = gt.iter().zip(&pred).filter(|(a, b)| a == b).count();
        out.push(InstanceScore {
            instance: inst,
            class: class_ids[members[0]],
            iou: iou(&pred, &gt)?,
            accuracy: correct as f64 / n,
        });
    }
    Ok(out)
}

/// Mean over classes of the mean score of that class's instances.
pub fn class_mean(scores: &[InstanceScore], value: impl Fn(&InstanceScore) -> f64) -> f64 {
    let mut per: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for s in scores {
        let e = per.entry(s.class).or_default();
        e.0 += value(s);
        e.1 += 1;
    }
    if per.is_empty() {
        return 0.0;
    }
    per.values().map(|(s, c)| s / *c as f64).sum::<f64>() / per.len() as f64
}

/// Class-averaged instance IoU of one result.
pub fn miou(result: &SegmentationResult, instance_ids: &[i64], class_ids: &[i64]) -> Result<f64> {
    Ok(class_mean(
        &instance_scores(result, instance_ids, class_ids)?,
        |s| s.iou,
    ))
}

/// A scored instance prediction for mAP.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scene: usize,
    pub mask: Vec<bool>,
    pub class: i64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub scene: usize,
    pub mask: Vec<bool>,
    pub class: i64,
}

/// Area under the precision–recall curve with all-point interpolation.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    // make precision monotone from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// Mean over ground-truth classes of per-class AP at the given IoU threshold.
/// Predictions are ranked by confidence (stable) and greedily matched to the
/// unmatched same-class instance of their scene with the highest IoU.
pub fn map_at(predictions: &[Prediction], gts: &[GtInstance], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidInput(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let mut classes: Vec<i64> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &c in &classes {
        let gt_idx: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].class == c).collect();
        let mut preds: Vec<&Prediction> = predictions.iter().filter(|p| p.class == c).collect();
        preds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut matched = vec![false; gts.len()];
        let mut tp = Vec::with_capacity(preds.len());
        for p in preds {
            let mut best: Option<(usize, f64)> = None;
            for &g in &gt_idx {
                if matched[g] || gts[g].scene != p.scene {
                    continue;
                }
                let v = iou(&p.mask, &gts[g].mask)?;
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, v)) if v >= threshold => {
                    matched[g] = true;
                    tp.push(true);
                }
                _ => tp.push(false),
            }
        }
        total += average_precision(&tp, gt_idx.len());
    }
    Ok(total / classes.len() as f64)
}

/// Instance predictions of one result, one per click group.
pub fn predictions_of(result: &SegmentationResult, scene: usize) -> Vec<Prediction> {
    result
        .groups
        .iter()
        .enumerate()
        .map(|(gi, &g)| Prediction {
            scene,
            mask: result.mask_of(g),
            class: result.group_class[gi],
            confidence: result.query_confidence[gi],
        })
        .collect()
}

pub fn gt_instances(instance_ids: &[i64], class_ids: &[i64], scene: usize) -> Vec<GtInstance> {
    instance_members(instance_ids)
        .into_iter()
        .map(|(inst, members)| GtInstance {
            scene,
            mask: instance_ids.iter().map(|&i| i == inst).collect(),
            class: class_ids[members[0]],
        })
        .collect()
}

/// How the corrective click is placed inside the chosen instance's errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorrectiveRule {
    /// Erroneous point farthest from the instance's correctly labeled points.
    #[default]
    FarthestFromCorrect,
    /// Same rule restricted to the largest connected error component, where
    /// points closer than `radius` (normalized units) are connected.
    LargestComponent { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialClick {
    /// The instance point nearest its centroid.
    #[default]
    Center,
    /// The first corrective click against an empty prediction.
    Farthest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub schedule: Vec<usize>,
    pub noc_targets: Vec<f64>,
    pub cap: usize,
    pub corrective: CorrectiveRule,
    pub initial: InitialClick,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            schedule: vec![1, 3, 5, 7, 10],
            noc_targets: vec![0.80, 0.85, 0.90],
            cap: 20,
            corrective: CorrectiveRule::default(),
            initial: InitialClick::default(),
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty()
            || self.schedule[0] == 0
            || self.schedule.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::InvalidInput(
                "click schedule must be positive and strictly increasing".into(),
            ));
        }
        if self.cap < *self.schedule.last().expect("non-empty") {
            return Err(Error::InvalidInput(
                "click cap below the largest scheduled count".into(),
            ));
        }
        if self.noc_targets.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidInput("NoC targets must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Anything that maps a scene and clicks to a segmentation.
pub trait Segmenter {
    fn segment(&self, scene: &LabeledScene, clicks: &ClickSet) -> Result<SegmentationResult>;
}

/// The trained model, reusing encoder features while the scene is unchanged.
pub struct ModelSegmenter<'a> {
    model: &'a ModelParams,
    cache: Mutex<Option<(String, usize, PreparedScene, MultiScaleFeatures)>>,
}

impl<'a> ModelSegmenter<'a> {
    pub fn new(model: &'a ModelParams) -> Self {
        Self {
            model,
            cache: Mutex::new(None),
        }
    }
}

impl Segmenter for ModelSegmenter<'_> {
    fn segment(&self, scene: &LabeledScene, clicks: &ClickSet) -> Result<SegmentationResult> {
        let mut guard = self.cache.lock().expect("segmenter cache poisoned");
        let hit =
            matches!(&*guard, Some((id, n, _, _)) if *id == scene.cloud.id && *n == scene.len());
        if !hit {
            let prepared = PreparedScene::new(&scene.cloud);
            let feats = encode_prepared(self.model, &prepared)?;
            *guard = Some((scene.cloud.id.clone(), scene.len(), prepared, feats));
        }
        let (_, _, prepared, feats) = guard.as_ref().expect("cache filled");
        segment_with_features(self.model, prepared, feats, clicks)
    }
}

/// Labels each clicked instance exactly with its ground truth.
pub struct PerfectSegmenter;

impl Segmenter for PerfectSegmenter {
    fn segment(&self, scene: &LabeledScene, clicks: &ClickSet) -> Result<SegmentationResult> {
        let (inst, cls) = scene.labels()?;
        let groups = clicks.distinct_groups();
        let mut r = SegmentationResult::empty(scene.len());
        for j in 0..scene.len() {
            if groups.binary_search(&inst[j]).is_ok() {
                r.point_instance[j] = inst[j];
                r.point_class[j] = cls[j];
            }
        }
        r.group_class = groups
            .iter()
            .map(|g| inst.iter().position(|i| i == g).map_or(-1, |j| cls[j]))
            .collect();
        r.query_confidence = vec![1.0; groups.len()];
        r.groups = groups;
        Ok(r)
    }
}

/// Ignores the clicks and labels every point as background.
pub struct BackgroundSegmenter;

impl Segmenter for BackgroundSegmenter {
    fn segment(&self, scene: &LabeledScene, clicks: &ClickSet) -> Result<SegmentationResult> {
        if clicks.is_empty() {
            return Err(Error::NoClicks);
        }
        Ok(SegmentationResult::empty(scene.len()))
    }
}

/// Initial click for one instance: its point nearest the instance centroid
/// (ties go to the smaller index).
pub fn initial_click(scene: &LabeledScene, instance: i64) -> Result<Click> {
    let (inst, _) = scene.labels()?;
    let members: Vec<usize> = (0..inst.len()).filter(|&j| inst[j] == instance).collect();
    if members.is_empty() {
        return Err(Error::NotFound(format!("instance {instance}")));
    }
    let pos = scene.cloud.positions();
    let mut c = [0.0; 3];
    for &j in &members {
        for a in 0..3 {
            c[a] += pos[j][a];
        }
    }
    c.iter_mut().for_each(|v| *v /= members.len() as f64);
    let best = members
        .iter()
        .copied()
        .min_by(|&a, &b| {
            sq_dist(&pos[a], &c)
                .total_cmp(&sq_dist(&pos[b], &c))
                .then(a.cmp(&b))
        })
        .expect("non-empty");
    Ok(tagged_click(scene, best, instance))
}

fn tagged_click(scene: &LabeledScene, point: usize, instance: i64) -> Click {
    let mut c = Click::at_point(&scene.cloud, point, instance);
    c.source_instance = Some(instance);
    c
}

/// Outcome of the corrective-click rule.
#[derive(Debug, Clone, PartialEq)]
pub enum Correction {
    Click(Click),
    Done,
}

fn connected_largest(points: &[[f64; 3]], subset: &[usize], radius: f64) -> Vec<usize> {
    let n = subset.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let local: Vec<[f64; 3]> = subset.iter().map(|&j| points[j]).collect();
    let tree = SpatialIndex::new(&local);
    let r2 = radius * radius;
    let k = n.min(16);
    for i in 0..n {
        if let Ok(nn) = tree.knn_with_distances(&local[i], k) {
            for (j, d) in nn {
                if d <= r2 {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        comps.entry(r).or_default().push(subset[i]);
    }
    // largest component; ties go to the one holding the smallest index
    comps
        .into_values()
        .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
        .unwrap_or_default()
}

/// Corrective click for one instance, or `None` when the instance has no
/// erroneous points.
pub fn corrective_click_for(
    scene: &LabeledScene,
    result: &SegmentationResult,
    instance: i64,
    rule: CorrectiveRule,
) -> Result<Option<Click>> {
    let (inst, _) = scene.labels()?;
    if result.num_points() != inst.len() {
        return Err(Error::Shape(
            "result and scene differ in point count".into(),
        ));
    }
    let pos = scene.cloud.positions();
    let mut errors = Vec::new();
    let mut correct_same = Vec::new();
    for j in 0..inst.len() {
        if inst[j] == instance {
            if result.point_instance[j] == instance {
                correct_same.push(j);
            } else {
                errors.push(j);
            }
        }
    }
    if errors.is_empty() {
        return Ok(None);
    }
    if let CorrectiveRule::LargestComponent { radius } = rule {
        let scale = crate::geometry::normalization_for(pos).scale;
        errors = connected_largest(pos, &errors, radius * scale);
    }
    let anchors: Vec<usize> = if correct_same.is_empty() {
        (0..inst.len())
            .filter(|&j| result.point_instance[j] == inst[j])
            .collect()
    } else {
        correct_same
    };
    let best = if anchors.is_empty() {
        errors[0]
    } else {
        let anchor_pos: Vec<[f64; 3]> = anchors.iter().map(|&j| pos[j]).collect();
        let tree = SpatialIndex::new(&anchor_pos);
        let mut best = (errors[0], f64::NEG_INFINITY);
        for &j in &errors {
            let a = tree.nearest(&pos[j])?;
            let d = sq_dist(&pos[j], &anchor_pos[a]);
            if d > best.1 {
                best = (j, d);
            }
        }
        best.0
    };
    Ok(Some(tagged_click(scene, best, instance)))
}

/// Picks the instance with the most erroneous points (ties → smaller id) and
/// places a corrective click in it. Background points never receive clicks.
pub fn next_corrective_click(
    scene: &LabeledScene,
    result: &SegmentationResult,
    rule: CorrectiveRule,
) -> Result<Correction> {
    let (inst, _) = scene.labels()?;
    if result.num_points() != inst.len() {
        return Err(Error::Shape(
            "result and scene differ in point count".into(),
        ));
    }
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for (j, &g) in inst.iter().enumerate() {
        if g >= 0 && result.point_instance[j] != g {
            *counts.entry(g).or_default() += 1;
        }
    }
    let worst = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&g, _)| g);
    match worst {
        None => Ok(Correction::Done),
        Some(g) => Ok(corrective_click_for(scene, result, g, rule)?
            .map(Correction::Click)
            .unwrap_or(Correction::Done)),
    }
}

fn initial_clicks(scene: &LabeledScene, protocol: &EvalProtocol) -> Result<ClickSet> {
    let mut clicks = Vec::new();
    let empty = SegmentationResult::empty(scene.len());
    for inst in scene.instances() {
        let c = match protocol.initial {
            InitialClick::Center => initial_click(scene, inst)?,
            InitialClick::Farthest => {
                corrective_click_for(scene, &empty, inst, protocol.corrective)?
                    .ok_or_else(|| Error::NotFound(format!("instance {inst}")))?
            }
        };
        clicks.push(c);
    }
    Ok(ClickSet::new(clicks))
}

/// Number of clicks until the scene's mIoU reaches `target`, starting from
/// one click per instance and adding one corrective click at a time. All
/// clicks count; the result never exceeds `cap` unless the initial clicks
/// alone do.
pub fn noc(
    segmenter: &dyn Segmenter,
    scene: &LabeledScene,
    target: f64,
    cap: usize,
) -> Result<usize> {
    let protocol = EvalProtocol {
        noc_targets: vec![target],
        cap,
        ..Default::default()
    };
    Ok(noc_run(segmenter, scene, &protocol)?.0[0])
}

/// NoC for every target in one click sequence, plus the click log.
fn noc_run(
    segmenter: &dyn Segmenter,
    scene: &LabeledScene,
    protocol: &EvalProtocol,
) -> Result<(Vec<usize>, ClickSet)> {
    let (inst, cls) = scene.labels()?;
    let mut clicks = initial_clicks(scene, protocol)?;
    let mut found: Vec<Option<usize>> = vec![None; protocol.noc_targets.len()];
    loop {
        let result = segmenter.segment(scene, &clicks)?;
        let m = miou(&result, inst, cls)?;
        for (f, &t) in found.iter_mut().zip(&protocol.noc_targets) {
            if f.is_none() && m >= t {
                *f = Some(clicks.len());
            }
        }
        if found.iter().all(|f| f.is_some()) || clicks.len() >= protocol.cap {
            break;
        }
        match next_corrective_click(scene, &result, protocol.corrective)? {
            Correction::Click(c) => clicks.clicks.push(c),
            Correction::Done => break,
        }
    }
    let cap = protocol.cap.max(scene.instances().len());
    Ok((
        found.into_iter().map(|f| f.unwrap_or(cap)).collect(),
        clicks,
    ))
}

/// Results for each scheduled clicks-per-instance count. Between entries,
/// every instance that still has errors gets one corrective click per round.
pub fn schedule_results(
    segmenter: &dyn Segmenter,
    scene: &LabeledScene,
    protocol: &EvalProtocol,
) -> Result<Vec<(usize, SegmentationResult, ClickSet)>> {
    protocol.validate()?;
    let mut clicks = initial_clicks(scene, protocol)?;
    let mut out = Vec::with_capacity(protocol.schedule.len());
    let mut per_instance = 1;
    let mut result = segmenter.segment(scene, &clicks)?;
    for &n in &protocol.schedule {
        while per_instance < n {
            let mut added = false;
            for inst in scene.instances() {
                if let Some(c) = corrective_click_for(scene, &result, inst, protocol.corrective)? {
                    clicks.clicks.push(c);
                    added = true;
                }
            }
            per_instance += 1;
            if added {
                result = segmenter.segment(scene, &clicks)?;
            }
        }
        out.push((n, result.clone(), clicks.clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub instances: usize,
    /// (clicks per instance, class-averaged mIoU)
    pub miou_at: Vec<(usize, f64)>,
    pub macc_at: Vec<(usize, f64)>,
    /// (target, clicks)
    pub noc: Vec<(f64, usize)>,
    /// Clicks used at the last schedule entry.
    pub clicks: Vec<Click>,
    pub noc_clicks: Vec<Click>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenes: Vec<SceneMetrics>,
    /// Class-averaged over all instances of all scenes.
    pub miou_at: Vec<(usize, f64)>,
    pub macc_at: Vec<(usize, f64)>,
    /// Mean NoC over scenes.
    pub noc: Vec<(f64, f64)>,
    /// mAP at IoU 0.25 and 0.5 using the first schedule entry.
    pub map_25: f64,
    pub map_50: f64,
    pub protocol: EvalProtocol,
}

impl MetricsReport {
    pub fn miou(&self, n: usize) -> Option<f64> {
        self.miou_at.iter().find(|(k, _)| *k == n).map(|(_, v)| *v)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenes: {}", self.scenes.len());
        let _ = writeln!(s, "{:>8} {:>8} {:>8}", "clicks", "mIoU", "mACC");
        for ((n, m), (_, a)) in self.miou_at.iter().zip(&self.macc_at) {
            let _ = writeln!(s, "{n:>8} {m:>8.4} {a:>8.4}");
        }
        let _ = writeln!(s, "mAP@0.25 {:.4}", self.map_25);
        let _ = writeln!(s, "mAP@0.5  {:.4}", self.map_50);
        for (t, v) in &self.noc {
            let _ = writeln!(s, "NoC@{:<4} {:.2}", (t * 100.0).round(), v);
        }
        s
    }

    /// `clicks,miou` series for plotting.
    pub fn plot_csv(&self) -> String {
        let mut s = String::from("clicks,miou,macc\n");
        for ((n, m), (_, a)) in self.miou_at.iter().zip(&self.macc_at) {
            let _ = writeln!(s, "{n},{m},{a}");
        }
        s
    }
}

/// Runs the full protocol over labeled scenes.
pub fn evaluate(
    segmenter: &dyn Segmenter,
    scenes: &[LabeledScene],
    protocol: &EvalProtocol,
) -> Result<MetricsReport> {
    protocol.validate()?;
    let mut per_n: Vec<Vec<InstanceScore>> = vec![Vec::new(); protocol.schedule.len()];
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut scenes_out = Vec::with_capacity(scenes.len());
    for (si, scene) in scenes.iter().enumerate() {
        let (inst, cls) = scene.labels()?;
        if scene.instances().is_empty() {
            return Err(Error::InvalidInput(format!(
                "scene {:?} has no instances",
                scene.cloud.id
            )));
        }
        let runs = schedule_results(segmenter, scene, protocol)?;
        let mut miou_at = Vec::new();
        let mut macc_at = Vec::new();
        for (k, (n, result, _)) in runs.iter().enumerate() {
            let scores = instance_scores(result, inst, cls)?;
            miou_at.push((*n, class_mean(&scores, |s| s.iou)));
            macc_at.push((*n, class_mean(&scores, |s| s.accuracy)));
            per_n[k].extend(scores);
            if k == 0 {
                preds.extend(predictions_of(result, si));
                gts.extend(gt_instances(inst, cls, si));
            }
        }
        let (nocs, noc_clicks) = noc_run(segmenter, scene, protocol)?;
        scenes_out.push(SceneMetrics {
            scene_id: scene.cloud.id.clone(),
            instances: scene.instances().len(),
            miou_at,
            macc_at,
            noc: protocol.noc_targets.iter().copied().zip(nocs).collect(),
            clicks: runs.last().map(|r| r.2.clicks.clone()).unwrap_or_default(),
            noc_clicks: noc_clicks.clicks,
        });
    }
    let miou_at = protocol
        .schedule
        .iter()
        .zip(&per_n)
        .map(|(&n, s)| (n, class_mean(s, |x| x.iou)))
        .collect();
    let macc_at = protocol
        .schedule
        .iter()
        .zip(&per_n)
        .map(|(&n, s)| (n, class_mean(s, |x| x.accuracy)))
        .collect();
    let noc = protocol
        .noc_targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mean = scenes_out.iter().map(|s| s.noc[i].1 as f64).sum::<f64>()
                / scenes_out.len().max(1) as f64;
            (t, mean)
        })
        .collect();
    Ok(MetricsReport {
        scenes: scenes_out,
        miou_at,
        macc_at,
        noc,
        map_25: map_at(&preds, &gts, 0.25)?,
        map_50: map_at(&preds, &gts, 0.5)?,
        protocol: protocol.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;

    fn line_scene(instances: &[i64], classes: &[i64]) -> LabeledScene {
        let pts = (0..instances.len()).map(|i| [i as f64, 0.0, 0.0]).collect();
        LabeledScene {
            cloud: PointCloud::new(pts).unwrap().with_id("line"),
            instance_ids: Some(instances.to_vec()),
            class_ids: Some(classes.to_vec()),
        }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&[true, false], &[true, false]).unwrap(), 1.0);
        assert_eq!(iou(&[true, false], &[false, true]).unwrap(), 0.0);
        assert!(
            (iou(&[true, true, false, false], &[true, false, true, false]).unwrap() - 1.0 / 3.0)
                .abs()
                < 1e-15
        );
        assert_eq!(iou(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(iou(&[true], &[true, false]).is_err());
    }

    fn result_from(labels: &[i64]) -> SegmentationResult {
        let mut r = SegmentationResult::empty(labels.len());
        r.point_instance = labels.to_vec();
        let mut g: Vec<i64> = labels.iter().copied().filter(|&l| l >= 0).collect();
        g.sort_unstable();
        g.dedup();
        r.group_class = vec![0; g.len()];
        r.query_confidence = vec![1.0; g.len()];
        r.groups = g;
        r
    }

    #[test]
    fn miou_examples() {
        let s = line_scene(&[0, 0, 1, 1, -1], &[2, 2, 2, 2, 5]);
        let (i, c) = s.labels().unwrap();
        assert_eq!(miou(&result_from(&[0, 0, 1, 1, -1]), i, c).unwrap(), 1.0);
        assert_eq!(miou(&result_from(&[-1; 5]), i, c).unwrap(), 0.0);
        assert_eq!(miou(&result_from(&[0, 0, -1, -1, -1]), i, c).unwrap(), 0.5);
        // class averaging: class 3 instance perfect, two class-2 instances at 0 and 1
        let s = line_scene(&[0, 1, 2, 2], &[2, 2, 3, 3]);
        let (i, c) = s.labels().unwrap();
        let m = miou(&result_from(&[-1, 1, 2, 2]), i, c).unwrap();
        assert!((m - 0.75).abs() < 1e-15);
    }

    #[test]
    fn ap_simple() {
        let p = |mask: Vec<bool>, class, confidence| Prediction {
            scene: 0,
            mask,
            class,
            confidence,
        };
        let gt = vec![GtInstance {
            scene: 0,
            mask: vec![true, true, false],
            class: 1,
        }];
        assert_eq!(
            map_at(&[p(vec![true, true, false], 1, 0.9)], &gt, 0.5).unwrap(),
            1.0
        );
        assert_eq!(
            map_at(&[p(vec![false, false, true], 1, 0.9)], &gt, 0.5).unwrap(),
            0.0
        );
        assert_eq!(
            map_at(&[p(vec![true, true, false], 2, 0.9)], &gt, 0.5).unwrap(),
            0.0
        );
        assert!(map_at(&[], &gt, 1.0).is_err());
    }

    #[test]
    fn corrective_clicks() {
        let s = line_scene(&[0, 0, 0, 1, 1, 1, 1, 1, -1], &[0, 0, 0, 1, 1, 1, 1, 1, 5]);
        let perfect = result_from(&[0, 0, 0, 1, 1, 1, 1, 1, -1]);
        assert_eq!(
            next_corrective_click(&s, &perfect, CorrectiveRule::default()).unwrap(),
            Correction::Done
        );
        // instance 1 fully missed: farthest from every correct point, which
        // includes the background point at x = 8
        let missed = result_from(&[0, 0, 0, -1, -1, -1, -1, -1, -1]);
        match next_corrective_click(&s, &missed, CorrectiveRule::default()).unwrap() {
            Correction::Click(c) => {
                assert_eq!(c.group, 1);
                assert_eq!(c.point_index, Some(5));
            }
            Correction::Done => panic!("expected a click"),
        }
        // partial miss: farthest from the correctly labeled part of the same instance
        let partial = result_from(&[0, 0, 0, 1, 1, -1, -1, -1, -1]);
        match next_corrective_click(&s, &partial, CorrectiveRule::default()).unwrap() {
            Correction::Click(c) => assert_eq!(c.point_index, Some(7)),
            Correction::Done => panic!("expected a click"),
        }
    }

    #[test]
    fn larger_error_region_wins() {
        // instance 0 has 30 wrong points, instance 1 has 5
        let mut inst = vec![0i64; 40];
        inst.extend(vec![1; 10]);
        let mut pred = vec![0i64; 10];
        pred.extend(vec![-1; 30]);
        pred.extend(vec![1; 5]);
        pred.extend(vec![-1; 5]);
        let s = line_scene(&inst, &vec![0; 50]);
        match next_corrective_click(&s, &result_from(&pred), CorrectiveRule::default()).unwrap() {
            Correction::Click(c) => {
                assert_eq!(c.group, 0);
                assert!((10..40).contains(&c.point_index.unwrap()));
            }
            Correction::Done => panic!(),
        }
    }

    #[test]
    fn component_rule_picks_largest_cluster() {
        // errors of instance 0 at x = 0..3 (small) and x = 10..17 (large)
        let mut pts = Vec::new();
        for i in 0..3 {
            pts.push([i as f64, 0.0, 0.0]);
        }
        pts.push([5.0, 0.0, 0.0]);
        for i in 0..8 {
            pts.push([10.0 + i as f64, 0.0, 0.0]);
        }
        let n = pts.len();
        let s = LabeledScene {
            cloud: PointCloud::new(pts).unwrap(),
            instance_ids: Some(vec![0; n]),
            class_ids: Some(vec![0; n]),
        };
        let mut pred = vec![-1i64; n];
        pred[3] = 0;
        let rule = CorrectiveRule::LargestComponent { radius: 0.07 };
        let c = corrective_click_for(&s, &result_from(&pred), 0, rule)
            .unwrap()
            .unwrap();
        assert_eq!(c.point_index, Some(n - 1));
    }

    #[test]
    fn noc_stubs() {
        let s = line_scene(&[0, 0, 1, 1, 2, -1], &[0, 0, 1, 1, 1, 5]);
        assert_eq!(noc(&PerfectSegmenter, &s, 0.8, 20).unwrap(), 3);
        assert_eq!(noc(&BackgroundSegmenter, &s, 0.8, 20).unwrap(), 20);
    }

    #[test]
    fn protocol_validation() {
        assert!(EvalProtocol::default().validate().is_ok());
        let p = EvalProtocol {
            schedule: vec![1, 3, 3],
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = EvalProtocol {
            cap: 5,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn perfect_report() {
        let s = line_scene(&[0, 0, 1, 1, 2, -1], &[0, 0, 1, 1, 1, 5]);
        let r = evaluate(&PerfectSegmenter, &[s], &EvalProtocol::default()).unwrap();
        assert!(r.miou_at.iter().all(|(_, m)| *m == 1.0));
        assert_eq!(r.map_50, 1.0);
        assert_eq!(r.noc[0].1, 3.0);
        assert!(r.plot_csv().starts_with("clicks,miou,macc\n1,1,1\n"));
    }
}
