//! Single-pass segmentation and post-processing of the final stage.

use serde::{Deserialize, Serialize};

use crate::decoder::StageOutput;
use crate::encoder::{encode_queries, MultiScaleFeatures};
use crate::error::{Error, Result};
use crate::geometry::{
    build_index, normalize_cloud, NormalizationTransform, PointCloud, SpatialIndex,
};
use crate::model::ModelParams;
use crate::sampling::{Click, ClickSet};

/// Per-point labels for one click set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    /// Group id per point, `-1` for background.
    pub point_instance: Vec<i64>,
    /// Class per point, `-1` for background.
    pub point_class: Vec<i64>,
    /// Distinct click groups in ascending order.
    pub groups: Vec<i64>,
    /// Class assigned to each group (aligned with `groups`).
    pub group_class: Vec<i64>,
    /// Highest class probability among each group's member queries.
    pub query_confidence: Vec<f64>,
    #[serde(skip)]
    pub stage_outputs: Option<Vec<StageOutput>>,
}

impl SegmentationResult {
    pub fn num_points(&self) -> usize {
        self.point_instance.len()
    }

    /// Binary mask of the points labeled with `group`.
    pub fn mask_of(&self, group: i64) -> Vec<bool> {
        self.point_instance.iter().map(|&g| g == group).collect()
    }

    pub fn group_index(&self, group: i64) -> Option<usize> {
        self.groups.binary_search(&group).ok()
    }

    /// All points labeled background.
    pub fn empty(n: usize) -> Self {
        Self {
            point_instance: vec![-1; n],
            point_class: vec![-1; n],
            groups: Vec::new(),
            group_class: Vec::new(),
            query_confidence: Vec::new(),
            stage_outputs: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn softmax_column(z: &crate::numerics::Tensor2, col: usize) -> Vec<f64> {
    let c = z.rows();
    let max = (0..c)
        .map(|r| z.get(r, col))
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = (0..c).map(|r| (z.get(r, col) - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; ties go to the smaller index.
fn argmax(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Turns the last stage's logits into exclusive per-point labels.
///
/// A point is background when every mask probability is below 0.5,
/// otherwise it takes the group of its highest-scoring query. Queries that
/// share a group are merged; the merged instance takes the class of the
/// member query with the highest class probability.
pub fn finalize(final_stage: &StageOutput, clicks: &ClickSet) -> Result<SegmentationResult> {
    let m = &final_stage.mask_logits;
    let z = &final_stage.class_logits;
    let k = clicks.len();
    if m.cols() != k || z.cols() != k {
        return Err(Error::Shape(format!(
            "{} clicks but logits have {} / {} columns",
            k,
            m.cols(),
            z.cols()
        )));
    }
    let query_groups = clicks.groups();
    let groups = clicks.distinct_groups();
    let mut group_class = vec![-1i64; groups.len()];
    let mut confidence = vec![f64::NEG_INFINITY; groups.len()];
    for (q, g) in query_groups.iter().enumerate() {
        let gi = groups.binary_search(g).expect("group listed");
        if let Some((c, p)) = argmax(softmax_column(z, q).into_iter()) {
            // strict comparison keeps the earliest query on ties
            if p > confidence[gi] {
                confidence[gi] = p;
                group_class[gi] = c as i64;
            }
        }
    }
    let n = m.rows();
    let mut point_instance = vec![-1i64; n];
    let mut point_class = vec![-1i64; n];
    for j in 0..n {
        let (q, best) = match argmax(m.row(j).iter().copied()) {
            Some(v) => v,
            None => continue,
        };
        // sigmoid(x) < 0.5 exactly when x < 0
        if best < 0.0 || best.is_nan() {
            continue;
        }
        let g = query_groups[q];
        let gi = groups.binary_search(&g).expect("group listed");
        point_instance[j] = g;
        point_class[j] = group_class[gi];
    }
    let query_confidence = confidence.into_iter().map(|c| c.max(0.0)).collect();
    Ok(SegmentationResult {
        point_instance,
        point_class,
        groups,
        group_class,
        query_confidence,
        stage_outputs: None,
    })
}

/// A scene moved into model coordinates with its search index, reusable
/// across click sets.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub normalized: PointCloud,
    pub transform: NormalizationTransform,
    pub index: SpatialIndex,
}

impl PreparedScene {
    pub fn new(scene: &PointCloud) -> Self {
        let (normalized, transform) = normalize_cloud(scene);
        if transform.degenerate {
            log::warn!("scene {:?} is degenerate; using unit scale", scene.id);
        }
        let index = build_index(&normalized);
        Self {
            normalized,
            transform,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }

    /// Maps clicks into model coordinates and snaps each onto its nearest point.
    pub fn snap_clicks(&self, clicks: &ClickSet) -> Result<ClickSet> {
        if clicks.is_empty() {
            return Err(Error::NoClicks);
        }
        let mut out = Vec::with_capacity(clicks.len());
        for c in &clicks.clicks {
            let p = c.position();
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("click coordinate".into()));
            }
            let j = match c.point_index {
                Some(j) if j < self.len() => j,
                _ => self.index.nearest(&self.transform.apply(&p))?,
            };
            let mut snapped = Click::at_point(&self.normalized, j, c.group);
            snapped.source_instance = c.source_instance;
            out.push(snapped);
        }
        Ok(ClickSet::new(out))
    }
}

/// Full decoder output for an already prepared scene.
pub fn forward_prepared(
    model: &ModelParams,
    prepared: &PreparedScene,
    feats: &MultiScaleFeatures,
    clicks: &ClickSet,
) -> Result<(ClickSet, Vec<StageOutput>)> {
    let snapped = prepared.snap_clicks(clicks)?;
    let queries = encode_queries(&snapped, &prepared.index, feats, model.config.query_knn)?;
    let outputs = model.decoder.decode(&model.store, feats, &queries)?;
    Ok((snapped, outputs))
}

/// Encoder features of a prepared scene; independent of the clicks.
pub fn encode_prepared(
    model: &ModelParams,
    prepared: &PreparedScene,
) -> Result<MultiScaleFeatures> {
    model.encoder.encode(&model.store, &prepared.normalized)
}

/// Segments with precomputed encoder features.
pub fn segment_with_features(
    model: &ModelParams,
    prepared: &PreparedScene,
    feats: &MultiScaleFeatures,
    clicks: &ClickSet,
) -> Result<SegmentationResult> {
    let (snapped, outputs) = forward_prepared(model, prepared, feats, clicks)?;
    let last = outputs
        .last()
        .ok_or_else(|| Error::InvalidInput("model has no stages".into()))?;
    finalize(last, &snapped)
}

/// One encoder pass and one decoder pass over all clicks, then `finalize`.
/// Click coordinates are in the scene's own frame.
pub fn segment(
    scene: &PointCloud,
    clicks: &ClickSet,
    model: &ModelParams,
) -> Result<SegmentationResult> {
    if clicks.is_empty() {
        return Err(Error::NoClicks);
    }
    let prepared = PreparedScene::new(scene);
    let feats = encode_prepared(model, &prepared)?;
    segment_with_features(model, &prepared, &feats, clicks)
}

/// Like `segment`, keeping every stage's output on the result.
pub fn segment_with_diagnostics(
    scene: &PointCloud,
    clicks: &ClickSet,
    model: &ModelParams,
) -> Result<SegmentationResult> {
    let prepared = PreparedScene::new(scene);
    let feats = encode_prepared(model, &prepared)?;
    let (snapped, outputs) = forward_prepared(model, &prepared, &feats, clicks)?;
    let mut result = finalize(outputs.last().expect("at least one stage"), &snapped)?;
    result.stage_outputs = Some(outputs);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::Tensor2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stage(m: Tensor2, z: Tensor2) -> StageOutput {
        let k = m.cols();
        StageOutput {
            mask_logits: m,
            class_logits: z,
            query_t: Tensor2::zeros(k, 1),
            query_a: Tensor2::zeros(k, 1),
            spatial: Tensor2::zeros(k, 1),
            semantic: Tensor2::zeros(k, 1),
            selected_prototype: vec![0; k],
        }
    }

    fn clicks(groups: &[i64]) -> ClickSet {
        ClickSet::new(groups.iter().map(|&g| Click::new([0.0; 3], g)).collect())
    }

    #[test]
    fn hand_argmax() {
        let m = Tensor2::from_rows(&[vec![2.0, 0.1], vec![0.3, 4.0]]).unwrap();
        let z = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let r = finalize(&stage(m, z), &clicks(&[3, 8])).unwrap();
        assert_eq!(r.point_instance, vec![3, 8]);
        assert_eq!(r.point_class, vec![0, 1]);
        assert_eq!(r.groups, vec![3, 8]);
    }

    #[test]
    fn all_negative_is_background() {
        let m = Tensor2::filled(5, 2, -5.0);
        let r = finalize(&stage(m, Tensor2::zeros(3, 2)), &clicks(&[0, 1])).unwrap();
        assert!(r.point_instance.iter().all(|&g| g == -1));
        assert!(r.point_class.iter().all(|&c| c == -1));
    }

    #[test]
    fn shared_group_is_union() {
        let m = Tensor2::from_rows(&[vec![3.0, -1.0], vec![-1.0, 3.0], vec![-2.0, -2.0]]).unwrap();
        let z = Tensor2::from_rows(&[vec![0.0, 5.0], vec![1.0, 0.0]]).unwrap();
        let r = finalize(&stage(m, z), &clicks(&[4, 4])).unwrap();
        assert_eq!(r.point_instance, vec![4, 4, -1]);
        assert_eq!(r.groups, vec![4]);
        // the second query is more confident about class 0
        assert_eq!(r.group_class, vec![0]);
        assert_eq!(r.point_class, vec![0, 0, -1]);
    }

    #[test]
    fn ties_go_to_smaller_query() {
        let m = Tensor2::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let r = finalize(&stage(m, Tensor2::zeros(2, 2)), &clicks(&[7, 2])).unwrap();
        assert_eq!(r.point_instance, vec![7]);
        // zero logit is exactly probability 0.5, which is not background
        let m = Tensor2::from_rows(&[vec![0.0, -1.0]]).unwrap();
        let r = finalize(&stage(m, Tensor2::zeros(2, 2)), &clicks(&[7, 2])).unwrap();
        assert_eq!(r.point_instance, vec![7]);
    }

    #[test]
    fn shape_mismatch() {
        let m = Tensor2::zeros(3, 2);
        assert!(finalize(&stage(m, Tensor2::zeros(2, 2)), &clicks(&[1])).is_err());
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(0.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn empty_clicks_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ModelParams::new(ModelConfig::tiny(2)).unwrap();
        let scene = random_scene(&mut rng, 30);
        let err = segment(&scene, &ClickSet::default(), &model).unwrap_err();
        assert_eq!(err.to_string(), "at least one click required");
    }

    #[test]
    fn duplicate_click_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = ModelParams::new(ModelConfig::tiny(2)).unwrap();
        let scene = random_scene(&mut rng, 60);
        let p = scene.positions()[10];
        let one = segment(&scene, &ClickSet::new(vec![Click::new(p, 0)]), &model).unwrap();
        let two = segment(
            &scene,
            &ClickSet::new(vec![Click::new(p, 0), Click::new(p, 0)]),
            &model,
        )
        .unwrap();
        assert_eq!(one.point_instance, two.point_instance);
        assert_eq!(one.point_class, two.point_class);
    }

    #[test]
    fn partition_and_group_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = ModelParams::new(ModelConfig::tiny(3)).unwrap();
        let scene = random_scene(&mut rng, 80);
        let cs = ClickSet::new(vec![
            Click::new(scene.positions()[0], 5),
            Click::new(scene.positions()[40], 2),
            Click::new(scene.positions()[41], 5),
        ]);
        let r = segment(&scene, &cs, &model).unwrap();
        assert_eq!(r.groups, vec![2, 5]);
        for (&g, &c) in r.point_instance.iter().zip(&r.point_class) {
            assert!(g == -1 || r.groups.contains(&g));
            assert_eq!(g == -1, c == -1);
        }
        let back = SegmentationResult::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
