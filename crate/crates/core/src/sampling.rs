//! Simulated click generation: farthest point sampling, per-instance
//! candidate pools and random click subsets.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalization_for, sq_dist, voxel_grid, PointCloud, SpatialIndex};

/// A single click. `group` ties clicks that belong to one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Click {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub group: i64,
    /// Ground-truth instance that generated the click (simulated clicks only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_instance: Option<i64>,
    /// Index of the scene point the click is snapped to, when known.
    #[serde(skip)]
    pub point_index: Option<usize>,
}

impl Click {
    pub fn new(position: [f64; 3], group: i64) -> Self {
        Self {
            x: position[0],
            y: position[1],
            z: position[2],
            group,
            source_instance: None,
            point_index: None,
        }
    }

    pub fn at_point(scene: &PointCloud, index: usize, group: i64) -> Self {
        let mut c = Click::new(scene.positions()[index], group);
        c.point_index = Some(index);
        c
    }

    #[inline]
    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Ordered collection of clicks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClickSet {
    pub clicks: Vec<Click>,
}

impl ClickSet {
    pub fn new(clicks: Vec<Click>) -> Self {
        Self { clicks }
    }

    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.clicks.iter().map(Click::position).collect()
    }

    pub fn groups(&self) -> Vec<i64> {
        self.clicks.iter().map(|c| c.group).collect()
    }

    /// Distinct group tags in ascending order.
    pub fn distinct_groups(&self) -> Vec<i64> {
        let mut g = self.groups();
        g.sort_unstable();
        g.dedup();
        g
    }

    /// Snaps every click onto its nearest scene point (ties → smaller index).
    pub fn snap_to(&mut self, scene: &PointCloud, index: &SpatialIndex) -> Result<()> {
        for c in &mut self.clicks {
            if !(c.x.is_finite() && c.y.is_finite() && c.z.is_finite()) {
                return Err(Error::NonFinite("click coordinate".into()));
            }
            let j = index.nearest(&c.position())?;
            let p = scene.positions()[j];
            c.x = p[0];
            c.y = p[1];
            c.z = p[2];
            c.point_index = Some(j);
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Fps,
    Random,
    Voxel,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fps" => Ok(Strategy::Fps),
            "random" => Ok(Strategy::Random),
            "voxel" => Ok(Strategy::Voxel),
            other => Err(Error::InvalidInput(format!(
                "unknown sampling strategy {other:?}"
            ))),
        }
    }
}

/// Coordinate perturbation applied before FPS distances are computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Rotation about the gravity (z) axis drawn uniformly from `[0, rotation)`.
    pub rotation: f64,
    /// Per-coordinate Gaussian jitter, normalized units.
    pub jitter: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            rotation: std::f64::consts::TAU,
            jitter: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub per_instance_min: usize,
    pub per_instance_max: usize,
    pub clicks_per_scene_min: usize,
    pub clicks_per_scene_max: usize,
    pub seed: u64,
    pub augmentation: Augmentation,
    /// Voxel edge for the `voxel` strategy, normalized units.
    pub voxel_size: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Fps,
            per_instance_min: 1,
            per_instance_max: 15,
            clicks_per_scene_min: 30,
            clicks_per_scene_max: 50,
            seed: 0,
            augmentation: Augmentation::default(),
            voxel_size: 0.1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_instance_min < 1 || self.per_instance_min > self.per_instance_max {
            return Err(Error::InvalidInput(format!(
                "per-instance click range {}..={} is invalid",
                self.per_instance_min, self.per_instance_max
            )));
        }
        if self.clicks_per_scene_min < 1 || self.clicks_per_scene_min > self.clicks_per_scene_max {
            return Err(Error::InvalidInput(
                "per-scene click range is invalid".into(),
            ));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::InvalidInput("voxel size must be positive".into()));
        }
        Ok(())
    }
}

/// Farthest point sampling. The first index is drawn from `seed`; each
/// following index maximizes the distance to the chosen set (ties → smaller index).
pub fn fps(positions: &[[f64; 3]], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = positions.len();
    if k == 0 {
        return Err(Error::InvalidInput("fps needs k ≥ 1".into()));
    }
    if k > n {
        return Err(Error::InsufficientPoints {
            requested: k,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..n);
    Ok(fps_from(positions, k, first))
}

/// FPS with a fixed starting index.
pub fn fps_from(positions: &[[f64; 3]], k: usize, first: usize) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; positions.len()];
    let mut next = first;
    for _ in 0..k {
        chosen.push(next);
        min_d[next] = f64::NEG_INFINITY;
        let p = positions[next];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, q) in positions.iter().enumerate() {
            if min_d[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = sq_dist(&p, q);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        next = best;
    }
    chosen
}

/// Smallest pairwise distance within a subset (∞ for fewer than two points).
pub fn min_pairwise_distance(positions: &[[f64; 3]], subset: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for (a, &i) in subset.iter().enumerate() {
        for &j in &subset[a + 1..] {
            best = best.min(sq_dist(&positions[i], &positions[j]));
        }
    }
    best.sqrt()
}

/// Point indices of each non-negative instance id, keyed by id.
pub fn instance_members(instance_ids: &[i64]) -> BTreeMap<i64, Vec<usize>> {
    let mut out: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &id) in instance_ids.iter().enumerate() {
        if id >= 0 {
            out.entry(id).or_default().push(i);
        }
    }
    out
}

fn augment(points: &[[f64; 3]], aug: &Augmentation, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let angle = if aug.rotation > 0.0 {
        rng.gen_range(0.0..aug.rotation)
    } else {
        0.0
    };
    let (s, c) = angle.sin_cos();
    let jitter = (aug.jitter > 0.0).then(|| Normal::new(0.0, aug.jitter).expect("positive stddev"));
    points
        .iter()
        .map(|p| {
            let mut q = [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
            if let Some(j) = &jitter {
                for v in &mut q {
                    *v += j.sample(rng);
                }
            }
            q
        })
        .collect()
}

/// Draws click candidates for every instance of a labelled scene.
///
/// Candidates are scene points (exact coordinates); the augmentation only
/// perturbs the copy used for distance computations.
pub fn sample_click_candidates(
    scene: &PointCloud,
    instance_ids: &[i64],
    cfg: &SamplerConfig,
) -> Result<ClickSet> {
    cfg.validate()?;
    if instance_ids.len() != scene.len() {
        return Err(Error::InvalidInput(format!(
            "{} instance ids for {} points",
            instance_ids.len(),
            scene.len()
        )));
    }
    let members = instance_members(instance_ids);
    if members.is_empty() {
        return Err(Error::InvalidInput("scene has no labelled instance".into()));
    }
    let t = normalization_for(scene.positions());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut clicks = Vec::new();
    for (&inst, idx) in &members {
        let local: Vec<[f64; 3]> = idx
            .iter()
            .map(|&i| t.apply(&scene.positions()[i]))
            .collect();
        let want = rng
            .gen_range(cfg.per_instance_min..=cfg.per_instance_max)
            .min(idx.len());
        let picked: Vec<usize> = match cfg.strategy {
            Strategy::Fps => {
                let aug = augment(&local, &cfg.augmentation, &mut rng);
                fps(&aug, want, rng.gen())?
            }
            Strategy::Random => index::sample(&mut rng, idx.len(), want).into_vec(),
            Strategy::Voxel => {
                let grid = voxel_grid(&local, cfg.voxel_size)?;
                let tree = SpatialIndex::new(&local);
                let reps: Vec<usize> = grid
                    .centroids
                    .iter()
                    .map(|c| tree.nearest(c))
                    .collect::<Result<_>>()?;
                if reps.len() > want {
                    let mut sel = index::sample(&mut rng, reps.len(), want).into_vec();
                    sel.sort_unstable();
                    sel.into_iter().map(|s| reps[s]).collect()
                } else {
                    reps
                }
            }
        };
        for p in picked {
            let mut c = Click::at_point(scene, idx[p], inst);
            c.source_instance = Some(inst);
            clicks.push(c);
        }
    }
    Ok(ClickSet::new(clicks))
}

/// How many clicks to keep per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetSize {
    Fixed(usize),
    /// Uniform in `[1, available]` per group.
    Random,
}

/// Keeps a random subset of clicks per group, preserving the original order.
pub fn subset_clicks(candidates: &ClickSet, n: SubsetSize, seed: u64) -> ClickSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subset_clicks_with(
        candidates,
        |_, avail, rng| match n {
            SubsetSize::Fixed(k) => k.min(avail),
            SubsetSize::Random => rng.gen_range(1..=avail),
        },
        &mut rng,
    )
}

/// Subset selection with a caller-supplied per-group count rule.
pub fn subset_clicks_with(
    candidates: &ClickSet,
    mut count: impl FnMut(i64, usize, &mut ChaCha8Rng) -> usize,
    rng: &mut ChaCha8Rng,
) -> ClickSet {
    let mut by_group: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, c) in candidates.clicks.iter().enumerate() {
        by_group.entry(c.group).or_default().push(i);
    }
    let mut keep = vec![false; candidates.len()];
    for (&g, idx) in &by_group {
        let k = count(g, idx.len(), rng).min(idx.len());
        for s in index::sample(rng, idx.len(), k) {
            keep[idx[s]] = true;
        }
    }
    ClickSet::new(
        candidates
            .clicks
            .iter()
            .zip(keep)
            .filter_map(|(c, k)| k.then(|| c.clone()))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_cube(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
    }

    #[test]
    fn fps_forced_farthest() {
        let pts = [
            [0.0, 0.0, 0.0],
            [0.5, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
        ];
        assert_eq!(fps_from(&pts, 2, 0), vec![0, 3]);
        // find a seed that starts at the origin
        let seed = (0..1000u64)
            .find(|&s| fps(&pts, 1, s).unwrap()[0] == 0)
            .unwrap();
        assert_eq!(fps(&pts, 2, seed).unwrap(), vec![0, 3]);
    }

    #[test]
    fn fps_exhaustion_and_errors() {
        let pts = uniform_cube(20, 1);
        let mut all = fps(&pts, 20, 5).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert!(fps(&pts, 21, 0).is_err());
        assert!(fps(&pts, 0, 0).is_err());
    }

    #[test]
    fn fps_with_duplicate_points_never_repeats() {
        let pts = vec![[0.0; 3]; 5];
        let mut idx = fps(&pts, 5, 3).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fps_is_deterministic() {
        let pts = uniform_cube(300, 2);
        assert_eq!(fps(&pts, 12, 9).unwrap(), fps(&pts, 12, 9).unwrap());
    }

    #[test]
    fn candidates_on_single_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<[f64; 3]> = (0..100)
            .map(|_| {
                let v: [f64; 3] = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                [v[0] / n, v[1] / n, v[2] / n]
            })
            .collect();
        let scene = PointCloud::new(pts.clone()).unwrap();
        let ids = vec![0; 100];
        for seed in 0..20 {
            let cfg = SamplerConfig {
                seed,
                ..Default::default()
            };
            let cs = sample_click_candidates(&scene, &ids, &cfg).unwrap();
            assert!((1..=15).contains(&cs.len()));
            for c in &cs.clicks {
                assert!(pts.contains(&c.position()));
                assert_eq!(c.source_instance, Some(0));
            }
        }
    }

    #[test]
    fn candidates_clamped_to_instance_size() {
        let scene = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [5.0, 5.0, 5.0]]).unwrap();
        let cfg = SamplerConfig {
            per_instance_min: 15,
            per_instance_max: 15,
            ..Default::default()
        };
        let cs = sample_click_candidates(&scene, &[3, 3, -1], &cfg).unwrap();
        assert_eq!(cs.len(), 2);
        assert!(sample_click_candidates(&scene, &[-1, -1, -1], &cfg).is_err());
    }

    #[test]
    fn every_strategy_emits_scene_points() {
        let pts = uniform_cube(400, 5);
        let ids: Vec<i64> = pts.iter().map(|p| if p[0] < 0.5 { 0 } else { 1 }).collect();
        let scene = PointCloud::new(pts.clone()).unwrap();
        for strategy in [Strategy::Fps, Strategy::Random, Strategy::Voxel] {
            let cfg = SamplerConfig {
                strategy,
                seed: 3,
                ..Default::default()
            };
            let cs = sample_click_candidates(&scene, &ids, &cfg).unwrap();
            for c in &cs.clicks {
                let j = c.point_index.unwrap();
                assert_eq!(pts[j], c.position());
                assert_eq!(ids[j], c.group);
            }
            assert_eq!(cs, sample_click_candidates(&scene, &ids, &cfg).unwrap());
        }
    }

    fn three_instance_candidates() -> ClickSet {
        let mut clicks = Vec::new();
        for g in 0..3 {
            for i in 0..6 {
                clicks.push(Click::new([g as f64, i as f64, 0.0], g));
            }
        }
        ClickSet::new(clicks)
    }

    #[test]
    fn subset_examples() {
        let cands = three_instance_candidates();
        let one = subset_clicks(&cands, SubsetSize::Fixed(1), 7);
        assert_eq!(one.distinct_groups(), vec![0, 1, 2]);
        assert_eq!(one.len(), 3);
        let all = subset_clicks(&cands, SubsetSize::Fixed(6), 7);
        assert_eq!(all, cands);
        let more = subset_clicks(&cands, SubsetSize::Fixed(100), 7);
        assert_eq!(more, cands);
        assert_eq!(
            subset_clicks(&cands, SubsetSize::Random, 11),
            subset_clicks(&cands, SubsetSize::Random, 11)
        );
    }

    #[test]
    fn json_round_trip() {
        let cs = three_instance_candidates();
        let s = cs.to_json().unwrap();
        assert!(s.contains("\"group\""));
        assert_eq!(ClickSet::from_json(&s).unwrap(), cs);
    }
}
