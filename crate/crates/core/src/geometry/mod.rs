//! Point-cloud containers, normalization, voxel pooling and exact KNN.

mod kdtree;

use std::collections::BTreeMap;

pub use kdtree::{sq_dist, SpatialIndex};

use crate::error::{Error, Result};

/// A scene: N points with optional per-point colors.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Option<Vec<[f64; 3]>>,
    pub id: String,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>) -> Result<Self> {
        Self::with_colors(positions, None)
    }

    pub fn with_colors(positions: Vec<[f64; 3]>, colors: Option<Vec<[f64; 3]>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidInput(
                "point cloud must contain at least one point".into(),
            ));
        }
        if let Some(i) = positions
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite(format!("coordinate of point {i}")));
        }
        if let Some(c) = &colors {
            if c.len() != positions.len() {
                return Err(Error::InvalidInput(format!(
                    "{} colors for {} points",
                    c.len(),
                    positions.len()
                )));
            }
            if c.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("color".into()));
            }
        }
        Ok(Self {
            positions,
            colors,
            id: String::new(),
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    #[inline]
    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[[f64; 3]]> {
        self.colors.as_deref()
    }

    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        bounding_box(&self.positions)
    }

    /// Reorders points; `perm[i]` is the source index of output point `i`.
    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        PointCloud {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| perm.iter().map(|&i| c[i]).collect()),
            id: self.id.clone(),
        }
    }

    pub fn map_positions(&self, f: impl Fn(&[f64; 3]) -> [f64; 3]) -> PointCloud {
        PointCloud {
            positions: self.positions.iter().map(f).collect(),
            colors: self.colors.clone(),
            id: self.id.clone(),
        }
    }
}

pub fn bounding_box(points: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

/// Maps `p` to `(p - centroid) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform {
    pub centroid: [f64; 3],
    pub scale: f64,
    /// Set when every point coincided and the scale fell back to 1.
    pub degenerate: bool,
}

impl NormalizationTransform {
    pub fn identity() -> Self {
        Self {
            centroid: [0.0; 3],
            scale: 1.0,
            degenerate: false,
        }
    }

    #[inline]
    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.centroid[0]) / self.scale,
            (p[1] - self.centroid[1]) / self.scale,
            (p[2] - self.centroid[2]) / self.scale,
        ]
    }

    #[inline]
    pub fn invert(&self, p: &[f64; 3]) -> [f64; 3] {
        [
            p[0] * self.scale + self.centroid[0],
            p[1] * self.scale + self.centroid[1],
            p[2] * self.scale + self.centroid[2],
        ]
    }
}

/// Centers the cloud on its centroid and scales it into `[-0.5, 0.5]^3`.
pub fn normalize_cloud(cloud: &PointCloud) -> (PointCloud, NormalizationTransform) {
    let t = normalization_for(cloud.positions());
    if t.degenerate {
        log::warn!("degenerate point cloud {:?}: all points coincide", cloud.id);
    }
    (cloud.map_positions(|p| t.apply(p)), t)
}

pub fn normalization_for(points: &[[f64; 3]]) -> NormalizationTransform {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for v in &mut c {
        *v /= n;
    }
    let max_dev = points
        .iter()
        .flat_map(|p| (0..3).map(move |a| (p[a] - c[a]).abs()))
        .fold(0.0f64, f64::max);
    if max_dev > 0.0 {
        // the largest deviation maps to exactly 0.5
        NormalizationTransform {
            centroid: c,
            scale: 2.0 * max_dev,
            degenerate: false,
        }
    } else {
        NormalizationTransform {
            centroid: c,
            scale: 1.0,
            degenerate: true,
        }
    }
}

pub fn build_index(cloud: &PointCloud) -> SpatialIndex {
    SpatialIndex::new(cloud.positions())
}

/// Voxel pooling result over a set of points.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    /// One centroid per occupied voxel, ordered by voxel key.
    pub centroids: Vec<[f64; 3]>,
    /// Fine point indices belonging to each voxel, ascending.
    pub members: Vec<Vec<usize>>,
    /// Voxel index of each fine point.
    pub assignment: Vec<usize>,
}

pub fn voxel_grid(points: &[[f64; 3]], voxel_size: f64) -> Result<VoxelGrid> {
    if !voxel_size.is_finite() || voxel_size <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "voxel size must be positive and finite, got {voxel_size}"
        )));
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let key = [
            (p[0] / voxel_size).floor() as i64,
            (p[1] / voxel_size).floor() as i64,
            (p[2] / voxel_size).floor() as i64,
        ];
        cells.entry(key).or_default().push(i);
    }
    let mut assignment = vec![0; points.len()];
    let mut centroids = Vec::with_capacity(cells.len());
    let mut members = Vec::with_capacity(cells.len());
    for (v, (_, idx)) in cells.into_iter().enumerate() {
        let mut c = [0.0; 3];
        for &i in &idx {
            assignment[i] = v;
            for a in 0..3 {
                c[a] += points[i][a];
            }
        }
        let n = idx.len() as f64;
        centroids.push([c[0] / n, c[1] / n, c[2] / n]);
        members.push(idx);
    }
    Ok(VoxelGrid {
        centroids,
        members,
        assignment,
    })
}

/// One output point per occupied voxel at its member centroid, plus the
/// coarse-to-fine parent map.
pub fn voxel_downsample(
    cloud: &PointCloud,
    voxel_size: f64,
) -> Result<(PointCloud, Vec<Vec<usize>>)> {
    let grid = voxel_grid(cloud.positions(), voxel_size)?;
    let colors = cloud.colors().map(|cols| {
        grid.members
            .iter()
            .map(|m| {
                let mut c = [0.0; 3];
                for &i in m {
                    for a in 0..3 {
                        c[a] += cols[i][a];
                    }
                }
                let n = m.len() as f64;
                [c[0] / n, c[1] / n, c[2] / n]
            })
            .collect()
    });
    let coarse = PointCloud::with_colors(grid.centroids, colors)?.with_id(cloud.id.clone());
    Ok((coarse, grid.members))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube_corners() -> Vec<[f64; 3]> {
        let mut v = Vec::new();
        for x in [-1.0, 1.0] {
            for y in [-1.0, 1.0] {
                for z in [-1.0, 1.0] {
                    v.push([x, y, z]);
                }
            }
        }
        v
    }

    #[test]
    fn normalize_cube_corners() {
        let cloud = PointCloud::new(cube_corners()).unwrap();
        let (n, t) = normalize_cloud(&cloud);
        assert_eq!(t.centroid, [0.0; 3]);
        assert_eq!(t.scale, 2.0);
        assert!(!t.degenerate);
        for p in n.positions() {
            assert!(p.iter().all(|v| v.abs() == 0.5));
        }
    }

    #[test]
    fn normalize_single_point_is_degenerate() {
        let cloud = PointCloud::new(vec![[3.0, 4.0, 5.0]]).unwrap();
        let (n, t) = normalize_cloud(&cloud);
        assert_eq!(n.positions()[0], [0.0; 3]);
        assert_eq!(t.scale, 1.0);
        assert!(t.degenerate);
    }

    #[test]
    fn normalize_uniform_cloud_bound_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 3]> = (0..1000)
            .map(|_| {
                [
                    rng.gen_range(0.0..10.0),
                    rng.gen_range(0.0..10.0),
                    rng.gen_range(0.0..10.0),
                ]
            })
            .collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let (n, t) = normalize_cloud(&cloud);
        let max = n
            .positions()
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 0.5);
        assert!((max - 0.5).abs() < 1e-12);
        for (p, q) in pts.iter().zip(n.positions()) {
            let back = t.invert(q);
            for a in 0..3 {
                assert!((back[a] - p[a]).abs() <= 1e-9 * p[a].abs().max(1.0));
            }
        }
    }

    #[test]
    fn cloud_validation() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
        assert!(PointCloud::with_colors(vec![[0.0; 3]], Some(vec![])).is_err());
    }

    #[test]
    fn voxel_examples() {
        let cloud = PointCloud::new(vec![[0.01, 0.01, 0.01], [0.03, 0.05, 0.07]]).unwrap();
        let (c, map) = voxel_downsample(&cloud, 0.1).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(map, vec![vec![0, 1]]);
        assert!((c.positions()[0][0] - 0.02).abs() < 1e-15);

        let cloud =
            PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [0.5, 0.5, 0.5]]).unwrap();
        let (c, _) = voxel_downsample(&cloud, 100.0).unwrap();
        assert_eq!(c.len(), 1);
        assert!((c.positions()[0][1] - 2.5 / 3.0).abs() < 1e-15);

        let (norm, _) = normalize_cloud(&PointCloud::new(cube_corners()).unwrap());
        let (c, map) = voxel_downsample(&norm, 0.6).unwrap();
        assert_eq!(c.len(), 8);
        assert!(map.iter().all(|m| m.len() == 1));

        assert!(voxel_downsample(&norm, f64::NAN).is_err());
        assert!(voxel_downsample(&norm, 0.0).is_err());
    }

    #[test]
    fn voxel_parent_map_partitions_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<[f64; 3]> = (0..500)
            .map(|_| {
                [
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ]
            })
            .collect();
        let grid = voxel_grid(&pts, 0.13).unwrap();
        let mut seen = vec![0; pts.len()];
        for (v, m) in grid.members.iter().enumerate() {
            for &i in m {
                seen[i] += 1;
                assert_eq!(grid.assignment[i], v);
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }
}
