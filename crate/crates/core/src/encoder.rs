//! Hierarchical point encoder and click-query initialization.
//!
//! Scale 0 is a point-wise MLP over `[1, x, y, z(, r, g, b)]`. Each further
//! scale voxel-pools the previous one: every child point is mapped by an MLP
//! over `(child features, offset to voxel centroid / voxel size)` and the
//! results are averaged per voxel. The full-resolution map `F^L` is a
//! linear read-out of every scale's features gathered back to the input
//! points through the parent maps, plus a projection of the Fourier
//! encoding of each point's position.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{voxel_grid, PointCloud, SpatialIndex};
use crate::model::{EncoderKind, ModelConfig};
use crate::numerics::{fourier_pe, Linear, Mlp, MlpCache, ParamStore, Tensor2};
use crate::sampling::ClickSet;

/// Parameter layout of the encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    scale_mlps: Vec<Mlp>,
    readouts: Vec<Linear>,
    pe_readout: Linear,
    voxel_sizes: Vec<f64>,
    pe_bands: usize,
    query_dim: usize,
    use_colors: bool,
    kind: EncoderKind,
}

/// Features of one encoder scale.
#[derive(Debug, Clone)]
pub struct ScaleFeatures {
    pub positions: Vec<[f64; 3]>,
    pub features: Tensor2,
    /// For scale `i ≥ 1`: members of each point among scale `i - 1` points.
    pub children: Vec<Vec<usize>>,
}

/// `{F^0 .. F^L}`: scales `0..L` followed by the full-resolution map `F^L`.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub scales: Vec<ScaleFeatures>,
    /// `F^L`, one row per input point.
    pub full: Tensor2,
    pub positions: Vec<[f64; 3]>,
    /// `ancestors[i][j]`: index at scale `i` of input point `j`.
    pub ancestors: Vec<Vec<usize>>,
    /// Fourier encoding of the input positions (its non-zero columns).
    pub position_encoding: Tensor2,
    /// `F^L` plus the zero-padded Fourier encoding: the tokens the last
    /// decoder stage attends to.
    pub scene_tokens: Tensor2,
}

impl MultiScaleFeatures {
    /// Number of feature maps including `F^L` (i.e. `L + 1`).
    pub fn scale_count(&self) -> usize {
        self.scales.len() + 1
    }

    pub fn num_points(&self) -> usize {
        self.full.rows()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    scale0: MlpCache,
    /// Per pooled scale: MLP cache over its child rows.
    pooled: Vec<MlpCache>,
}

/// Initial click queries `Q = F^L[lookup(C)]`.
#[derive(Debug, Clone)]
pub struct QueryFeatures {
    pub queries: Tensor2,
    pub click_positions: Vec<[f64; 3]>,
    pub groups: Vec<i64>,
    /// Input point indices averaged into each query row.
    pub lookup: Vec<Vec<usize>>,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let dims = &cfg.encoder_dims;
        let mut scale_mlps = Vec::with_capacity(dims.len());
        scale_mlps.push(Mlp::new(
            store,
            "encoder.scale0",
            &[cfg.input_dim(), dims[0], dims[0]],
            cfg.activation,
            rng,
        ));
        for i in 1..dims.len() {
            scale_mlps.push(Mlp::new(
                store,
                &format!("encoder.scale{i}"),
                &[dims[i - 1] + 3, dims[i], dims[i]],
                cfg.activation,
                rng,
            ));
        }
        let readouts = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                Linear::new(
                    store,
                    &format!("encoder.readout{i}"),
                    d,
                    cfg.query_dim,
                    false,
                    rng,
                )
            })
            .collect();
        let pe_readout = Linear::new(
            store,
            "encoder.pe_readout",
            (6 * cfg.pe_bands).max(1),
            cfg.query_dim,
            true,
            rng,
        );
        Self {
            scale_mlps,
            readouts,
            pe_readout,
            voxel_sizes: cfg.voxel_sizes.clone(),
            pe_bands: cfg.pe_bands,
            query_dim: cfg.query_dim,
            use_colors: cfg.use_colors,
            kind: cfg.encoder,
        }
    }

    fn input_features(&self, cloud: &PointCloud) -> Result<Tensor2> {
        let colors = match (self.use_colors, cloud.colors()) {
            (true, Some(c)) => Some(c),
            (true, None) => {
                return Err(Error::InvalidInput(
                    "model expects colors but the scene has none".into(),
                ))
            }
            (false, _) => None,
        };
        let width = if colors.is_some() { 7 } else { 4 };
        let mut x = Tensor2::zeros(cloud.len(), width);
        for (j, p) in cloud.positions().iter().enumerate() {
            let row = x.row_mut(j);
            row[0] = 1.0;
            row[1..4].copy_from_slice(p);
            if let Some(c) = colors {
                row[4..7].copy_from_slice(&c[j]);
            }
        }
        Ok(x)
    }

    /// Forward pass. The cloud is expected to be normalized.
    pub fn encode(&self, store: &ParamStore, cloud: &PointCloud) -> Result<MultiScaleFeatures> {
        self.encode_cached(store, cloud).map(|(f, _)| f)
    }

    pub fn encode_cached(
        &self,
        store: &ParamStore,
        cloud: &PointCloud,
    ) -> Result<(MultiScaleFeatures, EncoderCache)> {
        let n = cloud.len();
        if n == 0 {
            return Err(Error::DegenerateHierarchy("empty input scene".into()));
        }
        let input = self.input_features(cloud)?;
        let (f0, scale0) = self.scale_mlps[0].forward_cached(store, &input);
        let mut scales = vec![ScaleFeatures {
            positions: cloud.positions().to_vec(),
            features: f0,
            children: Vec::new(),
        }];
        let mut ancestors = vec![(0..n).collect::<Vec<_>>()];
        let mut pooled = Vec::with_capacity(self.voxel_sizes.len());
        for (i, &vs) in self.voxel_sizes.iter().enumerate() {
            let prev = &scales[i];
            let grid = voxel_grid(&prev.positions, vs)?;
            if grid.centroids.is_empty() {
                return Err(Error::DegenerateHierarchy(format!(
                    "scale {} is empty",
                    i + 1
                )));
            }
            let rows = self.child_inputs(prev, &grid.centroids, &grid.assignment, vs)?;
            let (h, cache) = self.scale_mlps[i + 1].forward_cached(store, &rows);
            let feats = mean_pool(&h, &grid.members);
            let anc = ancestors[i].iter().map(|&a| grid.assignment[a]).collect();
            ancestors.push(anc);
            pooled.push(cache);
            scales.push(ScaleFeatures {
                positions: grid.centroids,
                features: feats,
                children: grid.members,
            });
        }

        let pe = fourier_pe(cloud.positions(), self.pe_bands, self.query_dim)?;
        let pe_used = pe_columns(&pe, self.pe_bands);
        let mut full = self.pe_readout.forward(store, &pe_used);
        for (i, scale) in scales.iter().enumerate() {
            if i > 0 && self.kind == EncoderKind::Flat {
                continue;
            }
            let g = self.readouts[i].forward(store, &scale.features);
            for (j, &a) in ancestors[i].iter().enumerate() {
                for (o, v) in full.row_mut(j).iter_mut().zip(g.row(a)) {
                    *o += v;
                }
            }
        }
        Ok((
            MultiScaleFeatures {
                scales,
                scene_tokens: full.add(&pe),
                full,
                positions: cloud.positions().to_vec(),
                ancestors,
                position_encoding: pe_used,
            },
            EncoderCache { scale0, pooled },
        ))
    }

    fn child_inputs(
        &self,
        prev: &ScaleFeatures,
        centroids: &[[f64; 3]],
        assignment: &[usize],
        voxel: f64,
    ) -> Result<Tensor2> {
        let d = prev.features.cols();
        let mut rows = Tensor2::zeros(prev.positions.len(), d + 3);
        for (c, p) in prev.positions.iter().enumerate() {
            let v = centroids[assignment[c]];
            let row = rows.row_mut(c);
            row[..d].copy_from_slice(prev.features.row(c));
            for a in 0..3 {
                row[d + a] = (p[a] - v[a]) / voxel;
            }
        }
        Ok(rows)
    }

    /// Backpropagates gradients w.r.t. `F^L` and (optionally) each pooled
    /// scale's features into the encoder parameters.
    pub fn backward(
        &self,
        store: &ParamStore,
        feats: &MultiScaleFeatures,
        cache: &EncoderCache,
        d_full: &Tensor2,
        d_scales: &[Option<Tensor2>],
        grads: &mut ParamStore,
    ) {
        self.pe_readout
            .backward_params(&feats.position_encoding, d_full, grads);

        let levels = feats.scales.len();
        let mut d_feat: Vec<Tensor2> = feats
            .scales
            .iter()
            .map(|s| Tensor2::zeros(s.features.rows(), s.features.cols()))
            .collect();
        for (i, scale) in feats.scales.iter().enumerate() {
            if let Some(Some(ds)) = d_scales.get(i) {
                d_feat[i].add_assign(ds);
            }
            if i > 0 && self.kind == EncoderKind::Flat {
                continue;
            }
            let mut dg = Tensor2::zeros(scale.features.rows(), self.query_dim);
            dg.scatter_add_rows(&feats.ancestors[i], d_full);
            let df = self.readouts[i].backward(store, &scale.features, &dg, grads);
            d_feat[i].add_assign(&df);
        }
        for i in (1..levels).rev() {
            let scale = &feats.scales[i];
            let prev_rows = feats.scales[i - 1].features.rows();
            let d_prev = feats.scales[i - 1].features.cols();
            let mut dh = Tensor2::zeros(prev_rows, scale.features.cols());
            for (v, members) in scale.children.iter().enumerate() {
                let inv = 1.0 / members.len() as f64;
                let src = d_feat[i].row(v).to_vec();
                for &c in members {
                    for (o, s) in dh.row_mut(c).iter_mut().zip(&src) {
                        *o = s * inv;
                    }
                }
            }
            let d_rows = self.scale_mlps[i].backward(store, &cache.pooled[i - 1], &dh, grads);
            let lower = &mut d_feat[i - 1];
            for c in 0..prev_rows {
                for (o, s) in lower.row_mut(c).iter_mut().zip(&d_rows.row(c)[..d_prev]) {
                    *o += s;
                }
            }
        }
        self.scale_mlps[0].backward(store, &cache.scale0, &d_feat[0], grads);
    }
}

fn pe_columns(pe: &Tensor2, bands: usize) -> Tensor2 {
    let used = 6 * bands;
    if used == 0 {
        return Tensor2::zeros(pe.rows(), 1);
    }
    Tensor2::from_fn(pe.rows(), used, |r, c| pe.get(r, c))
}

fn mean_pool(h: &Tensor2, members: &[Vec<usize>]) -> Tensor2 {
    let mut out = Tensor2::zeros(members.len(), h.cols());
    for (v, m) in members.iter().enumerate() {
        let row = out.row_mut(v);
        for &c in m {
            for (o, x) in row.iter_mut().zip(h.row(c)) {
                *o += x;
            }
        }
        let inv = 1.0 / m.len() as f64;
        row.iter_mut().for_each(|x| *x *= inv);
    }
    out
}

/// Builds initial query features: each row is the mean of the `k` nearest
/// `F^L` rows to the click.
pub fn encode_queries(
    clicks: &ClickSet,
    index: &SpatialIndex,
    feats: &MultiScaleFeatures,
    k: usize,
) -> Result<QueryFeatures> {
    if clicks.is_empty() {
        return Err(Error::NoClicks);
    }
    let d = feats.full.cols();
    let mut q = Tensor2::zeros(clicks.len(), d);
    let mut lookup = Vec::with_capacity(clicks.len());
    for (r, c) in clicks.clicks.iter().enumerate() {
        let nn = if k == 1 {
            match c.point_index {
                Some(j) if j < index.len() && index.points()[j] == c.position() => vec![j],
                _ => index.knn(&c.position(), 1)?,
            }
        } else {
            index.knn(&c.position(), k)?
        };
        let inv = 1.0 / nn.len() as f64;
        let row = q.row_mut(r);
        for &j in &nn {
            for (o, v) in row.iter_mut().zip(feats.full.row(j)) {
                *o += v;
            }
        }
        if nn.len() > 1 {
            row.iter_mut().for_each(|v| *v *= inv);
        }
        lookup.push(nn);
    }
    Ok(QueryFeatures {
        queries: q,
        click_positions: clicks.positions(),
        groups: clicks.groups(),
        lookup,
    })
}

/// Adds the gradient of the initial queries back onto `dF^L`.
pub fn encode_queries_backward(queries: &QueryFeatures, d_queries: &Tensor2, d_full: &mut Tensor2) {
    for (r, nn) in queries.lookup.iter().enumerate() {
        let inv = 1.0 / nn.len() as f64;
        for &j in nn {
            for (o, v) in d_full.row_mut(j).iter_mut().zip(d_queries.row(r)) {
                *o += v * inv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::normalize_cloud;
    use crate::model::ModelParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                [
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                ]
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn singleton_cloud() {
        let model = ModelParams::new(ModelConfig::default()).unwrap();
        let cloud = PointCloud::new(vec![[0.0; 3]]).unwrap();
        let f = model.encoder.encode(&model.store, &cloud).unwrap();
        assert_eq!(f.scale_count(), 5);
        assert!(f.scales.iter().all(|s| s.positions.len() == 1));
        assert_eq!(f.full.shape(), (1, 256));
    }

    #[test]
    fn default_shapes() {
        let model = ModelParams::new(ModelConfig::default()).unwrap();
        let cloud = random_cloud(1000, 1);
        let f = model.encoder.encode(&model.store, &cloud).unwrap();
        assert_eq!(f.scales.len(), 4);
        let dims = [32, 64, 128, 256];
        assert_eq!(f.scales[0].features.shape(), (1000, 32));
        for i in 0..4 {
            assert_eq!(f.scales[i].features.cols(), dims[i]);
            assert_eq!(f.scales[i].features.rows(), f.scales[i].positions.len());
            if i > 0 {
                assert!(f.scales[i].positions.len() < f.scales[i - 1].positions.len());
            }
        }
        assert_eq!(f.full.shape(), (1000, 256));
        assert!(f.full.is_finite());
    }

    #[test]
    fn translation_before_normalization_is_invisible() {
        let model = ModelParams::new(ModelConfig::tiny(3)).unwrap();
        let cloud = random_cloud(200, 2).map_positions(|p| [p[0] * 3.0, p[1] * 3.0, p[2]]);
        let moved = cloud.map_positions(|p| [p[0] + 12.5, p[1] - 7.0, p[2] + 3.25]);
        let (a, _) = normalize_cloud(&cloud);
        let (b, _) = normalize_cloud(&moved);
        let fa = model.encoder.encode(&model.store, &a).unwrap();
        let fb = model.encoder.encode(&model.store, &b).unwrap();
        let diff = fa
            .full
            .data()
            .iter()
            .zip(fb.full.data())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn query_lookup() {
        let model = ModelParams::new(ModelConfig::tiny(2)).unwrap();
        let cloud = random_cloud(50, 3);
        let f = model.encoder.encode(&model.store, &cloud).unwrap();
        let index = SpatialIndex::new(cloud.positions());
        let clicks = ClickSet::new(vec![
            crate::sampling::Click::new(cloud.positions()[7], 0),
            crate::sampling::Click::new(cloud.positions()[7], 1),
        ]);
        let q = encode_queries(&clicks, &index, &f, 1).unwrap();
        assert_eq!(q.queries.row(0), f.full.row(7));
        assert_eq!(q.queries.row(0), q.queries.row(1));
        let all = encode_queries(&clicks, &index, &f, 50).unwrap();
        let mean = f.full.column_mean();
        for (a, b) in all.queries.row(0).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(encode_queries(&clicks, &index, &f, 51).is_err());
    }

    #[test]
    fn colors_required_when_configured() {
        let cfg = ModelConfig {
            use_colors: true,
            ..ModelConfig::tiny(2)
        };
        let model = ModelParams::new(cfg).unwrap();
        let cloud = random_cloud(10, 4);
        assert!(model.encoder.encode(&model.store, &cloud).is_err());
    }
}
