//! Model configuration and the full parameter set (encoder + decoder + prototypes).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::numerics::{Activation, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Voxel-pooled multi-scale hierarchy.
    #[default]
    Hierarchical,
    /// Point-wise features only; coarse scales still exist for the decoder
    /// but do not feed the full-resolution map.
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Mean over points whose mask probability exceeds 0.5.
    #[default]
    Hard,
    /// Sigmoid-weighted mean over all points.
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature width of each encoder scale, finest first. Its length is the
    /// number of decoder stages.
    pub encoder_dims: Vec<usize>,
    /// Voxel edge (normalized units) for each pooled scale `1..L`.
    pub voxel_sizes: Vec<f64>,
    pub query_dim: usize,
    pub pe_bands: usize,
    pub num_classes: usize,
    pub num_prototypes: usize,
    pub prototype_dim: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    pub activation: Activation,
    pub use_colors: bool,
    /// Neighbours averaged per click when building initial queries.
    pub query_knn: usize,
    pub encoder: EncoderKind,
    pub pooling: Pooling,
    pub spatial_embedding: bool,
    pub semantic_embedding: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_dims: vec![32, 64, 128, 256],
            voxel_sizes: vec![0.05, 0.12, 0.3],
            query_dim: 256,
            pe_bands: 8,
            num_classes: 8,
            num_prototypes: 8,
            prototype_dim: 256,
            ffn_hidden: 512,
            head_hidden: 256,
            activation: Activation::Gelu,
            use_colors: false,
            query_knn: 1,
            encoder: EncoderKind::Hierarchical,
            pooling: Pooling::Hard,
            spatial_embedding: true,
            semantic_embedding: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// A few-thousand-parameter configuration for gradient checks and tests.
    pub fn tiny(stages: usize) -> Self {
        let dims: Vec<usize> = (0..stages).map(|i| 4 + 2 * i).collect();
        let voxels: Vec<f64> = (1..stages).map(|i| 0.12 * i as f64 + 0.1).collect();
        Self {
            encoder_dims: dims,
            voxel_sizes: voxels,
            query_dim: 8,
            pe_bands: 1,
            num_classes: 3,
            num_prototypes: 3,
            prototype_dim: 6,
            ffn_hidden: 10,
            head_hidden: 7,
            ..Self::default()
        }
    }

    /// Half-width decoder; trains roughly three times faster than the default.
    pub fn small() -> Self {
        Self {
            encoder_dims: vec![32, 64, 96, 128],
            query_dim: 128,
            prototype_dim: 128,
            ffn_hidden: 256,
            head_hidden: 128,
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.encoder_dims.len()
    }

    pub fn input_dim(&self) -> usize {
        if self.use_colors {
            7
        } else {
            4
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.encoder_dims.len();
        if l == 0 {
            return Err(Error::InvalidInput(
                "at least one encoder scale required".into(),
            ));
        }
        if self.voxel_sizes.len() + 1 != l {
            return Err(Error::InvalidInput(format!(
                "{} encoder scales need {} voxel sizes, got {}",
                l,
                l - 1,
                self.voxel_sizes.len()
            )));
        }
        if self
            .voxel_sizes
            .iter()
            .any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(Error::InvalidInput("voxel sizes must be positive".into()));
        }
        if self.voxel_sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "voxel sizes must increase with scale".into(),
            ));
        }
        if 6 * self.pe_bands > self.query_dim {
            return Err(Error::InvalidInput(format!(
                "{} Fourier bands do not fit in query dim {}",
                self.pe_bands, self.query_dim
            )));
        }
        if self.num_classes == 0 || self.num_classes > self.num_prototypes {
            return Err(Error::InvalidInput(format!(
                "{} classes need at least as many prototypes, got {}",
                self.num_classes, self.num_prototypes
            )));
        }
        if self.query_knn == 0 {
            return Err(Error::InvalidInput("query_knn must be ≥ 1".into()));
        }
        if [
            self.query_dim,
            self.prototype_dim,
            self.ffn_hidden,
            self.head_hidden,
        ]
        .iter()
        .chain(&self.encoder_dims)
        .any(|&d| d == 0)
        {
            return Err(Error::InvalidInput("all widths must be positive".into()));
        }
        Ok(())
    }
}

/// All trainable weights plus the layout that addresses them.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub version: String,
}

pub const MODEL_VERSION: &str = "clickseg-model-v1";

impl ModelParams {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&config, &mut store, &mut rng);
        let decoder = Decoder::new(&config, &mut store, &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            version: MODEL_VERSION.to_string(),
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Rounds every weight to the nearest `f32`, so checkpoints reload exactly.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.store.iter_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Logical parameter group of a tensor name, used for gradient reports.
    pub fn group_of(name: &str) -> String {
        let mut parts = name.split('.');
        let first = parts.next().unwrap_or_default();
        match first {
            "stage" => {
                let idx = parts.next().unwrap_or_default();
                let block = parts.next().unwrap_or_default();
                format!("stage.{idx}.{block}")
            }
            "encoder" => {
                let block = parts.next().unwrap_or_default();
                format!("encoder.{block}")
            }
            other => other.to_string(),
        }
    }
}
