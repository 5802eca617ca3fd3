use std::path::Path;

use anyhow::{bail, Context, Result};
use dynseg::losses::CentroidNorm;
use dynseg::train::TrainConfig;
use dynseg::{ModelConfig, SceneConfig};
use serde::{Deserialize, Serialize};

/// Built-in minimum reported cluster size.
pub const DEFAULT_MIN_CLUSTER: usize = 50;
/// Preset for synthetic scenes, whose objects carry 120-220 points.
pub const SYNTH_MIN_CLUSTER: usize = 10;

/// Everything that shapes an artifact. Paths are not part of it, so the same
/// settings written to two directories give identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Grouping radius in meters; `None` means a quarter of the scenes' `d_min`.
    pub radius: Option<f64>,
    pub nms_iou: f64,
    /// `None` picks the synthetic preset for generated scenes and the
    /// built-in default otherwise.
    pub min_cluster: Option<usize>,
    pub centroid_norm: CentroidNorm,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            radius: None,
            nms_iou: 0.3,
            min_cluster: None,
            centroid_norm: CentroidNorm::default(),
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Overrides taken from the command line; `None` leaves the file or default
/// value in place.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub radius: Option<f64>,
    pub grid: Option<usize>,
    pub mask_dim: Option<usize>,
    pub layers: Option<usize>,
    pub nms_iou: Option<f64>,
    pub min_cluster: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if o.radius.is_some() {
            self.radius = o.radius;
        }
        if let Some(v) = o.grid {
            self.model.grid = v;
        }
        if let Some(v) = o.mask_dim {
            self.model.mask_dim = v;
        }
        if let Some(v) = o.layers {
            self.model.decoder_layers = v;
        }
        if let Some(v) = o.nms_iou {
            self.nms_iou = v;
        }
        if o.min_cluster.is_some() {
            self.min_cluster = o.min_cluster;
        }
        // one seed drives generation, initialisation and batching
        self.scene.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.radius {
            if !(r > 0.0 && r.is_finite()) {
                bail!("radius must be positive, got {r}");
            }
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            bail!("nms-iou must lie in (0, 1], got {}", self.nms_iou);
        }
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn radius_for(&self, scene: Option<&SceneConfig>) -> f64 {
        self.radius
            .unwrap_or(0.25 * scene.unwrap_or(&self.scene).d_min)
    }

    pub fn min_cluster_for(&self, synthetic: bool) -> usize {
        self.min_cluster.unwrap_or(if synthetic {
            SYNTH_MIN_CLUSTER
        } else {
            DEFAULT_MIN_CLUSTER
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain data")
    }
}
