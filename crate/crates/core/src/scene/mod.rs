//! Synthetic indoor scenes: surface-sampled objects resting on a floor, with
//! per-point ground truth for semantics, instances and instance centroids.

mod generate;
mod io;

pub use generate::{
    generate_dataset, generate_scene, generate_scene_objects, oracle_predictions, scene_seed,
    SceneObject, ShapeKind,
};
pub use io::{read_scene, write_scene, SCENE_VERSION};

use serde::{Deserialize, Serialize};

use crate::clustering::ClusteringConfig;
use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Semantic id of the floor.
pub const FLOOR: usize = 0;

/// Number of per-point feature channels: position, surface normal, and a
/// class-correlated channel.
pub const FEATURE_DIM: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub thing_classes: usize,
    /// Inclusive range of object instances per scene.
    pub instances: (usize, usize),
    pub shapes: Vec<ShapeKind>,
    /// Range of characteristic half-sizes in meters; class `k` sits at a
    /// fixed point of the range, instances jitter by ±10% around it.
    pub size_range: (f64, f64),
    /// Minimum centroid separation between instances of one class.
    pub d_min: f64,
    /// Floor points per square meter.
    pub floor_density: f64,
    pub walls: bool,
    /// Standard deviation of Gaussian noise added to oracle offsets.
    pub offset_noise: f64,
    /// Probability that a point's class channel carries another class.
    pub label_noise: f64,
    /// Standard deviation of the class channel around its class value.
    pub feature_noise: f64,
    pub points_per_instance: (usize, usize),
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            thing_classes: 4,
            instances: (4, 8),
            shapes: vec![ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Ellipsoid],
            size_range: (0.2, 0.45),
            d_min: 1.0,
            floor_density: 12.0,
            walls: false,
            offset_noise: 0.0,
            label_noise: 0.0,
            feature_noise: 0.05,
            points_per_instance: (120, 220),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.thing_classes == 0 {
            return bad("need at least one thing class");
        }
        if self.instances.0 > self.instances.1
            || self.points_per_instance.0 > self.points_per_instance.1
        {
            return bad("inverted range");
        }
        if self.points_per_instance.0 == 0 {
            return bad("instances need at least one point");
        }
        if !(self.d_min > 0.0) {
            return bad("d_min must be positive");
        }
        if !(self.size_range.0 > 0.0 && self.size_range.0 <= self.size_range.1) {
            return bad("bad size range");
        }
        if self.shapes.is_empty() {
            return bad("empty shape set");
        }
        let noise = [
            self.offset_noise,
            self.label_noise,
            self.feature_noise,
            self.floor_density,
        ];
        if noise.iter().any(|v| !(*v >= 0.0)) || self.label_noise > 1.0 {
            return bad("noise parameters must be non-negative");
        }
        Ok(())
    }

    /// Semantic id of walls when enabled.
    pub fn wall_label(&self) -> Option<usize> {
        self.walls.then_some(self.thing_classes + 1)
    }

    pub fn num_classes(&self) -> usize {
        self.thing_classes + 1 + usize::from(self.walls)
    }

    pub fn stuff_labels(&self) -> Vec<usize> {
        std::iter::once(FLOOR).chain(self.wall_label()).collect()
    }

    /// Clustering configuration matching this scene family.
    pub fn clustering(&self, radius: f64) -> ClusteringConfig {
        ClusteringConfig::new(radius, self.num_classes(), self.stuff_labels())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointScene {
    pub coords: Vec<Point3>,
    /// Row-major `N × feature_dim`.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub gt_semantic: Vec<usize>,
    /// `-1` for stuff points.
    pub gt_instance: Vec<i32>,
    /// Mean coordinate of each point's instance; stuff points carry their own
    /// coordinate.
    pub gt_centroids: Vec<Point3>,
    pub seed: u64,
    pub config: Option<SceneConfig>,
}

impl PointScene {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Ground-truth instance ids in ascending order.
    pub fn instance_ids(&self) -> Vec<i32> {
        let mut ids: Vec<i32> = self
            .gt_instance
            .iter()
            .copied()
            .filter(|&i| i >= 0)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Boolean mask of instance `id`.
    pub fn instance_mask(&self, id: i32) -> Vec<bool> {
        self.gt_instance.iter().map(|&i| i == id).collect()
    }

    /// Points that count for centroid supervision (instance members).
    pub fn valid_for_offsets(&self) -> Vec<bool> {
        self.gt_instance.iter().map(|&i| i >= 0).collect()
    }

    /// Checks structural invariants and the centroid-consistency property.
    pub fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        if n == 0 {
            return Err(Error::Invalid("scene has no points".into()));
        }
        if self.features.len() != n * self.feature_dim
            || self.gt_semantic.len() != n
            || self.gt_instance.len() != n
            || self.gt_centroids.len() != n
        {
            return Err(Error::LengthMismatch("scene arrays disagree on N".into()));
        }
        if let Some((i, &l)) = self
            .gt_semantic
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= self.num_classes)
        {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: l as i64,
            });
        }
        for id in self.instance_ids() {
            let c = mean_of(
                self.gt_instance
                    .iter()
                    .enumerate()
                    .filter(|(_, &g)| g == id)
                    .map(|(i, _)| &self.coords[i]),
            );
            for i in (0..n).filter(|&i| self.gt_instance[i] == id) {
                if self.gt_centroids[i] != c {
                    return Err(Error::Invalid(format!(
                        "point {i} centroid disagrees with instance {id} mean"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Mean of a point sequence, summed in iteration order.
pub(crate) fn mean_of<'a>(points: impl Iterator<Item = &'a Point3>) -> Point3 {
    let mut s = [0.0; 3];
    let mut n = 0usize;
    for p in points {
        for k in 0..3 {
            s[k] += p[k];
        }
        n += 1;
    }
    [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64]
}
