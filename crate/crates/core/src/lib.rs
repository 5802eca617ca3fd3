//! Point-cloud instance segmentation with per-cluster dynamic filters.

pub mod backbone;
pub mod checks;
pub mod clustering;
pub mod dynamic;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scene;
pub mod tensor;
pub mod train;

pub use clustering::{cluster_homogeneous, CentroidMode, Cluster, ClusteringConfig};
pub use error::{Error, Result};
pub use geometry::{GridIndex, Point3};
pub use model::{Model, ModelConfig};
pub use scene::{PointScene, SceneConfig};
pub use tensor::{Graph, NodeId, Tensor, TensorMap};
