//! Inference: heads, clustering, per-cluster decoding, scoring, size filter
//! and mask NMS.

mod io;

pub use io::{mask_from_rle, read_predictions, rle_encode, write_predictions, PredictionRecord};

use serde::{Deserialize, Serialize};

use crate::backbone::{argmax_rows, forward_backbone, softmax_rows, to_points};
use crate::clustering::{cluster_homogeneous, Cluster, ClusteringConfig};
use crate::dynamic::{
    category_mask, decode_instance, generate_filters, position_embed, voxelize_cluster,
};
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::model::Model;
use crate::scene::PointScene;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    pub mask: Vec<bool>,
    pub category: usize,
    pub score: f64,
    pub source_cluster: usize,
}

impl InstancePrediction {
    pub fn size(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub clustering: ClusteringConfig,
    /// Clusters with fewer points are dropped before decoding.
    pub min_cluster: usize,
    pub nms_iou: f64,
}

impl InferenceConfig {
    pub fn new(clustering: ClusteringConfig) -> Self {
        Self {
            min_cluster: clustering.min_report_size,
            clustering,
            nms_iou: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.clustering.validate()?;
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Invalid(format!(
                "nms threshold {} outside (0, 1]",
                self.nms_iou
            )));
        }
        Ok(())
    }
}

/// `|a ∩ b| / |a ∪ b|`, zero when both are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(format!(
            "masks of {} and {} points",
            a.len(),
            b.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mean probability of class `c` over the mask's points.
pub fn score_instance(mask: &[bool], probs: &Tensor, c: usize) -> Result<f64> {
    if mask.len() != probs.rows() {
        return Err(Error::LengthMismatch(format!(
            "{} mask flags for {} rows",
            mask.len(),
            probs.rows()
        )));
    }
    if c >= probs.cols() {
        return Err(Error::Invalid(format!("class {c} out of {}", probs.cols())));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        s += probs.row(i)[c];
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(s / n as f64)
}

/// Greedy class-agnostic suppression. Highest score first, ties to the
/// smaller source cluster; a prediction survives if its IoU with every kept
/// one is below `iou_threshold`.
pub fn nms(
    mut preds: Vec<InstancePrediction>,
    iou_threshold: f64,
) -> Result<Vec<InstancePrediction>> {
    preds.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.source_cluster.cmp(&b.source_cluster))
    });
    let mut kept: Vec<InstancePrediction> = Vec::new();
    for p in preds {
        let mut keep = true;
        for k in &kept {
            if mask_iou(&p.mask, &k.mask)? >= iou_threshold {
                keep = false;
                break;
            }
        }
        if keep {
            kept.push(p);
        }
    }
    Ok(kept)
}

/// Shared tail of inference: cluster the votes, drop small clusters, decode
/// each survivor with `decode`, score, and suppress.
pub fn infer_from_heads(
    coords: &[Point3],
    semantic_logits: &Tensor,
    offsets: &[Point3],
    cfg: &InferenceConfig,
    mut decode: impl FnMut(&Cluster, &[usize]) -> Result<Vec<bool>>,
) -> Result<Vec<InstancePrediction>> {
    cfg.validate()?;
    let labels = argmax_rows(semantic_logits);
    let probs = softmax_rows(semantic_logits);
    let clusters = cluster_homogeneous(coords, offsets, &labels, &cfg.clustering)?;
    let mut preds = Vec::new();
    for (z, c) in clusters.iter().enumerate() {
        if c.size() < cfg.min_cluster {
            continue;
        }
        let mask = decode(c, &labels)?;
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let score = score_instance(&mask, &probs, c.label)?;
        preds.push(InstancePrediction {
            mask,
            category: c.label,
            score,
            source_cluster: z,
        });
    }
    nms(preds, cfg.nms_iou)
}

/// Full model inference on one scene.
pub fn run_inference(
    scene: &PointScene,
    model: &Model,
    cfg: &InferenceConfig,
) -> Result<Vec<InstancePrediction>> {
    let out = forward_backbone(scene, &model.params, &model.config)?;
    let offsets = to_points(&out.offsets);
    infer_from_heads(
        &scene.coords,
        &out.semantic_logits,
        &offsets,
        cfg,
        |c, labels| {
            let grid = voxelize_cluster(c, &scene.coords, &out.features, model.config.grid)?;
            let fv = generate_filters(&grid, &model.params, &model.config)?;
            let pos = position_embed(&scene.coords, &c.centroid);
            let b_z = category_mask(labels, c.label);
            Ok(decode_instance(&out.mask_features, &pos, &fv, &b_z)?.mask)
        },
    )
}

/// Inference with given head outputs and the decoder replaced by cluster
/// membership.
pub fn run_oracle_inference(
    coords: &[Point3],
    semantic_logits: &Tensor,
    offsets: &[Point3],
    cfg: &InferenceConfig,
) -> Result<Vec<InstancePrediction>> {
    infer_from_heads(coords, semantic_logits, offsets, cfg, |c, _| {
        let mut m = vec![false; coords.len()];
        c.members.iter().for_each(|&i| m[i] = true);
        Ok(m)
    })
}

/// Instance set as sorted `(category, member list)` pairs, for comparing
/// outputs irrespective of order and scores.
pub fn instance_set(preds: &[InstancePrediction]) -> Vec<(usize, Vec<usize>)> {
    let mut s: Vec<(usize, Vec<usize>)> = preds
        .iter()
        .map(|p| {
            (
                p.category,
                (0..p.mask.len()).filter(|&i| p.mask[i]).collect(),
            )
        })
        .collect();
    s.sort();
    s
}
