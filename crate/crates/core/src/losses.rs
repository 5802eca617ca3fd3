//! Training objectives and cluster-to-instance target assignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{argmax_rows, build_backbone, to_points};
use crate::clustering::{cluster_homogeneous, Cluster, ClusteringConfig};
use crate::dynamic::{build_decoder, build_generator, position_embed};
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::model::ModelConfig;
use crate::scene::PointScene;
use crate::tensor::{Evaluation, Graph, NodeId, Tensor, TensorMap};

pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub ctr: f64,
    pub mask: f64,
    pub dice: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(seg: f64, ctr: f64, mask: f64, dice: f64) -> Self {
        Self {
            seg,
            ctr,
            mask,
            dice,
            total: seg + ctr + mask + dice,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.seg, self.ctr, self.mask, self.dice, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidNorm {
    /// Euclidean length of the residual.
    #[default]
    Euclidean,
    /// Sum of absolute residual components.
    L1,
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= num_classes) {
        Some(i) => Err(Error::LabelOutOfRange {
            index: i,
            label: labels[i] as i64,
        }),
        None => Ok(()),
    }
}

/// Mean cross-entropy of `logits [N, C]` against `labels`.
pub fn build_semantic_loss(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (n, c) = (g.shape(logits)[0], g.shape(logits)[1]);
    if labels.len() != n {
        return Err(Error::LengthMismatch(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    check_labels(labels, c)?;
    let mut onehot = vec![0.0; n * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = 1.0;
    }
    let onehot = g.constant(Tensor::new(&[n, c], onehot)?);
    let lsm = g.log_softmax(logits)?;
    let picked = g.mul(lsm, onehot)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// Mean over `valid` points of `‖p + o − ctr‖`; a constant zero when no point
/// is valid.
pub fn build_centroid_loss(
    g: &mut Graph,
    coords: &[Point3],
    offsets: NodeId,
    gt_centroids: &[Point3],
    valid: &[bool],
    norm: CentroidNorm,
) -> Result<NodeId> {
    let n = coords.len();
    if g.shape(offsets) != [n, 3] || gt_centroids.len() != n || valid.len() != n {
        return Err(Error::LengthMismatch(format!(
            "{n} coords, offsets {:?}, {} centroids, {} flags",
            g.shape(offsets),
            gt_centroids.len(),
            valid.len()
        )));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
    if rows.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let target: Vec<f64> = rows
        .iter()
        .flat_map(|&i| (0..3).map(move |k| gt_centroids[i][k] - coords[i][k]))
        .collect();
    let m = rows.len();
    let target = g.constant(Tensor::new(&[m, 3], target)?);
    let o = g.gather_rows(offsets, rows)?;
    let resid = g.sub(o, target)?;
    let per_point = match norm {
        CentroidNorm::Euclidean => {
            let sq = g.mul(resid, resid)?;
            let s = g.sum_last(sq)?;
            g.sqrt(s)
        }
        CentroidNorm::L1 => {
            let a = g.abs(resid);
            g.sum_last(a)?
        }
    };
    Ok(g.mean(per_point))
}

/// Mean binary cross-entropy with logits `[M]` against a binary target.
pub fn build_bce(g: &mut Graph, logits: NodeId, target: &[bool]) -> Result<NodeId> {
    let m = g.shape(logits)[0];
    let q = g.constant(Tensor::new(&[m], bools(target))?);
    // softplus(z) − q·z == −[q log σ(z) + (1−q) log(1−σ(z))]
    let sp = g.softplus(logits);
    let qz = g.mul(q, logits)?;
    let l = g.sub(sp, qz)?;
    Ok(g.mean(l))
}

/// `1 − 2Σpq / (Σp² + Σq² + ε)` with `p = σ(logits)`.
pub fn build_dice(g: &mut Graph, logits: NodeId, target: &[bool]) -> Result<NodeId> {
    let m = g.shape(logits)[0];
    let qv = bools(target);
    let qq: f64 = qv.iter().sum();
    let q = g.constant(Tensor::new(&[m], qv)?);
    let p = g.sigmoid(logits);
    let pq = g.mul(p, q)?;
    let inter = g.sum(pq);
    let pp = g.mul(p, p)?;
    let pp = g.sum(pp);
    let denom = g.shift(pp, qq + DICE_EPS);
    let ratio = g.div(inter, denom)?;
    let ratio = g.scale(ratio, -2.0);
    Ok(g.shift(ratio, 1.0))
}

fn bools(b: &[bool]) -> Vec<f64> {
    b.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
}

fn mean_of_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let Some((&first, rest)) = nodes.split_first() else {
        return Ok(g.scalar(0.0));
    };
    let mut acc = first;
    for &n in rest {
        acc = g.add(acc, n)?;
    }
    Ok(g.scale(acc, 1.0 / nodes.len() as f64))
}

/// Ground-truth instance holding the plurality of each cluster's members.
/// Ties go to the smaller id, with `-1` (stuff) counted like any other id;
/// a stuff plurality yields `None`.
pub fn assign_targets(clusters: &[Cluster], gt_instance: &[i32]) -> Vec<Option<i32>> {
    clusters
        .iter()
        .map(|c| {
            let mut hist: BTreeMap<i32, usize> = BTreeMap::new();
            for &m in &c.members {
                *hist.entry(gt_instance[m]).or_default() += 1;
            }
            let mut best: Option<(i32, usize)> = None;
            for (&id, &n) in &hist {
                if best.is_none_or(|(_, b)| n > b) {
                    best = Some((id, n));
                }
            }
            best.and_then(|(id, _)| (id >= 0).then_some(id))
        })
        .collect()
}

/// Full-scene binary masks for the assigned targets.
pub fn target_masks(targets: &[Option<i32>], gt_instance: &[i32]) -> Vec<Option<Vec<bool>>> {
    targets
        .iter()
        .map(|t| t.map(|id| gt_instance.iter().map(|&g| g == id).collect()))
        .collect()
}

/// Points whose predicted label matches the cluster's.
fn on_category(l_seg: &[usize], label: usize) -> Vec<usize> {
    (0..l_seg.len()).filter(|&i| l_seg[i] == label).collect()
}

/// Masked BCE averaged per cluster over on-category points, then over the
/// clusters that have a target. `logits[z]` holds all `N` points.
pub fn mask_loss(
    logits: &[Vec<f64>],
    targets: &[Option<Vec<bool>>],
    l_seg: &[usize],
    cluster_labels: &[usize],
) -> Result<f64> {
    per_cluster_loss(logits, targets, l_seg, cluster_labels, build_bce)
}

/// Dice over on-category points, averaged over clusters with a target.
pub fn dice_loss(
    logits: &[Vec<f64>],
    targets: &[Option<Vec<bool>>],
    l_seg: &[usize],
    cluster_labels: &[usize],
) -> Result<f64> {
    per_cluster_loss(logits, targets, l_seg, cluster_labels, build_dice)
}

fn per_cluster_loss(
    logits: &[Vec<f64>],
    targets: &[Option<Vec<bool>>],
    l_seg: &[usize],
    cluster_labels: &[usize],
    term: fn(&mut Graph, NodeId, &[bool]) -> Result<NodeId>,
) -> Result<f64> {
    if logits.len() != targets.len() || logits.len() != cluster_labels.len() {
        return Err(Error::LengthMismatch(
            "per-cluster inputs differ in length".into(),
        ));
    }
    let mut g = Graph::new();
    let mut terms = Vec::new();
    let mut included = 0;
    for ((z, t), &label) in logits.iter().zip(targets).zip(cluster_labels) {
        let Some(t) = t else { continue };
        included += 1;
        let on = on_category(l_seg, label);
        if on.is_empty() {
            continue;
        }
        let zv = g.constant(Tensor::vector(on.iter().map(|&i| z[i]).collect()));
        let tv: Vec<bool> = on.iter().map(|&i| t[i]).collect();
        terms.push(term(&mut g, zv, &tv)?);
    }
    if included == 0 {
        return Ok(0.0);
    }
    let s = mean_of_nodes(&mut g, &terms)?;
    // empty-support clusters count in the denominator with zero loss
    let s = g.scale(s, terms.len() as f64 / included as f64);
    Ok(g.evaluate(&TensorMap::new())?.value(s).item())
}

pub fn semantic_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let l = build_semantic_loss(&mut g, x, labels)?;
    Ok(g.evaluate(&TensorMap::new())?.value(l).item())
}

pub fn centroid_loss(
    coords: &[Point3],
    offsets: &[Point3],
    gt_centroids: &[Point3],
    valid: &[bool],
    norm: CentroidNorm,
) -> Result<f64> {
    if offsets.len() != coords.len() {
        return Err(Error::LengthMismatch(format!(
            "{} offsets for {} points",
            offsets.len(),
            coords.len()
        )));
    }
    if coords.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let o = g.constant(Tensor::new(
        &[offsets.len(), 3],
        offsets.iter().flatten().copied().collect(),
    )?);
    let l = build_centroid_loss(&mut g, coords, o, gt_centroids, valid, norm)?;
    Ok(g.evaluate(&TensorMap::new())?.value(l).item())
}

/// Knobs of the per-scene loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub clustering: ClusteringConfig,
    pub centroid_norm: CentroidNorm,
    /// Clusters smaller than this get no filter during training.
    pub min_cluster_size: usize,
    /// At most this many clusters (largest first) per scene.
    pub max_clusters: usize,
}

impl LossConfig {
    pub fn new(clustering: ClusteringConfig) -> Self {
        Self {
            clustering,
            centroid_norm: CentroidNorm::Euclidean,
            min_cluster_size: 10,
            max_clusters: 16,
        }
    }
}

/// A scene's loss graph with its evaluation. Clustering ran on the forward
/// values and is baked into the graph's structure.
pub struct SceneLoss {
    pub graph: Graph,
    pub eval: Evaluation,
    pub seg: NodeId,
    pub ctr: NodeId,
    pub mask: Option<NodeId>,
    pub dice: Option<NodeId>,
    pub total: NodeId,
    pub clusters: Vec<Cluster>,
    pub targets: Vec<Option<i32>>,
}

impl SceneLoss {
    pub fn breakdown(&self) -> LossBreakdown {
        let v = |n: Option<NodeId>| n.map_or(0.0, |n| self.eval.value(n).item());
        LossBreakdown::new(
            v(Some(self.seg)),
            v(Some(self.ctr)),
            v(self.mask),
            v(self.dice),
        )
    }

    pub fn gradients(&self) -> Result<TensorMap> {
        self.graph.backward(&self.eval, self.total)
    }
}

/// Clusters used for training: the `max_clusters` largest of size at least
/// `min_cluster_size`, returned in their original order.
pub fn training_clusters(clusters: Vec<Cluster>, cfg: &LossConfig) -> Vec<Cluster> {
    let mut keep: Vec<(usize, Cluster)> = clusters
        .into_iter()
        .enumerate()
        .filter(|(_, c)| c.size() >= cfg.min_cluster_size)
        .collect();
    keep.sort_by(|a, b| b.1.size().cmp(&a.1.size()).then(a.0.cmp(&b.0)));
    keep.truncate(cfg.max_clusters);
    keep.sort_by_key(|(i, _)| *i);
    keep.into_iter().map(|(_, c)| c).collect()
}

/// Forward pass and loss graph for one scene. With `warmup`, only the
/// semantic and centroid terms are built.
pub fn scene_loss(
    scene: &PointScene,
    params: &TensorMap,
    model: &ModelConfig,
    cfg: &LossConfig,
    warmup: bool,
) -> Result<SceneLoss> {
    let mut g = Graph::new();
    let nodes = build_backbone(&mut g, scene, model)?;
    let seg = build_semantic_loss(&mut g, nodes.semantic_logits, &scene.gt_semantic)?;
    let ctr = build_centroid_loss(
        &mut g,
        &scene.coords,
        nodes.offsets,
        &scene.gt_centroids,
        &scene.valid_for_offsets(),
        cfg.centroid_norm,
    )?;
    let mut eval = g.evaluate(params)?;
    let mut out = SceneLoss {
        graph: g,
        eval: Evaluation::default(),
        seg,
        ctr,
        mask: None,
        dice: None,
        total: seg,
        clusters: Vec::new(),
        targets: Vec::new(),
    };
    let g = &mut out.graph;
    if !warmup {
        let l_seg = argmax_rows(eval.value(nodes.semantic_logits));
        let offsets = to_points(eval.value(nodes.offsets));
        let clusters = cluster_homogeneous(&scene.coords, &offsets, &l_seg, &cfg.clustering)?;
        let clusters = training_clusters(clusters, cfg);
        let targets = assign_targets(&clusters, &scene.gt_instance);
        let mut bce_terms = Vec::new();
        let mut dice_terms = Vec::new();
        let mut included = 0;
        for (c, t) in clusters.iter().zip(&targets) {
            let Some(id) = t else { continue };
            included += 1;
            let on = on_category(&l_seg, c.label);
            if on.is_empty() {
                continue;
            }
            let filters = build_generator(g, nodes.features, c, &scene.coords, model)?;
            let pos = position_embed(&scene.coords, &c.centroid);
            let logits =
                build_decoder(g, nodes.mask_features, &pos, filters, &model.layout()?, &on)?;
            let target: Vec<bool> = on.iter().map(|&i| scene.gt_instance[i] == *id).collect();
            bce_terms.push(build_bce(g, logits, &target)?);
            dice_terms.push(build_dice(g, logits, &target)?);
        }
        let scale = if included == 0 {
            0.0
        } else {
            bce_terms.len() as f64 / included as f64
        };
        let mask = mean_of_nodes(g, &bce_terms)?;
        let mask = g.scale(mask, scale);
        let dice = mean_of_nodes(g, &dice_terms)?;
        let dice = g.scale(dice, scale);
        out.mask = Some(mask);
        out.dice = Some(dice);
        out.clusters = clusters;
        out.targets = targets;
    }
    let mut total = g.add(seg, ctr)?;
    if let (Some(m), Some(d)) = (out.mask, out.dice) {
        total = g.add(total, m)?;
        total = g.add(total, d)?;
    }
    g.set_output("loss", total);
    out.total = total;
    eval.extend(g, params)?;
    out.eval = eval;
    Ok(out)
}

/// Loss breakdown for one scene.
pub fn total_loss(
    scene: &PointScene,
    params: &TensorMap,
    model: &ModelConfig,
    cfg: &LossConfig,
    warmup: bool,
) -> Result<LossBreakdown> {
    Ok(scene_loss(scene, params, model, cfg, warmup)?.breakdown())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_c() {
        let l = semantic_loss(&Tensor::zeros(&[3, 4]), &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            semantic_loss(&Tensor::zeros(&[1, 4]), &[4]),
            Err(Error::LabelOutOfRange { index: 0, label: 4 })
        ));
    }

    #[test]
    fn three_four_five() {
        let l = centroid_loss(
            &[[0.0; 3], [1.0; 3]],
            &[[3.0, 4.0, 0.0], [0.0; 3]],
            &[[0.0; 3], [9.0; 3]],
            &[true, false],
            CentroidNorm::Euclidean,
        )
        .unwrap();
        assert!((l - 5.0).abs() < 1e-12);
        let l1 = centroid_loss(
            &[[0.0; 3]],
            &[[3.0, -4.0, 0.0]],
            &[[0.0; 3]],
            &[true],
            CentroidNorm::L1,
        )
        .unwrap();
        assert!((l1 - 7.0).abs() < 1e-12);
        let none = centroid_loss(
            &[[0.0; 3]],
            &[[3.0, 4.0, 0.0]],
            &[[0.0; 3]],
            &[false],
            CentroidNorm::Euclidean,
        );
        assert_eq!(none.unwrap(), 0.0);
    }

    #[test]
    fn plurality_assignment() {
        let c = |m: Vec<usize>| Cluster {
            members: m,
            centroid: [0.0; 3],
            label: 1,
        };
        let gt = [0, 0, 0, 1, 1, -1, -1, -1, 2];
        let t = assign_targets(
            &[c(vec![0, 1, 2, 3, 4]), c(vec![5, 6, 7, 8]), c(vec![3, 8])],
            &gt,
        );
        assert_eq!(t, vec![Some(0), None, Some(1)]);
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let l_seg = vec![1, 1, 2];
        let logits = vec![vec![0.0, 0.0, 50.0]];
        let target = vec![Some(vec![true, false, true])];
        let l = mask_loss(&logits, &target, &l_seg, &[1]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert_eq!(mask_loss(&logits, &[None], &l_seg, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn dice_extremes() {
        let l_seg = vec![1; 4];
        let same = dice_loss(
            &[vec![40.0, 40.0, -40.0, -40.0]],
            &[Some(vec![true, true, false, false])],
            &l_seg,
            &[1],
        );
        assert!(same.unwrap() < 1e-6);
        let disjoint = dice_loss(
            &[vec![-40.0, -40.0, 40.0, 40.0]],
            &[Some(vec![true, true, false, false])],
            &l_seg,
            &[1],
        );
        assert!((disjoint.unwrap() - 1.0).abs() < 1e-6);
    }
}
