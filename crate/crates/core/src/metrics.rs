//! Instance segmentation and box detection metrics over a set of scenes.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::pipeline::{mask_iou, InstancePrediction};
use crate::scene::PointScene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub mask: Vec<bool>,
    pub category: usize,
}

impl GtInstance {
    pub fn size(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Ground-truth instances of a scene, ordered by instance id.
pub fn gt_instances(scene: &PointScene) -> Vec<GtInstance> {
    scene
        .instance_ids()
        .into_iter()
        .map(|id| {
            let mask = scene.instance_mask(id);
            let first = mask
                .iter()
                .position(|&m| m)
                .expect("listed ids have points");
            GtInstance {
                category: scene.gt_semantic[first],
                mask,
            }
        })
        .collect()
}

/// Predictions and ground truth of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneResult {
    pub preds: Vec<InstancePrediction>,
    pub gts: Vec<GtInstance>,
}

/// Everything the matcher needs from one scene: scores, categories, and the
/// prediction × ground-truth IoU table.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchInput {
    pub scores: Vec<f64>,
    pub pred_categories: Vec<usize>,
    pub gt_categories: Vec<usize>,
    /// Row-major `preds × gts`.
    pub iou: Vec<f64>,
}

impl MatchInput {
    pub fn from_masks(r: &SceneResult) -> Result<Self> {
        let mut iou = Vec::with_capacity(r.preds.len() * r.gts.len());
        for p in &r.preds {
            for g in &r.gts {
                iou.push(mask_iou(&p.mask, &g.mask)?);
            }
        }
        Ok(Self {
            scores: r.preds.iter().map(|p| p.score).collect(),
            pred_categories: r.preds.iter().map(|p| p.category).collect(),
            gt_categories: r.gts.iter().map(|g| g.category).collect(),
            iou,
        })
    }

    pub fn from_boxes(r: &SceneResult, coords: &[Point3]) -> Result<Self> {
        let pb: Vec<Box3> = r
            .preds
            .iter()
            .map(|p| box_from_mask(&p.mask, coords))
            .collect::<Result<_>>()?;
        let gb: Vec<Box3> = r
            .gts
            .iter()
            .map(|g| box_from_mask(&g.mask, coords))
            .collect::<Result<_>>()?;
        Ok(Self {
            scores: r.preds.iter().map(|p| p.score).collect(),
            pred_categories: r.preds.iter().map(|p| p.category).collect(),
            gt_categories: r.gts.iter().map(|g| g.category).collect(),
            iou: pb
                .iter()
                .flat_map(|a| gb.iter().map(|b| box_iou(a, b)))
                .collect(),
        })
    }

    fn iou(&self, p: usize, g: usize) -> f64 {
        self.iou[p * self.gt_categories.len() + g]
    }
}

/// Class-`c` predictions across scenes as `(scene, pred)` in descending
/// score order; ties keep scene then prediction order.
fn ranked(inputs: &[MatchInput], c: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(s, m)| {
            (0..m.scores.len())
                .filter(move |&p| m.pred_categories[p] == c)
                .map(move |p| (s, p))
        })
        .collect();
    order.sort_by(|a, b| {
        inputs[b.0].scores[b.1]
            .total_cmp(&inputs[a.0].scores[a.1])
            .then(a.cmp(b))
    });
    order
}

/// Greedy matching in the given order: each prediction takes the unmatched
/// same-class ground truth of highest IoU, if that IoU reaches `threshold`.
fn match_flags(
    inputs: &[MatchInput],
    order: &[(usize, usize)],
    c: usize,
    threshold: f64,
) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = inputs
        .iter()
        .map(|m| vec![false; m.gt_categories.len()])
        .collect();
    order
        .iter()
        .map(|&(s, p)| {
            let m = &inputs[s];
            let mut best: Option<(usize, f64)> = None;
            for g in 0..m.gt_categories.len() {
                if m.gt_categories[g] != c || used[s][g] {
                    continue;
                }
                let v = m.iou(p, g);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                used[s][g] = true;
            }
            best.is_some()
        })
        .collect()
}

fn gt_count(inputs: &[MatchInput], c: usize) -> usize {
    inputs
        .iter()
        .map(|m| m.gt_categories.iter().filter(|&&g| g == c).count())
        .sum()
}

/// Area under the all-point interpolated precision/recall curve for class
/// `c`. `None` when the class has neither ground truth nor predictions.
pub fn average_precision_matched(inputs: &[MatchInput], threshold: f64, c: usize) -> Option<f64> {
    let n_gt = gt_count(inputs, c);
    let order = ranked(inputs, c);
    if n_gt == 0 {
        return (!order.is_empty()).then_some(0.0);
    }
    let tp = match_flags(inputs, &order, c, threshold);
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

pub fn average_precision(scenes: &[SceneResult], threshold: f64, c: usize) -> Result<Option<f64>> {
    let inputs: Vec<MatchInput> = scenes
        .iter()
        .map(MatchInput::from_masks)
        .collect::<Result<_>>()?;
    Ok(average_precision_matched(&inputs, threshold, c))
}

/// `(mCov, mWCov)` over every ground-truth instance.
pub fn coverage_metrics(scenes: &[SceneResult]) -> Result<(f64, f64)> {
    let (mut cov, mut wcov, mut count, mut total) = (0.0, 0.0, 0usize, 0usize);
    for r in scenes {
        for g in &r.gts {
            let mut best = 0.0f64;
            for p in &r.preds {
                best = best.max(mask_iou(&p.mask, &g.mask)?);
            }
            cov += best;
            wcov += g.size() as f64 * best;
            count += 1;
            total += g.size();
        }
    }
    if count == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    Ok((cov / count as f64, wcov / total as f64))
}

fn classes(inputs: &[MatchInput]) -> BTreeSet<usize> {
    inputs
        .iter()
        .flat_map(|m| m.gt_categories.iter().chain(&m.pred_categories).copied())
        .collect()
}

/// Class means of precision and recall at IoU 0.5. Precision averages over
/// classes with ground truth or predictions (no predictions counts as 0),
/// recall over classes with ground truth.
pub fn prec_rec_matched(inputs: &[MatchInput], threshold: f64) -> (f64, f64) {
    let (mut ps, mut np, mut rs, mut nr) = (0.0, 0usize, 0.0, 0usize);
    for c in classes(inputs) {
        let order = ranked(inputs, c);
        let tp = match_flags(inputs, &order, c, threshold)
            .iter()
            .filter(|&&t| t)
            .count();
        let n_gt = gt_count(inputs, c);
        ps += if order.is_empty() {
            0.0
        } else {
            tp as f64 / order.len() as f64
        };
        np += 1;
        if n_gt > 0 {
            rs += tp as f64 / n_gt as f64;
            nr += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    (mean(ps, np), mean(rs, nr))
}

pub fn prec_rec_at50(scenes: &[SceneResult]) -> Result<(f64, f64)> {
    let inputs: Vec<MatchInput> = scenes
        .iter()
        .map(MatchInput::from_masks)
        .collect::<Result<_>>()?;
    Ok(prec_rec_matched(&inputs, 0.5))
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub min: Point3,
    pub max: Point3,
}

impl Box3 {
    pub fn volume(&self) -> f64 {
        (0..3)
            .map(|k| (self.max[k] - self.min[k]).max(0.0))
            .product()
    }
}

pub fn box_from_mask(mask: &[bool], coords: &[Point3]) -> Result<Box3> {
    if mask.len() != coords.len() {
        return Err(Error::LengthMismatch(format!(
            "{} mask flags for {} points",
            mask.len(),
            coords.len()
        )));
    }
    let mut b = Box3 {
        min: [f64::INFINITY; 3],
        max: [f64::NEG_INFINITY; 3],
    };
    let mut any = false;
    for (p, _) in coords.iter().zip(mask).filter(|(_, &m)| m) {
        any = true;
        for k in 0..3 {
            b.min[k] = b.min[k].min(p[k]);
            b.max[k] = b.max[k].max(p[k]);
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    Ok(b)
}

pub fn boxes_from_masks(masks: &[Vec<bool>], coords: &[Point3]) -> Result<Vec<Box3>> {
    masks.iter().map(|m| box_from_mask(m, coords)).collect()
}

/// Volume IoU. Boxes with zero-volume union count as IoU 1 when identical
/// and 0 otherwise.
pub fn box_iou(a: &Box3, b: &Box3) -> f64 {
    let inter: f64 = (0..3)
        .map(|k| (a.max[k].min(b.max[k]) - a.min[k].max(b.min[k])).max(0.0))
        .product();
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Box AP per threshold, averaged over classes.
pub fn detection_ap(
    scenes: &[SceneResult],
    coords: &[&[Point3]],
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    if scenes.len() != coords.len() {
        return Err(Error::LengthMismatch("one coordinate set per scene".into()));
    }
    let inputs: Vec<MatchInput> = scenes
        .iter()
        .zip(coords)
        .map(|(r, c)| MatchInput::from_boxes(r, c))
        .collect::<Result<_>>()?;
    Ok(thresholds
        .iter()
        .map(|&t| class_mean(&inputs, t).0)
        .collect())
}

fn class_mean(inputs: &[MatchInput], threshold: f64) -> (f64, Vec<(usize, f64)>) {
    let per: Vec<(usize, f64)> = classes(inputs)
        .into_iter()
        .filter_map(|c| average_precision_matched(inputs, threshold, c).map(|ap| (c, ap)))
        .collect();
    let mean = if per.is_empty() {
        0.0
    } else {
        per.iter().map(|(_, v)| v).sum::<f64>() / per.len() as f64
    };
    (mean, per)
}

/// `0.50, 0.55, …, 0.95`.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub threshold: f64,
    /// `(class, AP)` for every class with ground truth or predictions.
    pub per_class: Vec<(usize, f64)>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: Vec<ClassAp>,
    pub map: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub mcov: f64,
    pub mwcov: f64,
    pub mprec: f64,
    pub mrec: f64,
    pub det_ap25: f64,
    pub det_ap50: f64,
}

pub fn evaluate(scenes: &[SceneResult], coords: &[&[Point3]]) -> Result<EvalReport> {
    let inputs: Vec<MatchInput> = scenes
        .iter()
        .map(MatchInput::from_masks)
        .collect::<Result<_>>()?;
    let mut thresholds = map_thresholds();
    thresholds.insert(0, 0.25);
    let ap: Vec<ClassAp> = thresholds
        .iter()
        .map(|&t| {
            let (mean, per_class) = class_mean(&inputs, t);
            ClassAp {
                threshold: t,
                per_class,
                mean,
            }
        })
        .collect();
    let at = |t: f64| {
        ap.iter()
            .find(|a| (a.threshold - t).abs() < 1e-12)
            .map_or(0.0, |a| a.mean)
    };
    let map = ap.iter().skip(1).map(|a| a.mean).sum::<f64>() / (ap.len() - 1) as f64;
    let (mcov, mwcov) = coverage_metrics(scenes)?;
    let (mprec, mrec) = prec_rec_matched(&inputs, 0.5);
    let det = detection_ap(scenes, coords, &[0.25, 0.5])?;
    Ok(EvalReport {
        map,
        ap50: at(0.5),
        ap25: at(0.25),
        ap,
        mcov,
        mwcov,
        mprec,
        mrec,
        det_ap25: det[0],
        det_ap50: det[1],
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// Aligned two-column table plus per-class AP@50.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let rows = [
            ("mAP", self.map),
            ("AP@50", self.ap50),
            ("AP@25", self.ap25),
            ("mCov", self.mcov),
            ("mWCov", self.mwcov),
            ("mPrec", self.mprec),
            ("mRec", self.mrec),
            ("box AP@25", self.det_ap25),
            ("box AP@50", self.det_ap50),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<10} {v:>8.4}");
        }
        if let Some(a) = self.ap.iter().find(|a| (a.threshold - 0.5).abs() < 1e-12) {
            for (c, v) in &a.per_class {
                let _ = writeln!(s, "{:<10} {v:>8.4}", format!("class {c}"));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage_hand_case() {
        let mask = |r: std::ops::Range<usize>| (0..40).map(|i| r.contains(&i)).collect::<Vec<_>>();
        let gts = vec![
            GtInstance {
                mask: mask(0..10),
                category: 1,
            },
            GtInstance {
                mask: mask(10..40),
                category: 1,
            },
        ];
        let preds = vec![
            InstancePrediction {
                mask: mask(0..10),
                category: 1,
                score: 1.0,
                source_cluster: 0,
            },
            InstancePrediction {
                mask: mask(10..25),
                category: 1,
                score: 1.0,
                source_cluster: 1,
            },
        ];
        let (c, w) = coverage_metrics(&[SceneResult { preds, gts }]).unwrap();
        assert!((c - 0.75).abs() < 1e-15);
        assert!((w - 0.625).abs() < 1e-15);
    }

    #[test]
    fn box_cases() {
        let a = Box3 {
            min: [0.0; 3],
            max: [1.0; 3],
        };
        let b = Box3 {
            min: [0.5, 0.0, 0.0],
            max: [1.5, 1.0, 1.0],
        };
        assert!((box_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        let p = box_from_mask(&[true], &[[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(box_iou(&p, &p), 1.0);
        assert!(box_from_mask(&[false], &[[0.0; 3]]).is_err());
    }
}
