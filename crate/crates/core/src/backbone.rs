//! Desk-scale backbone: a per-point MLP encoder with a global context
//! channel, a transformer over grid-pooled tokens, and the semantic, offset
//! and mask heads.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{cell_of, Point3};
use crate::model::ModelConfig;
use crate::scene::PointScene;
use crate::tensor::{linear, mhsa_layer, mlp, Graph, NodeId, Tensor, TensorMap};

/// Graph nodes produced by [`build_backbone`].
#[derive(Clone, Copy, Debug)]
pub struct BackboneNodes {
    /// Encoder output `F_b`, `N × D`.
    pub encoded: NodeId,
    /// `F_b` after the transformer residual, `N × D`.
    pub features: NodeId,
    pub semantic_logits: NodeId,
    pub offsets: NodeId,
    pub mask_features: NodeId,
}

/// Plain-tensor backbone outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutputs {
    pub features: Tensor,
    pub semantic_logits: Tensor,
    pub offsets: Tensor,
    pub mask_features: Tensor,
}

impl BackboneOutputs {
    pub fn semantic_labels(&self) -> Vec<usize> {
        argmax_rows(&self.semantic_logits)
    }

    pub fn offset_points(&self) -> Vec<Point3> {
        to_points(&self.offsets)
    }
}

pub fn to_points(t: &Tensor) -> Vec<Point3> {
    t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Row-wise argmax; ties go to the smaller column.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Row-wise softmax on plain tensors.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

pub fn centered(coords: &[Point3]) -> Vec<Point3> {
    let n = coords.len() as f64;
    let mut m = [0.0; 3];
    for p in coords {
        for k in 0..3 {
            m[k] += p[k];
        }
    }
    let m = [m[0] / n, m[1] / n, m[2] / n];
    coords
        .iter()
        .map(|p| [p[0] - m[0], p[1] - m[1], p[2] - m[2]])
        .collect()
}

/// Encoder input rows: centred xyz followed by every feature channel after
/// the three raw-coordinate ones.
pub fn encoder_input(scene: &PointScene, cfg: &ModelConfig) -> Result<Tensor> {
    if scene.is_empty() {
        return Err(Error::Invalid("scene has no points".into()));
    }
    if scene.feature_dim != cfg.input_features {
        return Err(Error::Invalid(format!(
            "scene has {} feature channels, model expects {}",
            scene.feature_dim, cfg.input_features
        )));
    }
    let c = centered(&scene.coords);
    let mut data = Vec::with_capacity(scene.len() * cfg.encoder_input());
    for (i, p) in c.iter().enumerate() {
        data.extend_from_slice(p);
        data.extend_from_slice(&scene.feature_row(i)[3..]);
    }
    Tensor::new(&[scene.len(), cfg.encoder_input()], data)
}

/// Per-point MLP, concatenated with the mean over points, fused by a linear
/// layer + ReLU.
pub fn build_encoder(g: &mut Graph, input: NodeId, cfg: &ModelConfig) -> Result<NodeId> {
    let n = g.shape(input)[0];
    let d = cfg.feature_dim;
    let h = mlp(g, input, "enc.point", &[cfg.encoder_input(), d, d], true)?;
    let global = g.mean_rows(h)?;
    let global = g.reshape(global, &[1, d])?;
    let global = g.gather_rows(global, vec![0; n])?;
    let cat = g.concat(&[h, global], 1)?;
    let fused = linear(g, cat, "enc.fuse", 2 * d, d)?;
    Ok(g.relu(fused))
}

/// Token assignment of points to occupied grid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    /// Token index of every point.
    pub token_of: Vec<usize>,
    /// Mean (centred) coordinate of each token's points.
    pub centers: Vec<Point3>,
}

impl TokenGrid {
    /// Tokens are ordered by cell key, so point order does not change them.
    pub fn build(coords: &[Point3], cell: f64) -> Self {
        let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
        for (i, p) in coords.iter().enumerate() {
            cells.entry(cell_of(p, cell)).or_default().push(i);
        }
        let mut token_of = vec![0; coords.len()];
        let mut centers = Vec::with_capacity(cells.len());
        for (t, members) in cells.values().enumerate() {
            let mut c = [0.0; 3];
            for &i in members {
                token_of[i] = t;
                for k in 0..3 {
                    c[k] += coords[i][k];
                }
            }
            let m = members.len() as f64;
            centers.push([c[0] / m, c[1] / m, c[2] / m]);
        }
        Self { token_of, centers }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// `[T·T, 3]` with row `i·T + j` = `center_i − center_j`.
    pub fn relative_positions(&self) -> Tensor {
        let t = self.len();
        let mut d = Vec::with_capacity(t * t * 3);
        for a in &self.centers {
            for b in &self.centers {
                d.extend_from_slice(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
            }
        }
        Tensor::new(&[t * t, 3], d).expect("at least one token")
    }
}

/// Pools `features` into tokens, runs the attention layers, and adds each
/// token's output back onto its member points.
pub fn build_bottleneck(
    g: &mut Graph,
    features: NodeId,
    centered_coords: &[Point3],
    cfg: &ModelConfig,
) -> Result<NodeId> {
    if cfg.transformer_layers == 0 {
        return Ok(features);
    }
    let grid = TokenGrid::build(centered_coords, cfg.token_cell);
    let tokens = g.segment_mean(features, grid.token_of.clone(), grid.len())?;
    let rel = g.constant(grid.relative_positions());
    let att = cfg.attention();
    let mut h = tokens;
    for l in 0..cfg.transformer_layers {
        h = mhsa_layer(g, h, rel, &format!("tf.{l}"), &att)?;
    }
    let back = g.gather_rows(h, grid.token_of)?;
    g.add(features, back)
}

/// Semantic, offset and mask heads: `(logits N×C, offsets N×3, F_mask N×D′)`.
pub fn build_heads(
    g: &mut Graph,
    features: NodeId,
    cfg: &ModelConfig,
) -> Result<(NodeId, NodeId, NodeId)> {
    let d = cfg.feature_dim;
    let sem = mlp(g, features, "head.sem", &[d, d, cfg.num_classes], false)?;
    let off = mlp(g, features, "head.off", &[d, d, 3], false)?;
    let mask = mlp(g, features, "head.mask", &[d, d, cfg.mask_dim], false)?;
    Ok((sem, off, mask))
}

/// Appends the full backbone for `scene` to `g`.
pub fn build_backbone(
    g: &mut Graph,
    scene: &PointScene,
    cfg: &ModelConfig,
) -> Result<BackboneNodes> {
    let input = g.constant(encoder_input(scene, cfg)?);
    let encoded = build_encoder(g, input, cfg)?;
    let features = build_bottleneck(g, encoded, &centered(&scene.coords), cfg)?;
    let (semantic_logits, offsets, mask_features) = build_heads(g, features, cfg)?;
    g.set_output("semantic_logits", semantic_logits);
    g.set_output("offsets", offsets);
    g.set_output("mask_features", mask_features);
    Ok(BackboneNodes {
        encoded,
        features,
        semantic_logits,
        offsets,
        mask_features,
    })
}

/// `F_b` for a scene.
pub fn encode_points(scene: &PointScene, params: &TensorMap, cfg: &ModelConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let input = g.constant(encoder_input(scene, cfg)?);
    let out = build_encoder(&mut g, input, cfg)?;
    Ok(g.evaluate(params)?.value(out).clone())
}

/// `F_b + broadcast(transformer(pool(F_b)))`.
pub fn bottleneck_transformer(
    encoded: &Tensor,
    coords: &[Point3],
    params: &TensorMap,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    if encoded.rows() != coords.len() {
        return Err(Error::LengthMismatch(format!(
            "{} rows for {} points",
            encoded.rows(),
            coords.len()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(encoded.clone());
    let out = build_bottleneck(&mut g, x, &centered(coords), cfg)?;
    Ok(g.evaluate(params)?.value(out).clone())
}

pub fn heads(features: &Tensor, params: &TensorMap, cfg: &ModelConfig) -> Result<BackboneOutputs> {
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let (s, o, m) = build_heads(&mut g, x, cfg)?;
    let ev = g.evaluate(params)?;
    Ok(BackboneOutputs {
        features: features.clone(),
        semantic_logits: ev.value(s).clone(),
        offsets: ev.value(o).clone(),
        mask_features: ev.value(m).clone(),
    })
}

/// Full backbone forward pass without gradients.
pub fn forward_backbone(
    scene: &PointScene,
    params: &TensorMap,
    cfg: &ModelConfig,
) -> Result<BackboneOutputs> {
    let mut g = Graph::new();
    let nodes = build_backbone(&mut g, scene, cfg)?;
    let ev = g.evaluate(params)?;
    Ok(BackboneOutputs {
        features: ev.value(nodes.features).clone(),
        semantic_logits: ev.value(nodes.semantic_logits).clone(),
        offsets: ev.value(nodes.offsets).clone(),
        mask_features: ev.value(nodes.mask_features).clone(),
    })
}
