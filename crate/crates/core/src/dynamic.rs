//! Per-cluster dynamic filters: voxelise a cluster, turn its pooled backbone
//! features into a flat parameter vector, and run that vector as a small
//! per-point network over position-embedded mask features.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clustering::Cluster;
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::model::ModelConfig;
use crate::tensor::{mlp, Graph, NeighborMap, NodeId, Tensor, TensorMap};

/// Shape of the generated per-point network: a chain of `(in, out)` layers
/// ending in one output channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterLayout {
    dims: Vec<(usize, usize)>,
}

impl FilterLayout {
    pub fn from_dims(dims: Vec<(usize, usize)>) -> Result<Self> {
        let chained = dims.windows(2).all(|w| w[0].1 == w[1].0);
        let valid = !dims.is_empty()
            && chained
            && dims.last().map(|d| d.1) == Some(1)
            && dims.iter().all(|&(i, o)| i > 0 && o > 0);
        if !valid {
            return Err(Error::Invalid(format!("bad filter layout {dims:?}")));
        }
        Ok(Self { dims })
    }

    /// `layers` 1×1 convolutions over `mask_dim + 3` inputs: first to
    /// `hidden`, then `hidden → hidden`, then `hidden → 1`.
    pub fn decoder(mask_dim: usize, hidden: usize, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Invalid("decoder needs at least one layer".into()));
        }
        let in_dim = mask_dim + 3;
        let dims = if layers == 1 {
            vec![(in_dim, 1)]
        } else {
            let mut d = vec![(in_dim, hidden)];
            d.extend(std::iter::repeat((hidden, hidden)).take(layers - 2));
            d.push((hidden, 1));
            d
        };
        Self::from_dims(dims)
    }

    pub fn dims(&self) -> &[(usize, usize)] {
        &self.dims
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0].0
    }

    pub fn layers(&self) -> usize {
        self.dims.len()
    }

    /// Weights plus biases over all layers: `Σ (in·out + out)`.
    pub fn param_count(&self) -> usize {
        self.dims.iter().map(|&(i, o)| i * o + o).sum()
    }
}

pub fn param_count(layout: &FilterLayout) -> usize {
    layout.param_count()
}

/// Flat parameter vector for one cluster's decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterVector {
    pub flat: Vec<f64>,
    pub layout: FilterLayout,
}

impl FilterVector {
    pub fn new(flat: Vec<f64>, layout: FilterLayout) -> Result<Self> {
        if flat.len() != layout.param_count() {
            return Err(Error::LengthMismatch(format!(
                "{} values for a layout of {}",
                flat.len(),
                layout.param_count()
            )));
        }
        Ok(Self { flat, layout })
    }
}

/// Splits a filter vector into per-layer `(weight [out, in], bias [out])`.
/// Each layer stores its weights row-major, then its biases.
pub fn unpack_filters(fv: &FilterVector) -> Result<Vec<(Tensor, Tensor)>> {
    if fv.flat.len() != fv.layout.param_count() {
        return Err(Error::LengthMismatch(format!(
            "{} values for a layout of {}",
            fv.flat.len(),
            fv.layout.param_count()
        )));
    }
    let mut off = 0;
    let mut out = Vec::with_capacity(fv.layout.layers());
    for &(i, o) in fv.layout.dims() {
        let w = Tensor::new(&[o, i], fv.flat[off..off + i * o].to_vec())?;
        off += i * o;
        let b = Tensor::new(&[o], fv.flat[off..off + o].to_vec())?;
        off += o;
        out.push((w, b));
    }
    Ok(out)
}

pub fn pack_filters(layers: &[(Tensor, Tensor)]) -> Result<FilterVector> {
    let dims = layers
        .iter()
        .map(|(w, _)| (w.shape()[1], w.shape()[0]))
        .collect();
    let layout = FilterLayout::from_dims(dims)?;
    let mut flat = Vec::with_capacity(layout.param_count());
    for (w, b) in layers {
        flat.extend_from_slice(w.data());
        flat.extend_from_slice(b.data());
    }
    FilterVector::new(flat, layout)
}

pub const DEGENERATE_EXTENT: f64 = 1e-6;

/// Assignment of a cluster's members to cells of a `g³` grid spanning the
/// cluster's bounding box.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelAssignment {
    pub g: usize,
    pub bbox_min: Point3,
    pub bbox_max: Point3,
    /// Grid cell `(x, y, z)` of each member, in member order.
    pub cell_of_member: Vec<[usize; 3]>,
    /// Occupied cells in ascending linear order.
    pub active: Vec<[usize; 3]>,
    /// Position in `active` of each member's cell.
    pub slot_of_member: Vec<usize>,
}

impl VoxelAssignment {
    pub fn build(members: &[usize], coords: &[Point3], g: usize) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyCluster);
        }
        if g == 0 {
            return Err(Error::Invalid("grid size must be positive".into()));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &m in members {
            for k in 0..3 {
                lo[k] = lo[k].min(coords[m][k]);
                hi[k] = hi[k].max(coords[m][k]);
            }
        }
        let extent: Vec<f64> = (0..3)
            .map(|k| (hi[k] - lo[k]).max(DEGENERATE_EXTENT))
            .collect();
        let cell_of_member: Vec<[usize; 3]> = members
            .iter()
            .map(|&m| {
                let mut c = [0; 3];
                for k in 0..3 {
                    let t = ((coords[m][k] - lo[k]) / extent[k] * g as f64).floor() as usize;
                    c[k] = t.min(g - 1);
                }
                c
            })
            .collect();
        let linear = |c: &[usize; 3]| (c[0] * g + c[1]) * g + c[2];
        let mut by_linear: BTreeMap<usize, [usize; 3]> = BTreeMap::new();
        for c in &cell_of_member {
            by_linear.insert(linear(c), *c);
        }
        let slot: BTreeMap<usize, usize> =
            by_linear.keys().enumerate().map(|(s, &l)| (l, s)).collect();
        let slot_of_member = cell_of_member.iter().map(|c| slot[&linear(c)]).collect();
        Ok(Self {
            g,
            bbox_min: lo,
            bbox_max: hi,
            cell_of_member,
            active: by_linear.into_values().collect(),
            slot_of_member,
        })
    }

    pub fn neighbor_map(&self) -> NeighborMap {
        let sites: Vec<[i64; 3]> = self
            .active
            .iter()
            .map(|c| [c[0] as i64, c[1] as i64, c[2] as i64])
            .collect();
        NeighborMap::from_sites(&sites)
    }
}

/// Dense view of a voxelised cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterVoxelGrid {
    /// `[g, g, g, D]`; empty cells are zero.
    pub grid: Tensor,
    /// `g³` flags in linear `(x·g + y)·g + z` order.
    pub occupancy: Vec<bool>,
    pub bbox_min: Point3,
    pub bbox_max: Point3,
    pub assignment: VoxelAssignment,
}

impl ClusterVoxelGrid {
    /// Rows of the occupied cells, in `assignment.active` order.
    pub fn active_features(&self) -> Tensor {
        let d = self.grid.shape()[3];
        let g = self.assignment.g;
        let data = self
            .assignment
            .active
            .iter()
            .flat_map(|c| {
                let lin = (c[0] * g + c[1]) * g + c[2];
                self.grid.data()[lin * d..(lin + 1) * d].to_vec()
            })
            .collect();
        Tensor::new(&[self.assignment.active.len(), d], data).expect("non-empty cluster")
    }
}

/// Mean-pools the members' `features` rows into a `g³` grid over the
/// cluster's bounding box.
pub fn voxelize_cluster(
    cluster: &Cluster,
    coords: &[Point3],
    features: &Tensor,
    g: usize,
) -> Result<ClusterVoxelGrid> {
    let a = VoxelAssignment::build(&cluster.members, coords, g)?;
    let d = features.cols();
    let cells = g * g * g;
    let mut sum = vec![0.0; cells * d];
    let mut count = vec![0usize; cells];
    for (&m, c) in cluster.members.iter().zip(&a.cell_of_member) {
        let lin = (c[0] * g + c[1]) * g + c[2];
        count[lin] += 1;
        for (s, v) in sum[lin * d..(lin + 1) * d].iter_mut().zip(features.row(m)) {
            *s += v;
        }
    }
    for (lin, &n) in count.iter().enumerate() {
        if n > 0 {
            sum[lin * d..(lin + 1) * d]
                .iter_mut()
                .for_each(|v| *v /= n as f64);
        }
    }
    Ok(ClusterVoxelGrid {
        grid: Tensor::new(&[g, g, g, d], sum)?,
        occupancy: count.iter().map(|&n| n > 0).collect(),
        bbox_min: a.bbox_min,
        bbox_max: a.bbox_max,
        assignment: a,
    })
}

/// Weight generator over already-pooled active-cell features `[V, D]`:
/// two 3×3×3 convolutions on the occupied cells (ReLU between), mean over
/// occupied cells, then an MLP to the flat filter vector `[P]`.
pub fn build_generator_from_cells(
    g: &mut Graph,
    cells: NodeId,
    neighbors: Arc<NeighborMap>,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let w1 = g.leaf(
        "gw.conv1.weight",
        &[27 * cfg.feature_dim, cfg.generator_channels],
    )?;
    let b1 = g.leaf("gw.conv1.bias", &[cfg.generator_channels])?;
    let w2 = g.leaf(
        "gw.conv2.weight",
        &[27 * cfg.generator_channels, cfg.generator_channels],
    )?;
    let b2 = g.leaf("gw.conv2.bias", &[cfg.generator_channels])?;
    let h = g.sparse_conv3d(cells, w1, b1, neighbors.clone())?;
    let h = g.relu(h);
    let h = g.sparse_conv3d(h, w2, b2, neighbors)?;
    let pooled = g.mean_rows(h)?;
    let pooled = g.reshape(pooled, &[1, cfg.generator_channels])?;
    let count = cfg.layout()?.param_count();
    let flat = mlp(
        g,
        pooled,
        "gw.mlp",
        &[cfg.generator_channels, cfg.generator_hidden, count],
        false,
    )?;
    g.reshape(flat, &[count])
}

/// Weight generator fed straight from point features `[N, D]`.
pub fn build_generator(
    g: &mut Graph,
    features: NodeId,
    cluster: &Cluster,
    coords: &[Point3],
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let a = VoxelAssignment::build(&cluster.members, coords, cfg.grid)?;
    let gathered = g.gather_rows(features, cluster.members.clone())?;
    let cells = g.segment_mean(gathered, a.slot_of_member.clone(), a.active.len())?;
    build_generator_from_cells(g, cells, Arc::new(a.neighbor_map()), cfg)
}

pub fn generate_filters(
    grid: &ClusterVoxelGrid,
    params: &TensorMap,
    cfg: &ModelConfig,
) -> Result<FilterVector> {
    let layout = cfg.layout()?;
    let mut g = Graph::new();
    let cells = g.constant(grid.active_features());
    let flat =
        build_generator_from_cells(&mut g, cells, Arc::new(grid.assignment.neighbor_map()), cfg)?;
    let ev = g.evaluate(params)?;
    FilterVector::new(ev.value(flat).data().to_vec(), layout)
}

/// `p − centroid` for every point.
pub fn position_embed(coords: &[Point3], centroid: &Point3) -> Vec<Point3> {
    coords
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect()
}

/// Appends the generated decoder for the points `on` (those sharing the
/// cluster's category). Returns logits `[|on|]`.
pub fn build_decoder(
    g: &mut Graph,
    mask_features: NodeId,
    positions: &[Point3],
    filters: NodeId,
    layout: &FilterLayout,
    on: &[usize],
) -> Result<NodeId> {
    let dm = g.shape(mask_features)[1];
    if dm + 3 != layout.in_dim() {
        return Err(Error::Invalid(format!(
            "mask features have {dm} channels, layout expects {}",
            layout.in_dim() - 3
        )));
    }
    if g.shape(filters) != [layout.param_count()] {
        return Err(Error::LengthMismatch(format!(
            "filter node {:?} for a layout of {}",
            g.shape(filters),
            layout.param_count()
        )));
    }
    let m = on.len();
    let feats = g.gather_rows(mask_features, on.to_vec())?;
    let pos: Vec<f64> = on.iter().flat_map(|&i| positions[i]).collect();
    let pos = g.constant(Tensor::new(&[m, 3], pos)?);
    let mut h = g.concat(&[feats, pos], 1)?;
    let mut off = 0;
    for (l, &(i, o)) in layout.dims().iter().enumerate() {
        let w = g.slice(filters, 0, off, off + i * o)?;
        let w = g.reshape(w, &[o, i])?;
        let wt = g.transpose(w)?;
        off += i * o;
        let b = g.slice(filters, 0, off, off + o)?;
        off += o;
        let hw = g.matmul(h, wt)?;
        h = g.add(hw, b)?;
        if l + 1 < layout.layers() {
            h = g.relu(h);
        }
    }
    g.reshape(h, &[m])
}

/// One cluster's decoded mask over all `N` points.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedMask {
    /// Zero where the category mask is false.
    pub logits: Vec<f64>,
    /// `sigmoid(logit)` on category points, zero elsewhere.
    pub probs: Vec<f64>,
    /// `probs ≥ 0.5` on category points.
    pub mask: Vec<bool>,
}

pub const MASK_THRESHOLD: f64 = 0.5;

pub fn decode_instance(
    mask_features: &Tensor,
    positions: &[Point3],
    fv: &FilterVector,
    category: &[bool],
) -> Result<DecodedMask> {
    let n = mask_features.rows();
    if positions.len() != n || category.len() != n {
        return Err(Error::LengthMismatch(format!(
            "{n} mask rows, {} positions, {} category flags",
            positions.len(),
            category.len()
        )));
    }
    if mask_features.cols() + 3 != fv.layout.in_dim() {
        return Err(Error::Invalid(format!(
            "mask features have {} channels, layout expects {}",
            mask_features.cols(),
            fv.layout.in_dim() - 3
        )));
    }
    let on: Vec<usize> = (0..n).filter(|&i| category[i]).collect();
    let mut out = DecodedMask {
        logits: vec![0.0; n],
        probs: vec![0.0; n],
        mask: vec![false; n],
    };
    if on.is_empty() {
        return Ok(out);
    }
    let mut g = Graph::new();
    let f = g.constant(mask_features.clone());
    let w = g.constant(Tensor::vector(fv.flat.clone()));
    let logits = build_decoder(&mut g, f, positions, w, &fv.layout, &on)?;
    let ev = g.evaluate(&TensorMap::new())?;
    for (&i, &z) in on.iter().zip(ev.value(logits).data()) {
        let p = sigmoid(z);
        out.logits[i] = z;
        out.probs[i] = p;
        out.mask[i] = p >= MASK_THRESHOLD;
    }
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Category mask `b_z`: points whose predicted label equals the cluster's.
pub fn category_mask(labels: &[usize], cluster_label: usize) -> Vec<bool> {
    labels.iter().map(|&l| l == cluster_label).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_layout_has_177_parameters() {
        assert_eq!(FilterLayout::decoder(8, 8, 3).unwrap().param_count(), 177);
        assert_eq!(
            FilterLayout::from_dims(vec![(1, 1)]).unwrap().param_count(),
            2
        );
        assert_eq!(FilterLayout::decoder(16, 16, 3).unwrap().param_count(), 609);
    }

    #[test]
    fn bad_layouts_are_rejected() {
        assert!(FilterLayout::from_dims(vec![(3, 4), (5, 1)]).is_err());
        assert!(FilterLayout::from_dims(vec![(3, 2)]).is_err());
        assert!(FilterLayout::decoder(8, 8, 0).is_err());
    }

    #[test]
    fn unpack_single_layer() {
        let fv = FilterVector::new(
            vec![3.0, 5.0],
            FilterLayout::from_dims(vec![(1, 1)]).unwrap(),
        )
        .unwrap();
        let layers = unpack_filters(&fv).unwrap();
        assert_eq!(layers[0].0.data(), &[3.0]);
        assert_eq!(layers[0].1.data(), &[5.0]);
        assert_eq!(pack_filters(&layers).unwrap(), fv);
        assert!(FilterVector::new(vec![1.0], fv.layout.clone()).is_err());
    }

    #[test]
    fn position_embedding() {
        assert_eq!(
            position_embed(&[[1.0, 2.0, 3.0]], &[1.0, 1.0, 1.0]),
            vec![[0.0, 1.0, 2.0]]
        );
        assert_eq!(
            position_embed(&[[0.5, 0.5, 0.5]], &[0.5, 0.5, 0.5]),
            vec![[0.0; 3]]
        );
    }

    #[test]
    fn voxelize_single_and_shared_cell() {
        let coords = [[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]];
        let feats = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![9.0, 9.0]]).unwrap();
        let single = Cluster {
            members: vec![2],
            centroid: coords[2],
            label: 1,
        };
        let v = voxelize_cluster(&single, &coords, &feats, 14).unwrap();
        assert_eq!(v.occupancy.iter().filter(|&&o| o).count(), 1);
        assert_eq!(v.active_features().data(), &[9.0, 9.0]);

        let pair = Cluster {
            members: vec![0, 1],
            centroid: coords[0],
            label: 1,
        };
        let v = voxelize_cluster(&pair, &coords, &feats, 14).unwrap();
        assert_eq!(v.active_features().data(), &[2.0, 4.0]);

        let empty = Cluster {
            members: vec![],
            centroid: [0.0; 3],
            label: 1,
        };
        assert!(matches!(
            voxelize_cluster(&empty, &coords, &feats, 14),
            Err(Error::EmptyCluster)
        ));
    }
}
