use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels;
use super::{Tensor, TensorMap};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Neighbour table for a submanifold 3×3×3 convolution over active sites.
///
/// `entries[v]` lists `(kernel_offset, u)` pairs: active site `u` sits at
/// kernel offset `kernel_offset` (0..27, `dx`-major) relative to site `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborMap {
    pub entries: Vec<Vec<(usize, usize)>>,
}

impl NeighborMap {
    /// Builds the table for active cells given as `(x, y, z)` grid coordinates.
    pub fn from_sites(sites: &[[i64; 3]]) -> Self {
        let lookup: std::collections::HashMap<[i64; 3], usize> =
            sites.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let entries = sites
            .iter()
            .map(|s| {
                let mut row = Vec::new();
                for k in 0..27 {
                    let d = kernel_offset(k);
                    let n = [s[0] + d[0], s[1] + d[1], s[2] + d[2]];
                    if let Some(&u) = lookup.get(&n) {
                        row.push((k, u));
                    }
                }
                row
            })
            .collect();
        Self { entries }
    }

    pub fn sites(&self) -> usize {
        self.entries.len()
    }
}

/// Offset of kernel tap `k` in `{-1, 0, 1}³`, `dx` varying slowest.
pub(crate) fn kernel_offset(k: usize) -> [i64; 3] {
    [
        (k / 9) as i64 - 1,
        ((k / 3) % 3) as i64 - 1,
        (k % 3) as i64 - 1,
    ]
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf(String),
    Const(Arc<Tensor>),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    Softplus(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumLast(NodeId),
    MeanRows(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(NodeId),
    GatherRows {
        input: NodeId,
        index: Arc<Vec<usize>>,
    },
    SegmentMean {
        input: NodeId,
        segment: Arc<Vec<usize>>,
        counts: Arc<Vec<usize>>,
    },
    Conv3d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    SparseConv3d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        map: Arc<NeighborMap>,
    },
    LayerNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Abs(_) => "abs",
            Op::Softplus(_) => "softplus",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::MeanRows(_) => "mean_rows",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::SegmentMean { .. } => "segment_mean",
            Op::Conv3d { .. } => "conv3d",
            Op::SparseConv3d { .. } => "sparse_conv3d",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) | Op::Const(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::Softplus(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a)
            | Op::MeanRows(a)
            | Op::Reshape(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. }
            | Op::GatherRows { input, .. }
            | Op::SegmentMean { input, .. } => vec![*input],
            Op::Conv3d {
                input,
                weight,
                bias,
            }
            | Op::SparseConv3d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::LayerNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Append-only expression graph. Nodes only reference earlier nodes, so
/// insertion order is a topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Numpy-style broadcast of two shapes, right-aligned.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    /// Registers `id` under a name so callers can fetch it after evaluation.
    pub fn set_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    /// Declares a named input. Declaring the same name twice returns the
    /// existing node when shapes agree.
    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if let Some(&id) = self.leaves.get(name) {
            if self.nodes[id.0].shape != shape {
                return Err(self.err(
                    "leaf",
                    format!(
                        "`{name}` redeclared as {shape:?}, was {:?}",
                        self.nodes[id.0].shape
                    ),
                ));
            }
            return Ok(id);
        }
        let id = self.push(Op::Leaf(name.to_string()), shape.to_vec());
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Const(Arc::new(t)), shape)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.err("matmul", format!("{sa:?} x {sb:?}")));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(self.err("transpose", format!("needs rank 2, got {s:?}")));
        }
        Ok(self.push(Op::Transpose(a), vec![s[1], s[0]]))
    }

    fn binary(&mut self, op: Op, name: &'static str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        match broadcast_shape(sa, sb) {
            Some(s) => Ok(self.push(op, s)),
            None => {
                let detail = format!("cannot broadcast {sa:?} with {sb:?}");
                Err(self.err(name, detail))
            }
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add(a, b), "add", a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub(a, b), "sub", a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul(a, b), "mul", a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div(a, b), "div", a, b)
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(op, s)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::Scale(a, c), a)
    }

    pub fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(Op::Shift(a, c), a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu(a), a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid(a), a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log(a), a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sqrt(a), a)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Abs(a), a)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softplus(a), a)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        if self.shape(a).is_empty() {
            return Err(self.err("softmax", "needs rank >= 1".into()));
        }
        Ok(self.unary(Op::Softmax(a), a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        if self.shape(a).is_empty() {
            return Err(self.err("log_softmax", "needs rank >= 1".into()));
        }
        Ok(self.unary(Op::LogSoftmax(a), a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), Vec::new())
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), Vec::new())
    }

    /// Sums out the last axis.
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(self.err("sum_last", "needs rank >= 1".into()));
        }
        Ok(self.push(Op::SumLast(a), s[..s.len() - 1].to_vec()))
    }

    /// Mean over the first axis of an `N × D` matrix, giving `[D]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(self.err("mean_rows", format!("needs rank 2, got {s:?}")));
        }
        Ok(self.push(Op::MeanRows(a), vec![s[1]]))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = match inputs.first() {
            Some(&f) => self.shape(f).to_vec(),
            None => return Err(self.err("concat", "no inputs".into())),
        };
        if axis >= first.len() {
            return Err(self.err("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut out = first.clone();
        out[axis] = 0;
        for &i in inputs {
            let s = self.shape(i);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(k, (x, y))| k == axis || x == y);
            if !compatible {
                let detail = format!("{s:?} does not match {first:?} off axis {axis}");
                return Err(self.err("concat", detail));
            }
            out[axis] += s[axis];
        }
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            out,
        ))
    }

    pub fn slice(
        &mut self,
        input: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(self.err("slice", format!("[{start}, {end}) on axis {axis} of {s:?}")));
        }
        let mut out = s;
        out[axis] = end - start;
        Ok(self.push(
            Op::Slice {
                input,
                axis,
                start,
                end,
            },
            out,
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let have: usize = self.shape(input).iter().product();
        let want: usize = shape.iter().product();
        if have != want || shape.contains(&0) {
            let detail = format!("{:?} into {shape:?}", self.shape(input));
            return Err(self.err("reshape", detail));
        }
        Ok(self.push(Op::Reshape(input), shape.to_vec()))
    }

    /// Selects rows (first-axis entries) by index; indices may repeat.
    pub fn gather_rows(&mut self, input: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.is_empty() || index.is_empty() || index.iter().any(|&i| i >= s[0]) {
            return Err(self.err("gather_rows", format!("bad index set for {s:?}")));
        }
        let mut out = s;
        out[0] = index.len();
        Ok(self.push(
            Op::GatherRows {
                input,
                index: Arc::new(index),
            },
            out,
        ))
    }

    /// Averages rows sharing a segment id. Every segment in
    /// `0..num_segments` must receive at least one row.
    pub fn segment_mean(
        &mut self,
        input: NodeId,
        segment: Vec<usize>,
        num_segments: usize,
    ) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || segment.len() != s[0] {
            return Err(self.err("segment_mean", format!("{} ids for {s:?}", segment.len())));
        }
        let mut counts = vec![0usize; num_segments];
        for &g in &segment {
            if g >= num_segments {
                return Err(self.err("segment_mean", format!("segment {g} >= {num_segments}")));
            }
            counts[g] += 1;
        }
        if counts.contains(&0) {
            return Err(self.err("segment_mean", "empty segment".into()));
        }
        Ok(self.push(
            Op::SegmentMean {
                input,
                segment: Arc::new(segment),
                counts: Arc::new(counts),
            },
            vec![num_segments, s[1]],
        ))
    }

    /// Dense 3×3×3 convolution, stride 1, zero padding.
    /// `input: [X, Y, Z, Cin]`, `weight: [27·Cin, Cout]`, `bias: [Cout]`.
    pub fn conv3d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (si, sw, sb) = (
            self.shape(input).to_vec(),
            self.shape(weight).to_vec(),
            self.shape(bias).to_vec(),
        );
        if si.len() != 4 || sw.len() != 2 || sw[0] != 27 * si[3] || sb != [sw[1]] {
            let detail = format!("input {si:?}, weight {sw:?}, bias {sb:?}");
            return Err(self.err("conv3d", detail));
        }
        Ok(self.push(
            Op::Conv3d {
                input,
                weight,
                bias,
            },
            vec![si[0], si[1], si[2], sw[1]],
        ))
    }

    /// 3×3×3 convolution restricted to active sites: equal to a dense
    /// convolution of the scattered input, read back at the same sites.
    /// `input: [V, Cin]`, `weight: [27·Cin, Cout]`, `bias: [Cout]`.
    pub fn sparse_conv3d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        map: Arc<NeighborMap>,
    ) -> Result<NodeId> {
        let (si, sw, sb) = (
            self.shape(input).to_vec(),
            self.shape(weight).to_vec(),
            self.shape(bias).to_vec(),
        );
        if si.len() != 2
            || si[0] != map.sites()
            || sw.len() != 2
            || sw[0] != 27 * si[1]
            || sb != [sw[1]]
        {
            let detail = format!(
                "input {si:?} over {} sites, weight {sw:?}, bias {sb:?}",
                map.sites()
            );
            return Err(self.err("sparse_conv3d", detail));
        }
        Ok(self.push(
            Op::SparseConv3d {
                input,
                weight,
                bias,
                map,
            },
            vec![si[0], sw[1]],
        ))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        let d = match s.last() {
            Some(&d) => d,
            None => return Err(self.err("layer_norm", "needs rank >= 1".into())),
        };
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            let detail = format!(
                "gamma {:?} / beta {:?} for feature size {d}",
                self.shape(gamma),
                self.shape(beta)
            );
            return Err(self.err("layer_norm", detail));
        }
        Ok(self.push(
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            },
            s,
        ))
    }

    /// Evaluates the whole graph against `bindings`.
    pub fn evaluate(&self, bindings: &TensorMap) -> Result<Evaluation> {
        let mut ev = Evaluation::default();
        ev.extend(self, bindings)?;
        Ok(ev)
    }

    /// Evaluates and returns the named outputs.
    pub fn evaluate_outputs(&self, bindings: &TensorMap, names: &[&str]) -> Result<TensorMap> {
        let ev = self.evaluate(bindings)?;
        names
            .iter()
            .map(|&n| {
                let id = self
                    .output_id(n)
                    .or_else(|| self.leaf_id(n))
                    .ok_or_else(|| Error::UnknownOutput(n.to_string()))?;
                Ok((n.to_string(), ev.value(id).clone()))
            })
            .collect()
    }

    /// Reverse-mode gradients of the scalar `output` with respect to every
    /// leaf whose bound tensor has `requires_grad`. Leaves the output does
    /// not depend on receive zero gradients.
    pub fn backward(&self, ev: &Evaluation, output: NodeId) -> Result<TensorMap> {
        let out_shape = self.shape(output);
        if !out_shape.is_empty() {
            return Err(Error::NonScalarOutput(out_shape.to_vec()));
        }
        let n = output.0 + 1;
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.nodes[i].op {
                Op::Leaf(_) => ev.requires_grad[i],
                Op::Const(_) => false,
                op => op.inputs().iter().any(|p| needs[p.0]),
            };
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf(_) = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            kernels::backward_node(self, ev, i, &g, &needs, &mut grads)?;
        }
        let mut out = TensorMap::new();
        for (name, &id) in &self.leaves {
            if !ev.requires_grad.get(id.0).copied().unwrap_or(false) {
                continue;
            }
            let shape = &self.nodes[id.0].shape;
            let data = match grads.get_mut(id.0).and_then(Option::take) {
                Some(g) => g,
                None => vec![0.0; shape.iter().product()],
            };
            out.insert(name.clone(), Tensor::new(shape, data)?);
        }
        Ok(out)
    }

    pub(crate) fn nodes_len(&self) -> usize {
        self.nodes.len()
    }

    pub(crate) fn node_op(&self, i: usize) -> &Op {
        &self.nodes[i].op
    }

    pub(crate) fn node_shape(&self, i: usize) -> &[usize] {
        &self.nodes[i].shape
    }
}

/// Values of every evaluated node. Can be extended after more nodes are
/// appended to the graph it came from.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn output<'a>(&'a self, graph: &Graph, name: &str) -> Result<&'a Tensor> {
        let id = graph
            .output_id(name)
            .ok_or_else(|| Error::UnknownOutput(name.to_string()))?;
        Ok(self.value(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Computes values for nodes appended since the last call.
    pub fn extend(&mut self, graph: &Graph, bindings: &TensorMap) -> Result<()> {
        for i in self.values.len()..graph.nodes_len() {
            let (value, rg) = match graph.node_op(i) {
                Op::Leaf(name) => {
                    let t = bindings
                        .get(name)
                        .ok_or_else(|| Error::UnboundLeaf(name.clone()))?;
                    if t.shape() != graph.node_shape(i) {
                        return Err(Error::Shape {
                            node: i,
                            op: "leaf",
                            detail: format!(
                                "`{name}` declared {:?}, bound {:?}",
                                graph.node_shape(i),
                                t.shape()
                            ),
                        });
                    }
                    (t.clone(), t.requires_grad())
                }
                _ => (kernels::forward_node(graph, self, i)?, false),
            };
            self.values.push(value);
            self.requires_grad.push(rg);
        }
        Ok(())
    }
}
