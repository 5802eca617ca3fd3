//! Forward and backward kernels for every [`Op`].

use super::graph::{kernel_offset, Evaluation, Graph, NodeId, Op};
use super::Tensor;
use crate::error::Result;

/// How an operand of a broadcasting binary op maps onto output elements.
enum Index {
    Same,
    Scalar,
    Map(Vec<usize>),
}

impl Index {
    fn new(out: &[usize], src: &[usize]) -> Self {
        let n_src: usize = src.iter().product();
        if out == src {
            return Index::Same;
        }
        if n_src == 1 {
            return Index::Scalar;
        }
        let rank = out.len();
        let off = rank - src.len();
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..src.len()).rev() {
            if src[i] != 1 {
                strides[i + off] = acc;
            }
            acc *= src[i];
        }
        let n: usize = out.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Index::Map(map)
    }

    #[inline]
    fn at(&self, k: usize) -> usize {
        match self {
            Index::Same => k,
            Index::Scalar => 0,
            Index::Map(m) => m[k],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks(d).zip(y.chunks_mut(d)) {
        let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (yv, xv) in yr.iter_mut().zip(xr) {
            *yv = (xv - m).exp();
            s += *yv;
        }
        for yv in yr.iter_mut() {
            *yv /= s;
        }
    }
    y
}

fn conv_dense_dims(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

/// Visits `(out_site, in_site, tap)` triples of a dense zero-padded 3×3×3
/// convolution over an `X × Y × Z` grid.
fn for_each_dense_tap(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let [nx, ny, nz, _] = dims;
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let v = (x * ny + y) * nz + z;
                for k in 0..27 {
                    let d = kernel_offset(k);
                    let (ux, uy, uz) = (x as i64 + d[0], y as i64 + d[1], z as i64 + d[2]);
                    if ux < 0
                        || uy < 0
                        || uz < 0
                        || ux >= nx as i64
                        || uy >= ny as i64
                        || uz >= nz as i64
                    {
                        continue;
                    }
                    let u = ((ux as usize) * ny + uy as usize) * nz + uz as usize;
                    f(v, u, k);
                }
            }
        }
    }
}

fn conv_forward(
    sites: usize,
    cin: usize,
    cout: usize,
    x: &[f64],
    w: &[f64],
    b: &[f64],
    taps: impl Fn(&mut dyn FnMut(usize, usize, usize)),
) -> Vec<f64> {
    let mut out = vec![0.0; sites * cout];
    for v in 0..sites {
        out[v * cout..(v + 1) * cout].copy_from_slice(b);
    }
    taps(&mut |v, u, k| {
        let xin = &x[u * cin..(u + 1) * cin];
        let orow_start = v * cout;
        for (ci, &xv) in xin.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[(k * cin + ci) * cout..(k * cin + ci + 1) * cout];
            let orow = &mut out[orow_start..orow_start + cout];
            for (o, wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    cin: usize,
    cout: usize,
    x: &[f64],
    w: &[f64],
    g: &[f64],
    gx: Option<&mut Vec<f64>>,
    gw: Option<&mut Vec<f64>>,
    gb: Option<&mut Vec<f64>>,
    taps: impl Fn(&mut dyn FnMut(usize, usize, usize)),
) {
    if let Some(gb) = gb {
        for grow in g.chunks(cout) {
            for (b, gv) in gb.iter_mut().zip(grow) {
                *b += gv;
            }
        }
    }
    let mut gx = gx;
    let mut gw = gw;
    taps(&mut |v, u, k| {
        let grow = &g[v * cout..(v + 1) * cout];
        for ci in 0..cin {
            let r = (k * cin + ci) * cout;
            let wrow = &w[r..r + cout];
            if let Some(gx) = gx.as_deref_mut() {
                let mut s = 0.0;
                for (gv, wv) in grow.iter().zip(wrow) {
                    s += gv * wv;
                }
                gx[u * cin + ci] += s;
            }
            if let Some(gw) = gw.as_deref_mut() {
                let xv = x[u * cin + ci];
                if xv != 0.0 {
                    for (gwv, gv) in gw[r..r + cout].iter_mut().zip(grow) {
                        *gwv += xv * gv;
                    }
                }
            }
        }
    });
}

pub(crate) fn forward_node(graph: &Graph, ev: &Evaluation, i: usize) -> Result<Tensor> {
    let shape = graph.node_shape(i).to_vec();
    let val = |id: NodeId| ev.value(id);
    let unary = |a: NodeId, f: &dyn Fn(f64) -> f64| -> Vec<f64> {
        val(a).data().iter().map(|&x| f(x)).collect()
    };
    let binary = |a: NodeId, b: NodeId, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        let (ta, tb) = (val(a), val(b));
        let ia = Index::new(&shape, ta.shape());
        let ib = Index::new(&shape, tb.shape());
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        (0..n).map(|k| f(da[ia.at(k)], db[ib.at(k)])).collect()
    };
    let data = match graph.node_op(i) {
        Op::Leaf(_) => unreachable!("leaves are bound, not computed"),
        Op::Const(t) => t.data().to_vec(),
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            matmul(ta.data(), tb.data(), m, k, n)
        }
        Op::Transpose(a) => {
            let t = val(*a);
            let (r, c) = (t.shape()[0], t.shape()[1]);
            let mut out = vec![0.0; r * c];
            for p in 0..r {
                for q in 0..c {
                    out[q * r + p] = t.data()[p * c + q];
                }
            }
            out
        }
        Op::Add(a, b) => binary(*a, *b, &|x, y| x + y),
        Op::Sub(a, b) => binary(*a, *b, &|x, y| x - y),
        Op::Mul(a, b) => binary(*a, *b, &|x, y| x * y),
        Op::Div(a, b) => binary(*a, *b, &|x, y| x / y),
        Op::Scale(a, c) => unary(*a, &|x| x * c),
        Op::Shift(a, c) => unary(*a, &|x| x + c),
        Op::Relu(a) => unary(*a, &|x| x.max(0.0)),
        Op::Sigmoid(a) => unary(*a, &sigmoid),
        Op::Exp(a) => unary(*a, &f64::exp),
        Op::Log(a) => unary(*a, &f64::ln),
        Op::Sqrt(a) => unary(*a, &f64::sqrt),
        Op::Abs(a) => unary(*a, &f64::abs),
        Op::Softplus(a) => unary(*a, &softplus),
        Op::Softmax(a) => {
            let d = *shape.last().unwrap();
            softmax_rows(val(*a).data(), d)
        }
        Op::LogSoftmax(a) => {
            let d = *shape.last().unwrap();
            let x = val(*a).data();
            let mut y = vec![0.0; x.len()];
            for (xr, yr) in x.chunks(d).zip(y.chunks_mut(d)) {
                let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + xr.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                for (yv, xv) in yr.iter_mut().zip(xr) {
                    *yv = xv - lse;
                }
            }
            y
        }
        Op::Sum(a) => vec![val(*a).data().iter().sum()],
        Op::Mean(a) => {
            let t = val(*a);
            vec![t.data().iter().sum::<f64>() / t.numel() as f64]
        }
        Op::SumLast(a) => {
            let t = val(*a);
            let d = *t.shape().last().unwrap();
            t.data().chunks(d).map(|r| r.iter().sum()).collect()
        }
        Op::MeanRows(a) => {
            let t = val(*a);
            let (n, d) = (t.shape()[0], t.shape()[1]);
            let mut out = vec![0.0; d];
            for r in t.data().chunks(d) {
                for (o, v) in out.iter_mut().zip(r) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= n as f64);
            out
        }
        Op::Concat { inputs, axis } => {
            let (outer, inner) = outer_inner(&shape, *axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for &id in inputs {
                    let t = val(id);
                    let block = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            out
        }
        Op::Slice {
            input,
            axis,
            start,
            end,
        } => {
            let t = val(*input);
            let (outer, inner) = outer_inner(t.shape(), *axis);
            let full = t.shape()[*axis] * inner;
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                out.extend_from_slice(&t.data()[o * full + start * inner..o * full + end * inner]);
            }
            out
        }
        Op::Reshape(a) => val(*a).data().to_vec(),
        Op::GatherRows { input, index } => {
            let t = val(*input);
            let c = t.numel() / t.shape()[0];
            let mut out = Vec::with_capacity(index.len() * c);
            for &r in index.iter() {
                out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
            out
        }
        Op::SegmentMean {
            input,
            segment,
            counts,
        } => {
            let t = val(*input);
            let d = t.shape()[1];
            let mut out = vec![0.0; counts.len() * d];
            for (r, &s) in segment.iter().enumerate() {
                for j in 0..d {
                    out[s * d + j] += t.data()[r * d + j];
                }
            }
            for (s, &c) in counts.iter().enumerate() {
                for j in 0..d {
                    out[s * d + j] /= c as f64;
                }
            }
            out
        }
        Op::Conv3d {
            input,
            weight,
            bias,
        } => {
            let (x, w, b) = (val(*input), val(*weight), val(*bias));
            let dims = conv_dense_dims(x.shape());
            let cout = w.shape()[1];
            conv_forward(
                dims[0] * dims[1] * dims[2],
                dims[3],
                cout,
                x.data(),
                w.data(),
                b.data(),
                |f| for_each_dense_tap(dims, |v, u, k| f(v, u, k)),
            )
        }
        Op::SparseConv3d {
            input,
            weight,
            bias,
            map,
        } => {
            let (x, w, b) = (val(*input), val(*weight), val(*bias));
            let cout = w.shape()[1];
            conv_forward(
                map.sites(),
                x.shape()[1],
                cout,
                x.data(),
                w.data(),
                b.data(),
                |f| {
                    for (v, row) in map.entries.iter().enumerate() {
                        for &(k, u) in row {
                            f(v, u, k);
                        }
                    }
                },
            )
        }
        Op::LayerNorm {
            input,
            gamma,
            beta,
            eps,
        } => {
            let (x, gm, bt) = (val(*input), val(*gamma), val(*beta));
            let d = gm.numel();
            let mut out = vec![0.0; x.numel()];
            for (xr, yr) in x.data().chunks(d).zip(out.chunks_mut(d)) {
                let mu = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    yr[j] = (xr[j] - mu) * inv * gm.data()[j] + bt.data()[j];
                }
            }
            out
        }
    };
    Tensor::new(&shape, data)
}

fn slot<'a>(graph: &Graph, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> &'a mut Vec<f64> {
    let n: usize = graph.shape(id).iter().product();
    grads[id.0].get_or_insert_with(|| vec![0.0; n])
}

pub(crate) fn backward_node(
    graph: &Graph,
    ev: &Evaluation,
    i: usize,
    g: &[f64],
    needs: &[bool],
    grads: &mut [Option<Vec<f64>>],
) -> Result<()> {
    let shape = graph.node_shape(i).to_vec();
    let val = |id: NodeId| ev.value(id);
    let out = ev.value(NodeId(i));
    let need = |id: NodeId| needs[id.0];

    // Elementwise unary: grad_in += g * local(x, y).
    macro_rules! unary {
        ($a:expr, |$x:ident, $y:ident| $local:expr) => {{
            let a = $a;
            if need(a) {
                let xs = val(a).data().to_vec();
                let ys = out.data();
                let s = slot(graph, grads, a);
                for k in 0..g.len() {
                    let $x = xs[k];
                    let $y = ys[k];
                    s[k] += g[k] * $local;
                }
            }
        }};
    }

    match graph.node_op(i) {
        Op::Leaf(_) | Op::Const(_) => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if need(*a) {
                let bd = tb.data().to_vec();
                let s = slot(graph, grads, *a);
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let mut acc = 0.0;
                        for (gv, bv) in grow.iter().zip(brow) {
                            acc += gv * bv;
                        }
                        s[r * k + p] += acc;
                    }
                }
            }
            if need(*b) {
                let ad = ta.data().to_vec();
                let s = slot(graph, grads, *b);
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let av = ad[r * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (sv, gv) in s[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *sv += av * gv;
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            if need(*a) {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let s = slot(graph, grads, *a);
                for p in 0..r {
                    for q in 0..c {
                        s[p * c + q] += g[q * r + p];
                    }
                }
            }
        }
        op @ (Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b)) => {
            let (ta, tb) = (val(*a), val(*b));
            let ia = Index::new(&shape, ta.shape());
            let ib = Index::new(&shape, tb.shape());
            let (da, db) = (ta.data().to_vec(), tb.data().to_vec());
            if need(*a) {
                let s = slot(graph, grads, *a);
                for k in 0..g.len() {
                    let local = match op {
                        Op::Add(..) | Op::Sub(..) => 1.0,
                        Op::Mul(..) => db[ib.at(k)],
                        _ => 1.0 / db[ib.at(k)],
                    };
                    s[ia.at(k)] += g[k] * local;
                }
            }
            if need(*b) {
                let s = slot(graph, grads, *b);
                for k in 0..g.len() {
                    let local = match op {
                        Op::Add(..) => 1.0,
                        Op::Sub(..) => -1.0,
                        Op::Mul(..) => da[ia.at(k)],
                        _ => {
                            let y = db[ib.at(k)];
                            -da[ia.at(k)] / (y * y)
                        }
                    };
                    s[ib.at(k)] += g[k] * local;
                }
            }
        }
        Op::Scale(a, c) => unary!(*a, |_x, _y| *c),
        Op::Shift(a, _) => unary!(*a, |_x, _y| 1.0),
        Op::Relu(a) => unary!(*a, |x, _y| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Sigmoid(a) => unary!(*a, |_x, y| y * (1.0 - y)),
        Op::Exp(a) => unary!(*a, |_x, y| y),
        Op::Log(a) => unary!(*a, |x, _y| 1.0 / x),
        Op::Sqrt(a) => unary!(*a, |_x, y| if y > 0.0 { 0.5 / y } else { 0.0 }),
        Op::Abs(a) => unary!(*a, |x, _y| if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }),
        Op::Softplus(a) => unary!(*a, |x, _y| sigmoid(x)),
        Op::Softmax(a) => {
            if need(*a) {
                let d = *shape.last().unwrap();
                let y = out.data();
                let s = slot(graph, grads, *a);
                for r in 0..y.len() / d {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        s[r * d + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            if need(*a) {
                let d = *shape.last().unwrap();
                let y = out.data();
                let s = slot(graph, grads, *a);
                for r in 0..y.len() / d {
                    let gr = &g[r * d..(r + 1) * d];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..d {
                        s[r * d + j] += gr[j] - y[r * d + j].exp() * gsum;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if need(*a) {
                slot(graph, grads, *a).iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean(a) => {
            if need(*a) {
                let s = slot(graph, grads, *a);
                let n = s.len() as f64;
                s.iter_mut().for_each(|v| *v += g[0] / n);
            }
        }
        Op::SumLast(a) => {
            if need(*a) {
                let d = *val(*a).shape().last().unwrap();
                let s = slot(graph, grads, *a);
                for (k, v) in s.iter_mut().enumerate() {
                    *v += g[k / d];
                }
            }
        }
        Op::MeanRows(a) => {
            if need(*a) {
                let (n, d) = (val(*a).shape()[0], val(*a).shape()[1]);
                let s = slot(graph, grads, *a);
                for r in 0..n {
                    for j in 0..d {
                        s[r * d + j] += g[j] / n as f64;
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, inner) = outer_inner(&shape, *axis);
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &id in inputs {
                let block = val(id).shape()[*axis] * inner;
                if need(id) {
                    let s = slot(graph, grads, id);
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + block];
                        for (sv, gv) in s[o * block..(o + 1) * block].iter_mut().zip(src) {
                            *sv += gv;
                        }
                    }
                }
                offset += block;
            }
        }
        Op::Slice {
            input,
            axis,
            start,
            end,
        } => {
            if need(*input) {
                let in_shape = val(*input).shape().to_vec();
                let (outer, inner) = outer_inner(&in_shape, *axis);
                let full = in_shape[*axis] * inner;
                let part = (end - start) * inner;
                let s = slot(graph, grads, *input);
                for o in 0..outer {
                    let dst = &mut s[o * full + start * inner..o * full + end * inner];
                    for (dv, gv) in dst.iter_mut().zip(&g[o * part..(o + 1) * part]) {
                        *dv += gv;
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if need(*a) {
                let s = slot(graph, grads, *a);
                for (sv, gv) in s.iter_mut().zip(g) {
                    *sv += gv;
                }
            }
        }
        Op::GatherRows { input, index } => {
            if need(*input) {
                let c = val(*input).numel() / val(*input).shape()[0];
                let s = slot(graph, grads, *input);
                for (r, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        s[src * c + j] += g[r * c + j];
                    }
                }
            }
        }
        Op::SegmentMean {
            input,
            segment,
            counts,
        } => {
            if need(*input) {
                let d = val(*input).shape()[1];
                let s = slot(graph, grads, *input);
                for (r, &seg) in segment.iter().enumerate() {
                    let c = counts[seg] as f64;
                    for j in 0..d {
                        s[r * d + j] += g[seg * d + j] / c;
                    }
                }
            }
        }
        Op::Conv3d {
            input,
            weight,
            bias,
        } => {
            let (x, w) = (val(*input), val(*weight));
            let dims = conv_dense_dims(x.shape());
            let (cin, cout) = (dims[3], w.shape()[1]);
            let (xd, wd) = (x.data().to_vec(), w.data().to_vec());
            let mut gx = need(*input).then(|| vec![0.0; xd.len()]);
            let mut gw = need(*weight).then(|| vec![0.0; wd.len()]);
            let mut gb = need(*bias).then(|| vec![0.0; cout]);
            conv_backward(
                cin,
                cout,
                &xd,
                &wd,
                g,
                gx.as_mut(),
                gw.as_mut(),
                gb.as_mut(),
                |f| for_each_dense_tap(dims, |v, u, k| f(v, u, k)),
            );
            add_into(graph, grads, *input, gx);
            add_into(graph, grads, *weight, gw);
            add_into(graph, grads, *bias, gb);
        }
        Op::SparseConv3d {
            input,
            weight,
            bias,
            map,
        } => {
            let (x, w) = (val(*input), val(*weight));
            let (cin, cout) = (x.shape()[1], w.shape()[1]);
            let (xd, wd) = (x.data().to_vec(), w.data().to_vec());
            let mut gx = need(*input).then(|| vec![0.0; xd.len()]);
            let mut gw = need(*weight).then(|| vec![0.0; wd.len()]);
            let mut gb = need(*bias).then(|| vec![0.0; cout]);
            conv_backward(
                cin,
                cout,
                &xd,
                &wd,
                g,
                gx.as_mut(),
                gw.as_mut(),
                gb.as_mut(),
                |f| {
                    for (v, row) in map.entries.iter().enumerate() {
                        for &(k, u) in row {
                            f(v, u, k);
                        }
                    }
                },
            );
            add_into(graph, grads, *input, gx);
            add_into(graph, grads, *weight, gw);
            add_into(graph, grads, *bias, gb);
        }
        Op::LayerNorm {
            input,
            gamma,
            beta,
            eps,
        } => {
            let (x, gm) = (val(*input), val(*gamma));
            let d = gm.numel();
            let xd = x.data();
            let gmd = gm.data().to_vec();
            let mut gx = vec![0.0; xd.len()];
            let mut ggamma = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for r in 0..xd.len() / d {
                let xr = &xd[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mu = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = xr.iter().map(|v| (v - mu) * inv).collect();
                let gxhat: Vec<f64> = gr.iter().zip(&gmd).map(|(a, b)| a * b).collect();
                let m1 = gxhat.iter().sum::<f64>() / d as f64;
                let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    gx[r * d + j] = inv * (gxhat[j] - m1 - xhat[j] * m2);
                    ggamma[j] += gr[j] * xhat[j];
                    gbeta[j] += gr[j];
                }
            }
            add_into(graph, grads, *input, need(*input).then_some(gx));
            add_into(graph, grads, *gamma, need(*gamma).then_some(ggamma));
            add_into(graph, grads, *beta, need(*beta).then_some(gbeta));
        }
    }
    Ok(())
}

fn add_into(graph: &Graph, grads: &mut [Option<Vec<f64>>], id: NodeId, g: Option<Vec<f64>>) {
    let Some(g) = g else { return };
    match &mut grads[id.0] {
        Some(s) => s.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => {
            debug_assert_eq!(g.len(), graph.shape(id).iter().product::<usize>());
            *slot = Some(g);
        }
    }
}
