//! Multi-head self-attention with an additive relative-position bias.
//!
//! The bias for head `h` between tokens `i` and `j` is a learned affine map
//! of the coordinate difference `rel[i, j]`, added to the attention logits
//! before the softmax. Each layer is post-norm:
//! `h = LN(x + MHA(x))`, `out = LN(h + FFN(h))`.

use super::nn::{linear, LinearInit, ParamInit};
use super::{Graph, NodeId, Tensor, TensorMap};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhsaConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Width of the relative-position descriptor (3 for coordinate deltas).
    pub rel_dim: usize,
}

impl MhsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "feature size {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Parameter naming and initialisation for one attention layer.
pub struct MhsaParams;

impl MhsaParams {
    pub fn init(init: &mut ParamInit, store: &mut TensorMap, prefix: &str, cfg: &MhsaConfig) {
        let d = cfg.dim;
        for proj in ["q", "k", "v", "o"] {
            init.linear(
                store,
                &format!("{prefix}.{proj}"),
                d,
                d,
                LinearInit::Default,
            );
        }
        init.linear(
            store,
            &format!("{prefix}.rel"),
            cfg.rel_dim,
            cfg.heads,
            LinearInit::Default,
        );
        init.linear(
            store,
            &format!("{prefix}.ffn1"),
            d,
            cfg.ffn_hidden,
            LinearInit::Default,
        );
        init.linear(
            store,
            &format!("{prefix}.ffn2"),
            cfg.ffn_hidden,
            d,
            LinearInit::Default,
        );
        init.ones(store, &format!("{prefix}.ln1.gamma"), d);
        init.zeros(store, &format!("{prefix}.ln1.beta"), d);
        init.ones(store, &format!("{prefix}.ln2.gamma"), d);
        init.zeros(store, &format!("{prefix}.ln2.beta"), d);
    }
}

const LN_EPS: f64 = 1e-5;

/// Appends one attention + feed-forward layer to `g`.
///
/// `x: [T, D]`, `rel: [T·T, rel_dim]` with row `i·T + j` describing the
/// offset from token `j` to token `i`. Attention weights of head `h` are
/// registered as graph output `{prefix}.attn{h}`.
pub fn mhsa_layer(
    g: &mut Graph,
    x: NodeId,
    rel: NodeId,
    prefix: &str,
    cfg: &MhsaConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let xs = g.shape(x).to_vec();
    if xs.len() != 2 || xs[1] != cfg.dim {
        return Err(Error::Invalid(format!(
            "tokens {xs:?} do not match dim {}",
            cfg.dim
        )));
    }
    let t = xs[0];
    if g.shape(rel) != [t * t, cfg.rel_dim] {
        return Err(Error::Invalid(format!(
            "relative positions {:?}, expected [{}, {}]",
            g.shape(rel),
            t * t,
            cfg.rel_dim
        )));
    }
    let d = cfg.dim;
    let dh = d / cfg.heads;
    let q = linear(g, x, &format!("{prefix}.q"), d, d)?;
    let k = linear(g, x, &format!("{prefix}.k"), d, d)?;
    let v = linear(g, x, &format!("{prefix}.v"), d, d)?;
    let bias = linear(g, rel, &format!("{prefix}.rel"), cfg.rel_dim, cfg.heads)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice(q, 1, h * dh, (h + 1) * dh)?;
        let kh = g.slice(k, 1, h * dh, (h + 1) * dh)?;
        let vh = g.slice(v, 1, h * dh, (h + 1) * dh)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale);
        let bh = g.slice(bias, 1, h, h + 1)?;
        let bh = g.reshape(bh, &[t, t])?;
        let logits = g.add(logits, bh)?;
        let attn = g.softmax(logits)?;
        g.set_output(&format!("{prefix}.attn{h}"), attn);
        heads.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat(&heads, 1)?;
    let o = linear(g, merged, &format!("{prefix}.o"), d, d)?;

    let res = g.add(x, o)?;
    let g1 = g.leaf(&format!("{prefix}.ln1.gamma"), &[d])?;
    let b1 = g.leaf(&format!("{prefix}.ln1.beta"), &[d])?;
    let h1 = g.layer_norm(res, g1, b1, LN_EPS)?;

    let f = linear(g, h1, &format!("{prefix}.ffn1"), d, cfg.ffn_hidden)?;
    let f = g.relu(f);
    let f = linear(g, f, &format!("{prefix}.ffn2"), cfg.ffn_hidden, d)?;
    let res2 = g.add(h1, f)?;
    let g2 = g.leaf(&format!("{prefix}.ln2.gamma"), &[d])?;
    let b2 = g.leaf(&format!("{prefix}.ln2.beta"), &[d])?;
    g.layer_norm(res2, g2, b2, LN_EPS)
}

/// Runs `layers` stacked attention layers (`{prefix}.{l}`) on plain tensors.
///
/// `tokens: [T, D]`, `rel_pos: [T, T, P]`.
pub fn mhsa_forward(
    tokens: &Tensor,
    params: &TensorMap,
    prefix: &str,
    cfg: &MhsaConfig,
    layers: usize,
    rel_pos: &Tensor,
) -> Result<Tensor> {
    cfg.validate()?;
    let t = tokens.shape()[0];
    if rel_pos.shape() != [t, t, cfg.rel_dim] {
        return Err(Error::Invalid(format!(
            "relative positions {:?}, expected [{t}, {t}, {}]",
            rel_pos.shape(),
            cfg.rel_dim
        )));
    }
    let mut g = Graph::new();
    let x = g.leaf("tokens", tokens.shape())?;
    let rel = g.constant(rel_pos.clone().reshaped(&[t * t, cfg.rel_dim])?);
    let mut h = x;
    for l in 0..layers {
        h = mhsa_layer(&mut g, h, rel, &format!("{prefix}.{l}"), cfg)?;
    }
    let mut bindings = params.clone();
    bindings.insert("tokens".into(), tokens.clone());
    let ev = g.evaluate(&bindings)?;
    Ok(ev.value(h).clone())
}
