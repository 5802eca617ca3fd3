use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Tensor, TensorMap};
use crate::error::Result;

/// `x · W + b` with leaves `{prefix}.weight: [in, out]` and `{prefix}.bias: [out]`.
pub fn linear(
    g: &mut Graph,
    x: NodeId,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
) -> Result<NodeId> {
    let w = g.leaf(&format!("{prefix}.weight"), &[in_dim, out_dim])?;
    let b = g.leaf(&format!("{prefix}.bias"), &[out_dim])?;
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// Stack of linear layers `{prefix}.0`, `{prefix}.1`, … with ReLU between
/// them. `dims` lists every width including input and output.
pub fn mlp(
    g: &mut Graph,
    x: NodeId,
    prefix: &str,
    dims: &[usize],
    relu_last: bool,
) -> Result<NodeId> {
    let mut h = x;
    let layers = dims.len() - 1;
    for l in 0..layers {
        h = linear(g, h, &format!("{prefix}.{l}"), dims[l], dims[l + 1])?;
        if l + 1 < layers || relu_last {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Which scale to use for a linear layer's initial weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LinearInit {
    /// Uniform in `±1/sqrt(fan_in)`.
    Default,
    /// Uniform in `±gain/sqrt(fan_in)`.
    Scaled(f64),
    Zero,
}

/// Seeded parameter initialiser writing into a [`TensorMap`].
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if bound == 0.0 {
                    0.0
                } else {
                    self.rng.random_range(-bound..bound)
                }
            })
            .collect();
        Tensor::new(shape, data)
            .expect("shape is non-empty")
            .with_grad()
    }

    pub fn linear(
        &mut self,
        store: &mut TensorMap,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        init: LinearInit,
    ) {
        let bound = match init {
            LinearInit::Default => 1.0 / (in_dim as f64).sqrt(),
            LinearInit::Scaled(gain) => gain / (in_dim as f64).sqrt(),
            LinearInit::Zero => 0.0,
        };
        store.insert(
            format!("{prefix}.weight"),
            self.uniform(&[in_dim, out_dim], bound),
        );
        store.insert(
            format!("{prefix}.bias"),
            Tensor::zeros(&[out_dim]).with_grad(),
        );
    }

    pub fn mlp(&mut self, store: &mut TensorMap, prefix: &str, dims: &[usize], last: LinearInit) {
        for l in 0..dims.len() - 1 {
            let init = if l + 2 == dims.len() {
                last
            } else {
                LinearInit::Default
            };
            self.linear(store, &format!("{prefix}.{l}"), dims[l], dims[l + 1], init);
        }
    }

    pub fn ones(&mut self, store: &mut TensorMap, name: &str, dim: usize) {
        store.insert(name.to_string(), Tensor::full(&[dim], 1.0).with_grad());
    }

    pub fn zeros(&mut self, store: &mut TensorMap, name: &str, dim: usize) {
        store.insert(name.to_string(), Tensor::zeros(&[dim]).with_grad());
    }
}
