//! Local-global routing-probability predictor.
//!
//! Each token is normalized and projected to `z` of width `D`. The first half
//! of `z` stays per token; the second half is averaged over all tokens of the
//! sample into one global vector shared by every token. The concatenation is
//! mapped to two logits and log-normalized. Column 0 is the refinement
//! branch, column 1 the attention branch.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{dense, param_tree, uniform};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams<L> {
    pub ln_gain: L,
    pub ln_bias: L,
    pub w1: L,
    pub b1: L,
    pub w2: L,
    pub b2: L,
}
param_tree!(RouterParams {
    ln_gain,
    ln_bias,
    w1,
    b1,
    w2,
    b2
});

impl<T: Element> RouterParams<Tensor<T>> {
    /// Output weights start within `±1e-3`, so initial routing is close to 50/50.
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        Self {
            ln_gain: Tensor::ones(vec![dim]),
            ln_bias: Tensor::zeros(vec![dim]),
            w1: dense(dim, dim, rng),
            b1: Tensor::zeros(vec![dim]),
            w2: uniform(&[dim, 2], 1e-3, rng),
            b2: Tensor::zeros(vec![2]),
        }
    }
}

/// Log routing probabilities `[B,N,2]` for tokens `x: [B,N,D]`.
pub fn route_probs<T: Element>(g: &mut Graph<T>, x: Var, p: &RouterParams<Var>) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(
            "route_probs",
            format!("expected [B,N,D] tokens, got {shape:?}"),
        ));
    }
    let (b, n, dim) = (shape[0], shape[1], shape[2]);
    if dim % 2 != 0 {
        return Err(Error::Config(format!(
            "router needs an even embedding width, got {dim}"
        )));
    }
    let half = dim / 2;
    let normed = g.layer_norm(x, p.ln_gain, p.ln_bias, LN_EPS)?;
    let z = g.matmul(normed, p.w1)?;
    let z = g.add(z, p.b1)?;
    let local = g.narrow(z, 2, 0, half)?;
    let global = g.narrow(z, 2, half, half)?;
    let global = g.mean_axis(global, 1)?;
    let global = g.broadcast_to(global, &[b, n, half])?;
    let joined = g.concat(&[local, global], 2)?;
    let logits = g.matmul(joined, p.w2)?;
    let logits = g.add(logits, p.b2)?;
    g.log_softmax(logits, 2)
}
