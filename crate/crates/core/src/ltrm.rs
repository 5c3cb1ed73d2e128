//! Lightweight token refinement: the cheap branch for tokens that skip
//! attention. Linear, 3x3 depthwise convolution on the token grid, linear,
//! then an efficient-channel-attention gate.
//!
//! The convolution runs on the full grid, so tokens sent to attention still
//! serve as spatial context; the caller keeps only the rows it needs.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{dense, normal, param_tree, uniform};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

pub const DW_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct LtrmParams<L> {
    pub w1: L,
    pub b1: L,
    pub dw_kernel: L,
    pub w2: L,
    pub b2: L,
    pub eca_kernel: L,
    pub eca_bias: L,
}
param_tree!(LtrmParams {
    w1,
    b1,
    dw_kernel,
    w2,
    b2,
    eca_kernel,
    eca_bias
});

/// Adaptive ECA kernel size: the odd integer nearest `log2(D)/2 + 1/2`, at least 3.
pub fn eca_kernel_size(dim: usize) -> usize {
    let t = (dim.max(1) as f64).log2() / 2.0 + 0.5;
    let odd = 2.0 * ((t - 1.0) / 2.0).round() + 1.0;
    (odd.max(3.0)) as usize
}

impl<T: Element> LtrmParams<Tensor<T>> {
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        let k = eca_kernel_size(dim);
        Self {
            w1: dense(dim, dim, rng),
            b1: Tensor::zeros(vec![dim]),
            dw_kernel: normal(&[dim, DW_KERNEL, DW_KERNEL], 1.0 / DW_KERNEL as f64, rng),
            w2: dense(dim, dim, rng),
            b2: Tensor::zeros(vec![dim]),
            eca_kernel: uniform(&[k], 1.0 / (k as f64).sqrt(), rng),
            eca_bias: Tensor::zeros(vec![1]),
        }
    }
}

/// Refines every token of `x: [B,N,D]` laid out on a `grid = (Hp, Wp)` patch grid.
pub fn ltrm_forward<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    grid: (usize, usize),
    p: &LtrmParams<Var>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(
            "ltrm_forward",
            format!("expected [B,N,D] tokens, got {shape:?}"),
        ));
    }
    let (b, n, dim) = (shape[0], shape[1], shape[2]);
    let (hp, wp) = grid;
    if hp * wp != n {
        return Err(Error::invalid(
            "ltrm_forward",
            format!("grid {hp}x{wp} does not hold {n} tokens"),
        ));
    }
    let y = g.matmul(x, p.w1)?;
    let y = g.add(y, p.b1)?;
    let y = g.reshape(y, &[b, hp, wp, dim])?;
    let y = g.permute(y, &[0, 3, 1, 2])?;
    let y = g.depthwise_conv2d(y, p.dw_kernel)?;
    let y = g.permute(y, &[0, 2, 3, 1])?;
    let y = g.reshape(y, &[b, n, dim])?;
    let y = g.matmul(y, p.w2)?;
    let y = g.add(y, p.b2)?;
    let gate = eca_gate(g, y, p)?;
    g.mul(y, gate)
}

/// Per-channel gate `[B,1,D]` in `(0,1)` from the channel means of `y: [B,N,D]`.
pub fn eca_gate<T: Element>(g: &mut Graph<T>, y: Var, p: &LtrmParams<Var>) -> Result<Var> {
    let desc = g.mean_axis(y, 1)?;
    let mixed = g.conv1d(desc, p.eca_kernel)?;
    let mixed = g.add(mixed, p.eca_bias)?;
    g.sigmoid(mixed)
}

/// Flops of one refinement pass over `n` tokens:
/// `2 N D^2` per linear layer, `9 N D` for the depthwise convolution, and
/// `N D` pooling + `N D` gating for ECA. The `2 k D` channel convolution does
/// not scale with `N` and is left out, which keeps the count linear in `N`.
pub fn ltrm_cost(n: u64, dim: u64) -> u64 {
    let linear = 2 * n * dim * dim;
    linear + 9 * n * dim + linear + 2 * n * dim
}
