//! Multi-head self-attention, attention over a selected token subset, and the
//! analytic cost of the attention probability map.
//!
//! Weights use the row-vector convention `y = x W`, so with a single key the
//! output is `x Wv Wo`. There are no projection biases and no positional
//! terms inside attention; the op is permutation-equivariant over tokens.

use std::fmt::Write as _;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{dense, param_tree};
use crate::rng::Rng;
use crate::tensor::Element;
use crate::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<L> {
    pub wq: L,
    pub wk: L,
    pub wv: L,
    pub wo: L,
}
param_tree!(AttentionParams { wq, wk, wv, wo });

impl<T: Element> AttentionParams<Tensor<T>> {
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        Self {
            wq: dense(dim, dim, rng),
            wk: dense(dim, dim, rng),
            wv: dense(dim, dim, rng),
            wo: dense(dim, dim, rng),
        }
    }
}

fn head_dim(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "embedding width {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(dim / heads)
}

/// Global multi-head attention over every token of `x: [B,N,D]`.
pub fn attend<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    params: &AttentionParams<Var>,
    heads: usize,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(
            "attend",
            format!("expected [B,N,D] tokens, got {shape:?}"),
        ));
    }
    let (b, n, dim) = (shape[0], shape[1], shape[2]);
    let d = head_dim(dim, heads)?;
    if g.shape(params.wq) != [dim, dim] {
        return Err(Error::shape("attend", &shape, g.shape(params.wq)));
    }
    let split_heads = |g: &mut Graph<T>, w: Var| -> Result<Var> {
        let y = g.matmul(x, w)?;
        let y = g.reshape(y, &[b, n, heads, d])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = split_heads(g, params.wq)?;
    let k = split_heads(g, params.wk)?;
    let v = split_heads(g, params.wv)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let probs = g.softmax(scores, 3)?;
    let ctx = g.matmul(probs, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, n, dim])?;
    g.matmul(ctx, params.wo)
}

/// Attention restricted to the rows `idx[b]` of each sample.
///
/// Returns, per sample, the updated selected rows as `[1, len, D]` (or `None`
/// when nothing is selected). Unselected rows are not touched; scattering the
/// result back is the caller's job.
pub fn attend_subset<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    idx: &[Vec<usize>],
    params: &AttentionParams<Var>,
    heads: usize,
) -> Result<Vec<Option<Var>>> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[0] != idx.len() {
        return Err(Error::invalid(
            "attend_subset",
            format!("{} index lists for tokens of shape {shape:?}", idx.len()),
        ));
    }
    let n = shape[1];
    let mut out = Vec::with_capacity(idx.len());
    for (b, rows) in idx.iter().enumerate() {
        if let Some(w) = rows.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "attend_subset",
                format!("indices not strictly increasing at {w:?}"),
            ));
        }
        if let Some(&last) = rows.last() {
            if last >= n {
                return Err(Error::invalid(
                    "attend_subset",
                    format!("index {last} out of range 0..{n}"),
                ));
            }
        }
        if rows.is_empty() {
            out.push(None);
            continue;
        }
        let sample = g.narrow(x, 0, b, 1)?;
        let selected = g.index_select(sample, 1, rows)?;
        out.push(Some(attend(g, selected, params, heads)?));
    }
    Ok(out)
}

/// Memory and arithmetic of one attention layer over `n_routed` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionCost {
    /// Bytes of the `h x N x N` probability map: `dtype_bytes * h * N^2`.
    pub map_bytes: u64,
    /// Multiply-add flops: `4 h N^2 d` for scores and context plus `8 N D^2`
    /// for the four projections.
    pub flops: u64,
}

pub fn attention_cost(n_routed: u64, heads: u64, dim: u64, dtype_bytes: u64) -> AttentionCost {
    let d = dim.checked_div(heads).unwrap_or(0);
    let n2 = n_routed * n_routed;
    AttentionCost {
        map_bytes: dtype_bytes * heads * n2,
        flops: 2 * heads * n2 * d * 2 + 4 * 2 * n_routed * dim * dim,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockCost {
    pub block: usize,
    pub routed_tokens: u64,
    pub attn_map_bytes: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostReport {
    pub attn_map_bytes: u64,
    pub matmul_flops: u64,
    pub per_block: Vec<BlockCost>,
}

impl CostReport {
    pub fn from_blocks(per_block: Vec<BlockCost>) -> Self {
        Self {
            attn_map_bytes: per_block.iter().map(|b| b.attn_map_bytes).sum(),
            matmul_flops: per_block.iter().map(|b| b.flops).sum(),
            per_block,
        }
    }

    /// Cost of a forward pass given, per block, the number of attended tokens
    /// of each sample. Attention maps are per sample, so costs add over samples.
    pub fn for_routing(routed: &[Vec<u64>], heads: u64, dim: u64, dtype_bytes: u64) -> Self {
        let blocks = routed
            .iter()
            .enumerate()
            .map(|(block, counts)| {
                let mut cost = BlockCost {
                    block,
                    routed_tokens: 0,
                    attn_map_bytes: 0,
                    flops: 0,
                };
                for &n in counts {
                    let c = attention_cost(n, heads, dim, dtype_bytes);
                    cost.routed_tokens += n;
                    cost.attn_map_bytes += c.map_bytes;
                    cost.flops += c.flops;
                }
                cost
            })
            .collect();
        Self::from_blocks(blocks)
    }

    /// `block,routed_tokens,attn_map_bytes,flops`, one row per block.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,routed_tokens,attn_map_bytes,flops\n");
        for b in &self.per_block {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                b.block, b.routed_tokens, b.attn_map_bytes, b.flops
            );
        }
        s
    }
}
