//! Patch embedding, the routed transformer block, the encoder stack, the
//! routing-free teacher and a small upsampling decoder head.
//!
//! A routed block is pre-norm. The router reads the normalized tokens, the
//! decision step splits them between global attention over the selected
//! subset and the refinement module, and the two results are written back in
//! place: `gate * attention + (1 - gate) * refined`, where `gate` is the
//! straight-through decision during training and a constant 0/1 mask
//! otherwise. A residual add and the usual MLP sublayer follow.
//!
//! With every decision forced to 1 the merge reduces to `1 * a + 0 * r`, which
//! is exactly `a`, so the routed block reproduces the plain block bit for bit.

use serde::{Deserialize, Serialize};

use crate::attention::{attend, attend_subset, AttentionParams};
use crate::autograd::{Graph, Var};
use crate::batr::{
    apply_topk_cap, compute_gamma, decide_infer, decide_train, decide_train_with, indices_where,
    RoutingConfig,
};
use crate::error::{Error, Result};
use crate::ltrm::{ltrm_forward, LtrmParams};
use crate::params::{dense, normal, param_tree};
use crate::rng::Rng;
use crate::router::{route_probs, RouterParams};
use crate::tensor::{DType, Element, Tensor};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input `[H, W]`.
    pub img_size: [usize; 2],
    pub patch: usize,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub routing: RoutingConfig,
    /// Blocks that carry a router; `None` routes every block.
    #[serde(default)]
    pub routed_blocks: Option<Vec<usize>>,
    #[serde(default)]
    pub dtype: DType,
}

fn default_channels() -> usize {
    3
}

fn default_mlp_ratio() -> usize {
    4
}

impl EncoderConfig {
    /// 64x64 RGB, 16-pixel patches, width 32, two heads, two blocks.
    pub fn tiny() -> Self {
        Self {
            img_size: [64, 64],
            patch: 16,
            in_channels: 3,
            embed_dim: 32,
            heads: 2,
            depth: 2,
            mlp_ratio: 4,
            routing: RoutingConfig::default(),
            routed_blocks: None,
            dtype: DType::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.img_size;
        let p = self.patch;
        if p == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!(
                "img-size {h}x{w} is not divisible by patch {p}"
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in-channels must be positive".into()));
        }
        let d = self.embed_dim;
        if d < 2 || !d.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "embed-dim must be even and at least 2, got {d}"
            )));
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed-dim {d} is not divisible by heads {}",
                self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp-ratio must be positive".into()));
        }
        self.routing.validate()?;
        if let Some(blocks) = &self.routed_blocks {
            for (i, &b) in blocks.iter().enumerate() {
                if b >= self.depth {
                    return Err(Error::Config(format!(
                        "routed-blocks entry {b} exceeds depth {}",
                        self.depth
                    )));
                }
                if blocks[..i].contains(&b) {
                    return Err(Error::Config(format!("routed-blocks lists {b} twice")));
                }
            }
        }
        Ok(())
    }

    /// Patch grid `(H/p, W/p)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.img_size[0] / self.patch, self.img_size[1] / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (hp, wp) = self.grid();
        hp * wp
    }

    pub fn is_routed(&self, block: usize) -> bool {
        match &self.routed_blocks {
            None => block < self.depth,
            Some(b) => b.contains(&block),
        }
    }

    /// Routed block indices in ascending order.
    pub fn routed(&self) -> Vec<usize> {
        (0..self.depth).filter(|&b| self.is_routed(b)).collect()
    }

    /// The same architecture with no routed blocks.
    pub fn teacher(&self) -> Self {
        Self {
            routed_blocks: Some(Vec::new()),
            ..self.clone()
        }
    }

    /// Upsampling factors `(s1, s2)` of the two decoder stages, `s1 * s2 = p`.
    /// `s2` is the largest divisor of `p` not above `sqrt(p)`.
    pub fn decoder_factors(&self) -> (usize, usize) {
        let p = self.patch;
        let s2 = (1..=p)
            .filter(|s| p.is_multiple_of(*s) && s * s <= p)
            .max()
            .unwrap_or(1);
        (p / s2, s2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingParams<L> {
    pub router: RouterParams<L>,
    pub ltrm: LtrmParams<L>,
}
param_tree!(RoutingParams {} groups { router, ltrm });

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<L> {
    pub ln1_gain: L,
    pub ln1_bias: L,
    pub ln2_gain: L,
    pub ln2_bias: L,
    pub fc1_w: L,
    pub fc1_b: L,
    pub fc2_w: L,
    pub fc2_b: L,
    pub attn: AttentionParams<L>,
    pub routing: Option<RoutingParams<L>>,
}
param_tree!(BlockParams { ln1_gain, ln1_bias, ln2_gain, ln2_bias, fc1_w, fc1_b, fc2_w, fc2_b } groups { attn, routing });

/// Two non-overlapping transposed-convolution stages, `D -> D/2 -> 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<L> {
    pub up1_w: L,
    pub up1_b: L,
    pub up2_w: L,
    pub up2_b: L,
}
param_tree!(DecoderParams {
    up1_w,
    up1_b,
    up2_w,
    up2_b
});

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<L> {
    /// Bias-free patch projection `[C p^2, D]`.
    pub patch_w: L,
    /// Learned positional embedding `[N, D]`.
    pub pos: L,
    pub blocks: Vec<BlockParams<L>>,
    pub decoder: DecoderParams<L>,
}
param_tree!(ModelParams { patch_w, pos } groups { blocks, decoder });

impl<T: Element> RoutingParams<Tensor<T>> {
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        Self {
            router: RouterParams::init(dim, rng),
            ltrm: LtrmParams::init(dim, rng),
        }
    }
}

impl<T: Element> BlockParams<Tensor<T>> {
    pub fn init(cfg: &EncoderConfig, routed: bool, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_ratio;
        Self {
            ln1_gain: Tensor::ones(vec![d]),
            ln1_bias: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::ones(vec![d]),
            ln2_bias: Tensor::zeros(vec![d]),
            fc1_w: dense(d, hidden, rng),
            fc1_b: Tensor::zeros(vec![hidden]),
            fc2_w: dense(hidden, d, rng),
            fc2_b: Tensor::zeros(vec![d]),
            attn: AttentionParams::init(d, rng),
            routing: routed.then(|| RoutingParams::init(d, rng)),
        }
    }
}

impl<T: Element> ModelParams<Tensor<T>> {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        let (s1, s2) = cfg.decoder_factors();
        let patch_dim = cfg.in_channels * cfg.patch * cfg.patch;
        Self {
            patch_w: dense(patch_dim, d, rng),
            pos: normal(&[cfg.tokens(), d], 0.02, rng),
            blocks: (0..cfg.depth)
                .map(|b| BlockParams::init(cfg, cfg.is_routed(b), rng))
                .collect(),
            decoder: DecoderParams {
                up1_w: dense(d, s1 * s1 * (d / 2), rng),
                up1_b: Tensor::zeros(vec![d / 2]),
                up2_w: dense(d / 2, s2 * s2, rng),
                up2_b: Tensor::zeros(vec![1]),
            },
        }
    }
}

/// Tokens `[B, N, D]` from images `[B, C, H, W]`.
pub fn patch_embed<T: Element>(
    g: &mut Graph<T>,
    img: Var,
    patch_w: Var,
    pos: Var,
    patch: usize,
) -> Result<Var> {
    let shape = g.shape(img).to_vec();
    if shape.len() != 4 {
        return Err(Error::invalid(
            "patch_embed",
            format!("expected [B,C,H,W] images, got {shape:?}"),
        ));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(
            "patch_embed",
            format!("image {h}x{w} is not divisible by patch {patch}"),
        ));
    }
    let (hp, wp) = (h / patch, w / patch);
    let x = g.reshape(img, &[b, c, hp, patch, wp, patch])?;
    let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
    let x = g.reshape(x, &[b, hp * wp, c * patch * patch])?;
    let x = g.matmul(x, patch_w)?;
    g.add(x, pos)
}

/// Frozen randomness of one training-time routing decision.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace<T: Element> {
    pub noise: Tensor<T>,
    pub hard: Tensor<T>,
    pub anchor: Tensor<T>,
}

/// Per routed block traces of a training forward pass. Replaying a trace
/// reuses the same noise, decisions and straight-through anchors, so the
/// forward pass becomes a smooth function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace<T: Element> {
    pub blocks: Vec<BlockTrace<T>>,
}

/// How a single routed block picks its decisions.
pub enum BlockRoute<'a, T: Element> {
    Train {
        tau: f64,
        rng: &'a mut Rng,
    },
    Replay {
        tau: f64,
        trace: &'a BlockTrace<T>,
    },
    Infer {
        max_tokens: Option<usize>,
    },
    /// A given `[B, N]` 0/1 mask, bypassing the router's choice.
    Fixed(&'a Tensor<T>),
}

/// How the encoder's routed blocks pick their decisions.
pub enum RouteControl<'a, T: Element> {
    Train(&'a mut Rng),
    Replay(&'a RoutingTrace<T>),
    Infer {
        max_tokens: Option<usize>,
    },
    /// One `[B, N]` mask per routed block.
    Fixed(&'a [Tensor<T>]),
}

#[derive(Debug, Clone)]
pub struct BlockRouting<T: Element> {
    pub log_p: Tensor<T>,
    /// `[B, N]`, 1 for the attention branch.
    pub decisions: Tensor<T>,
    /// Relaxed attention-branch probabilities `[B, N, 1]` (training only).
    pub soft_attend: Option<Var>,
    pub trace: Option<BlockTrace<T>>,
}

#[derive(Debug, Clone)]
pub struct RoutingRecord<T: Element> {
    pub routed_blocks: Vec<usize>,
    pub blocks: Vec<BlockRouting<T>>,
}

impl<T: Element> RoutingRecord<T> {
    /// Decisions stacked as `[B, M, N]`, or `None` without routed blocks.
    pub fn decisions(&self) -> Option<Tensor<T>> {
        let first = self.blocks.first()?;
        let (b, n) = (first.decisions.shape()[0], first.decisions.shape()[1]);
        let m = self.blocks.len();
        let mut out = Vec::with_capacity(b * m * n);
        for s in 0..b {
            for blk in &self.blocks {
                out.extend_from_slice(&blk.decisions.data()[s * n..(s + 1) * n]);
            }
        }
        Some(Tensor::new(vec![b, m, n], out).expect("sized"))
    }

    /// Fraction of (sample, block, token) triples sent to attention. Without
    /// routed blocks every token is attended, so this is 1.
    pub fn gamma(&self) -> f64 {
        match self.decisions() {
            Some(d) => compute_gamma(&d).expect("binary decisions"),
            None => 1.0,
        }
    }

    /// Mean relaxed attention probability over all routed blocks, as a graph
    /// scalar (training passes only).
    pub fn soft_gamma(&self, g: &mut Graph<T>) -> Result<Option<Var>> {
        let parts: Option<Vec<Var>> = self.blocks.iter().map(|b| b.soft_attend).collect();
        match parts {
            Some(p) if !p.is_empty() => {
                let joined = g.concat(&p, 1)?;
                Ok(Some(g.mean(joined)?))
            }
            _ => Ok(None),
        }
    }

    pub fn trace(&self) -> Option<RoutingTrace<T>> {
        let blocks: Option<Vec<_>> = self.blocks.iter().map(|b| b.trace.clone()).collect();
        blocks.map(|blocks| RoutingTrace { blocks })
    }

    /// Attended token count per routed block and sample.
    pub fn counts(&self) -> Vec<Vec<u64>> {
        self.blocks
            .iter()
            .map(|b| {
                indices_where(&b.decisions, true)
                    .iter()
                    .map(|r| r.len() as u64)
                    .collect()
            })
            .collect()
    }
}

fn mlp<T: Element>(g: &mut Graph<T>, x: Var, p: &BlockParams<Var>) -> Result<Var> {
    let h = g.layer_norm(x, p.ln2_gain, p.ln2_bias, LN_EPS)?;
    let h = g.matmul(h, p.fc1_w)?;
    let h = g.add(h, p.fc1_b)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, p.fc2_w)?;
    let h = g.add(h, p.fc2_b)?;
    g.add(x, h)
}

fn check_mask<T: Element>(mask: &Tensor<T>, b: usize, n: usize) -> Result<()> {
    if mask.shape() != [b, n] {
        return Err(Error::shape("block_forward", &[b, n], mask.shape()));
    }
    compute_gamma(mask).map(|_| ())
}

/// One transformer block over `x: [B, N, D]`.
///
/// `route` is ignored by blocks without routing parameters; a routed block
/// given `None` runs as a plain block (every token attended, router and
/// refinement unused).
pub fn block_forward<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    p: &BlockParams<Var>,
    heads: usize,
    grid: (usize, usize),
    route: Option<BlockRoute<'_, T>>,
) -> Result<(Var, Option<BlockRouting<T>>)> {
    let h = g.layer_norm(x, p.ln1_gain, p.ln1_bias, LN_EPS)?;
    let (Some(rp), Some(route)) = (&p.routing, route) else {
        let a = attend(g, h, &p.attn, heads)?;
        let x1 = g.add(x, a)?;
        return Ok((mlp(g, x1, p)?, None));
    };
    let shape = g.shape(x).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);

    let log_p = route_probs(g, h, &rp.router)?;
    let (decisions, gate, soft_attend, trace) = match route {
        BlockRoute::Train { tau, rng } => {
            let dec = decide_train(g, log_p, tau, rng)?;
            let trace = BlockTrace {
                noise: dec.noise,
                hard: dec.hard.clone(),
                anchor: dec.anchor,
            };
            (dec.hard, dec.gate, Some(dec.soft_attend), Some(trace))
        }
        BlockRoute::Replay { tau, trace } => {
            let dec = decide_train_with(
                g,
                log_p,
                tau,
                &trace.noise,
                Some((&trace.hard, &trace.anchor)),
            )?;
            (
                dec.hard,
                dec.gate,
                Some(dec.soft_attend),
                Some(trace.clone()),
            )
        }
        BlockRoute::Infer { max_tokens } => {
            let lp = g.value(log_p).clone();
            let mut dec = decide_infer(&lp)?;
            if let Some(k) = max_tokens {
                dec = apply_topk_cap(&lp, &dec, k)?;
            }
            let gate = g.constant(dec.reshape(vec![b, n, 1])?);
            (dec, gate, None, None)
        }
        BlockRoute::Fixed(mask) => {
            check_mask(mask, b, n)?;
            let gate = g.constant(mask.reshape(vec![b, n, 1])?);
            (mask.clone(), gate, None, None)
        }
    };

    let idx = indices_where(&decisions, true);
    let parts = attend_subset(g, h, &idx, &p.attn, heads)?;
    let mut rows = Vec::with_capacity(b);
    for (part, sel) in parts.into_iter().zip(&idx) {
        rows.push(match part {
            Some(v) => g.index_scatter(v, 1, sel, n)?,
            None => g.constant(Tensor::zeros(vec![1, n, d])),
        });
    }
    let attended = g.concat(&rows, 0)?;
    let refined = ltrm_forward(g, h, grid, &rp.ltrm)?;
    let keep = g.affine(gate, -1.0, 1.0)?;
    let a = g.mul(attended, gate)?;
    let r = g.mul(refined, keep)?;
    let merged = g.add(a, r)?;
    let x1 = g.add(x, merged)?;
    let out = mlp(g, x1, p)?;
    let record = BlockRouting {
        log_p: g.value(log_p).clone(),
        decisions,
        soft_attend,
        trace,
    };
    Ok((out, Some(record)))
}

/// Patch embedding followed by every block; returns the final tokens and the
/// decisions of the routed blocks.
pub fn encoder_forward<T: Element>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    p: &ModelParams<Var>,
    img: Var,
    control: &mut RouteControl<'_, T>,
) -> Result<(Var, RoutingRecord<T>)> {
    check_structure(cfg, p)?;
    let grid = cfg.grid();
    let tau = cfg.routing.tau;
    let mut x = patch_embed(g, img, p.patch_w, p.pos, cfg.patch)?;
    let mut record = RoutingRecord {
        routed_blocks: Vec::new(),
        blocks: Vec::new(),
    };
    for (i, bp) in p.blocks.iter().enumerate() {
        let route = if bp.routing.is_some() {
            let j = record.blocks.len();
            Some(match control {
                RouteControl::Train(rng) => BlockRoute::Train { tau, rng },
                RouteControl::Replay(trace) => BlockRoute::Replay {
                    tau,
                    trace: trace.blocks.get(j).ok_or_else(|| {
                        Error::invalid(
                            "encoder_forward",
                            format!("trace has no entry for block {i}"),
                        )
                    })?,
                },
                RouteControl::Infer { max_tokens } => BlockRoute::Infer {
                    max_tokens: *max_tokens,
                },
                RouteControl::Fixed(masks) => BlockRoute::Fixed(masks.get(j).ok_or_else(|| {
                    Error::invalid("encoder_forward", format!("no mask for block {i}"))
                })?),
            })
        } else {
            None
        };
        let (out, routing) = block_forward(g, x, bp, cfg.heads, grid, route)?;
        x = out;
        if let Some(r) = routing {
            record.routed_blocks.push(i);
            record.blocks.push(r);
        }
    }
    Ok((x, record))
}

/// The same stack with every token attended and no router or refinement.
/// Bind the parameters as constants to keep the teacher frozen.
pub fn teacher_forward<T: Element>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    p: &ModelParams<Var>,
    img: Var,
) -> Result<Var> {
    if p.blocks.len() != cfg.depth {
        return Err(Error::Config(format!(
            "parameters hold {} blocks, depth is {}",
            p.blocks.len(),
            cfg.depth
        )));
    }
    let mut x = patch_embed(g, img, p.patch_w, p.pos, cfg.patch)?;
    for bp in &p.blocks {
        x = block_forward(g, x, bp, cfg.heads, cfg.grid(), None)?.0;
    }
    Ok(x)
}

fn check_structure<L>(cfg: &EncoderConfig, p: &ModelParams<L>) -> Result<()> {
    if p.blocks.len() != cfg.depth {
        return Err(Error::Config(format!(
            "parameters hold {} blocks, depth is {}",
            p.blocks.len(),
            cfg.depth
        )));
    }
    for (i, bp) in p.blocks.iter().enumerate() {
        if bp.routing.is_some() != cfg.is_routed(i) {
            return Err(Error::Config(format!(
                "block {i} routing parameters do not match routed-blocks"
            )));
        }
    }
    Ok(())
}

/// Alpha `[B, H, W]` in `(0, 1)` from tokens `[B, N, D]`.
pub fn decode<T: Element>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    p: &DecoderParams<Var>,
    feats: Var,
) -> Result<Var> {
    let b = g.shape(feats)[0];
    let (hp, wp) = cfg.grid();
    let (s1, s2) = cfg.decoder_factors();
    let half = cfg.embed_dim / 2;
    let (h1, w1) = (hp * s1, wp * s1);

    let y = g.matmul(feats, p.up1_w)?;
    let y = g.reshape(y, &[b, hp * wp, s1 * s1, half])?;
    let y = g.add(y, p.up1_b)?;
    let y = g.reshape(y, &[b, hp, wp, s1, s1, half])?;
    let y = g.permute(y, &[0, 1, 3, 2, 4, 5])?;
    let y = g.reshape(y, &[b, h1 * w1, half])?;
    let y = g.gelu(y)?;

    let y = g.matmul(y, p.up2_w)?;
    let y = g.add(y, p.up2_b)?;
    let y = g.reshape(y, &[b, h1, w1, s2, s2])?;
    let y = g.permute(y, &[0, 1, 3, 2, 4])?;
    let y = g.reshape(y, &[b, h1 * s2, w1 * s2])?;
    g.sigmoid(y)
}

/// Configuration plus stored weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element> {
    pub config: EncoderConfig,
    pub params: ModelParams<Tensor<T>>,
}

impl<T: Element> Model<T> {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "config dtype {:?} does not match {:?}",
                config.dtype,
                T::DTYPE
            )));
        }
        let params = ModelParams::init(&config, &mut Rng::stream(seed, 0));
        Ok(Self { config, params })
    }

    /// A routed student whose embedding, attention, MLP and decoder weights
    /// are copies of `teacher`'s; routers and refinement modules start fresh.
    pub fn student_from(teacher: &Model<T>, config: EncoderConfig, seed: u64) -> Result<Self> {
        let same = |c: &EncoderConfig| {
            (
                c.img_size,
                c.patch,
                c.in_channels,
                c.embed_dim,
                c.heads,
                c.depth,
                c.mlp_ratio,
                c.dtype,
            )
        };
        if same(&teacher.config) != same(&config) {
            return Err(Error::Config(
                "student and teacher architectures differ".into(),
            ));
        }
        let mut student = Self::init(config, seed)?;
        let t = &teacher.params;
        let s = &mut student.params;
        s.patch_w = t.patch_w.clone();
        s.pos = t.pos.clone();
        s.decoder = t.decoder.clone();
        for (sb, tb) in s.blocks.iter_mut().zip(&t.blocks) {
            let routing = sb.routing.take();
            *sb = BlockParams {
                routing,
                ..tb.clone()
            };
        }
        Ok(student)
    }

    /// Inference: decisions by argmax with an optional per-block cap.
    pub fn infer(
        &self,
        images: &Tensor<T>,
        max_tokens: Option<usize>,
    ) -> Result<(Tensor<T>, RoutingRecord<T>)> {
        let mut g = Graph::new();
        let p = crate::params::bind(&self.params, &mut g, false);
        let img = g.constant(images.clone());
        let (feats, record) = encoder_forward(
            &mut g,
            &self.config,
            &p,
            img,
            &mut RouteControl::Infer { max_tokens },
        )?;
        let alpha = decode(&mut g, &self.config, &p.decoder, feats)?;
        Ok((g.value(alpha).clone(), record))
    }

    /// Final tokens of the routing-free stack.
    pub fn teacher_features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = crate::params::bind(&self.params, &mut g, false);
        let img = g.constant(images.clone());
        let f = teacher_forward(&mut g, &self.config, &p, img)?;
        Ok(g.value(f).clone())
    }
}
