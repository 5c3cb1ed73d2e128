use super::kernels::{self, axis_split};
use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tensor};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

/// Batch extents of a matmul operand: everything but the trailing two dims.
fn batch_of(shape: &[usize]) -> &[usize] {
    &shape[..shape.len() - 2]
}

impl<T: Element> Graph<T> {
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let (av, bv) = (self.value(a), self.value(b));
        let map = kernels::broadcast_map(av.shape(), bv.shape())
            .ok_or_else(|| Error::shape(name, av.shape(), bv.shape()))?;
        let data = av
            .data()
            .iter()
            .zip(&map)
            .map(|(&x, &j)| f(x, bv.data()[j]))
            .collect();
        Ok((Tensor::new(av.shape().to_vec(), data)?, map))
    }

    /// Elementwise `a + b`; `b` broadcasts into the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b))
    }

    /// Elementwise `a - b`; `b` broadcasts into the shape of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b))
    }

    /// Elementwise `a * b`; `b` broadcasts into the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, t) = (T::of(scale), T::of(shift));
        let out = self.value(a).map(|x| s * x + t);
        self.push("affine", out, Op::Affine(a, s))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var> {
        let s = T::of(scale);
        let out = self.value(a).map(|x| s * x);
        self.push("scale", out, Op::Affine(a, s))
    }

    /// Batched matrix product `[.., n, m] x [.., m, p] -> [.., n, p]`.
    ///
    /// Batch dims must either match or one side must hold a single matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (ba, bb) = (numel(batch_of(sa)), numel(batch_of(sb)));
        let batch_shape = if ba == 1 && bb != 1 {
            batch_of(sb)
        } else if bb == 1 || batch_of(sa) == batch_of(sb) {
            batch_of(sa)
        } else {
            return Err(Error::shape("matmul", sa, sb));
        };
        let (n, m, p) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch = numel(batch_shape);
        let mut out = vec![T::zero(); batch * n * p];
        for t in 0..batch {
            let ao = if ba == 1 { 0 } else { t * n * m };
            let bo = if bb == 1 { 0 } else { t * m * p };
            kernels::matmul_acc(
                &av.data()[ao..ao + n * m],
                &bv.data()[bo..bo + m * p],
                &mut out[t * n * p..(t + 1) * n * p],
                n,
                m,
                p,
            );
        }
        let mut shape = batch_shape.to_vec();
        shape.extend([n, p]);
        let out = Tensor::new(shape, out)?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let mut seen = vec![false; av.ndim()];
        if axes.len() != av.ndim()
            || axes
                .iter()
                .any(|&x| x >= seen.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::invalid(
                "permute",
                format!("{axes:?} is not a permutation of {} axes", av.ndim()),
            ));
        }
        let (data, shape) = kernels::permute(av.data(), av.shape(), axes);
        let out = Tensor::new(shape, data)?;
        self.push("permute", out, Op::Permute(a, axes.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.value(a).ndim();
        if nd < 2 {
            return Err(Error::invalid("transpose", "needs at least two axes"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(a))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let map = kernels::broadcast_map(shape, av.shape())
            .ok_or_else(|| Error::shape("broadcast_to", av.shape(), shape))?;
        let data = map.iter().map(|&j| av.data()[j]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push("broadcast_to", out, Op::BroadcastTo(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        check_axis("softmax", av.shape(), axis)?;
        let (o, l, i) = axis_split(av.shape(), axis);
        let out = Tensor::new(av.shape().to_vec(), kernels::softmax(av.data(), o, l, i))?;
        self.push("softmax", out, Op::Softmax(a, axis))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        check_axis("log_softmax", av.shape(), axis)?;
        let (o, l, i) = axis_split(av.shape(), axis);
        let out = Tensor::new(
            av.shape().to_vec(),
            kernels::log_softmax(av.data(), o, l, i),
        )?;
        self.push("log_softmax", out, Op::LogSoftmax(a, axis))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` of that width.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", xv.shape(), self.shape(p)));
            }
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d.max(1);
        let inv_d = T::of(1.0 / d as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for k in 0..d {
                let h = (row[k] - mean) * rs;
                xhat[r * d + k] = h;
                out[r * d + k] = h * gv[k] + bv[k];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push("sigmoid", out, Op::Sigmoid(a))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (x * inv_sqrt2).erf()));
        self.push("gelu", out, Op::Gelu(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.abs());
        self.push("abs", out, Op::Abs(a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push("sum", Tensor::scalar(total), Op::Sum(a))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        check_axis("mean_axis", av.shape(), axis)?;
        let (o, l, i) = axis_split(av.shape(), axis);
        if l == 0 {
            return Err(Error::invalid("mean_axis", "empty axis"));
        }
        let inv = T::of(1.0 / l as f64);
        let mut out = vec![T::zero(); o * i];
        for oo in 0..o {
            for ii in 0..i {
                let s = (0..l).fold(T::zero(), |acc, ll| {
                    acc + av.data()[oo * l * i + ll * i + ii]
                });
                out[oo * i + ii] = s * inv;
            }
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(shape, out)?;
        self.push("mean_axis", out, Op::Mean(a, axis))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(k, (x, y))| k == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let chunk = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        self.push("concat", out, Op::Concat(parts.to_vec(), axis))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        check_axis("narrow", av.shape(), axis)?;
        let (outer, full, inner) = axis_split(av.shape(), axis);
        if start + len > full {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} exceeds axis length {full}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        self.push("narrow", out, Op::Narrow { x: a, axis, start })
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    /// Gathers the slices `idx` along `axis` (repeats allowed).
    pub fn index_select(&mut self, a: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        check_axis("index_select", av.shape(), axis)?;
        let (outer, full, inner) = axis_split(av.shape(), axis);
        if let Some(bad) = idx.iter().find(|&&i| i >= full) {
            return Err(Error::invalid(
                "index_select",
                format!("index {bad} out of range 0..{full}"),
            ));
        }
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let base = o * full * inner + i * inner;
                out.extend_from_slice(&av.data()[base..base + inner]);
            }
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = idx.len();
        let out = Tensor::new(shape, out)?;
        self.push(
            "index_select",
            out,
            Op::IndexSelect {
                x: a,
                axis,
                idx: idx.to_vec(),
            },
        )
    }

    /// Places slice `j` of `a` at position `idx[j]` of a zero tensor whose
    /// `axis` has extent `size`. Indices must be distinct.
    pub fn index_scatter(
        &mut self,
        a: Var,
        axis: usize,
        idx: &[usize],
        size: usize,
    ) -> Result<Var> {
        let av = self.value(a);
        check_axis("index_scatter", av.shape(), axis)?;
        let (outer, len, inner) = axis_split(av.shape(), axis);
        if len != idx.len() {
            return Err(Error::invalid(
                "index_scatter",
                format!("{} indices for axis of length {len}", idx.len()),
            ));
        }
        let mut seen = vec![false; size];
        for &i in idx {
            if i >= size || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(
                    "index_scatter",
                    format!("index {i} out of range or repeated"),
                ));
            }
        }
        let mut out = vec![T::zero(); outer * size * inner];
        for o in 0..outer {
            for (j, &i) in idx.iter().enumerate() {
                let src = o * len * inner + j * inner;
                let dst = o * size * inner + i * inner;
                out[dst..dst + inner].copy_from_slice(&av.data()[src..src + inner]);
            }
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = size;
        let out = Tensor::new(shape, out)?;
        self.push(
            "index_scatter",
            out,
            Op::IndexScatter {
                x: a,
                axis,
                idx: idx.to_vec(),
            },
        )
    }

    /// Same-padded depthwise 2-D convolution of `x: [B,C,H,W]` with `kernel: [C,kh,kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let (xs, ks) = (xv.shape(), kv.shape());
        if xs.len() != 4 || ks.len() != 3 || xs[1] != ks[0] {
            return Err(Error::shape("depthwise_conv2d", xs, ks));
        }
        if ks[1] % 2 == 0 || ks[2] % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise kernel must have odd extents, got {}x{}",
                ks[1], ks[2]
            )));
        }
        let data =
            kernels::depthwise_conv2d(xv.data(), kv.data(), xs[1], xs[2], xs[3], ks[1], ks[2]);
        let out = Tensor::new(xs.to_vec(), data)?;
        self.push("depthwise_conv2d", out, Op::DepthwiseConv2d(x, kernel))
    }

    /// Same-padded 1-D convolution of `x: [B,1,C]` with `kernel: [kw]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let (xs, ks) = (xv.shape(), kv.shape());
        if xs.len() != 3 || xs[1] != 1 || ks.len() != 1 {
            return Err(Error::shape("conv1d", xs, ks));
        }
        if ks[0] % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d kernel must have odd length, got {}",
                ks[0]
            )));
        }
        let data = kernels::conv1d(xv.data(), kv.data(), xs[2]);
        let out = Tensor::new(xs.to_vec(), data)?;
        self.push("conv1d", out, Op::Conv1d(x, kernel))
    }

    /// Straight-through estimator: the forward value is `hard + (soft - frozen)`,
    /// and the gradient flows to `soft` unchanged.
    ///
    /// With `frozen` equal to the current value of `soft` the output is exactly
    /// `hard`. Holding `frozen` fixed while `soft` moves makes the forward value
    /// a smooth function whose derivative is the straight-through gradient,
    /// which is what finite-difference checks rely on.
    pub fn straight_through(
        &mut self,
        soft: Var,
        hard: &Tensor<T>,
        frozen: &Tensor<T>,
    ) -> Result<Var> {
        let sv = self.value(soft);
        if sv.shape() != hard.shape() || sv.shape() != frozen.shape() {
            return Err(Error::shape("straight_through", sv.shape(), hard.shape()));
        }
        let data = sv
            .data()
            .iter()
            .zip(hard.data())
            .zip(frozen.data())
            .map(|((&s, &h), &f)| h + (s - f))
            .collect();
        let out = Tensor::new(sv.shape().to_vec(), data)?;
        self.push("straight_through", out, Op::StraightThrough(soft))
    }

    /// Gradient contributions of node `i` to each of its trainable inputs.
    pub(super) fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                if needs(a) {
                    res.push((*a, g.to_vec()));
                }
                if needs(b) {
                    let map = kernels::broadcast_map(out.shape(), val(b).shape())
                        .expect("checked in forward");
                    let mut gb = vec![T::zero(); val(b).len()];
                    for (&gi, &j) in g.iter().zip(&map) {
                        gb[j] = gb[j] + gi;
                    }
                    if matches!(node.op, Op::Sub(..)) {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    res.push((*b, gb));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let map =
                    kernels::broadcast_map(out.shape(), bv.shape()).expect("checked in forward");
                if needs(a) {
                    res.push((
                        *a,
                        g.iter()
                            .zip(&map)
                            .map(|(&gi, &j)| gi * bv.data()[j])
                            .collect(),
                    ));
                }
                if needs(b) {
                    let mut gb = vec![T::zero(); bv.len()];
                    for ((&gi, &j), &ai) in g.iter().zip(&map).zip(av.data()) {
                        gb[j] = gb[j] + gi * ai;
                    }
                    res.push((*b, gb));
                }
            }
            Op::Affine(a, s) => res.push((*a, g.iter().map(|&x| x * *s).collect())),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (sa, sb) = (av.shape(), bv.shape());
                let (n, m, p) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let (ba, bb) = (numel(batch_of(sa)), numel(batch_of(sb)));
                let batch = g.len() / (n * p).max(1);
                let mut ga = needs(a).then(|| vec![T::zero(); av.len()]);
                let mut gb = needs(b).then(|| vec![T::zero(); bv.len()]);
                for t in 0..batch {
                    let ao = if ba == 1 { 0 } else { t * n * m };
                    let bo = if bb == 1 { 0 } else { t * m * p };
                    let gt = &g[t * n * p..(t + 1) * n * p];
                    if let Some(ga) = ga.as_mut() {
                        let bt = kernels::transpose2(&bv.data()[bo..bo + m * p], m, p);
                        kernels::matmul_acc(gt, &bt, &mut ga[ao..ao + n * m], n, p, m);
                    }
                    if let Some(gb) = gb.as_mut() {
                        let at = kernels::transpose2(&av.data()[ao..ao + n * m], n, m);
                        kernels::matmul_acc(&at, gt, &mut gb[bo..bo + m * p], m, n, p);
                    }
                }
                res.extend(ga.map(|v| (*a, v)));
                res.extend(gb.map(|v| (*b, v)));
            }
            Op::Permute(a, axes) => {
                let inv = kernels::inverse_axes(axes);
                let (data, _) = kernels::permute(g, out.shape(), &inv);
                res.push((*a, data));
            }
            Op::Reshape(a) => res.push((*a, g.to_vec())),
            Op::BroadcastTo(a) => {
                let map = kernels::broadcast_map(out.shape(), val(a).shape())
                    .expect("checked in forward");
                let mut ga = vec![T::zero(); val(a).len()];
                for (&gi, &j) in g.iter().zip(&map) {
                    ga[j] = ga[j] + gi;
                }
                res.push((*a, ga));
            }
            Op::Softmax(a, axis) => {
                let (o, l, inn) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut ga = vec![T::zero(); y.len()];
                for oo in 0..o {
                    for ii in 0..inn {
                        let at = |k: usize| oo * l * inn + k * inn + ii;
                        let dot = (0..l).fold(T::zero(), |acc, k| acc + g[at(k)] * y[at(k)]);
                        for k in 0..l {
                            ga[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                res.push((*a, ga));
            }
            Op::LogSoftmax(a, axis) => {
                let (o, l, inn) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut ga = vec![T::zero(); y.len()];
                for oo in 0..o {
                    for ii in 0..inn {
                        let at = |k: usize| oo * l * inn + k * inn + ii;
                        let total = (0..l).fold(T::zero(), |acc, k| acc + g[at(k)]);
                        for k in 0..l {
                            ga[at(k)] = g[at(k)] - y[at(k)].exp() * total;
                        }
                    }
                }
                res.push((*a, ga));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(gain).data();
                let d = gv.len();
                let inv_d = T::of(1.0 / d as f64);
                if needs(x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[row.clone()], &xhat[row.clone()]);
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for k in 0..d {
                            let dh = gr[k] * gv[k];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[k];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for k in 0..d {
                            gx[r * d + k] = rs * (gr[k] * gv[k] - mean_dh - hr[k] * mean_dh_h);
                        }
                    }
                    res.push((*x, gx));
                }
                if needs(gain) {
                    let mut gg = vec![T::zero(); d];
                    for (k, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[k % d] = gg[k % d] + gi * h;
                    }
                    res.push((*gain, gg));
                }
                if needs(bias) {
                    let mut gbias = vec![T::zero(); d];
                    for (k, &gi) in g.iter().enumerate() {
                        gbias[k % d] = gbias[k % d] + gi;
                    }
                    res.push((*bias, gbias));
                }
            }
            Op::Sigmoid(a) => {
                res.push((
                    *a,
                    g.iter()
                        .zip(out.data())
                        .map(|(&gi, &y)| gi * y * (T::one() - y))
                        .collect(),
                ));
            }
            Op::Gelu(a) => {
                let half = T::of(0.5);
                let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
                let c = T::of(FRAC_1_SQRT_2PI);
                let ga = g
                    .iter()
                    .zip(val(a).data())
                    .map(|(&gi, &x)| {
                        let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                        let pdf = c * (-half * x * x).exp();
                        gi * (cdf + x * pdf)
                    })
                    .collect();
                res.push((*a, ga));
            }
            Op::Abs(a) => {
                let ga = g
                    .iter()
                    .zip(val(a).data())
                    .map(|(&gi, &x)| {
                        if x > T::zero() {
                            gi
                        } else if x < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                res.push((*a, ga));
            }
            Op::Sum(a) => res.push((*a, vec![g[0]; val(a).len()])),
            Op::Mean(a, axis) => {
                let (o, l, inn) = axis_split(val(a).shape(), *axis);
                let inv = T::of(1.0 / l as f64);
                let mut ga = vec![T::zero(); val(a).len()];
                for oo in 0..o {
                    for k in 0..l {
                        for ii in 0..inn {
                            ga[oo * l * inn + k * inn + ii] = g[oo * inn + ii] * inv;
                        }
                    }
                }
                res.push((*a, ga));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = val(p).shape()[*axis];
                    if needs(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        res.push((*p, gp));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = axis_split(val(x).shape(), *axis);
                let len = out.shape()[*axis];
                let mut gx = vec![T::zero(); val(x).len()];
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((*x, gx));
            }
            Op::IndexSelect { x, axis, idx } => {
                let (outer, full, inner) = axis_split(val(x).shape(), *axis);
                let mut gx = vec![T::zero(); val(x).len()];
                for o in 0..outer {
                    for (j, &src) in idx.iter().enumerate() {
                        let gb = o * idx.len() * inner + j * inner;
                        let xb = o * full * inner + src * inner;
                        for k in 0..inner {
                            gx[xb + k] = gx[xb + k] + g[gb + k];
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::IndexScatter { x, axis, idx } => {
                let (outer, size, inner) = axis_split(out.shape(), *axis);
                let mut gx = Vec::with_capacity(val(x).len());
                for o in 0..outer {
                    for &dst in idx {
                        let base = o * size * inner + dst * inner;
                        gx.extend_from_slice(&g[base..base + inner]);
                    }
                }
                res.push((*x, gx));
            }
            Op::DepthwiseConv2d(x, kernel) => {
                let (xv, kv) = (val(x), val(kernel));
                let (c, h, w) = (xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let (kh, kw) = (kv.shape()[1], kv.shape()[2]);
                let (ph, pw) = (kh / 2, kw / 2);
                let mut gx = vec![T::zero(); xv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                let planes = xv.len() / (h * w).max(1);
                for plane in 0..planes {
                    let ch = plane % c;
                    let base = plane * h * w;
                    let kbase = ch * kh * kw;
                    for y in 0..h {
                        for xx in 0..w {
                            let go = g[base + y * w + xx];
                            for i in 0..kh {
                                let sy = y + i;
                                if sy < ph || sy - ph >= h {
                                    continue;
                                }
                                for j in 0..kw {
                                    let sx = xx + j;
                                    if sx < pw || sx - pw >= w {
                                        continue;
                                    }
                                    let src = base + (sy - ph) * w + (sx - pw);
                                    gx[src] = gx[src] + kv.data()[kbase + i * kw + j] * go;
                                    gk[kbase + i * kw + j] =
                                        gk[kbase + i * kw + j] + xv.data()[src] * go;
                                }
                            }
                        }
                    }
                }
                if needs(x) {
                    res.push((*x, gx));
                }
                if needs(kernel) {
                    res.push((*kernel, gk));
                }
            }
            Op::Conv1d(x, kernel) => {
                let (xv, kv) = (val(x), val(kernel));
                let len = xv.shape()[2];
                let pad = kv.len() / 2;
                let mut gx = vec![T::zero(); xv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                for r in 0..xv.len() / len.max(1) {
                    for c in 0..len {
                        let go = g[r * len + c];
                        for (j, &kj) in kv.data().iter().enumerate() {
                            let s = c + j;
                            if s < pad || s - pad >= len {
                                continue;
                            }
                            let src = r * len + s - pad;
                            gx[src] = gx[src] + kj * go;
                            gk[j] = gk[j] + xv.data()[src] * go;
                        }
                    }
                }
                if needs(x) {
                    res.push((*x, gx));
                }
                if needs(kernel) {
                    res.push((*kernel, gk));
                }
            }
            Op::StraightThrough(soft) => res.push((*soft, g.to_vec())),
        }
        res
    }
}
