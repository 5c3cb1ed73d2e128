//! Plain slice kernels shared by forward and backward passes.

use crate::tensor::{numel, Element};

/// Splits `shape` around `axis` into `(outer, axis_len, inner)` extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// `out[n,p] += a[n,m] * b[m,p]`, accumulating over `m` in ascending order.
pub(crate) fn matmul_acc<T: Element>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    n: usize,
    m: usize,
    p: usize,
) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        let orow = &mut out[i * p..(i + 1) * p];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bkj;
            }
        }
    }
}

pub(crate) fn transpose2<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `out_shape`, the flat index of `src_shape` it reads
/// under right-aligned broadcasting. `None` when the shapes are incompatible.
pub(crate) fn broadcast_map(out_shape: &[usize], src_shape: &[usize]) -> Option<Vec<usize>> {
    if src_shape.len() > out_shape.len() {
        return None;
    }
    let offset = out_shape.len() - src_shape.len();
    let src_strides = strides(src_shape);
    let mut eff = vec![0usize; out_shape.len()];
    for (i, &d) in src_shape.iter().enumerate() {
        let od = out_shape[offset + i];
        if d == od {
            eff[offset + i] = src_strides[i];
        } else if d != 1 {
            return None;
        }
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(map)
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub(crate) fn permute<T: Element>(
    data: &[T],
    shape: &[usize],
    axes: &[usize],
) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut flat = 0usize;
    for _ in 0..total {
        out.push(data[flat]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn softmax<T: Element>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| o * len * inner + l * inner + i;
            let max = (0..len).map(|l| x[at(l)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for l in 0..len {
                let e = (x[at(l)] - max).exp();
                out[at(l)] = e;
                total = total + e;
            }
            for l in 0..len {
                out[at(l)] = out[at(l)] / total;
            }
        }
    }
    out
}

pub(crate) fn log_softmax<T: Element>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| o * len * inner + l * inner + i;
            let max = (0..len).map(|l| x[at(l)]).fold(T::neg_infinity(), T::max);
            let total = (0..len).fold(T::zero(), |acc, l| acc + (x[at(l)] - max).exp());
            let lse = max + total.ln();
            for l in 0..len {
                out[at(l)] = x[at(l)] - lse;
            }
        }
    }
    out
}

/// Same-padded depthwise cross-correlation over `[batch*channels, h, w]` planes.
pub(crate) fn depthwise_conv2d<T: Element>(
    x: &[T],
    kernel: &[T],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<T> {
    let planes = x.len() / (h * w).max(1);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![T::zero(); x.len()];
    for plane in 0..planes {
        let c = plane % channels;
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let k = &kernel[c * kh * kw..(c + 1) * kh * kw];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = T::zero();
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
                        acc = acc + k[i * kw + j] * src[(sy - ph) * w + (sx - pw)];
                    }
                }
                dst[y * w + xx] = acc;
            }
        }
    }
    out
}

/// Same-padded 1-D cross-correlation of every length-`len` row with `kernel`.
pub(crate) fn conv1d<T: Element>(x: &[T], kernel: &[T], len: usize) -> Vec<T> {
    let rows = x.len() / len.max(1);
    let kw = kernel.len();
    let pad = kw / 2;
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let src = &x[r * len..(r + 1) * len];
        for c in 0..len {
            let mut acc = T::zero();
            for (j, &kj) in kernel.iter().enumerate() {
                let s = c + j;
                if s < pad || s - pad >= len {
                    continue;
                }
                acc = acc + kj * src[s - pad];
            }
            out[r * len + c] = acc;
        }
    }
    out
}
