//! Alpha compositing, the training losses and the evaluation metrics.
//!
//! The matting loss is a plain L1 stand-in for a full matting loss stack.
//! The distillation loss averages squared feature differences over batch,
//! tokens and channels; the `literal` flag drops the channel average and
//! sums over channels instead.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// `I = alpha F + (1 - alpha) B` for `F, B: [C,H,W]` and `alpha: [H,W]`.
pub fn composite<T: Element>(
    fg: &Tensor<T>,
    bg: &Tensor<T>,
    alpha: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = fg.shape();
    if s.len() != 3 || bg.shape() != s {
        return Err(Error::shape("composite", s, bg.shape()));
    }
    if alpha.shape() != &s[1..] {
        return Err(Error::shape("composite", s, alpha.shape()));
    }
    if let Some(a) = alpha
        .data()
        .iter()
        .find(|a| !(**a >= T::zero() && **a <= T::one()))
    {
        return Err(Error::invalid(
            "composite",
            format!("alpha {a} outside [0, 1]"),
        ));
    }
    let plane = s[1] * s[2];
    let data = (0..fg.len())
        .map(|i| {
            let a = alpha.data()[i % plane];
            a * fg.data()[i] + (T::one() - a) * bg.data()[i]
        })
        .collect();
    Tensor::new(s.to_vec(), data)
}

/// Mean absolute difference between predicted and true alpha.
pub fn matting_loss<T: Element>(g: &mut Graph<T>, pred: Var, truth: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(truth) {
        return Err(Error::shape("matting_loss", g.shape(pred), g.shape(truth)));
    }
    let d = g.sub(pred, truth)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// Squared feature difference between teacher `[B,N,D]` and student tokens,
/// averaged over samples and tokens, and over channels unless `literal`.
pub fn distill_loss<T: Element>(
    g: &mut Graph<T>,
    teacher: Var,
    student: Var,
    literal: bool,
) -> Result<Var> {
    let shape = g.shape(student).to_vec();
    if shape.len() != 3 || g.shape(teacher) != shape.as_slice() {
        return Err(Error::shape("distill_loss", g.shape(teacher), &shape));
    }
    let d = g.sub(student, teacher)?;
    let sq = g.mul(d, d)?;
    let m = g.mean(sq)?;
    if literal {
        g.scale(m, shape[2] as f64)
    } else {
        Ok(m)
    }
}

/// `(gamma - rho)^2`.
pub fn compress_loss<T: Element>(g: &mut Graph<T>, gamma: Var, rho: f64) -> Result<Var> {
    let d = g.affine(gamma, 1.0, -rho)?;
    g.mul(d, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub matting: f64,
    #[serde(default = "one")]
    pub distill: f64,
    #[serde(default = "one")]
    pub compress: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            matting: 1.0,
            distill: 1.0,
            compress: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default)]
    pub weights: LossWeights,
    /// Sum over channels in the distillation loss instead of averaging.
    #[serde(default)]
    pub distill_literal: bool,
}

/// Unweighted loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub matting: f64,
    pub distill: f64,
    pub compress: f64,
    pub total: f64,
}

/// Graph handles of the three loss terms and the total.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub matting: Var,
    pub distill: Var,
    pub compress: Var,
    pub total: Var,
}

impl LossVars {
    pub fn new<T: Element>(
        g: &mut Graph<T>,
        matting: Var,
        distill: Var,
        compress: Var,
        w: &LossWeights,
    ) -> Result<Self> {
        let m = g.scale(matting, w.matting)?;
        let d = g.scale(distill, w.distill)?;
        let c = g.scale(compress, w.compress)?;
        let md = g.add(m, d)?;
        let total = g.add(md, c)?;
        Ok(Self {
            matting,
            distill,
            compress,
            total,
        })
    }

    pub fn breakdown<T: Element>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().as_f64();
        LossBreakdown {
            matting: v(self.matting),
            distill: v(self.distill),
            compress: v(self.compress),
            total: v(self.total),
        }
    }
}

/// Sum of absolute differences (raw, and divided by 1000 as usually
/// reported) and mean squared error scaled by 1000.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub sad_raw: f64,
    pub sad: f64,
    pub mse: f64,
}

pub fn metrics_sad_mse<T: Element>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<Metrics> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("metrics", pred.shape(), truth.shape()));
    }
    if pred.is_empty() {
        return Err(Error::invalid("metrics", "empty mattes"));
    }
    let (mut sad, mut sq) = (0.0, 0.0);
    for (p, t) in pred.data().iter().zip(truth.data()) {
        let d = p.as_f64() - t.as_f64();
        sad += d.abs();
        sq += d * d;
    }
    Ok(Metrics {
        sad_raw: sad,
        sad: sad / 1000.0,
        mse: sq / pred.len() as f64 * 1000.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: f64) -> Tensor<f64> {
        Tensor::full(shape.to_vec(), v)
    }

    #[test]
    fn composite_examples() {
        let (f, b) = (t(&[3, 2, 2], 1.0), t(&[3, 2, 2], 0.0));
        assert_eq!(composite(&f, &b, &t(&[2, 2], 0.0)).unwrap(), b);
        assert_eq!(composite(&f, &b, &t(&[2, 2], 1.0)).unwrap(), f);
        assert_eq!(
            composite(&f, &b, &t(&[2, 2], 0.5)).unwrap(),
            t(&[3, 2, 2], 0.5)
        );
        assert!(composite(&f, &b, &t(&[2, 2], 1.5)).is_err());
        assert!(composite(&f, &b, &t(&[2, 3], 0.5)).is_err());
    }

    #[test]
    fn compress_examples() {
        let mut g = Graph::<f64>::new();
        let gamma = g.constant(Tensor::scalar(0.75));
        let l = compress_loss(&mut g, gamma, 0.25).unwrap();
        assert_eq!(g.value(l).item(), 0.25);
        let gamma = g.constant(Tensor::scalar(0.25));
        let l = compress_loss(&mut g, gamma, 0.25).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn metric_examples() {
        let m = metrics_sad_mse(&t(&[10, 10], 0.0), &t(&[10, 10], 1.0)).unwrap();
        assert_eq!(m.sad_raw, 100.0);
        assert_eq!(m.sad, 0.1);
        assert_eq!(m.mse, 1000.0);
        let z = metrics_sad_mse(&t(&[4, 4], 0.3), &t(&[4, 4], 0.3)).unwrap();
        assert_eq!((z.sad, z.mse), (0.0, 0.0));
    }
}
