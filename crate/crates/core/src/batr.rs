//! Batch-constrained adaptive token routing: turns router log-probabilities
//! into hard per-token branch decisions.
//!
//! Training draws a Gumbel-softmax sample and uses its one-hot argmax in the
//! forward pass with the soft sample's gradient (straight-through). Inference
//! takes the argmax of the log-probabilities, optionally capped to the `k`
//! tokens with the highest attention-branch probability. Decision tensors are
//! `[B,N]` with 1 meaning "attention branch".

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RoutingConfig {
    /// Target fraction of tokens routed to attention.
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Gumbel-softmax temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Inference-time cap on attended tokens per sample and block.
    #[serde(default)]
    pub max_tokens: Option<usize>,
}

fn default_rho() -> f64 {
    0.25
}

fn default_tau() -> f64 {
    1.0
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            rho: default_rho(),
            tau: default_tau(),
            max_tokens: None,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "routing.rho must lie in [0,1], got {}",
                self.rho
            )));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config(format!(
                "routing.tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// One training-time routing decision for a block.
#[derive(Debug)]
pub struct TrainDecision<T: Element> {
    /// Relaxed sample `softmax((log_p + g) / tau)`, `[B,N,2]`.
    pub soft: Var,
    /// Class-1 column of `soft`, `[B,N,1]`.
    pub soft_attend: Var,
    /// Hard decisions `[B,N]`.
    pub hard: Tensor<T>,
    /// Straight-through decision, `[B,N,1]`: equals `hard` forward, carries the
    /// gradient of `soft_attend` backward.
    pub gate: Var,
    /// The Gumbel noise that was used, `[B,N,2]`.
    pub noise: Tensor<T>,
    /// Value of `soft_attend` that the straight-through op was anchored to.
    pub anchor: Tensor<T>,
}

/// Noise tensor of standard Gumbel samples.
pub fn gumbel_noise<T: Element>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::of(rng.gumbel())).collect(),
    )
    .expect("sized")
}

/// Gumbel-softmax straight-through decision with fresh noise from `rng`.
pub fn decide_train<T: Element>(
    g: &mut Graph<T>,
    log_p: Var,
    tau: f64,
    rng: &mut Rng,
) -> Result<TrainDecision<T>> {
    let noise = gumbel_noise(g.shape(log_p), rng);
    decide_train_with(g, log_p, tau, &noise, None)
}

/// Gumbel-softmax straight-through decision with given noise.
///
/// When `frozen` is `Some((hard, anchor))`, those decisions and that
/// straight-through anchor are reused instead of being derived from the
/// current sample, which makes the forward value a smooth function of
/// `log_p` for finite-difference checks.
pub fn decide_train_with<T: Element>(
    g: &mut Graph<T>,
    log_p: Var,
    tau: f64,
    noise: &Tensor<T>,
    frozen: Option<(&Tensor<T>, &Tensor<T>)>,
) -> Result<TrainDecision<T>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!(
            "Gumbel temperature must be positive, got {tau}"
        )));
    }
    let shape = g.shape(log_p).to_vec();
    if shape.len() != 3 || shape[2] != 2 || noise.shape() != shape.as_slice() {
        return Err(Error::shape("decide_train", &shape, noise.shape()));
    }
    let (b, n) = (shape[0], shape[1]);
    let noise_var = g.constant(noise.clone());
    let perturbed = g.add(log_p, noise_var)?;
    let scaled = g.scale(perturbed, 1.0 / tau)?;
    let soft = g.softmax(scaled, 2)?;
    let soft_attend = g.narrow(soft, 2, 1, 1)?;
    let (hard, anchor) = match frozen {
        Some((hard, anchor)) => {
            if hard.shape() != [b, n] {
                return Err(Error::shape("decide_train", &[b, n], hard.shape()));
            }
            (hard.clone(), anchor.clone())
        }
        None => {
            let s = g.value(soft).data();
            let hard = (0..b * n)
                .map(|i| {
                    if s[2 * i + 1] > s[2 * i] {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
                .collect();
            (Tensor::new(vec![b, n], hard)?, g.value(soft_attend).clone())
        }
    };
    let gate = g.straight_through(soft_attend, &hard.reshape(vec![b, n, 1])?, &anchor)?;
    Ok(TrainDecision {
        soft,
        soft_attend,
        hard,
        gate,
        noise: noise.clone(),
        anchor,
    })
}

/// Argmax decision; exact ties go to the refinement branch (class 0).
pub fn decide_infer<T: Element>(log_p: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = log_p.shape();
    if shape.len() != 3 || shape[2] != 2 {
        return Err(Error::invalid(
            "decide_infer",
            format!("expected [B,N,2] log-probabilities, got {shape:?}"),
        ));
    }
    let d = log_p.data();
    let hard = (0..shape[0] * shape[1])
        .map(|i| {
            if d[2 * i + 1] > d[2 * i] {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(vec![shape[0], shape[1]], hard)
}

/// Fraction of ones in a binary decision tensor of any shape.
pub fn compute_gamma<T: Element>(decisions: &Tensor<T>) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::invalid("compute_gamma", "no decisions"));
    }
    let mut ones = 0u64;
    for &v in decisions.data() {
        if v == T::one() {
            ones += 1;
        } else if v != T::zero() {
            return Err(Error::invalid(
                "compute_gamma",
                format!("non-binary decision {v}"),
            ));
        }
    }
    Ok(ones as f64 / decisions.len() as f64)
}

/// Limits each sample to at most `k` attended tokens, keeping those with the
/// highest attention-branch probability (lower token index wins ties).
pub fn apply_topk_cap<T: Element>(
    log_p: &Tensor<T>,
    decisions: &Tensor<T>,
    k: usize,
) -> Result<Tensor<T>> {
    let shape = decisions.shape();
    if shape.len() != 2 || log_p.shape() != [shape[0], shape[1], 2] {
        return Err(Error::shape("apply_topk_cap", log_p.shape(), shape));
    }
    let (b, n) = (shape[0], shape[1]);
    let mut out = decisions.clone();
    for s in 0..b {
        let row = &decisions.data()[s * n..(s + 1) * n];
        let mut chosen: Vec<usize> = (0..n).filter(|&i| row[i] == T::one()).collect();
        if chosen.len() <= k {
            continue;
        }
        // log is monotone, so ranking by log p1 ranks by p1
        let score = |i: usize| log_p.data()[(s * n + i) * 2 + 1];
        chosen.sort_by(|&a, &c| {
            score(c)
                .partial_cmp(&score(a))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&c))
        });
        for &i in &chosen[k..] {
            out.data_mut()[s * n + i] = T::zero();
        }
    }
    Ok(out)
}

/// Per-sample index lists of the tokens with decision `value`.
pub fn indices_where<T: Element>(decisions: &Tensor<T>, value: bool) -> Vec<Vec<usize>> {
    let (b, n) = (decisions.shape()[0], decisions.shape()[1]);
    let want = if value { T::one() } else { T::zero() };
    (0..b)
        .map(|s| {
            (0..n)
                .filter(|&i| decisions.data()[s * n + i] == want)
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_p(pairs: &[(f64, f64)]) -> Tensor<f64> {
        let v: Vec<f64> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        Tensor::from_f64(vec![1, pairs.len(), 2], &v).unwrap()
    }

    #[test]
    fn infer_examples() {
        let d = decide_infer(&log_p(&[(0.9f64.ln(), 0.1f64.ln())])).unwrap();
        assert_eq!(d.data(), &[0.0]);
        let h = -std::f64::consts::LN_2;
        assert_eq!(decide_infer(&log_p(&[(h, h)])).unwrap().data(), &[0.0]);
        assert_eq!(
            decide_infer(&log_p(&[(-2.0, -0.1)])).unwrap().data(),
            &[1.0]
        );
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(
            compute_gamma(&Tensor::<f32>::ones(vec![2, 3, 4])).unwrap(),
            1.0
        );
        let half = Tensor::<f32>::from_f64(vec![4], &[1., 0., 1., 0.]).unwrap();
        assert_eq!(compute_gamma(&half).unwrap(), 0.5);
        let bad = Tensor::<f32>::from_f64(vec![2], &[1., 0.5]).unwrap();
        assert!(compute_gamma(&bad).is_err());
    }

    #[test]
    fn topk_examples() {
        let p1 = [0.9, 0.1, 0.8, 0.7, 0.2, 0.6];
        let lp = log_p(&p1.map(|p: f64| ((1.0 - p).ln(), p.ln())));
        let all = Tensor::<f64>::ones(vec![1, 6]);
        let capped = apply_topk_cap(&lp, &all, 3).unwrap();
        assert_eq!(capped.data(), &[1., 0., 1., 1., 0., 0.]);
        assert_eq!(apply_topk_cap(&lp, &all, 6).unwrap(), all);
        assert_eq!(
            apply_topk_cap(&lp, &all, 0).unwrap(),
            Tensor::zeros(vec![1, 6])
        );
    }

    #[test]
    fn topk_ties_keep_lower_index() {
        let lp = log_p(&[(-0.7, -0.7), (-0.7, -0.7), (-0.7, -0.7)]);
        let capped = apply_topk_cap(&lp, &Tensor::<f64>::ones(vec![1, 3]), 2).unwrap();
        assert_eq!(capped.data(), &[1., 1., 0.]);
    }

    #[test]
    fn nonpositive_temperature_is_rejected() {
        let mut g = Graph::<f64>::new();
        let lp = g.param(log_p(&[(-0.1, -2.0)]));
        let mut rng = Rng::seed(0);
        assert!(decide_train(&mut g, lp, 0.0, &mut rng).is_err());
        assert!(decide_train(&mut g, lp, -1.0, &mut rng).is_err());
    }
}
