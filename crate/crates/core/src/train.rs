//! Run configuration, optimizers and the training loops for the routing-free
//! teacher and the routed student.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{
    decode, encoder_forward, EncoderConfig, Model, ModelParams, RouteControl, RoutingRecord,
};
use crate::error::{Error, Result};
use crate::matting::{
    compress_loss, distill_loss, matting_loss, LossBreakdown, LossConfig, LossVars,
};
use crate::params::{bind, ParamTree};
use crate::rng::Rng;
use crate::synth::{stack, TrainSample};
use crate::tensor::{Element, Tensor};

/// Top-level JSON config: `{"model": {...}, "train": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    pub model: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Steps of teacher training when no teacher checkpoint is given.
    #[serde(default = "default_teacher_steps")]
    pub teacher_steps: usize,
    #[serde(default)]
    pub loss: LossConfig,
}

fn default_batch() -> usize {
    8
}

fn default_teacher_steps() -> usize {
    300
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            batch_size: default_batch(),
            teacher_steps: default_teacher_steps(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch-size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Sgd {
        #[serde(default = "default_lr")]
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
            OptimizerConfig::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "train.optimizer out of range: {self:?}"
            )))
        }
    }
}

/// First-order optimizer over a parameter tree. Moments are kept in `f64`.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update. `grads` lists the gradient of every leaf in tree
    /// order; `None` leaves are skipped.
    pub fn step<T: Element, P: ParamTree<Tensor<T>>>(
        &mut self,
        params: &mut P,
        grads: &[Option<Tensor<T>>],
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let mut i = 0;
        let mut result = Ok(());
        let cfg = self.cfg;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_named_mut("", &mut |name, p| {
            let k = i;
            i += 1;
            if result.is_err() {
                return;
            }
            let Some(Some(grad)) = grads.get(k) else {
                if k >= grads.len() {
                    result = Err(Error::invalid(
                        "optimizer",
                        format!("no gradient slot for {name}"),
                    ));
                }
                return;
            };
            if grad.shape() != p.shape() {
                result = Err(Error::shape("optimizer", p.shape(), grad.shape()));
                return;
            }
            if m.len() <= k {
                m.resize(k + 1, Vec::new());
                v.resize(k + 1, Vec::new());
            }
            if m[k].is_empty() {
                m[k] = vec![0.0; p.len()];
                v[k] = vec![0.0; p.len()];
            }
            let (mk, vk) = (&mut m[k], &mut v[k]);
            for (j, (w, g)) in p.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g.as_f64();
                let step = match cfg {
                    OptimizerConfig::Adam {
                        lr,
                        beta1,
                        beta2,
                        eps,
                    } => {
                        mk[j] = beta1 * mk[j] + (1.0 - beta1) * g;
                        vk[j] = beta2 * vk[j] + (1.0 - beta2) * g * g;
                        let mhat = mk[j] / (1.0 - beta1.powi(t));
                        let vhat = vk[j] / (1.0 - beta2.powi(t));
                        lr * mhat / (vhat.sqrt() + eps)
                    }
                    OptimizerConfig::Sgd { lr, momentum } => {
                        mk[j] = momentum * mk[j] + g;
                        lr * mk[j]
                    }
                };
                *w = T::of(w.as_f64() - step);
            }
        });
        result?;
        if i != grads.len() {
            return Err(Error::invalid(
                "optimizer",
                format!("{} gradients for {i} parameters", grads.len()),
            ));
        }
        Ok(())
    }
}

/// Gradients of bound parameters, in tree order.
pub fn collect_grads<T: Element, P: ParamTree<Var>>(
    bound: &P,
    g: &Graph<T>,
) -> Vec<Option<Tensor<T>>> {
    let mut out = Vec::new();
    bound.visit_named("", &mut |_, v| out.push(g.grad(*v).cloned()));
    out
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown,
    pub gamma_hard: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,matting,distill,compress,total,gamma_hard";

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{}",
            self.step, l.matting, l.distill, l.compress, l.total, self.gamma_hard
        )
    }
}

pub fn log_csv(rows: &[StepLog]) -> String {
    let mut s = String::from(StepLog::CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Epoch-shuffled minibatches, deterministic given the seed.
pub struct Batches {
    n: usize,
    size: usize,
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batches {
    pub fn new(n: usize, size: usize, rng: Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("training data is empty".into()));
        }
        Ok(Self {
            n,
            size: size.min(n),
            order: Vec::new(),
            pos: n,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.pos >= self.n {
                self.order = (0..self.n).collect();
                for i in (1..self.n).rev() {
                    let j = self.rng.below(i + 1);
                    self.order.swap(i, j);
                }
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Builds the full student loss on `g` for one batch.
///
/// `teacher_feats` are the frozen teacher tokens for the same images. The
/// compression term uses the relaxed ratio when the pass is stochastic and
/// the hard ratio otherwise.
#[allow(clippy::too_many_arguments)]
pub fn student_loss<T: Element>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    params: &ModelParams<Var>,
    images: &Tensor<T>,
    alphas: &Tensor<T>,
    teacher_feats: &Tensor<T>,
    control: &mut RouteControl<'_, T>,
    loss: &LossConfig,
) -> Result<(LossVars, RoutingRecord<T>)> {
    let img = g.constant(images.clone());
    let (feats, record) = encoder_forward(g, cfg, params, img, control)?;
    let pred = decode(g, cfg, &params.decoder, feats)?;
    let truth = g.constant(alphas.clone());
    let m = matting_loss(g, pred, truth)?;
    let ft = g.constant(teacher_feats.clone());
    let d = distill_loss(g, ft, feats, loss.distill_literal)?;
    let gamma = match record.soft_gamma(g)? {
        Some(v) => v,
        None => g.constant(Tensor::scalar(T::of(record.gamma()))),
    };
    let c = compress_loss(g, gamma, cfg.routing.rho)?;
    Ok((LossVars::new(g, m, d, c, &loss.weights)?, record))
}

/// Trains a routing-free model on the matting loss alone.
pub fn train_teacher<T: Element>(
    teacher: &mut Model<T>,
    data: &[TrainSample<T>],
    cfg: &TrainConfig,
    steps: usize,
    seed: u64,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if !teacher.config.routed().is_empty() {
        return Err(Error::Config(
            "the teacher must not have routed blocks".into(),
        ));
    }
    let mut batches = Batches::new(data.len(), cfg.batch_size, Rng::stream(seed, 3))?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut logs = Vec::with_capacity(steps);
    for step in 0..steps {
        let (images, alphas) = stack(data, &batches.next_batch())?;
        let mut g = Graph::new();
        let p = bind(&teacher.params, &mut g, true);
        let img = g.constant(images);
        let (feats, _) = encoder_forward(
            &mut g,
            &teacher.config,
            &p,
            img,
            &mut RouteControl::Infer { max_tokens: None },
        )?;
        let pred = decode(&mut g, &teacher.config, &p.decoder, feats)?;
        let truth = g.constant(alphas);
        let m = matting_loss(&mut g, pred, truth)?;
        g.backward(m)?;
        let v = g.value(m).item().as_f64();
        let log = StepLog {
            step,
            loss: LossBreakdown {
                matting: v,
                distill: 0.0,
                compress: 0.0,
                total: v,
            },
            gamma_hard: 1.0,
        };
        on_step(&log);
        logs.push(log);
        opt.step(&mut teacher.params, &collect_grads(&p, &g))?;
    }
    Ok(logs)
}

/// Trains the routed student against a frozen teacher on the full loss.
/// Row `k` of the log holds the losses of the batch seen before update `k`.
pub fn train_student<T: Element>(
    student: &mut Model<T>,
    teacher: &Model<T>,
    data: &[TrainSample<T>],
    cfg: &TrainConfig,
    steps: usize,
    seed: u64,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    let mut batches = Batches::new(data.len(), cfg.batch_size, Rng::stream(seed, 1))?;
    let mut noise = Rng::stream(seed, 2);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut logs = Vec::with_capacity(steps);
    for step in 0..steps {
        let (images, alphas) = stack(data, &batches.next_batch())?;
        let ft = teacher.teacher_features(&images)?;
        let mut g = Graph::new();
        let p = bind(&student.params, &mut g, true);
        let (vars, record) = student_loss(
            &mut g,
            &student.config,
            &p,
            &images,
            &alphas,
            &ft,
            &mut RouteControl::Train(&mut noise),
            &cfg.loss,
        )?;
        g.backward(vars.total)?;
        let log = StepLog {
            step,
            loss: vars.breakdown(&g),
            gamma_hard: record.gamma(),
        };
        on_step(&log);
        logs.push(log);
        opt.step(&mut student.params, &collect_grads(&p, &g))?;
    }
    Ok(logs)
}

/// How routing behaves during [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    /// Training-style Gumbel decisions from a fixed seed.
    Stochastic { seed: u64 },
    /// Argmax decisions with an optional cap.
    Infer { max_tokens: Option<usize> },
}

/// Losses and hard ratio of `student` over all of `data` in one batch.
pub fn evaluate<T: Element>(
    student: &Model<T>,
    teacher: &Model<T>,
    data: &[TrainSample<T>],
    loss: &LossConfig,
    mode: EvalMode,
) -> Result<(LossBreakdown, f64)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (images, alphas) = stack(data, &idx)?;
    let ft = teacher.teacher_features(&images)?;
    let mut g = Graph::new();
    let p = bind(&student.params, &mut g, false);
    let mut rng;
    let mut control = match mode {
        EvalMode::Stochastic { seed } => {
            rng = Rng::stream(seed, 4);
            RouteControl::Train(&mut rng)
        }
        EvalMode::Infer { max_tokens } => RouteControl::Infer { max_tokens },
    };
    let (vars, record) = student_loss(
        &mut g,
        &student.config,
        &p,
        &images,
        &alphas,
        &ft,
        &mut control,
        loss,
    )?;
    Ok((vars.breakdown(&g), record.gamma()))
}
