//! Built-in self checks, grouped into suites that the CLI can run.
//!
//! `grad` compares every parameter gradient of the full student loss with
//! central differences, `oracle` checks the full-routing degeneracy and the
//! cost model, and `routing` checks the decision step statistically.

use std::fmt;
use std::str::FromStr;

use crate::attention::attention_cost;
use crate::batr::{apply_topk_cap, compute_gamma, decide_infer, decide_train};
use crate::encoder::{
    encoder_forward, teacher_forward, EncoderConfig, Model, RouteControl, RoutingTrace,
};
use crate::error::{Error, Result};
use crate::gradcheck::{central_difference, relative_error, DEFAULT_STEP};
use crate::ltrm::ltrm_cost;
use crate::matting::LossConfig;
use crate::params::{bind, named, ParamTree};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};
use crate::train::student_loss;
use crate::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Oracle,
    Routing,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Self::Grad),
            "oracle" => Ok(Self::Oracle),
            "routing" => Ok(Self::Routing),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!(
                "unknown suite {other:?} (grad, oracle, routing, all)"
            ))),
        }
    }
}

/// One measured quantity and the bound it has to respect.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `value < threshold`.
    pub fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value < threshold,
        }
    }

    /// Passes when `value <= threshold`.
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value <= threshold,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} {} value={:.3e} threshold={:.3e}",
            self.name, self.value, self.threshold
        )
    }
}

pub fn run(suite: Suite) -> Result<Vec<Check>> {
    match suite {
        Suite::Grad => grad_suite(),
        Suite::Oracle => oracle_suite(),
        Suite::Routing => routing_suite(),
        Suite::All => {
            let mut all = oracle_suite()?;
            all.extend(routing_suite()?);
            all.extend(grad_suite()?);
            Ok(all)
        }
    }
}

fn tiny_f64() -> EncoderConfig {
    EncoderConfig {
        dtype: DType::F64,
        ..EncoderConfig::tiny()
    }
}

fn uniform_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform()).collect()).expect("sized")
}

/// Coordinates sampled per parameter tensor in the gradient suite.
pub const GRAD_SAMPLES: usize = 4;

/// Largest relative gradient error per parameter tensor of the full student
/// loss on the tiny `f64` model, with routing noise and decisions frozen.
pub fn grad_suite() -> Result<Vec<Check>> {
    let cfg = tiny_f64();
    let teacher = Model::<f64>::init(cfg.teacher(), 31)?;
    let student = Model::student_from(&teacher, cfg.clone(), 32)?;
    let mut rng = Rng::seed(33);
    let [h, w] = cfg.img_size;
    let images = uniform_tensor(&[2, cfg.in_channels, h, w], &mut rng);
    let alphas = uniform_tensor(&[2, h, w], &mut rng);
    let ft = teacher.teacher_features(&images)?;
    let loss_cfg = LossConfig::default();

    // record one stochastic pass, then replay it for every evaluation
    let trace = {
        let mut g = Graph::new();
        let p = bind(&student.params, &mut g, false);
        let img = g.constant(images.clone());
        let (_, rec) = encoder_forward(
            &mut g,
            &cfg,
            &p,
            img,
            &mut RouteControl::Train(&mut Rng::seed(34)),
        )?;
        rec.trace()
            .ok_or_else(|| Error::invalid("grad suite", "training pass left no trace"))?
    };
    let loss_at = |params: &crate::encoder::ModelParams<Tensor<f64>>,
                   trace: &RoutingTrace<f64>|
     -> Result<f64> {
        let mut g = Graph::new();
        let p = bind(params, &mut g, false);
        let (vars, _) = student_loss(
            &mut g,
            &cfg,
            &p,
            &images,
            &alphas,
            &ft,
            &mut RouteControl::Replay(trace),
            &loss_cfg,
        )?;
        Ok(g.value(vars.total).item())
    };

    let mut g = Graph::new();
    let bound = bind(&student.params, &mut g, true);
    let (vars, _) = student_loss(
        &mut g,
        &cfg,
        &bound,
        &images,
        &alphas,
        &ft,
        &mut RouteControl::Replay(&trace),
        &loss_cfg,
    )?;
    g.backward(vars.total)?;

    let mut checks = Vec::new();
    for ((name, var), (_, value)) in named(&bound).into_iter().zip(named(&student.params)) {
        let analytic = g
            .grad(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        let coords: Vec<usize> = (0..GRAD_SAMPLES.min(value.len()))
            .map(|_| rng.below(value.len()))
            .collect();
        let mut params = student.params.clone();
        let numeric = central_difference(
            |x| {
                params.visit_named_mut("", &mut |n, t| {
                    if n == name {
                        *t = x.clone();
                    }
                });
                loss_at(&params, &trace)
            },
            &value,
            &coords,
            DEFAULT_STEP,
        )?;
        let err = coords
            .iter()
            .zip(&numeric)
            .map(|(&i, &n)| relative_error(analytic.data()[i], n))
            .fold(0.0, f64::max);
        checks.push(Check::below(format!("grad {name}"), err, 1e-4));
    }
    Ok(checks)
}

pub fn oracle_suite() -> Result<Vec<Check>> {
    let cfg = tiny_f64();
    let teacher = Model::<f64>::init(cfg.teacher(), 41)?;
    let student = Model::student_from(&teacher, cfg.clone(), 42)?;
    let [h, w] = cfg.img_size;
    let images = uniform_tensor(&[2, cfg.in_channels, h, w], &mut Rng::seed(43));
    let n = cfg.tokens();
    let masks = vec![Tensor::ones(vec![2, n]); cfg.routed().len()];

    let mut g = Graph::new();
    let sp = bind(&student.params, &mut g, false);
    let tp = bind(&teacher.params, &mut g, false);
    let img = g.constant(images);
    let (routed, _) = encoder_forward(&mut g, &cfg, &sp, img, &mut RouteControl::Fixed(&masks))?;
    let plain = teacher_forward(&mut g, &teacher.config, &tp, img)?;
    let diff = g
        .value(routed)
        .data()
        .iter()
        .zip(g.value(plain).data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut checks = vec![Check::at_most(
        "full routing equals the plain encoder",
        diff,
        1e-12,
    )];

    let mut bytes_err = 0u64;
    for (n, heads) in [(16u64, 2u64), (196, 6), (4096, 6), (16384, 12)] {
        bytes_err = bytes_err.max(
            attention_cost(n, heads, 32 * heads, 4)
                .map_bytes
                .abs_diff(4 * heads * n * n),
        );
    }
    checks.push(Check::at_most(
        "attention map bytes equal 4 h N^2",
        bytes_err as f64,
        0.0,
    ));

    let mut ratio_err = 0u64;
    for n in [16u64, 196 * 4, 4096] {
        let full = attention_cost(n, 6, 384, 4).map_bytes;
        let quarter = attention_cost(n / 4, 6, 384, 4).map_bytes;
        ratio_err = ratio_err.max(full.abs_diff(16 * quarter));
    }
    checks.push(Check::at_most(
        "quarter routing stores 1/16 of the map",
        ratio_err as f64,
        0.0,
    ));

    let linear = [(196u64, 384u64), (1024, 32), (4096, 384)]
        .iter()
        .map(|&(n, d)| ltrm_cost(2 * n, d).abs_diff(2 * ltrm_cost(n, d)))
        .max()
        .unwrap_or(0);
    checks.push(Check::at_most(
        "refinement cost is linear in N",
        linear as f64,
        0.0,
    ));
    Ok(checks)
}

pub fn routing_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    let draws = 10_000;
    for p1 in [0.9, 0.5, 0.3] {
        let row = [(1.0f64 - p1).ln(), p1.ln()];
        let log_p = Tensor::new(vec![1, draws, 2], row.repeat(draws))?;
        let mut g = Graph::new();
        let lp = g.constant(log_p);
        let d = decide_train(&mut g, lp, 1.0, &mut Rng::seed(51))?;
        let freq = compute_gamma(&d.hard)?;
        checks.push(Check::at_most(
            format!("gumbel frequency at p1={p1}"),
            (freq - p1).abs(),
            0.02,
        ));
    }

    let mut rng = Rng::seed(52);
    let (b, n) = (4, 64);
    let log_p = {
        let v: Vec<f64> = (0..b * n)
            .flat_map(|_| {
                let p1 = rng.range(0.01, 0.99);
                [(1.0 - p1).ln(), p1.ln()]
            })
            .collect();
        Tensor::new(vec![b, n, 2], v)?
    };
    let decisions = decide_infer(&log_p)?;
    let mut worst = 0usize;
    for k in [0, 1, 5, 20, n] {
        let capped = apply_topk_cap(&log_p, &decisions, k)?;
        for s in 0..b {
            let before = decisions.data()[s * n..(s + 1) * n]
                .iter()
                .filter(|&&v| v == 1.0)
                .count();
            let after = capped.data()[s * n..(s + 1) * n]
                .iter()
                .filter(|&&v| v == 1.0)
                .count();
            worst = worst.max(after.abs_diff(before.min(k)));
        }
    }
    checks.push(Check::at_most(
        "top-k keeps min(k, count) tokens",
        worst as f64,
        0.0,
    ));

    let ones = decisions.data().iter().filter(|&&v| v == 1.0).count();
    let gamma = compute_gamma(&decisions)?;
    checks.push(Check::at_most(
        "gamma is the attended fraction",
        (gamma - ones as f64 / (b * n) as f64).abs(),
        0.0,
    ));
    Ok(checks)
}
