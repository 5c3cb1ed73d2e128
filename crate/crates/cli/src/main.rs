mod alloc;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use memroute::attention::{attend_subset, attention_cost, AttentionParams, BlockCost, CostReport};
use memroute::checkpoint::read_manifest;
use memroute::encoder::{EncoderConfig, Model};
use memroute::netpbm::Pnm;
use memroute::params::bind;
use memroute::synth::{read_dataset, write_dataset, Difficulty};
use memroute::train::{log_csv, train_student, train_teacher, RunConfig};
use memroute::verify::{run, Suite};
use memroute::{DType, Element, Error, Graph, Result, Rng, Tensor};

#[global_allocator]
static GLOBAL: alloc::Tracking = alloc::Tracking;

/// Attention maps larger than this many tokens are only costed analytically.
const MEASURE_LIMIT: u64 = 1024;

#[derive(Parser)]
#[command(
    name = "memroute",
    version,
    about = "Adaptive token routing for transformer matting, at toy scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic composite dataset (PPM images, PGM and MRT1 mattes, index.json).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// `S` for S x S, or `HxW`.
        #[arg(long, value_parser = parse_size)]
        size: [usize; 2],
        #[arg(long, default_value = "easy")]
        difficulty: Difficulty,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a routed student against a routing-free teacher.
    ///
    /// Writes the checkpoint and `train_log.csv` into `--out`. With
    /// `--pretrain-teacher` the teacher is trained first on the same data and
    /// stored under `--out/teacher` with its own `teacher_log.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON run configuration `{"model": {...}, "train": {...}}`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint of a trained teacher.
        #[arg(
            long,
            conflicts_with = "pretrain_teacher",
            required_unless_present = "pretrain_teacher"
        )]
        teacher: Option<PathBuf>,
        #[arg(long)]
        pretrain_teacher: bool,
    },
    /// Predict an alpha matte for one PPM image.
    ///
    /// Prints the attended fraction of every routed block and the attention
    /// cost of the pass as CSV.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_alpha: PathBuf,
        /// Cap on attended tokens per block and sample.
        #[arg(long)]
        max_tokens: Option<usize>,
        /// Write one PGM per routed block, 255 where the token was attended.
        #[arg(long)]
        export_masks: Option<PathBuf>,
    },
    /// Sweep attention-map memory over resolutions and routed ratios.
    ///
    /// `analytic_bytes` is the size of the `h x N x N` map, `measured_bytes`
    /// the peak heap growth of one routed attention forward pass (empty above
    /// 1024 routed tokens), `flops` the analytic multiply-add count.
    BenchCost {
        #[arg(long)]
        config: PathBuf,
        /// Comma separated, each `S` or `HxW`.
        #[arg(long, value_delimiter = ',', value_parser = parse_size)]
        resolutions: Vec<[usize; 2]>,
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run built-in checks; exits 1 if any fails.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
    },
}

fn parse_size(s: &str) -> std::result::Result<[usize; 2], String> {
    let bad = || format!("expected S or HxW, got {s:?}");
    match s.split_once('x') {
        Some((h, w)) => Ok([h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?]),
        None => {
            let v = s.parse().map_err(|_| bad())?;
            Ok([v, v])
        }
    }
}

/// Failure with its exit code.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Failure(code, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            out,
            count,
            size,
            difficulty,
            seed,
        } => gen_data(&out, count, size, difficulty, seed),
        Command::Train {
            data,
            config,
            out,
            steps,
            seed,
            teacher,
            pretrain_teacher: _,
        } => train(&data, &config, &out, steps, seed, teacher.as_deref()),
        Command::Infer {
            ckpt,
            image,
            out_alpha,
            max_tokens,
            export_masks,
        } => infer(
            &ckpt,
            &image,
            &out_alpha,
            max_tokens,
            export_masks.as_deref(),
        ),
        Command::BenchCost {
            config,
            resolutions,
            ratios,
            out,
        } => bench_cost(&config, &resolutions, &ratios, &out),
        Command::Verify { suite } => verify(suite),
    };
    match result {
        Ok(text) => {
            // a closed pipe downstream is not an error of ours
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn gen_data(
    out: &Path,
    count: usize,
    size: [usize; 2],
    difficulty: Difficulty,
    seed: u64,
) -> Result<String, Failure> {
    let index = write_dataset(out, count, size, difficulty, seed)?;
    Ok(format!(
        "wrote {} samples to {}\n",
        index.samples.len(),
        out.display()
    ))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    RunConfig::from_json(&text)
}

fn train(
    data: &Path,
    config: &Path,
    out: &Path,
    steps: usize,
    seed: u64,
    teacher: Option<&Path>,
) -> Result<String, Failure> {
    let cfg = load_config(config)?;
    match cfg.model.dtype {
        DType::F32 => train_typed::<f32>(data, &cfg, out, steps, seed, teacher),
        DType::F64 => train_typed::<f64>(data, &cfg, out, steps, seed, teacher),
    }
}

fn train_typed<T: Element>(
    data: &Path,
    cfg: &RunConfig,
    out: &Path,
    steps: usize,
    seed: u64,
    teacher: Option<&Path>,
) -> Result<String, Failure> {
    let samples = read_dataset::<T>(data)?;
    if let Some(s) = samples.first() {
        let (h, w) = (s.alpha.shape()[0], s.alpha.shape()[1]);
        if [h, w] != cfg.model.img_size {
            return Err(Failure(
                2,
                format!(
                    "dataset images are {h}x{w} but model.img-size is {:?}",
                    cfg.model.img_size
                ),
            ));
        }
    }
    fs::create_dir_all(out).map_err(Error::from)?;
    let mut report = String::new();
    let teacher = match teacher {
        Some(path) => {
            let t = Model::<T>::load(path)?;
            // routing settings do not affect a routing-free model
            let comparable = EncoderConfig {
                routing: cfg.model.routing.clone(),
                ..t.config.clone()
            };
            if comparable != cfg.model.teacher() {
                return Err(Failure(
                    2,
                    format!("teacher in {} does not match model config", path.display()),
                ));
            }
            t
        }
        None => {
            let mut t = Model::<T>::init(cfg.model.teacher(), seed)?;
            let logs = train_teacher(
                &mut t,
                &samples,
                &cfg.train,
                cfg.train.teacher_steps,
                seed,
                |_| {},
            )?;
            t.save(out.join("teacher"))?;
            fs::write(out.join("teacher_log.csv"), log_csv(&logs)).map_err(Error::from)?;
            if let Some(last) = logs.last() {
                let _ = writeln!(
                    report,
                    "teacher: {} steps, final matting loss {:.6}",
                    logs.len(),
                    last.loss.matting
                );
            }
            t
        }
    };
    let mut student = Model::student_from(&teacher, cfg.model.clone(), seed.wrapping_add(1))?;
    let logs = train_student(
        &mut student,
        &teacher,
        &samples,
        &cfg.train,
        steps,
        seed,
        |_| {},
    )?;
    student.save(out)?;
    fs::write(out.join("train_log.csv"), log_csv(&logs)).map_err(Error::from)?;
    match logs.last() {
        Some(l) => writeln!(
            report,
            "student: {} steps, final total {:.6}, gamma_hard {:.4}",
            logs.len(),
            l.loss.total,
            l.gamma_hard
        ),
        None => writeln!(report, "student: 0 steps, saved initialization"),
    }
    .expect("writing to a string");
    Ok(report)
}

fn infer(
    ckpt: &Path,
    image: &Path,
    out_alpha: &Path,
    max_tokens: Option<usize>,
    masks: Option<&Path>,
) -> Result<String, Failure> {
    match read_manifest(ckpt)?.config.dtype {
        DType::F32 => infer_typed::<f32>(ckpt, image, out_alpha, max_tokens, masks),
        DType::F64 => infer_typed::<f64>(ckpt, image, out_alpha, max_tokens, masks),
    }
}

fn infer_typed<T: Element>(
    ckpt: &Path,
    image: &Path,
    out_alpha: &Path,
    max_tokens: Option<usize>,
    masks: Option<&Path>,
) -> Result<String, Failure> {
    let model = Model::<T>::load(ckpt)?;
    let cfg = &model.config;
    let pnm = Pnm::load(image)?;
    if pnm.channels != cfg.in_channels || [pnm.height, pnm.width] != cfg.img_size {
        return Err(Failure(
            2,
            format!(
                "image is {}x{} with {} channels, model expects {:?} with {}",
                pnm.height, pnm.width, pnm.channels, cfg.img_size, cfg.in_channels
            ),
        ));
    }
    let [h, w] = cfg.img_size;
    let img = pnm
        .to_tensor::<T>()
        .reshape(vec![1, cfg.in_channels, h, w])?;
    let (alpha, record) = model.infer(&img, max_tokens.or(cfg.routing.max_tokens))?;
    Pnm::from_tensor(&alpha.reshape(vec![h, w])?)?.save(out_alpha)?;

    let counts = record.counts();
    if let Some(dir) = masks {
        fs::create_dir_all(dir).map_err(Error::from)?;
        let (gh, gw) = cfg.grid();
        for (block, routing) in record.routed_blocks.iter().zip(&record.blocks) {
            let d = routing.decisions.data();
            for sample in 0..routing.decisions.shape()[0] {
                let px = d[sample * gh * gw..(sample + 1) * gh * gw]
                    .iter()
                    .map(|&v| if v == T::one() { 255 } else { 0 })
                    .collect();
                Pnm::new(gw, gh, 1, px)?.save(dir.join(format!("mask_s{sample}_b{block}.pgm")))?;
            }
        }
    }

    let mut report = String::from("block,gamma\n");
    let n = cfg.tokens() as u64;
    for (block, c) in record.routed_blocks.iter().zip(&counts) {
        let _ = writeln!(
            report,
            "{block},{}",
            c.iter().sum::<u64>() as f64 / (n * c.len() as u64) as f64
        );
    }
    // unrouted blocks attend over every token
    let per_block = (0..cfg.depth)
        .map(|b| {
            let routed = match record.routed_blocks.iter().position(|&r| r == b) {
                Some(i) => counts[i].clone(),
                None => vec![n],
            };
            let mut cost = CostReport::for_routing(
                &[routed],
                cfg.heads as u64,
                cfg.embed_dim as u64,
                cfg.dtype.size_bytes() as u64,
            )
            .per_block[0];
            cost.block = b;
            cost
        })
        .collect::<Vec<BlockCost>>();
    report.push_str(&CostReport::from_blocks(per_block).to_csv());
    Ok(report)
}

fn bench_cost(
    config: &Path,
    resolutions: &[[usize; 2]],
    ratios: &[f64],
    out: &Path,
) -> Result<String, Failure> {
    let cfg = load_config(config)?.model;
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Failure(2, format!("ratio {r} outside [0, 1]")));
    }
    let mut csv = String::from("H,W,N,ratio,analytic_bytes,measured_bytes,flops\n");
    for &[h, w] in resolutions {
        if h % cfg.patch != 0 || w % cfg.patch != 0 {
            return Err(Failure(
                2,
                format!("{h}x{w} is not divisible by patch size {}", cfg.patch),
            ));
        }
        let n = ((h / cfg.patch) * (w / cfg.patch)) as u64;
        for &ratio in ratios {
            let routed = (ratio * n as f64).round() as u64;
            let cost = attention_cost(
                routed,
                cfg.heads as u64,
                cfg.embed_dim as u64,
                cfg.dtype.size_bytes() as u64,
            );
            let measured = if routed <= MEASURE_LIMIT {
                let bytes = match cfg.dtype {
                    DType::F32 => measure::<f32>(&cfg, n as usize, routed as usize)?,
                    DType::F64 => measure::<f64>(&cfg, n as usize, routed as usize)?,
                };
                bytes.to_string()
            } else {
                String::new()
            };
            let _ = writeln!(
                csv,
                "{h},{w},{n},{ratio},{},{measured},{}",
                cost.map_bytes, cost.flops
            );
        }
    }
    fs::write(out, &csv).map_err(Error::from)?;
    Ok(csv)
}

/// Peak heap growth of one routed attention pass over `routed` of `n` tokens.
fn measure<T: Element>(cfg: &EncoderConfig, n: usize, routed: usize) -> Result<usize> {
    let mut rng = Rng::seed(0);
    let params = AttentionParams::<Tensor<T>>::init(cfg.embed_dim, &mut rng);
    let x = Tensor::<T>::zeros(vec![1, n, cfg.embed_dim]);
    let idx = vec![(0..routed).collect::<Vec<_>>()];
    let mut g = Graph::new();
    let xv = g.constant(x);
    let p = bind(&params, &mut g, false);
    let (out, bytes) = alloc::peak_during(|| attend_subset(&mut g, xv, &idx, &p, cfg.heads));
    out?;
    Ok(bytes)
}

fn verify(suite: Suite) -> Result<String, Failure> {
    let checks = run(suite)?;
    let mut report = String::new();
    for c in &checks {
        let _ = writeln!(report, "{c}");
    }
    match checks.iter().find(|c| !c.passed) {
        Some(c) => {
            print!("{report}");
            Err(Failure(1, format!("check failed: {}", c.name)))
        }
        None => Ok(report),
    }
}
