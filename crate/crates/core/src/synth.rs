//! Procedural matting samples and their on-disk layout.
//!
//! Easy mattes are anti-aliased disks and convex polygons (coverage from a
//! 4x4 supersampling grid, so interiors are exactly 1). Hard mattes are
//! linear and radial ramps and sums of soft Gaussian blobs. Foreground and
//! background are smooth value noise. Sample `i` of a dataset draws from
//! stream `i` of the master seed, so samples are independent of each other.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matting::composite;
use crate::netpbm::Pnm;
use crate::rng::Rng;
use crate::tensor::{AnyTensor, Element, Tensor};

pub const DATA_FORMAT: &str = "memroute-data-1";
pub const INDEX: &str = "index.json";
const SUPERSAMPLE: usize = 4;
const NOISE_CELLS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::Config(format!("unknown difficulty {other:?}"))),
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSample {
    pub fg: Tensor<f64>,
    pub bg: Tensor<f64>,
    pub alpha: Tensor<f64>,
    pub image: Tensor<f64>,
}

pub fn gen_toy_sample(
    rng: &mut Rng,
    size: [usize; 2],
    difficulty: Difficulty,
) -> Result<CompositeSample> {
    let [h, w] = size;
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("sample size {h}x{w} is empty")));
    }
    let fg = smooth_noise(rng, 3, h, w);
    let bg = smooth_noise(rng, 3, h, w);
    let alpha = match difficulty {
        Difficulty::Easy => {
            if rng.below(2) == 0 {
                random_disk(rng, h, w)
            } else {
                random_polygon(rng, h, w)
            }
        }
        Difficulty::Hard => match rng.below(3) {
            0 => linear_ramp(rng, h, w),
            1 => radial_ramp(rng, h, w),
            _ => soft_blobs(rng, h, w),
        },
    };
    let image = composite(&fg, &bg, &alpha)?;
    Ok(CompositeSample {
        fg,
        bg,
        alpha,
        image,
    })
}

/// Bilinear interpolation of a coarse random grid, values in `[0,1]`.
fn smooth_noise(rng: &mut Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let g = NOISE_CELLS + 1;
    let mut out = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let grid: Vec<f64> = (0..g * g).map(|_| rng.uniform()).collect();
        for y in 0..h {
            let fy = (y as f64 + 0.5) / h as f64 * NOISE_CELLS as f64;
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            for x in 0..w {
                let fx = (x as f64 + 0.5) / w as f64 * NOISE_CELLS as f64;
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let at = |yy: usize, xx: usize| grid[yy * g + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                out.push((top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("sized")
}

/// Fractional pixel coverage of the region `inside(y, x)` (pixel units).
fn coverage(h: usize, w: usize, inside: impl Fn(f64, f64) -> bool) -> Tensor<f64> {
    let s = SUPERSAMPLE;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut hits = 0;
            for sy in 0..s {
                for sx in 0..s {
                    let py = y as f64 + (sy as f64 + 0.5) / s as f64;
                    let px = x as f64 + (sx as f64 + 0.5) / s as f64;
                    if inside(py, px) {
                        hits += 1;
                    }
                }
            }
            out.push(hits as f64 / (s * s) as f64);
        }
    }
    Tensor::new(vec![h, w], out).expect("sized")
}

/// Anti-aliased disk matte centred at `(cy, cx)` with radius `r`, in pixels.
pub fn disk_alpha(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Tensor<f64> {
    coverage(h, w, |y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r)
}

fn random_disk(rng: &mut Rng, h: usize, w: usize) -> Tensor<f64> {
    let m = h.min(w) as f64;
    let r = rng.range(0.2, 0.4) * m;
    let cy = rng.range(0.35, 0.65) * h as f64;
    let cx = rng.range(0.35, 0.65) * w as f64;
    disk_alpha(h, w, cy, cx, r)
}

fn random_polygon(rng: &mut Rng, h: usize, w: usize) -> Tensor<f64> {
    let m = h.min(w) as f64;
    let cy = rng.range(0.4, 0.6) * h as f64;
    let cx = rng.range(0.4, 0.6) * w as f64;
    let k = 3 + rng.below(4);
    let mut angles: Vec<f64> = (0..k)
        .map(|_| rng.range(0.0, std::f64::consts::TAU))
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let verts: Vec<(f64, f64)> = angles
        .iter()
        .map(|&a| {
            let r = rng.range(0.25, 0.45) * m;
            (cy + r * a.sin(), cx + r * a.cos())
        })
        .collect();
    coverage(h, w, |y, x| {
        (0..k).all(|i| {
            let (y0, x0) = verts[i];
            let (y1, x1) = verts[(i + 1) % k];
            (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
        })
    })
}

fn field(h: usize, w: usize, f: impl Fn(f64, f64) -> f64) -> Tensor<f64> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(f(y as f64 + 0.5, x as f64 + 0.5).clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![h, w], out).expect("sized")
}

fn linear_ramp(rng: &mut Rng, h: usize, w: usize) -> Tensor<f64> {
    let m = h.min(w) as f64;
    let theta = rng.range(0.0, std::f64::consts::TAU);
    let (dy, dx) = (theta.sin(), theta.cos());
    let (cy, cx) = (
        rng.range(0.3, 0.7) * h as f64,
        rng.range(0.3, 0.7) * w as f64,
    );
    let width = rng.range(0.2, 0.6) * m;
    field(h, w, |y, x| 0.5 + ((y - cy) * dy + (x - cx) * dx) / width)
}

fn radial_ramp(rng: &mut Rng, h: usize, w: usize) -> Tensor<f64> {
    let m = h.min(w) as f64;
    let (cy, cx) = (
        rng.range(0.3, 0.7) * h as f64,
        rng.range(0.3, 0.7) * w as f64,
    );
    let inner = rng.range(0.05, 0.2) * m;
    let outer = inner + rng.range(0.15, 0.35) * m;
    field(h, w, |y, x| {
        let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
        (outer - d) / (outer - inner)
    })
}

fn soft_blobs(rng: &mut Rng, h: usize, w: usize) -> Tensor<f64> {
    let m = h.min(w) as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..2 + rng.below(3))
        .map(|_| {
            (
                rng.range(0.2, 0.8) * h as f64,
                rng.range(0.2, 0.8) * w as f64,
                rng.range(0.08, 0.25) * m,
                rng.range(0.5, 1.0),
            )
        })
        .collect();
    field(h, w, |y, x| {
        blobs
            .iter()
            .map(|&(cy, cx, s, a)| {
                a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp()
            })
            .sum()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SampleEntry {
    /// Stream of the master seed this sample was drawn from.
    pub stream: u64,
    pub image: String,
    pub fg: String,
    pub bg: String,
    pub alpha_pgm: String,
    pub alpha: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct DataIndex {
    pub format: String,
    pub size: [usize; 2],
    pub difficulty: Difficulty,
    pub seed: u64,
    pub samples: Vec<SampleEntry>,
}

/// Writes `count` samples into `dir` as PPM/PGM/MRT1 files plus `index.json`.
pub fn write_dataset(
    dir: &Path,
    count: usize,
    size: [usize; 2],
    difficulty: Difficulty,
    seed: u64,
) -> Result<DataIndex> {
    fs::create_dir_all(dir)?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let s = gen_toy_sample(&mut Rng::stream(seed, i as u64), size, difficulty)?;
        let entry = SampleEntry {
            stream: i as u64,
            image: format!("image_{i:04}.ppm"),
            fg: format!("fg_{i:04}.ppm"),
            bg: format!("bg_{i:04}.ppm"),
            alpha_pgm: format!("alpha_{i:04}.pgm"),
            alpha: format!("alpha_{i:04}.mrt"),
        };
        Pnm::from_tensor(&s.image)?.save(dir.join(&entry.image))?;
        Pnm::from_tensor(&s.fg)?.save(dir.join(&entry.fg))?;
        Pnm::from_tensor(&s.bg)?.save(dir.join(&entry.bg))?;
        Pnm::from_tensor(&s.alpha)?.save(dir.join(&entry.alpha_pgm))?;
        s.alpha.cast::<f32>().save_mrt(dir.join(&entry.alpha))?;
        samples.push(entry);
    }
    let index = DataIndex {
        format: DATA_FORMAT.to_string(),
        size,
        difficulty,
        seed,
        samples,
    };
    let mut text = serde_json::to_string_pretty(&index)?;
    text.push('\n');
    fs::write(dir.join(INDEX), text)?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<DataIndex> {
    let index: DataIndex = serde_json::from_str(&fs::read_to_string(dir.join(INDEX))?)?;
    if index.format != DATA_FORMAT {
        return Err(Error::format(
            "dataset index",
            format!("unsupported format {:?}", index.format),
        ));
    }
    Ok(index)
}

/// Image `[3,H,W]` and ground-truth alpha `[H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample<T: Element> {
    pub image: Tensor<T>,
    pub alpha: Tensor<T>,
}

impl<T: Element> TrainSample<T> {
    pub fn from_composite(s: &CompositeSample) -> Self {
        Self {
            image: s.image.cast(),
            alpha: s.alpha.cast(),
        }
    }
}

/// Loads every sample: the quantized PPM image and the float alpha.
pub fn read_dataset<T: Element>(dir: &Path) -> Result<Vec<TrainSample<T>>> {
    let index = read_index(dir)?;
    let [h, w] = index.size;
    index
        .samples
        .iter()
        .map(|e| {
            let img = Pnm::load(dir.join(&e.image))?;
            if img.channels != 3 || img.height != h || img.width != w {
                return Err(Error::format(
                    "dataset",
                    format!("{} is not a {h}x{w} RGB image", e.image),
                ));
            }
            let alpha = AnyTensor::load_mrt(dir.join(&e.alpha))?.into_typed::<f32>()?;
            if alpha.shape() != [h, w] {
                return Err(Error::format(
                    "dataset",
                    format!("{} has shape {:?}", e.alpha, alpha.shape()),
                ));
            }
            Ok(TrainSample {
                image: img.to_tensor(),
                alpha: alpha.cast(),
            })
        })
        .collect()
}

/// Stacks the chosen samples into images `[B,3,H,W]` and alphas `[B,H,W]`.
pub fn stack<T: Element>(
    samples: &[TrainSample<T>],
    idx: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples
        .get(
            *idx.first()
                .ok_or_else(|| Error::invalid("stack", "empty batch"))?,
        )
        .ok_or_else(|| Error::invalid("stack", "sample index out of range"))?;
    let (is, as_) = (first.image.shape().to_vec(), first.alpha.shape().to_vec());
    let mut images = Vec::with_capacity(idx.len() * first.image.len());
    let mut alphas = Vec::with_capacity(idx.len() * first.alpha.len());
    for &i in idx {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::invalid("stack", "sample index out of range"))?;
        if s.image.shape() != is.as_slice() || s.alpha.shape() != as_.as_slice() {
            return Err(Error::shape("stack", &is, s.image.shape()));
        }
        images.extend_from_slice(s.image.data());
        alphas.extend_from_slice(s.alpha.data());
    }
    let b = idx.len();
    Ok((
        Tensor::new([vec![b], is].concat(), images)?,
        Tensor::new([vec![b], as_].concat(), alphas)?,
    ))
}
