//! Binary PGM (`P5`) and PPM (`P6`) images with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    /// Interleaved row-major samples.
    pub data: Vec<u8>,
}

impl Pnm {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::format("netpbm", format!("{channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(Error::format(
                "netpbm",
                format!(
                    "{} samples for a {width}x{height}x{channels} image",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = token(bytes, &mut pos)?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => {
                return Err(Error::format(
                    "netpbm",
                    format!("unsupported magic {other:?}"),
                ))
            }
        };
        let width = number(bytes, &mut pos)?;
        let height = number(bytes, &mut pos)?;
        let maxval = number(bytes, &mut pos)?;
        if maxval != 255 {
            return Err(Error::format(
                "netpbm",
                format!("maxval {maxval}, only 255 is supported"),
            ));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::format("netpbm", "missing raster"));
        }
        pos += 1;
        let need = width * height * channels;
        if bytes.len() - pos != need {
            return Err(Error::format(
                "netpbm",
                format!("raster holds {} bytes, expected {need}", bytes.len() - pos),
            ));
        }
        Self::new(width, height, channels, bytes[pos..].to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Quantizes `[H,W]` (gray) or `[C,H,W]` with C in {1, 3}, values in `[0,1]`.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = match t.shape() {
            &[h, w] => (1, h, w),
            &[c, h, w] => (c, h, w),
            s => {
                return Err(Error::format(
                    "netpbm",
                    format!("cannot store a tensor of shape {s:?}"),
                ))
            }
        };
        let plane = h * w;
        let mut data = vec![0u8; c * plane];
        for ch in 0..c {
            for i in 0..plane {
                data[i * c + ch] = quantize(t.data()[ch * plane + i].as_f64());
            }
        }
        Self::new(w, h, c, data)
    }

    /// `[C,H,W]` with values `v / 255`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let c = self.channels;
        let mut out = vec![T::zero(); c * plane];
        for ch in 0..c {
            for i in 0..plane {
                out[ch * plane + i] = T::of(self.data[i * c + ch] as f64 / 255.0);
            }
        }
        Tensor::new(vec![c, self.height, self.width], out).expect("sized")
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else if bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
}

fn token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    skip_space_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("netpbm", "truncated header"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let t = token(bytes, pos)?;
    t.parse()
        .map_err(|_| Error::format("netpbm", format!("bad header field {t:?}")))
}
