//! Channel-last images with values in `[0, 1]`, read from binary PGM/PPM
//! (`P5`/`P6`) or raw float arrays.
//!
//! The raw format is an ASCII header `F64 <height> <width> <channels>\n`
//! followed by `height * width * channels` little-endian `f64` values.
//! Other formats convert with standard tools, e.g.
//! `convert input.png -depth 8 output.ppm`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f64>,
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse {
        line: 0,
        msg: msg.into(),
    }
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {}",
                channels
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidArgument(format!(
                "{}x{}x{} image needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Image::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// `[H, W, 3]`; grayscale is replicated across channels.
    pub fn to_tensor(&self) -> Tensor {
        let c = self.channels;
        Tensor::from_fn(&[self.height, self.width, 3], |i| {
            let (pix, ch) = (i / 3, i % 3);
            self.data[pix * c + if c == 1 { 0 } else { ch }]
        })
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for r in 0..self.height {
            for x in 0..self.width {
                for ch in 0..self.channels {
                    out.data[(r * self.width + x) * self.channels + ch] = self.at(r, self.width - 1 - x, ch);
                }
            }
        }
        out
    }

    /// Mirror top-bottom.
    pub fn flip_vertical(&self) -> Image {
        let mut out = self.clone();
        for r in 0..self.height {
            for x in 0..self.width {
                for ch in 0..self.channels {
                    out.data[(r * self.width + x) * self.channels + ch] = self.at(self.height - 1 - r, x, ch);
                }
            }
        }
        out
    }

    /// 8-bit binary PGM or PPM; values are clamped and rounded.
    pub fn to_pnm_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{}\n{} {}\n255\n", magic, self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_pnm_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(parse_err("truncated PNM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(parse_err(format!("unsupported PNM magic {:?}; only binary P5/P6", m))),
        };
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| parse_err(format!("bad PNM {}: {:?}", what, s)))
        };
        let width = num(&fields[1], "width")?;
        let height = num(&fields[2], "height")?;
        let maxval = num(&fields[3], "maxval")?;
        if maxval == 0 || maxval > 65535 {
            return Err(parse_err(format!("PNM maxval {} out of range", maxval)));
        }
        let wide = maxval > 255;
        let count = width * height * channels;
        let need = count * if wide { 2 } else { 1 };
        let raster = bytes.get(pos..pos + need).ok_or_else(|| {
            parse_err(format!(
                "PNM raster truncated: need {} bytes, have {}",
                need,
                bytes.len().saturating_sub(pos)
            ))
        })?;
        let scale = 1.0 / maxval as f64;
        let data = if wide {
            raster
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 * scale)
                .collect()
        } else {
            raster.iter().map(|&b| b as f64 * scale).collect()
        };
        Image::new(height, width, channels, data)
    }

    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = format!("F64 {} {} {}\n", self.height, self.width, self.channels).into_bytes();
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err("raw image header has no newline"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| parse_err("raw image header is not ASCII"))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "F64" {
            return Err(parse_err(format!("bad raw image header {:?}", header)));
        }
        let dims: Vec<usize> = parts[1..]
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| parse_err(format!("bad raw image dimension {:?}", s)))
            })
            .collect::<Result<_>>()?;
        let body = &bytes[nl + 1..];
        let count = dims[0] * dims[1] * dims[2];
        if body.len() != count * 8 {
            return Err(parse_err(format!(
                "raw image needs {} bytes, has {}",
                count * 8,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Image::new(dims[0], dims[1], dims[2], data)
    }

    /// Dispatches on the leading magic bytes.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let decoded = if bytes.starts_with(b"F64 ") {
            Image::from_raw_bytes(&bytes)
        } else {
            Image::from_pnm_bytes(&bytes)
        };
        decoded.map_err(|e| match e {
            Error::Parse { msg, .. } => Error::Parse {
                line: 0,
                msg: format!("{}: {}", path.display(), msg),
            },
            other => other,
        })
    }

    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pnm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_raw_bytes()).map_err(|e| Error::io(path, e))
    }
}
