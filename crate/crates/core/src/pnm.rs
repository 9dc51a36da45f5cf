//! Binary PGM (P5) and PPM (P6) codec, 8-bit only, plus per-channel
//! normalization into tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Interleaved 8-bit raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Contract(format!(
                "unsupported channel count {channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::dim(
                "RawImage::new",
                &[height, width, channels],
                &[pixels.len()],
            ));
        }
        Ok(RawImage {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Parses a P5/P6 stream. `origin` only labels errors.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |msg: &str| Error::format(origin, msg);
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(fail("not a binary PGM/PPM (expected P5 or P6 magic)")),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in fields.iter_mut() {
            // whitespace and comments
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(fail("truncated header")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(fail("malformed header"));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| fail("header value out of range"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(fail(&format!("unsupported maxval {maxval}, only 255")));
        }
        if width == 0 || height == 0 {
            return Err(fail("zero image extent"));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(fail("missing separator after header"));
        }
        pos += 1;
        let len = width * height * channels;
        let data = bytes
            .get(pos..pos + len)
            .ok_or_else(|| fail(&format!("truncated pixel data: expected {len} bytes")))?;
        RawImage::new(width, height, channels, data.to_vec())
    }
}

/// Per-channel affine normalization applied after scaling bytes to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn uniform(channels: usize, mean: f64, std: f64) -> Self {
        Normalization {
            mean: vec![mean; channels],
            std: vec![std; channels],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Config(format!(
                "normalization needs {channels} mean/std values, got {}/{}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|s| !s.is_finite() || *s <= 0.0)
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Config(
                "normalization std must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// `(byte/255 − mean_c) / std_c` as an `H×W×C` tensor.
    pub fn normalize(&self, img: &RawImage) -> Result<Tensor> {
        self.validate(img.channels)?;
        let c = img.channels;
        let data = img
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let ch = i % c;
                ((p as f64 / 255.0 - self.mean[ch]) / self.std[ch]) as Scalar
            })
            .collect();
        Tensor::new(&[img.height, img.width, c], data)
    }

    /// Inverse of [`normalize`](Self::normalize) on the unit scale, without
    /// quantization.
    pub fn denormalize(&self, t: &Tensor) -> Result<Vec<f64>> {
        let c = *t.shape().last().unwrap_or(&1);
        self.validate(c)?;
        Ok(t.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v as f64 * self.std[i % c] + self.mean[i % c])
            .collect())
    }

    /// Denormalizes and quantizes back to bytes.
    pub fn to_raw(&self, t: &Tensor) -> Result<RawImage> {
        let (h, w, c) = match t.shape() {
            &[h, w, c] => (h, w, c),
            s => return Err(Error::dim("to_raw", s, &[0, 0, 0])),
        };
        let pixels = self
            .denormalize(t)?
            .into_iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        RawImage::new(w, h, c, pixels)
    }
}

impl Default for Normalization {
    fn default() -> Self {
        Self::uniform(3, 0.5, 0.5)
    }
}

/// Reads a PPM and normalizes it, checking the expected `H×W×C` geometry.
pub fn load_image(path: &Path, geometry: [usize; 3], norm: &Normalization) -> Result<Tensor> {
    let img = RawImage::read(path)?;
    let [h, w, c] = geometry;
    if img.height != h || img.width != w || img.channels != c {
        return Err(Error::format(
            path,
            format!(
                "expected {h}x{w}x{c} image, found {}x{}x{}",
                img.height, img.width, img.channels
            ),
        ));
    }
    norm.normalize(&img)
}
