//! Attention heatmaps from an encoder trace, and their export as images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pnm::RawImage;
use crate::tensor::Tensor;
use crate::vit::EncoderTrace;

/// Patch-grid heatmap with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major normalized values.
    pub values: Vec<f64>,
    /// Class-token attention mass per patch before min-max normalization.
    pub raw: Vec<f64>,
    /// Identifier of the source image.
    pub source: String,
    /// Half-open range of layers combined.
    pub layers: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapMode {
    /// Product of residual-mixed attention over all layers.
    Rollout,
    /// Head-averaged attention of the last layer only.
    LastLayer,
}

/// Head-averaged `[T×T]` attention of one layer.
fn head_mean(layer: &Tensor) -> Result<(usize, Vec<f64>)> {
    let (heads, t) = match layer.shape() {
        &[h, t, t2] if t == t2 && h > 0 => (h, t),
        s => return Err(Error::dim("head_mean", s, &[0, 0, 0])),
    };
    let mut mean = vec![0.0; t * t];
    for head in layer.data().chunks(t * t) {
        mean.iter_mut().zip(head).for_each(|(m, a)| *m += *a as f64);
    }
    mean.iter_mut().for_each(|m| *m /= heads as f64);
    Ok((t, mean))
}

/// `0.5·A + 0.5·I`, rows renormalized to sum to one.
fn mix_identity(t: usize, a: &mut [f64]) {
    for i in 0..t {
        let row = &mut a[i * t..(i + 1) * t];
        row.iter_mut().for_each(|v| *v *= 0.5);
        row[i] += 0.5;
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
}

fn matmul(t: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; t * t];
    for i in 0..t {
        for k in 0..t {
            let aik = a[i * t + k];
            for j in 0..t {
                out[i * t + j] += aik * b[k * t + j];
            }
        }
    }
    out
}

/// Min-max normalization; a constant grid maps to all 0.5.
fn normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn heatmap(
    trace: &EncoderTrace,
    class_row: &[f64],
    source: &str,
    layers: (usize, usize),
) -> Result<Heatmap> {
    let (rows, cols) = trace.grid;
    let raw = class_row[1..].to_vec();
    if raw.len() != rows * cols {
        return Err(Error::dim("heatmap", &[rows, cols], &[raw.len()]));
    }
    Ok(Heatmap {
        rows,
        cols,
        values: normalize(&raw),
        raw,
        source: source.to_string(),
        layers,
    })
}

/// Attention rollout: `Â_L ··· Â_1` with `Â = rownorm(0.5·A + 0.5·I)` over
/// head-averaged attention, read off at the class-token row.
pub fn attention_rollout(trace: &EncoderTrace, source: &str) -> Result<Heatmap> {
    if trace.attention.is_empty() {
        return Err(Error::Contract(
            "attention rollout needs at least one layer".into(),
        ));
    }
    let mut acc: Option<(usize, Vec<f64>)> = None;
    for layer in &trace.attention {
        let (t, mut a) = head_mean(layer)?;
        mix_identity(t, &mut a);
        acc = Some(match acc {
            None => (t, a),
            Some((t0, _)) if t0 != t => {
                return Err(Error::dim("attention_rollout", &[t0, t0], &[t, t]))
            }
            Some((_, r)) => (t, matmul(t, &a, &r)),
        });
    }
    let (t, r) = acc.expect("non-empty trace");
    heatmap(trace, &r[..t], source, (0, trace.attention.len()))
}

/// Head-averaged class-token attention of the last layer, without mixing.
pub fn last_layer_attention(trace: &EncoderTrace, source: &str) -> Result<Heatmap> {
    let last = trace
        .attention
        .last()
        .ok_or_else(|| Error::Contract("attention map needs at least one layer".into()))?;
    let (t, a) = head_mean(last)?;
    let l = trace.attention.len();
    heatmap(trace, &a[..t], source, (l - 1, l))
}

pub fn attention_map(trace: &EncoderTrace, source: &str, mode: MapMode) -> Result<Heatmap> {
    match mode {
        MapMode::Rollout => attention_rollout(trace, source),
        MapMode::LastLayer => last_layer_attention(trace, source),
    }
}

impl Heatmap {
    /// Nearest-neighbour upsampling by `patch` into an 8-bit gray image.
    pub fn upsample(&self, patch: usize) -> Result<RawImage> {
        let (w, h) = (self.cols * patch, self.rows * patch);
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let v = self.values[(y / patch) * self.cols + x / patch];
                pixels.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        RawImage::new(w, h, 1, pixels)
    }

    /// Writes the upsampled map as a binary PGM.
    pub fn export(&self, patch: usize, path: &Path) -> Result<()> {
        self.upsample(patch)?.write(path)
    }

    /// `0.5·image + 0.5·(255·v, 0, 0)` per pixel.
    pub fn overlay(&self, image: &RawImage, patch: usize) -> Result<RawImage> {
        let gray = self.upsample(patch)?;
        if image.channels != 3 || image.width != gray.width || image.height != gray.height {
            return Err(Error::dim(
                "overlay",
                &[image.height, image.width, image.channels],
                &[gray.height, gray.width, 3],
            ));
        }
        let mut pixels = Vec::with_capacity(image.pixels.len());
        for (i, rgb) in image.pixels.chunks(3).enumerate() {
            let heat = [gray.pixels[i] as f64, 0.0, 0.0];
            for (c, &p) in rgb.iter().enumerate() {
                pixels.push((0.5 * p as f64 + 0.5 * heat[c]).round() as u8);
            }
        }
        RawImage::new(image.width, image.height, 3, pixels)
    }
}
