//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "VZSLCKPT"
//! u32    format version
//! u8     bytes per scalar (4 or 8)
//! u32    header length, then a UTF-8 JSON header (configs, counters, RNG)
//! u32    buffer count, then per buffer:
//!          u16 name length, name, u8 dtype, u8 ndim, u64 × ndim dims, raw data
//! magic  "VZSLEND\0"
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnm::Normalization;
use crate::tensor::{Scalar, Tensor, SCALAR_BYTES};
use crate::train::{AdamState, Progress, RngState, TrainConfig, Trainer};
use crate::vit::{layout, ModelConfig, Vit, VitWeights};

pub const MAGIC: &[u8; 8] = b"VZSLCKPT";
pub const END: &[u8; 8] = b"VZSLEND\0";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const DTYPE_U64: u8 = 2;
const DTYPE_SCALAR: u8 = if SCALAR_BYTES == 4 {
    DTYPE_F32
} else {
    DTYPE_F64
};

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub normalization: Normalization,
    pub train: TrainConfig,
    pub weights: VitWeights,
    pub adam: AdamState,
    pub progress: Progress,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    normalization: Normalization,
    train: TrainConfig,
    step: u64,
    epoch: u64,
    cursor: u64,
    adam_t: u64,
    rng: RngState,
}

enum Buffer {
    Scalars(Vec<usize>, Vec<Scalar>),
    Indices(Vec<u64>),
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, normalization: &Normalization) -> Self {
        Checkpoint {
            model: trainer.vit.config.clone(),
            normalization: normalization.clone(),
            train: trainer.config.clone(),
            weights: trainer.vit.weights.clone(),
            adam: trainer.adam.clone(),
            progress: trainer.progress.clone(),
            rng: trainer.rng_state(),
        }
    }

    /// Resumes training with `config`, which may change the step budget but
    /// not the seed or batch size the data stream depends on.
    pub fn into_trainer(self, config: TrainConfig) -> Result<Trainer> {
        if config.seed != self.train.seed || config.batch_size != self.train.batch_size {
            return Err(Error::Config(format!(
                "resume needs seed {} and batch_size {} from the checkpoint, got {} and {}",
                self.train.seed, self.train.batch_size, config.seed, config.batch_size
            )));
        }
        let vit = Vit::from_weights(self.model, self.weights)?;
        Trainer::restore(vit, self.adam, config, self.progress, &self.rng)
    }

    pub fn vit(&self) -> Result<Vit> {
        Vit::from_weights(self.model.clone(), self.weights.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            normalization: self.normalization.clone(),
            train: self.train.clone(),
            step: self.progress.step,
            epoch: self.progress.epoch,
            cursor: self.progress.cursor,
            adam_t: self.adam.t,
            rng: self.rng.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Contract(e.to_string()))?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(SCALAR_BYTES as u8);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);

        let named = self.weights.named();
        let count = 3 * named.len() + 1;
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, t) in &named {
            put_scalars(&mut out, &format!("w.{name}"), t.shape(), t.data());
        }
        for (prefix, moments) in [("adam.m", &self.adam.m), ("adam.v", &self.adam.v)] {
            for ((name, t), buf) in named.iter().zip(moments) {
                put_scalars(&mut out, &format!("{prefix}.{name}"), t.shape(), buf);
            }
        }
        put_header(
            &mut out,
            "data.order",
            DTYPE_U64,
            &[self.progress.order.len()],
        );
        for v in &self.progress.order {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(END);
        Ok(out)
    }

    /// Parses a checkpoint; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin: origin.to_path_buf(),
        };
        if r.take(8)? != MAGIC {
            return Err(r.fail("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(&format!("unsupported format version {version}")));
        }
        let width = r.u8()? as usize;
        if width != SCALAR_BYTES {
            return Err(r.fail(&format!(
                "checkpoint stores {}-bit scalars, this build uses {}-bit",
                width * 8,
                SCALAR_BYTES * 8
            )));
        }
        let len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| r.fail(&format!("header: {e}")))?;
        header
            .model
            .validate()
            .map_err(|e| r.fail(&e.to_string()))?;

        let count = r.u32()? as usize;
        let mut buffers = BTreeMap::new();
        for _ in 0..count {
            let (name, buf) = r.buffer()?;
            if buffers.insert(name.clone(), buf).is_some() {
                return Err(r.fail(&format!("duplicate buffer {name}")));
            }
        }
        if r.take(8)? != END {
            return Err(r.fail("missing end marker"));
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes after end marker"));
        }

        let mut scalars = |name: &str, shape: &[usize]| -> Result<Vec<Scalar>> {
            match buffers.remove(name) {
                Some(Buffer::Scalars(s, data)) if s == shape => Ok(data),
                Some(Buffer::Scalars(s, _)) => {
                    Err(r.fail(&format!("{name}: expected shape {shape:?}, found {s:?}")))
                }
                Some(Buffer::Indices(_)) => Err(r.fail(&format!("{name}: wrong dtype"))),
                None => Err(r.fail(&format!("missing buffer {name}"))),
            }
        };
        let shapes = layout(&header.model);
        let shapes = shapes.named();
        let mut weights = Vec::with_capacity(shapes.len());
        let mut m = Vec::with_capacity(shapes.len());
        let mut v = Vec::with_capacity(shapes.len());
        for (name, (shape, _)) in &shapes {
            let data = scalars(&format!("w.{name}"), shape)?;
            weights.push(Tensor::new(shape, data)?);
            m.push(scalars(&format!("adam.m.{name}"), shape)?);
            v.push(scalars(&format!("adam.v.{name}"), shape)?);
        }
        let order = match buffers.remove("data.order") {
            Some(Buffer::Indices(o)) => o,
            _ => return Err(r.fail("missing buffer data.order")),
        };
        if let Some(extra) = buffers.keys().next() {
            return Err(r.fail(&format!("unexpected buffer {extra}")));
        }
        let weights = layout(&header.model).rebuild(weights)?;
        Ok(Checkpoint {
            model: header.model,
            normalization: header.normalization,
            train: header.train,
            weights,
            adam: AdamState {
                m,
                v,
                t: header.adam_t,
            },
            progress: Progress {
                step: header.step,
                epoch: header.epoch,
                cursor: header.cursor,
                order,
            },
            rng: header.rng,
        })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_header(out: &mut Vec<u8>, name: &str, dtype: u8, shape: &[usize]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(shape.len() as u8);
    for d in shape {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
}

fn put_scalars(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[Scalar]) {
    put_header(out, name, DTYPE_SCALAR, shape);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
    origin: PathBuf,
}

impl<'b> Reader<'b> {
    fn fail(&self, msg: &str) -> Error {
        Error::format(&self.origin, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.fail(&format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn buffer(&mut self) -> Result<(String, Buffer)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| self.fail("buffer name is not UTF-8"))?
            .to_string();
        let dtype = self.u8()?;
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(usize::try_from(self.u64()?).map_err(|_| self.fail("dimension overflow"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| self.fail("dimension overflow"))?;
        let buf = match dtype {
            DTYPE_U64 => {
                let raw = self.take(
                    numel
                        .checked_mul(8)
                        .ok_or_else(|| self.fail("size overflow"))?,
                )?;
                Buffer::Indices(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )
            }
            d if d == DTYPE_SCALAR => {
                let raw = self.take(
                    numel
                        .checked_mul(SCALAR_BYTES)
                        .ok_or_else(|| self.fail("size overflow"))?,
                )?;
                let data = raw
                    .chunks_exact(SCALAR_BYTES)
                    .map(|c| Scalar::from_le_bytes(c.try_into().expect("scalar bytes")))
                    .collect();
                Buffer::Scalars(shape, data)
            }
            d => return Err(self.fail(&format!("{name}: unsupported dtype {d}"))),
        };
        Ok((name, buf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{Sample, TrainingSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        TrainingSet {
            samples: (0..n)
                .map(|i| Sample {
                    image: Tensor::new(
                        &[16, 16, 3],
                        (0..768).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    )
                    .unwrap(),
                    target: Tensor::new(&[4], (0..4).map(|_| rng.gen_range(0.0..1.0)).collect())
                        .unwrap(),
                    class_id: i as u32,
                })
                .collect(),
        }
    }

    fn config(max_steps: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 3,
            epochs: 100,
            max_steps: Some(max_steps),
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn trained(steps: u64) -> Trainer {
        let mut t = Trainer::new(ModelConfig::tiny(4), config(steps)).unwrap();
        t.run(&data(7), |_, _| Ok(())).unwrap();
        t
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ckpt = Checkpoint::from_trainer(&trained(4), &Normalization::default());
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn resume_equals_uninterrupted() {
        // 7 samples in batches of 3: step 4 stops mid-epoch
        let full = trained(9);
        let partial = trained(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        Checkpoint::from_trainer(&partial, &Normalization::default())
            .save(&path)
            .unwrap();
        let mut resumed = Checkpoint::load(&path)
            .unwrap()
            .into_trainer(config(9))
            .unwrap();
        resumed.run(&data(7), |_, _| Ok(())).unwrap();
        let a = Checkpoint::from_trainer(&full, &Normalization::default())
            .to_bytes()
            .unwrap();
        let b = Checkpoint::from_trainer(&resumed, &Normalization::default())
            .to_bytes()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resume_rejects_changed_seed() {
        let ckpt = Checkpoint::from_trainer(&trained(1), &Normalization::default());
        let err = ckpt
            .into_trainer(TrainConfig {
                seed: 6,
                ..config(2)
            })
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn truncation_and_corruption_are_format_errors() {
        let bytes = Checkpoint::from_trainer(&trained(1), &Normalization::default())
            .to_bytes()
            .unwrap();
        for cut in [0, 5, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut], Path::new("mem")).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad, Path::new("mem")),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad, Path::new("mem")),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[12] = if SCALAR_BYTES == 8 { 4 } else { 8 };
        assert!(matches!(
            Checkpoint::from_bytes(&bad, Path::new("mem")),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes;
        bad.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&bad, Path::new("mem")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_a_format_error() {
        let ckpt = Checkpoint::from_trainer(&trained(1), &Normalization::default());
        let mut other = ckpt.clone();
        other.model.mlp_width = 16;
        let err = Checkpoint::from_bytes(&other.to_bytes().unwrap(), Path::new("mem")).unwrap_err();
        assert!(
            matches!(err, Error::Format { ref msg, .. } if msg.contains("mlp_in_weight")),
            "{err}"
        );
    }
}
