//! Synthetic GZSL bundles whose attributes are visible in the pixels.
//!
//! Patch cell `j` (row-major over the patch grid) is owned by attribute
//! `j mod M`; every pixel of the cell takes that attribute's value as its
//! intensity on all channels, then seeded Gaussian noise is added.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, ClassMeta, DatasetBundle, DatasetMeta, ManifestEntry, ManifestPaths};
use crate::error::{Error, Result};
use crate::pnm::{Normalization, RawImage};

fn default_name() -> String {
    "synthetic".into()
}

fn default_channels() -> usize {
    3
}

fn default_eval_per_class() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_name")]
    pub name: String,
    /// Square image side, pixels.
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub num_attributes: usize,
    pub seen_classes: usize,
    pub unseen_classes: usize,
    /// Training images per seen class.
    pub samples_per_class: usize,
    #[serde(default = "default_eval_per_class")]
    pub val_per_class: usize,
    #[serde(default = "default_eval_per_class")]
    pub test_per_class: usize,
    /// Pixel noise standard deviation on the `[0, 1]` intensity scale.
    pub noise_level: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0
            || self.patch_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "image size {} is not divisible into {}-pixel patches",
                self.image_size, self.patch_size
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config("channels must be 1 or 3".into()));
        }
        if self.num_attributes == 0 {
            return Err(Error::Config("need at least one attribute".into()));
        }
        let cells = self.cells();
        if cells < self.num_attributes {
            return Err(Error::Config(format!(
                "patch-block capacity {cells} is smaller than {} attributes",
                self.num_attributes
            )));
        }
        if self.seen_classes == 0 || self.unseen_classes == 0 {
            return Err(Error::Config(
                "need at least one seen and one unseen class".into(),
            ));
        }
        if self.samples_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("need training and test samples".into()));
        }
        if !self.noise_level.is_finite() || self.noise_level < 0.0 {
            return Err(Error::Config("noise level must be non-negative".into()));
        }
        Ok(())
    }

    /// Number of patch cells.
    pub fn cells(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    fn num_classes(&self) -> usize {
        self.seen_classes + self.unseen_classes
    }
}

// Minimum Euclidean distance between class vectors, per sqrt(M).
const MIN_SEPARATION: f64 = 0.15;

fn class_attributes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let m = spec.num_attributes;
    let min_dist = MIN_SEPARATION * (m as f64).sqrt();
    let mut classes: Vec<Vec<f32>> = Vec::with_capacity(spec.num_classes());
    while classes.len() < spec.num_classes() {
        let cand: Vec<f32> = (0..m).map(|_| rng.gen::<f32>()).collect();
        let far = classes.iter().all(|c| {
            let d: f64 = c
                .iter()
                .zip(&cand)
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum();
            d.sqrt() >= min_dist
        });
        if far && cand.iter().any(|v| *v > 0.0) {
            classes.push(cand);
        }
    }
    classes
}

/// Renders one image of a class with attribute vector `attrs`.
pub fn render(spec: &SyntheticSpec, attrs: &[f32], rng: &mut ChaCha8Rng) -> RawImage {
    let (s, p, c) = (spec.image_size, spec.patch_size, spec.channels);
    let grid = s / p;
    let noise = Normal::new(0.0, spec.noise_level.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut pixels = Vec::with_capacity(s * s * c);
    for y in 0..s {
        for x in 0..s {
            let cell = (y / p) * grid + x / p;
            let base = attrs[cell % attrs.len()] as f64;
            for _ in 0..c {
                let v = if spec.noise_level > 0.0 {
                    base + noise.sample(rng)
                } else {
                    base
                };
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    RawImage::new(s, s, c, pixels).expect("rendered geometry")
}

/// Writes a complete bundle under `out_root` and loads it back.
pub fn synth_generate(spec: &SyntheticSpec, out_root: &Path) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let attrs = class_attributes(spec, &mut rng);
    let images = out_root.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;

    let classes: Vec<ClassMeta> = (0..spec.num_classes())
        .map(|i| ClassMeta {
            id: i as u32,
            name: format!(
                "{}_{i:03}",
                if i < spec.seen_classes {
                    "seen"
                } else {
                    "unseen"
                }
            ),
            seen: i < spec.seen_classes,
            attr_offset: i,
        })
        .collect();

    let mut write_split =
        |split: &str, ids: &[usize], per_class: usize| -> Result<Vec<ManifestEntry>> {
            let mut entries = Vec::with_capacity(ids.len() * per_class);
            for &id in ids {
                for k in 0..per_class {
                    let rel = PathBuf::from(format!("images/{split}_c{id:03}_{k:04}.ppm"));
                    render(spec, &attrs[id], &mut rng).write(&out_root.join(&rel))?;
                    entries.push(ManifestEntry {
                        path: rel,
                        class_id: id as u32,
                    });
                }
            }
            Ok(entries)
        };
    let seen: Vec<usize> = (0..spec.seen_classes).collect();
    let all: Vec<usize> = (0..spec.num_classes()).collect();
    let train = write_split("train", &seen, spec.samples_per_class)?;
    let val = write_split("val", &all, spec.val_per_class)?;
    let test = write_split("test", &all, spec.test_per_class)?;

    let meta = DatasetMeta {
        name: spec.name.clone(),
        height: spec.image_size,
        width: spec.image_size,
        channels: spec.channels,
        num_attributes: spec.num_attributes,
        normalization: Normalization::uniform(spec.channels, 0.5, 0.5),
        classes,
        manifests: ManifestPaths {
            train: "train.csv".into(),
            val: "val.csv".into(),
            test: "test.csv".into(),
        },
    };
    dataset::write_meta(out_root, &meta, &attrs)?;
    dataset::write_manifest(&out_root.join("train.csv"), &train)?;
    dataset::write_manifest(&out_root.join("val.csv"), &val)?;
    dataset::write_manifest(&out_root.join("test.csv"), &test)?;
    dataset::load_dataset(out_root)
}
