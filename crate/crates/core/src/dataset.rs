//! On-disk dataset bundles.
//!
//! A bundle root holds `dataset.json`, `attributes.f32` (little-endian
//! row-major float32, `num_classes × M`), three manifest CSVs with
//! `path,class_id` rows, and the PPM images they reference.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnm::{self, Normalization};
use crate::tensor::{Scalar, Tensor};
use crate::zsl::ClassEmbeddings;

pub const META_FILE: &str = "dataset.json";
pub const ATTRIBUTES_FILE: &str = "attributes.f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMeta {
    pub id: u32,
    pub name: String,
    pub seen: bool,
    /// Row of this class in the attribute matrix.
    pub attr_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

/// Contents of `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub name: String,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "M")]
    pub num_attributes: usize,
    pub normalization: Normalization,
    pub classes: Vec<ClassMeta>,
    pub manifests: ManifestPaths,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the bundle root.
    pub path: PathBuf,
    pub class_id: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A validated dataset bundle.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    /// Attribute vector per class id.
    attributes: BTreeMap<u32, Vec<Scalar>>,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

/// Anything that can produce the normalized image tensor for a manifest entry.
pub trait ImageSource {
    fn load(&self, entry: &ManifestEntry) -> Result<Tensor>;
}

impl ImageSource for DatasetBundle {
    fn load(&self, entry: &ManifestEntry) -> Result<Tensor> {
        pnm::load_image(
            &self.root.join(&entry.path),
            self.geometry(),
            &self.meta.normalization,
        )
    }
}

impl DatasetBundle {
    pub fn geometry(&self) -> [usize; 3] {
        [self.meta.height, self.meta.width, self.meta.channels]
    }

    pub fn num_attributes(&self) -> usize {
        self.meta.num_attributes
    }

    pub fn split(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn class(&self, id: u32) -> Option<&ClassMeta> {
        self.meta.classes.iter().find(|c| c.id == id)
    }

    pub fn is_seen(&self, id: u32) -> bool {
        self.class(id).is_some_and(|c| c.seen)
    }

    pub fn attributes(&self, id: u32) -> Option<&[Scalar]> {
        self.attributes.get(&id).map(Vec::as_slice)
    }

    /// Class-level attribute vector as a target tensor `[M]`.
    pub fn target(&self, id: u32) -> Result<Tensor> {
        let attrs = self
            .attributes(id)
            .ok_or_else(|| Error::dataset(&self.root, format!("unknown class {id}")))?;
        Tensor::new(&[attrs.len()], attrs.to_vec())
    }

    pub fn class_embeddings(&self) -> Result<ClassEmbeddings> {
        ClassEmbeddings::new(
            self.meta
                .classes
                .iter()
                .map(|c| (c.id, self.attributes[&c.id].clone(), c.seen))
                .collect(),
        )
    }

    /// Re-checks that every training entry belongs to a seen class.
    pub fn check_inductive(&self) -> Result<()> {
        for (row, e) in self.train.iter().enumerate() {
            if !self.is_seen(e.class_id) {
                return Err(Error::Inductive {
                    path: self.root.join(&self.meta.manifests.train),
                    row: row + 1,
                    class_id: e.class_id,
                });
            }
        }
        Ok(())
    }
}

/// Loads and validates the bundle under `root`.
pub fn load_dataset(root: &Path) -> Result<DatasetBundle> {
    let meta_path = root.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    validate_meta(&meta, &meta_path)?;

    let attr_path = root.join(ATTRIBUTES_FILE);
    let raw = fs::read(&attr_path).map_err(|e| Error::io(&attr_path, e))?;
    let (k, m) = (meta.classes.len(), meta.num_attributes);
    if raw.len() != k * m * 4 {
        return Err(Error::dataset(
            &attr_path,
            format!(
                "expected {k} classes x {m} attributes = {} bytes, found {}",
                k * m * 4,
                raw.len()
            ),
        ));
    }
    let matrix: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(i) = matrix.iter().position(|v| !v.is_finite()) {
        return Err(Error::dataset(
            &attr_path,
            format!("non-finite attribute at row {} column {}", i / m, i % m),
        ));
    }
    let attributes = meta
        .classes
        .iter()
        .map(|c| {
            let row = &matrix[c.attr_offset * m..(c.attr_offset + 1) * m];
            (c.id, row.iter().map(|&v| v as Scalar).collect())
        })
        .collect();

    let mut bundle = DatasetBundle {
        root: root.to_path_buf(),
        train: read_manifest(&root.join(&meta.manifests.train))?,
        val: read_manifest(&root.join(&meta.manifests.val))?,
        test: read_manifest(&root.join(&meta.manifests.test))?,
        attributes,
        meta,
    };
    validate_manifests(&mut bundle)?;
    Ok(bundle)
}

fn validate_meta(meta: &DatasetMeta, path: &Path) -> Result<()> {
    let fail = |msg: String| Error::dataset(path, msg);
    if meta.height == 0 || meta.width == 0 || meta.channels == 0 || meta.num_attributes == 0 {
        return Err(fail("H, W, C and M must be positive".into()));
    }
    meta.normalization
        .validate(meta.channels)
        .map_err(|e| fail(e.to_string()))?;
    let mut ids = BTreeSet::new();
    for c in &meta.classes {
        if !ids.insert(c.id) {
            return Err(fail(format!("duplicate class id {}", c.id)));
        }
        if c.attr_offset >= meta.classes.len() {
            return Err(fail(format!(
                "class {} attr_offset {} exceeds attribute rows",
                c.id, c.attr_offset
            )));
        }
    }
    if !meta.classes.iter().any(|c| c.seen) || meta.classes.iter().all(|c| c.seen) {
        return Err(fail("need at least one seen and one unseen class".into()));
    }
    Ok(())
}

fn validate_manifests(b: &mut DatasetBundle) -> Result<()> {
    let paths = b.meta.manifests.clone();
    for (split, rel) in [
        (Split::Train, &paths.train),
        (Split::Val, &paths.val),
        (Split::Test, &paths.test),
    ] {
        let path = b.root.join(rel);
        for (row, e) in b.split(split).iter().enumerate() {
            if b.class(e.class_id).is_none() {
                return Err(Error::dataset(
                    &path,
                    format!("row {}: unknown class {}", row + 1, e.class_id),
                ));
            }
            if !b.root.join(&e.path).is_file() {
                return Err(Error::dataset(
                    &path,
                    format!("row {}: missing image {}", row + 1, e.path.display()),
                ));
            }
        }
    }
    if b.train.is_empty() {
        return Err(Error::dataset(
            b.root.join(&paths.train),
            "empty train manifest",
        ));
    }
    b.check_inductive()?;
    let test_path = b.root.join(&paths.test);
    if b.test.is_empty() {
        return Err(Error::dataset(test_path, "empty test manifest"));
    }
    let seen = b.test.iter().filter(|e| b.is_seen(e.class_id)).count();
    if seen == 0 || seen == b.test.len() {
        return Err(Error::dataset(
            test_path,
            "test manifest must contain both seen and unseen classes",
        ));
    }
    Ok(())
}

/// Reads a `path,class_id` CSV; a leading header row is skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != 2 {
            return Err(Error::format(
                path,
                format!("row {}: expected path,class_id", row + 1),
            ));
        }
        match rec[1].parse::<u32>() {
            Ok(class_id) => out.push(ManifestEntry {
                path: PathBuf::from(&rec[0]),
                class_id,
            }),
            Err(_) if row == 0 => continue,
            Err(_) => {
                return Err(Error::format(
                    path,
                    format!("row {}: bad class id {:?}", row + 1, &rec[1]),
                ))
            }
        }
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["path", "class_id"])
        .map_err(|e| csv_error(path, e))?;
    for e in entries {
        let p = e.path.to_string_lossy();
        w.write_record([p.as_ref(), &e.class_id.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

/// Writes `dataset.json` and `attributes.f32` for `meta`, with `attributes`
/// given in attribute-matrix row order.
pub fn write_meta(root: &Path, meta: &DatasetMeta, attributes: &[Vec<f32>]) -> Result<()> {
    let meta_path = root.join(META_FILE);
    let json = serde_json::to_string_pretty(meta).expect("metadata serializes");
    fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;
    let bytes: Vec<u8> = attributes
        .iter()
        .flat_map(|row| row.iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    let attr_path = root.join(ATTRIBUTES_FILE);
    fs::write(&attr_path, bytes).map_err(|e| Error::io(&attr_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pnm::RawImage;

    /// Writes a minimal bundle with `seen + unseen` classes and one image per
    /// manifest row; `train` lists class ids for the training manifest.
    pub(crate) fn write_bundle(
        root: &Path,
        seen: u32,
        unseen: u32,
        m: usize,
        train: &[u32],
        test: &[u32],
    ) {
        let classes: Vec<ClassMeta> = (0..seen + unseen)
            .map(|id| ClassMeta {
                id,
                name: format!("class{id}"),
                seen: id < seen,
                attr_offset: id as usize,
            })
            .collect();
        let attrs: Vec<Vec<f32>> = (0..seen + unseen)
            .map(|id| {
                (0..m)
                    .map(|j| ((id as usize * 7 + j) % 5) as f32 * 0.2 + 0.1)
                    .collect()
            })
            .collect();
        let meta = DatasetMeta {
            name: "awa2-shaped".into(),
            height: 4,
            width: 4,
            channels: 3,
            num_attributes: m,
            normalization: Normalization::default(),
            classes,
            manifests: ManifestPaths {
                train: "train.csv".into(),
                val: "val.csv".into(),
                test: "test.csv".into(),
            },
        };
        write_meta(root, &meta, &attrs).unwrap();
        fs::create_dir_all(root.join("images")).unwrap();
        let img = RawImage::new(4, 4, 3, vec![100; 48]).unwrap();
        let entries = |name: &str, ids: &[u32]| -> Vec<ManifestEntry> {
            ids.iter()
                .enumerate()
                .map(|(i, &id)| {
                    let rel = PathBuf::from(format!("images/{name}_{i}.ppm"));
                    img.write(&root.join(&rel)).unwrap();
                    ManifestEntry {
                        path: rel,
                        class_id: id,
                    }
                })
                .collect()
        };
        let tr = entries("train", train);
        let te = entries("test", test);
        write_manifest(&root.join("train.csv"), &tr).unwrap();
        write_manifest(&root.join("val.csv"), &te).unwrap();
        write_manifest(&root.join("test.csv"), &te).unwrap();
    }

    #[test]
    fn loads_awa2_shaped_metadata() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), 40, 10, 85, &[0, 5, 39], &[1, 45]);
        let b = load_dataset(dir.path()).unwrap();
        assert_eq!(b.meta.classes.len(), 50);
        assert_eq!(b.meta.classes.iter().filter(|c| c.seen).count(), 40);
        assert_eq!(b.meta.classes.iter().filter(|c| !c.seen).count(), 10);
        assert_eq!(b.num_attributes(), 85);
        assert_eq!(b.target(45).unwrap().shape(), &[85]);
        assert_eq!(b.load(&b.train[0]).unwrap().shape(), &[4, 4, 3]);
        assert_eq!(b.class_embeddings().unwrap().len(), 50);
    }

    #[test]
    fn rejects_unseen_class_in_train() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), 3, 2, 4, &[0, 4], &[1, 3]);
        match load_dataset(dir.path()) {
            Err(Error::Inductive { row, class_id, .. }) => assert_eq!((row, class_id), (2, 4)),
            other => panic!("expected inductive violation, got {other:?}"),
        }
    }

    #[test]
    fn rejects_empty_test_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), 3, 2, 4, &[0], &[]);
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("empty test manifest"), "{err}");
    }

    #[test]
    fn rejects_seen_only_test_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), 3, 2, 4, &[0], &[0, 1]);
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn rejects_attribute_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), 3, 2, 4, &[0], &[0, 4]);
        fs::write(dir.path().join(ATTRIBUTES_FILE), [0u8; 12]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(ATTRIBUTES_FILE), "{err}");
    }

    #[test]
    fn missing_metadata_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn manifest_without_header_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "a.ppm,3\nb.ppm,4\n").unwrap();
        let m = read_manifest(&p).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].class_id, 4);
        fs::write(&p, "path,class_id\na.ppm,x\n").unwrap();
        assert!(read_manifest(&p).is_err());
    }
}
