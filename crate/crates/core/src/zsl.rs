//! Zero-shot inference and the generalized zero-shot evaluation protocol.
//!
//! Predicted attribute vectors are matched to class attribute vectors by
//! cosine similarity. Calibrated stacking subtracts a scalar `gamma` from
//! every seen-class score before the argmax. Accuracy is top-1 averaged per
//! class, reported separately for seen (S) and unseen (U) classes together
//! with their harmonic mean H.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetBundle, ImageSource, Split};
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::train::predict_attributes;
use crate::vit::Vit;

/// Attribute vectors of every candidate class, sorted by class id.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings {
    ids: Vec<u32>,
    rows: Vec<Vec<Scalar>>,
    seen: Vec<bool>,
}

impl ClassEmbeddings {
    pub fn new(mut classes: Vec<(u32, Vec<Scalar>, bool)>) -> Result<Self> {
        classes.sort_by_key(|c| c.0);
        let m = classes
            .first()
            .map(|c| c.1.len())
            .ok_or_else(|| Error::Protocol("no classes".into()))?;
        for w in classes.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Protocol(format!("duplicate class id {}", w[0].0)));
            }
        }
        for (id, row, _) in &classes {
            if row.len() != m {
                return Err(Error::dim("ClassEmbeddings", &[m], &[row.len()]));
            }
            if norm(row) == 0.0 {
                return Err(Error::Protocol(format!(
                    "class {id} has a zero attribute vector"
                )));
            }
        }
        let mut out = ClassEmbeddings {
            ids: Vec::new(),
            rows: Vec::new(),
            seen: Vec::new(),
        };
        for (id, row, seen) in classes {
            out.ids.push(id);
            out.rows.push(row);
            out.seen.push(seen);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn seen_flags(&self) -> &[bool] {
        &self.seen
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn is_seen(&self, id: u32) -> bool {
        self.index_of(id).is_some_and(|i| self.seen[i])
    }

    pub fn row(&self, i: usize) -> &[Scalar] {
        &self.rows[i]
    }

    /// Cosine of `pred` against every class, in id order.
    pub fn cosines(&self, pred: &[Scalar]) -> Result<Vec<Scalar>> {
        self.rows
            .iter()
            .map(|r| cosine_similarity(pred, r))
            .collect()
    }
}

fn norm(v: &[Scalar]) -> Scalar {
    v.iter().map(|x| x * x).sum::<Scalar>().sqrt()
}

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine_similarity(a: &[Scalar], b: &[Scalar]) -> Result<Scalar> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("cosine of a zero-norm vector".into()));
    }
    let dot: Scalar = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Calibrated scores: cosine minus `gamma` for seen classes.
pub fn score_classes(pred: &[Scalar], emb: &ClassEmbeddings, gamma: f64) -> Result<Vec<f64>> {
    Ok(calibrate(&emb.cosines(pred)?, emb.seen_flags(), gamma))
}

fn calibrate(cosines: &[Scalar], seen: &[bool], gamma: f64) -> Vec<f64> {
    cosines
        .iter()
        .zip(seen)
        .map(|(&c, &s)| c as f64 - if s { gamma } else { 0.0 })
        .collect()
}

/// Index of the maximum; ties go to the lowest index.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Highest calibrated score; ties broken by lowest class id.
pub fn classify(pred: &[Scalar], emb: &ClassEmbeddings, gamma: f64) -> Result<u32> {
    let scores = score_classes(pred, emb, gamma)?;
    Ok(emb.ids[argmax(&scores)])
}

/// Top-1 accuracy computed within each class of `classes` and averaged
/// without weighting, in percent. Samples whose truth lies outside `classes`
/// are ignored.
pub fn per_class_top1(predictions: &[u32], truths: &[u32], classes: &[u32]) -> Result<f64> {
    Ok(per_class_accuracies(predictions, truths, classes)?
        .values()
        .sum::<f64>()
        / classes.len() as f64)
}

fn per_class_accuracies(
    predictions: &[u32],
    truths: &[u32],
    classes: &[u32],
) -> Result<BTreeMap<u32, f64>> {
    if predictions.len() != truths.len() {
        return Err(Error::dim(
            "per_class_top1",
            &[predictions.len()],
            &[truths.len()],
        ));
    }
    if classes.is_empty() {
        return Err(Error::Protocol("empty class set".into()));
    }
    let mut counts: BTreeMap<u32, (usize, usize)> = classes.iter().map(|&c| (c, (0, 0))).collect();
    for (p, t) in predictions.iter().zip(truths) {
        if let Some((hit, total)) = counts.get_mut(t) {
            *total += 1;
            *hit += usize::from(p == t);
        }
    }
    counts
        .into_iter()
        .map(|(c, (hit, total))| {
            if total == 0 {
                Err(Error::Protocol(format!("class {c} has no samples")))
            } else {
                Ok((c, 100.0 * hit as f64 / total as f64))
            }
        })
        .collect()
}

/// `2SU / (S + U)`, zero when both are zero.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Cosine scores of a set of samples against every class, with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    /// Class ids of the columns, matching the embeddings' order.
    pub class_ids: Vec<u32>,
    pub truths: Vec<u32>,
    /// One row of cosines per sample.
    pub scores: Vec<Vec<Scalar>>,
}

impl ScoreMatrix {
    /// Scores predicted attribute vectors against `emb`.
    pub fn from_predictions(
        preds: &[Vec<Scalar>],
        truths: &[u32],
        emb: &ClassEmbeddings,
    ) -> Result<Self> {
        if preds.len() != truths.len() {
            return Err(Error::dim("ScoreMatrix", &[preds.len()], &[truths.len()]));
        }
        Ok(ScoreMatrix {
            class_ids: emb.ids.clone(),
            truths: truths.to_vec(),
            scores: preds
                .iter()
                .map(|p| emb.cosines(p))
                .collect::<Result<_>>()?,
        })
    }

    fn check(&self, emb: &ClassEmbeddings) -> Result<()> {
        if self.class_ids != emb.ids {
            return Err(Error::Protocol(
                "score columns do not match the class list".into(),
            ));
        }
        if let Some(t) = self.truths.iter().find(|t| emb.index_of(**t).is_none()) {
            return Err(Error::Protocol(format!(
                "sample truth {t} is not a known class"
            )));
        }
        if self.scores.iter().any(|r| r.len() != self.class_ids.len()) {
            return Err(Error::Protocol("ragged score matrix".into()));
        }
        Ok(())
    }

    /// Calibrated argmax for every sample.
    pub fn predict(&self, emb: &ClassEmbeddings, gamma: f64) -> Result<Vec<u32>> {
        self.check(emb)?;
        Ok(self
            .scores
            .iter()
            .map(|row| emb.ids[argmax(&calibrate(row, emb.seen_flags(), gamma))])
            .collect())
    }

    /// Seen and unseen class ids present among the truths.
    fn present_classes(&self, emb: &ClassEmbeddings) -> Result<(Vec<u32>, Vec<u32>)> {
        let present: BTreeSet<u32> = self.truths.iter().copied().collect();
        let (seen, unseen): (Vec<u32>, Vec<u32>) =
            present.into_iter().partition(|c| emb.is_seen(*c));
        if seen.is_empty() || unseen.is_empty() {
            return Err(Error::Protocol(
                "evaluation set needs samples from both seen and unseen classes".into(),
            ));
        }
        Ok((seen, unseen))
    }

    /// Reads a score CSV: header `class_id,<id>,<id>,...`, then one row per
    /// sample holding its true class id followed by its cosine per class.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let fmt = |msg: String| Error::format(path, msg);
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| fmt(e.to_string()))?;
        let header = reader.headers().map_err(|e| fmt(e.to_string()))?.clone();
        let class_ids = header
            .iter()
            .skip(1)
            .map(|h| {
                h.parse::<u32>()
                    .map_err(|_| fmt(format!("bad class id {h:?} in header")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut truths = Vec::new();
        let mut scores = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| fmt(e.to_string()))?;
            let bad = || fmt(format!("row {}: malformed", row + 2));
            truths.push(rec[0].parse::<u32>().map_err(|_| bad())?);
            scores.push(
                rec.iter()
                    .skip(1)
                    .map(|v| v.parse::<Scalar>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(ScoreMatrix {
            class_ids,
            truths,
            scores,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("class_id");
        for id in &self.class_ids {
            out += &format!(",{id}");
        }
        out.push('\n');
        for (t, row) in self.truths.iter().zip(&self.scores) {
            out += &t.to_string();
            for v in row {
                out += &format!(",{v}");
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Result of evaluating one score matrix at one `gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub gamma: f64,
    /// Per-class top-1 accuracy, percent.
    pub per_class: BTreeMap<u32, f64>,
    pub seen: f64,
    pub unseen: f64,
    pub harmonic: f64,
}

#[derive(Serialize, Deserialize)]
struct ReportJson {
    gamma: f64,
    #[serde(rename = "S")]
    s: f64,
    #[serde(rename = "U")]
    u: f64,
    #[serde(rename = "H")]
    h: f64,
    per_class: BTreeMap<String, f64>,
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

impl EvalReport {
    /// JSON with every value rounded to 4 decimals. H is recomputed from
    /// the rounded S and U so the file stays self-consistent.
    pub fn to_json(&self) -> String {
        let (s, u) = (round4(self.seen), round4(self.unseen));
        let doc = ReportJson {
            gamma: round4(self.gamma),
            s,
            u,
            h: round4(harmonic_mean(s, u)),
            per_class: self
                .per_class
                .iter()
                .map(|(k, v)| (k.to_string(), round4(*v)))
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ReportJson =
            serde_json::from_str(text).map_err(|e| Error::format("<report>", e.to_string()))?;
        let per_class = doc
            .per_class
            .into_iter()
            .map(|(k, v)| {
                k.parse::<u32>()
                    .map(|k| (k, v))
                    .map_err(|_| Error::format("<report>", format!("bad class id {k:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            gamma: doc.gamma,
            per_class,
            seen: doc.s,
            unseen: doc.u,
            harmonic: doc.h,
        })
    }
}

/// Per-class accuracies, S, U and H of `scores` at `gamma`.
pub fn evaluate(scores: &ScoreMatrix, emb: &ClassEmbeddings, gamma: f64) -> Result<EvalReport> {
    let preds = scores.predict(emb, gamma)?;
    let (seen, unseen) = scores.present_classes(emb)?;
    let mut all = seen.clone();
    all.extend(&unseen);
    let per_class = per_class_accuracies(&preds, &scores.truths, &all)?;
    let mean_over = |ids: &[u32]| ids.iter().map(|c| per_class[c]).sum::<f64>() / ids.len() as f64;
    let (s, u) = (mean_over(&seen), mean_over(&unseen));
    Ok(EvalReport {
        gamma,
        seen: s,
        unseen: u,
        harmonic: harmonic_mean(s, u),
        per_class,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub gamma: f64,
    pub seen: f64,
    pub unseen: f64,
    pub harmonic: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    /// First grid value reaching the maximal H.
    pub best_gamma: f64,
    pub points: Vec<SweepPoint>,
}

impl Sweep {
    pub fn best(&self) -> &SweepPoint {
        self.points
            .iter()
            .find(|p| p.gamma == self.best_gamma)
            .expect("best point is on the curve")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = String::from("gamma,S,U,H\n");
        for p in &self.points {
            out += &format!(
                "{:.4},{:.4},{:.4},{:.4}\n",
                p.gamma, p.seen, p.unseen, p.harmonic
            );
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// 101 evenly spaced values in `[0, 1]`.
pub fn default_gamma_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// Evaluates every `gamma` in `grid` on validation scores and picks the one
/// maximizing H.
pub fn calibration_sweep(val: &ScoreMatrix, emb: &ClassEmbeddings, grid: &[f64]) -> Result<Sweep> {
    if grid.is_empty() {
        return Err(Error::Protocol("empty gamma grid".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &gamma in grid {
        let r = evaluate(val, emb, gamma)?;
        points.push(SweepPoint {
            gamma,
            seen: r.seen,
            unseen: r.unseen,
            harmonic: r.harmonic,
        });
    }
    let best = points.iter().fold(&points[0], |best, p| {
        if p.harmonic > best.harmonic {
            p
        } else {
            best
        }
    });
    Ok(Sweep {
        best_gamma: best.gamma,
        points,
    })
}

/// Cosine scores of every image in `split` under `vit`.
pub fn score_split(vit: &Vit, bundle: &DatasetBundle, split: Split) -> Result<ScoreMatrix> {
    let emb = bundle.class_embeddings()?;
    let entries = bundle.split(split);
    let mut preds = Vec::with_capacity(entries.len());
    for e in entries {
        let image = bundle.load(e)?;
        preds.push(predict_attributes(vit, &image)?.into_data());
    }
    let truths: Vec<u32> = entries.iter().map(|e| e.class_id).collect();
    ScoreMatrix::from_predictions(&preds, &truths, &emb)
}
