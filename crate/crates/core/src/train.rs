//! Attribute regression training: per-sample MSE averaged over a batch,
//! Adam with a fixed learning rate, seeded shuffled mini-batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataset::{DatasetBundle, ImageSource};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{apply_head, encode_on_tape, ModelConfig, Vit, VitWeights};

pub use crate::autodiff::mse_loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Precision this build was compiled with.
    pub fn native() -> Self {
        if cfg!(feature = "f32") {
            Precision::F32
        } else {
            Precision::F64
        }
    }
}

impl Default for Precision {
    fn default() -> Self {
        Self::native()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Stops early once this many optimizer steps have run in total.
    pub max_steps: Option<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 1,
            max_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            precision: Precision::native(),
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return fail("adam eps must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return fail("epochs must be at least 1");
        }
        if self.precision != Precision::native() {
            return Err(Error::Config(format!(
                "config asks for {:?} but this build uses {:?}",
                self.precision,
                Precision::native()
            )));
        }
        Ok(())
    }

    /// Total optimizer steps for a training set of `n` samples.
    pub fn total_steps(&self, n: usize) -> u64 {
        let per_epoch = n.div_ceil(self.batch_size) as u64;
        let planned = self.epochs.saturating_mul(per_epoch);
        match self.max_steps {
            Some(cap) if self.epochs == 0 => cap,
            Some(cap) => planned.min(cap),
            None => planned,
        }
    }
}

/// First and second moment buffers, one per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<Scalar>>,
    pub v: Vec<Vec<Scalar>>,
    /// Number of steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn zeros(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<Scalar>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn for_weights(w: &VitWeights) -> Self {
        Self::zeros(w.named().iter().map(|(_, t)| t.numel()))
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<Scalar>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(Error::Contract(format!(
            "adam_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].len() != g.len() || state.v[i].len() != g.len() {
            return Err(Error::dim("adam_step", p.shape(), &[g.len()]));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = (1.0 - cfg.beta1.powf(t)) as Scalar;
    let bc2 = (1.0 - cfg.beta2.powf(t)) as Scalar;
    let (b1, b2) = (cfg.beta1 as Scalar, cfg.beta2 as Scalar);
    let (lr, eps) = (cfg.learning_rate as Scalar, cfg.eps as Scalar);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Raw attribute scores `[M]` for one normalized image.
pub fn predict_attributes(vit: &Vit, image: &Tensor) -> Result<Tensor> {
    let (repr, _) = vit.encode(image)?;
    let mut tape = Tape::new();
    let head = vit.weights.head.map("", &mut |_, t| tape.constant_ref(t));
    let r = tape.constant(repr);
    let y = apply_head(&mut tape, r, &head)?;
    Ok(tape.value(y).clone())
}

/// Loss of one sample and its gradient for every parameter block, in
/// canonical order.
pub fn sample_gradients(
    vit: &Vit,
    image: &Tensor,
    target: &Tensor,
) -> Result<(Scalar, Vec<Vec<Scalar>>)> {
    let mut tape = Tape::new();
    let vars = vit.bind(&mut tape);
    let enc = encode_on_tape(&mut tape, &vit.config, &vars, image)?;
    let pred = apply_head(&mut tape, enc.repr, &vars.head)?;
    let t = tape.constant_ref(target);
    let loss = tape.mse(pred, t)?;
    let grads = tape.backward(loss)?;
    let loss = tape.value(loss).item()?;
    let blocks = vars
        .named()
        .into_iter()
        .map(|(_, v)| grads.get(*v).into_data())
        .collect();
    Ok((loss, blocks))
}

/// Mean loss and mean gradient over a batch of `(image, target)` pairs,
/// accumulated in batch order.
pub fn batch_gradients(
    vit: &Vit,
    batch: &[(&Tensor, &Tensor)],
) -> Result<(Scalar, Vec<Vec<Scalar>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total = 0.0;
    let mut acc: Option<Vec<Vec<Scalar>>> = None;
    for (image, target) in batch {
        let (loss, grads) = sample_gradients(vit, image, target)?;
        total += loss;
        match &mut acc {
            None => acc = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
                }
            }
        }
    }
    let n = batch.len() as Scalar;
    let mut grads = acc.expect("non-empty batch");
    grads.iter_mut().flatten().for_each(|g| *g /= n);
    Ok((total / n, grads))
}

/// A preloaded training sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub target: Tensor,
    pub class_id: u32,
}

/// The train split held in memory.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub samples: Vec<Sample>,
}

impl TrainingSet {
    /// Loads every train-manifest image through `source`. The seen-only
    /// check runs before the first load, so an offending manifest never
    /// causes an unseen-class image to be read.
    pub fn load(bundle: &DatasetBundle, source: &dyn ImageSource) -> Result<Self> {
        bundle.check_inductive()?;
        if bundle.train.is_empty() {
            return Err(Error::dataset(&bundle.root, "train split is empty"));
        }
        let samples = bundle
            .train
            .iter()
            .map(|e| {
                Ok(Sample {
                    image: source.load(e)?,
                    target: bundle.target(e.class_id)?,
                    class_id: e.class_id,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainingSet { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Position in the data stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Progress {
    pub step: u64,
    pub epoch: u64,
    /// Index into `order` of the next sample.
    pub cursor: u64,
    /// Sample permutation of the current epoch.
    pub order: Vec<u64>,
}

/// Serializable state of the shuffling generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// One optimizer step's record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    /// 1-based index of the step.
    pub step: u64,
    pub epoch: u64,
    pub loss: Scalar,
}

/// Training state: model, optimizer moments, data position and RNG.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub vit: Vit,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub progress: Progress,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh state. Weights come from `seed`; the shuffling stream is a
    /// separate ChaCha stream of the same seed.
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let vit = Vit::new(model, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            adam: AdamState::for_weights(&vit.weights),
            vit,
            config,
            progress: Progress {
                step: 0,
                epoch: 0,
                cursor: 0,
                order: Vec::new(),
            },
            rng,
        })
    }

    /// Rebuilds a trainer from saved parts.
    pub fn restore(
        vit: Vit,
        adam: AdamState,
        config: TrainConfig,
        progress: Progress,
        rng: &RngState,
    ) -> Result<Self> {
        config.validate()?;
        let n = vit.weights.named().len();
        if adam.m.len() != n || adam.v.len() != n {
            return Err(Error::Contract(
                "moment buffers do not match the model".into(),
            ));
        }
        Ok(Trainer {
            vit,
            adam,
            config,
            progress,
            rng: rng.restore(),
        })
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// Runs one optimizer step on the next mini-batch. The final batch of
    /// an epoch may be smaller than `batch_size`.
    pub fn step(&mut self, data: &TrainingSet) -> Result<LossRecord> {
        let n = data.len();
        if n == 0 {
            return Err(Error::Contract("empty training set".into()));
        }
        let p = &mut self.progress;
        if p.cursor == 0 {
            let mut order: Vec<u64> = (0..n as u64).collect();
            order.shuffle(&mut self.rng);
            p.order = order;
        } else if p.order.len() != n {
            return Err(Error::Contract(format!(
                "resumed data order covers {} samples, training set has {n}",
                p.order.len()
            )));
        }
        let start = p.cursor as usize;
        let end = (start + self.config.batch_size).min(n);
        let batch: Vec<(&Tensor, &Tensor)> = p.order[start..end]
            .iter()
            .map(|&i| {
                let s = &data.samples[i as usize];
                (&s.image, &s.target)
            })
            .collect();
        let (loss, grads) = batch_gradients(&self.vit, &batch)?;
        let epoch = p.epoch;
        if !loss.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite loss at step {}",
                p.step + 1
            )));
        }
        let mut params: Vec<&mut Tensor> = self
            .vit
            .weights
            .named_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        adam_step(&mut params, &grads, &mut self.adam, &self.config)?;

        let p = &mut self.progress;
        p.step += 1;
        p.cursor = end as u64;
        if end == n {
            p.cursor = 0;
            p.epoch += 1;
        }
        Ok(LossRecord {
            step: p.step,
            epoch,
            loss,
        })
    }

    /// Steps until the configured total, calling `on_step` after each one.
    pub fn run<F>(&mut self, data: &TrainingSet, mut on_step: F) -> Result<Vec<LossRecord>>
    where
        F: FnMut(&Trainer, &LossRecord) -> Result<()>,
    {
        let total = self.config.total_steps(data.len());
        let mut records = Vec::new();
        while self.progress.step < total {
            let rec = self.step(data)?;
            on_step(self, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}

/// Trains a fresh model on the bundle's train split.
pub fn fit(
    bundle: &DatasetBundle,
    model: ModelConfig,
    config: TrainConfig,
) -> Result<(Trainer, Vec<LossRecord>)> {
    fit_with_source(bundle, bundle, model, config)
}

/// [`fit`] with images supplied by `source`.
pub fn fit_with_source(
    bundle: &DatasetBundle,
    source: &dyn ImageSource,
    model: ModelConfig,
    config: TrainConfig,
) -> Result<(Trainer, Vec<LossRecord>)> {
    check_model_matches(bundle, &model)?;
    let data = TrainingSet::load(bundle, source)?;
    let mut trainer = Trainer::new(model, config)?;
    let losses = trainer.run(&data, |_, _| Ok(()))?;
    Ok((trainer, losses))
}

/// Checks image geometry and attribute count of `model` against the bundle.
pub fn check_model_matches(bundle: &DatasetBundle, model: &ModelConfig) -> Result<()> {
    if model.image_shape() != bundle.geometry() {
        return Err(Error::Config(format!(
            "model expects {:?} images, dataset has {:?}",
            model.image_shape(),
            bundle.geometry()
        )));
    }
    if model.num_attributes != bundle.num_attributes() {
        return Err(Error::Config(format!(
            "model predicts {} attributes, dataset has {}",
            model.num_attributes,
            bundle.num_attributes()
        )));
    }
    Ok(())
}

/// Writes `step,epoch,loss` rows, with the header unless appending.
pub fn write_loss_csv(path: &std::path::Path, records: &[LossRecord], append: bool) -> Result<()> {
    use std::io::Write;
    let exists = path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if !(append && exists) {
        writeln!(w, "step,epoch,loss").map_err(io)?;
    }
    for r in records {
        writeln!(w, "{},{},{:e}", r.step, r.epoch, r.loss).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig::tiny(4)
    }

    fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape,
            (0..n)
                .map(|_| rng.gen_range(-scale..scale) as Scalar)
                .collect(),
        )
        .unwrap()
    }

    fn cfg(lr: f64, batch: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            batch_size: batch,
            epochs: 1000,
            ..TrainConfig::default()
        }
    }

    fn set(n: usize, seed: u64) -> TrainingSet {
        TrainingSet {
            samples: (0..n)
                .map(|i| Sample {
                    image: random(&[16, 16, 3], seed + i as u64, 1.0),
                    target: random(&[4], seed + 100 + i as u64, 1.0),
                    class_id: i as u32,
                })
                .collect(),
        }
    }

    #[test]
    fn defaults_match_reported_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.batch_size), (1e-4, 64));
        assert_eq!((c.beta1, c.beta2, c.eps), (0.9, 0.999, 1e-8));
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                beta1: 1.0,
                ..Default::default()
            },
            TrainConfig {
                beta2: -0.1,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let other = if Precision::native() == Precision::F64 {
            Precision::F32
        } else {
            Precision::F64
        };
        assert!(TrainConfig {
            precision: other,
            ..Default::default()
        }
        .validate()
        .is_err());
        let err = serde_json::from_str::<TrainConfig>(r#"{"learning_rate":1e-3,"bogus":1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn total_steps_counts_partial_batches() {
        let c = TrainConfig {
            batch_size: 4,
            epochs: 3,
            ..Default::default()
        };
        assert_eq!(c.total_steps(10), 9);
        let c = TrainConfig {
            max_steps: Some(5),
            ..c
        };
        assert_eq!(c.total_steps(10), 5);
    }

    #[test]
    fn mse_examples() {
        let t = |v: &[Scalar]| Tensor::new(&[v.len()], v.to_vec()).unwrap();
        assert_eq!(mse_loss(&t(&[1.0, 2.0]), &t(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(mse_loss(&t(&[0.0, 0.0]), &t(&[1.0, 1.0])).unwrap(), 1.0);
        let v = mse_loss(&t(&[1.0, 2.0, 3.0]), &t(&[0.0, 0.0, 0.0])).unwrap();
        assert!((v - 14.0 / 3.0).abs() < 1e-6);
        assert!(matches!(
            mse_loss(&t(&[1.0]), &t(&[1.0, 2.0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = random(&[3, 2], 1, 1.0);
        let before = p.clone();
        let mut state = AdamState::zeros([6]);
        adam_step(
            &mut [&mut p],
            &[vec![0.0; 6]],
            &mut state,
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(p, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let c = TrainConfig {
            learning_rate: 1e-3,
            ..Default::default()
        };
        let mut p = Tensor::zeros(&[4]);
        let mut state = AdamState::zeros([4]);
        adam_step(&mut [&mut p], &[vec![1.0; 4]], &mut state, &c).unwrap();
        // m̂ = 1, v̂ = 1, so the update is lr / (1 + eps)
        for v in p.data() {
            assert!((*v as f64 + 1e-3).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn adam_matches_reference_recursion() {
        let c = TrainConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        let grads = [0.5, -1.0, 2.0, 0.25];
        let mut p = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut state = AdamState::zeros([1]);
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            adam_step(&mut [&mut p], &[vec![*g as Scalar]], &mut state, &c).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = (t + 1) as i32;
            theta -= 0.01 * (m / (1.0 - 0.9f64.powi(k)))
                / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        }
        assert!((p.data()[0] as f64 - theta).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_misaligned_buffers() {
        let mut p = Tensor::zeros(&[2]);
        let mut state = AdamState::zeros([3]);
        assert!(adam_step(
            &mut [&mut p],
            &[vec![0.0; 2]],
            &mut state,
            &TrainConfig::default()
        )
        .is_err());
    }

    #[test]
    fn zero_head_predicts_zero() {
        let mut vit = Vit::new(tiny(), 3).unwrap();
        vit.weights.head.head_weight = Tensor::zeros(&[8, 4]);
        let y = predict_attributes(&vit, &random(&[16, 16, 3], 9, 1.0)).unwrap();
        assert_eq!(y.shape(), &[4]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn head_is_linear_in_its_weights() {
        let vit = Vit::new(tiny(), 3).unwrap();
        let img = random(&[16, 16, 3], 9, 1.0);
        let y1 = predict_attributes(&vit, &img).unwrap();
        let mut doubled = vit.clone();
        doubled
            .weights
            .head
            .head_weight
            .data_mut()
            .iter_mut()
            .for_each(|w| *w *= 2.0);
        let y2 = predict_attributes(&doubled, &img).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((2.0 * a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn vit_large_head_has_85_outputs() {
        let layout = crate::vit::layout(&ModelConfig::vit_large(85));
        assert_eq!(layout.head.head_weight.0, vec![1024, 85]);
        assert_eq!(layout.head.head_bias.0, vec![85]);
    }

    #[test]
    fn identical_batch_matches_single_sample() {
        let vit = Vit::new(tiny(), 5).unwrap();
        let img = random(&[16, 16, 3], 1, 1.0);
        let target = random(&[4], 2, 1.0);
        let (l1, g1) = sample_gradients(&vit, &img, &target).unwrap();
        let (l4, g4) = batch_gradients(&vit, &[(&img, &target); 4]).unwrap();
        assert!((l1 - l4).abs() < 1e-6);
        for (a, b) in g1.iter().flatten().zip(g4.iter().flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn overfits_one_sample() {
        let data = set(1, 11);
        let mut trainer = Trainer::new(
            tiny(),
            TrainConfig {
                max_steps: Some(200),
                ..cfg(1e-3, 1)
            },
        )
        .unwrap();
        let losses = trainer.run(&data, |_, _| Ok(())).unwrap();
        assert_eq!(losses.len(), 200);
        assert!(losses.iter().all(|r| r.loss.is_finite()));
        let (first, last) = (losses[0].loss, losses[199].loss);
        assert!(last < 0.01 * first, "{first} -> {last}");
    }

    #[test]
    fn seeded_training_is_bit_reproducible() {
        let data = set(5, 3);
        let run = || {
            let mut t = Trainer::new(
                tiny(),
                TrainConfig {
                    max_steps: Some(10),
                    ..cfg(1e-3, 2)
                },
            )
            .unwrap();
            let losses = t.run(&data, |_, _| Ok(())).unwrap();
            (t.vit.weights, losses)
        };
        let (w1, l1) = run();
        let (w2, l2) = run();
        assert_eq!(l1, l2);
        for ((_, a), (_, b)) in w1.named().iter().zip(w2.named()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn epochs_cover_every_sample_once() {
        let data = set(5, 3);
        let mut t = Trainer::new(
            tiny(),
            TrainConfig {
                epochs: 2,
                ..cfg(1e-4, 2)
            },
        )
        .unwrap();
        let losses = t.run(&data, |_, _| Ok(())).unwrap();
        assert_eq!(losses.len(), 6);
        assert_eq!(
            losses.iter().map(|r| r.epoch).collect::<Vec<_>>(),
            vec![0, 0, 0, 1, 1, 1]
        );
        assert_eq!(t.progress.epoch, 2);
        let mut order = t.progress.order.clone();
        order.sort_unstable();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn rng_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        rng.set_stream(1);
        let _: u64 = rng.gen();
        let state = RngState::capture(&rng);
        let json = serde_json::to_string(&state).unwrap();
        let back: RngState = serde_json::from_str(&json).unwrap();
        let mut restored = back.restore();
        assert_eq!(rng.gen::<u64>(), restored.gen::<u64>());
    }

    #[test]
    fn loss_csv_appends_without_second_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let rec = |s| LossRecord {
            step: s,
            epoch: 0,
            loss: 0.5,
        };
        write_loss_csv(&path, &[rec(1)], false).unwrap();
        write_loss_csv(&path, &[rec(2)], true).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next(), Some("step,epoch,loss"));
    }
}
