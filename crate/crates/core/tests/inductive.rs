use std::cell::RefCell;
use std::collections::BTreeMap;

use vitzsl::dataset::{DatasetBundle, ImageSource, ManifestEntry};
use vitzsl::synth::{synth_generate, SyntheticSpec};
use vitzsl::train::{fit_with_source, TrainConfig};
use vitzsl::{Error, ModelConfig, Result, Tensor};

/// Forwards loads to the bundle and counts them per class.
struct CountingSource<'a> {
    bundle: &'a DatasetBundle,
    loads: RefCell<BTreeMap<u32, usize>>,
}

impl ImageSource for CountingSource<'_> {
    fn load(&self, entry: &ManifestEntry) -> Result<Tensor> {
        *self.loads.borrow_mut().entry(entry.class_id).or_default() += 1;
        self.bundle.load(entry)
    }
}

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        name: "probe".into(),
        image_size: 16,
        patch_size: 8,
        channels: 3,
        num_attributes: 4,
        seen_classes: 3,
        unseen_classes: 2,
        samples_per_class: 3,
        val_per_class: 2,
        test_per_class: 2,
        noise_level: 0.05,
        seed: 1,
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        epochs: 2,
        seed: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn fit_reads_only_seen_class_images() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth_generate(&spec(), dir.path()).unwrap();
    let probe = CountingSource {
        bundle: &bundle,
        loads: RefCell::default(),
    };
    let (_, losses) =
        fit_with_source(&bundle, &probe, ModelConfig::tiny(4), train_config()).unwrap();
    assert_eq!(losses.len(), 6);
    let loads = probe.loads.into_inner();
    assert!(loads.keys().all(|c| bundle.is_seen(*c)), "{loads:?}");
    assert_eq!(loads.values().sum::<usize>(), bundle.train.len());
}

#[test]
fn unseen_entry_in_train_split_aborts_before_any_read() {
    let dir = tempfile::tempdir().unwrap();
    let mut bundle = synth_generate(&spec(), dir.path()).unwrap();
    let unseen = bundle
        .test
        .iter()
        .find(|e| !bundle.is_seen(e.class_id))
        .unwrap()
        .clone();
    bundle.train.push(unseen.clone());
    let probe = CountingSource {
        bundle: &bundle,
        loads: RefCell::default(),
    };
    let err = fit_with_source(&bundle, &probe, ModelConfig::tiny(4), train_config()).unwrap_err();
    match err {
        Error::Inductive { row, class_id, .. } => {
            assert_eq!(class_id, unseen.class_id);
            assert_eq!(row, bundle.train.len());
        }
        other => panic!("expected an inductive violation, got {other}"),
    }
    assert!(probe.loads.borrow().is_empty());
}

#[test]
fn model_must_match_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = synth_generate(&spec(), dir.path()).unwrap();
    let err = fit_with_source(&bundle, &bundle, ModelConfig::tiny(5), train_config()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}
