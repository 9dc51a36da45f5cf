//! `vitzsl`: synthesize data, train, evaluate, predict and export attention maps.
//!
//! Exit codes: 0 on success, 2 for invalid input or configuration, 1 for
//! internal failures.

// Scalar is f64 unless built with the f32 feature.
#![allow(clippy::unnecessary_cast)]

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vitzsl::checkpoint::Checkpoint;
use vitzsl::dataset::{load_dataset, Split};
use vitzsl::pnm::{self, RawImage};
use vitzsl::rollout::{attention_map, MapMode};
use vitzsl::synth::{synth_generate, SyntheticSpec};
use vitzsl::train::{
    check_model_matches, predict_attributes, write_loss_csv, Trainer, TrainingSet,
};
use vitzsl::zsl::{
    calibration_sweep, classify, default_gamma_grid, evaluate, score_split, ClassEmbeddings,
    EvalReport, ScoreMatrix,
};
use vitzsl::{Error, Result, Vit};

use config::{read_json, RunConfig};

#[derive(Parser)]
#[command(
    name = "vitzsl",
    version,
    about = "Vision Transformer zero-shot learning toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the attribute regressor from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Evaluate on the test split, with a fixed gamma or one swept on val.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, required_unless_present = "scores", conflicts_with = "scores")]
        checkpoint: Option<PathBuf>,
        /// Precomputed test cosine scores (CSV) instead of a checkpoint.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Precomputed validation scores for `--sweep` in score-file mode.
        #[arg(long, requires = "scores")]
        val_scores: Option<PathBuf>,
        #[arg(long, conflicts_with = "sweep")]
        gamma: Option<f64>,
        #[arg(long)]
        sweep: bool,
        /// Comma-separated gamma grid for `--sweep`; 0, 0.01, ..., 1 by default.
        #[arg(long, value_delimiter = ',', requires = "sweep")]
        grid: Option<Vec<f64>>,
        /// Report JSON path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validation sweep CSV path.
        #[arg(long, requires = "sweep")]
        curve: Option<PathBuf>,
        /// Also write the test score matrix computed from the checkpoint.
        #[arg(long, requires = "checkpoint")]
        dump_scores: Option<PathBuf>,
    },
    /// Predict attributes, and a class when a dataset is given, for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        gamma: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export an attention heatmap (PGM) and overlay (PPM) for one image.
    Attend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Rollout)]
        mode: Mode,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Rollout,
    LastLayer,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { spec, out, seed } => cmd_synth(&spec, &out, seed),
        Command::Train {
            config,
            seed,
            resume,
            dataset,
            out,
            lr,
            batch_size,
            epochs,
            max_steps,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.train.seed = seed;
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            if let Some(o) = out {
                cfg.output = o;
            }
            if let Some(v) = lr {
                cfg.train.learning_rate = v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = epochs {
                cfg.train.epochs = v;
            }
            if max_steps.is_some() {
                cfg.train.max_steps = max_steps;
            }
            cmd_train(cfg, resume.as_deref())
        }
        Command::Eval {
            dataset,
            checkpoint,
            scores,
            val_scores,
            gamma,
            sweep,
            grid,
            out,
            curve,
            dump_scores,
        } => {
            let bundle = load_dataset(&dataset)?;
            let emb = bundle.class_embeddings()?;
            let (test, val) = match (&checkpoint, &scores) {
                (Some(ckpt), _) => {
                    let vit = load_model(ckpt)?;
                    check_model_matches(&bundle, &vit.config)?;
                    let test = score_split(&vit, &bundle, Split::Test)?;
                    if let Some(path) = &dump_scores {
                        test.write_csv(path)?;
                    }
                    let val = if sweep {
                        Some(score_split(&vit, &bundle, Split::Val)?)
                    } else {
                        None
                    };
                    (test, val)
                }
                (None, Some(path)) => {
                    let val = match (&val_scores, sweep) {
                        (Some(v), true) => Some(ScoreMatrix::read_csv(v)?),
                        (None, true) => {
                            return Err(Error::Config(
                                "--sweep with --scores needs --val-scores".into(),
                            ));
                        }
                        _ => None,
                    };
                    (ScoreMatrix::read_csv(path)?, val)
                }
                (None, None) => unreachable!("clap requires one source"),
            };
            cmd_eval(
                &emb,
                &test,
                val.as_ref(),
                gamma,
                grid,
                out.as_deref(),
                curve.as_deref(),
            )
        }
        Command::Predict {
            checkpoint,
            image,
            dataset,
            gamma,
            out,
        } => cmd_predict(
            &checkpoint,
            &image,
            dataset.as_deref(),
            gamma,
            out.as_deref(),
        ),
        Command::Attend {
            checkpoint,
            image,
            out,
            mode,
        } => {
            let mode = match mode {
                Mode::Rollout => MapMode::Rollout,
                Mode::LastLayer => MapMode::LastLayer,
            };
            cmd_attend(&checkpoint, &image, &out, mode)
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn cmd_synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec: SyntheticSpec = read_json(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let bundle = synth_generate(&spec, out)?;
    println!(
        "wrote {} ({} train, {} val, {} test images)",
        out.display(),
        bundle.train.len(),
        bundle.val.len(),
        bundle.test.len()
    );
    Ok(())
}

fn cmd_train(cfg: RunConfig, resume: Option<&Path>) -> Result<()> {
    cfg.train.validate()?;
    let bundle = load_dataset(&cfg.dataset)?;
    let model = cfg.model_config(bundle.geometry(), bundle.num_attributes());
    model.validate()?;
    check_model_matches(&bundle, &model)?;
    let data = TrainingSet::load(&bundle, &bundle)?;

    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.model != model {
                return Err(Error::Config(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            ckpt.into_trainer(cfg.train.clone())?
        }
        None => Trainer::new(model, cfg.train.clone())?,
    };

    let out = &cfg.output;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let interval = cfg.train.checkpoint_interval;
    let norm = bundle.meta.normalization.clone();
    let snapshots = out.join("checkpoints");
    let records = trainer.run(&data, |t, rec| {
        if interval > 0 && rec.step % interval == 0 {
            fs::create_dir_all(&snapshots).map_err(io_err(&snapshots))?;
            Checkpoint::from_trainer(t, &norm)
                .save(&snapshots.join(format!("step_{}.bin", rec.step)))?;
        }
        Ok(())
    })?;
    write_loss_csv(&out.join("loss.csv"), &records, resume.is_some())?;
    Checkpoint::from_trainer(&trainer, &norm).save(&out.join("checkpoint.bin"))?;
    match (records.first(), records.last()) {
        (Some(first), Some(last)) => println!(
            "trained {} steps (total {}), loss {:.6} -> {:.6}",
            records.len(),
            trainer.progress.step,
            first.loss,
            last.loss
        ),
        _ => println!("nothing to do: already at step {}", trainer.progress.step),
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Vit> {
    Checkpoint::load(path)?.vit()
}

fn cmd_eval(
    emb: &ClassEmbeddings,
    test: &ScoreMatrix,
    val: Option<&ScoreMatrix>,
    gamma: Option<f64>,
    grid: Option<Vec<f64>>,
    out: Option<&Path>,
    curve: Option<&Path>,
) -> Result<()> {
    let gamma = match val {
        Some(val) => {
            let grid = grid.unwrap_or_else(default_gamma_grid);
            if let Some(g) = grid.iter().find(|g| !g.is_finite()) {
                return Err(Error::Config(format!("bad gamma {g}")));
            }
            let sweep = calibration_sweep(val, emb, &grid)?;
            if let Some(path) = curve {
                sweep.write_csv(path)?;
            }
            sweep.best_gamma
        }
        None => gamma.unwrap_or(0.0),
    };
    if !gamma.is_finite() {
        return Err(Error::Config(format!("bad gamma {gamma}")));
    }
    let report = evaluate(test, emb, gamma)?;
    let json = report.to_json();
    if let Some(path) = out {
        fs::write(path, &json).map_err(io_err(path))?;
    }
    let rounded = EvalReport::from_json(&json)?;
    println!(
        "gamma={:.4} S={:.4} U={:.4} H={:.4}",
        rounded.gamma, rounded.seen, rounded.unseen, rounded.harmonic
    );
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    attributes: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    class_id: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
}

fn load_input(ckpt: &Checkpoint, path: &Path) -> Result<vitzsl::Tensor> {
    pnm::load_image(path, ckpt.model.image_shape(), &ckpt.normalization)
}

fn cmd_predict(
    ckpt_path: &Path,
    image: &Path,
    dataset: Option<&Path>,
    gamma: f64,
    out: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let input = load_input(&ckpt, image)?;
    let vit = ckpt.vit()?;
    let attrs = predict_attributes(&vit, &input)?;
    let class_id = match dataset {
        Some(root) => {
            let bundle = load_dataset(root)?;
            check_model_matches(&bundle, &vit.config)?;
            Some(classify(attrs.data(), &bundle.class_embeddings()?, gamma)?)
        }
        None => None,
    };
    let pred = Prediction {
        attributes: attrs.data().iter().map(|v| *v as f64).collect(),
        gamma: class_id.map(|_| gamma),
        class_id,
    };
    let json = serde_json::to_string_pretty(&pred).map_err(|e| Error::Contract(e.to_string()))?;
    match out {
        Some(path) => fs::write(path, json + "\n").map_err(io_err(path))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_attend(ckpt_path: &Path, image: &Path, out: &Path, mode: MapMode) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let input = load_input(&ckpt, image)?;
    let raw = RawImage::read(image)?;
    let vit = ckpt.vit()?;
    let (_, trace) = vit.encode(&input)?;
    let source = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let map = attention_map(&trace, &source, mode)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let (heat, over) = (out.join("heatmap.pgm"), out.join("overlay.ppm"));
    map.export(vit.config.patch_size, &heat)?;
    if raw.channels == 3 {
        map.overlay(&raw, vit.config.patch_size)?.write(&over)?;
    } else {
        let rgb = RawImage::new(
            raw.width,
            raw.height,
            3,
            raw.pixels.iter().flat_map(|p| [*p; 3]).collect(),
        )?;
        map.overlay(&rgb, vit.config.patch_size)?.write(&over)?;
    }
    println!("wrote {} and {}", heat.display(), over.display());
    Ok(())
}
