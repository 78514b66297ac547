//! Experiment orchestration: cached preprocessing, the epoch loop with
//! per-epoch evaluation of both splits, best/last checkpoint tracking,
//! prediction, and curve export.

pub mod history;
pub mod synth;

pub use history::{export_curves, EpochRecord, SplitMetrics, TrainingHistory, HISTORY_VERSION};
pub use synth::SynthOptions;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use rayon::prelude::*;
use thiserror::Error;

use crate::featuremap::{FeatureMap, FeatureMapError};
use crate::imageio::{self, DatasetManifest, ImageError, Split};
use crate::metrics::{self, ConfusionMatrix, MetricsError, MetricsReport};
use crate::model::{
    load_checkpoint, save_checkpoint, ArchConfig, Checkpoint, CheckpointMeta, Model, ModelError,
};
use crate::nn::optim::OptimizerKind;
use crate::nn::tape::Tape;
use crate::nn::tensor::Tensor;
use crate::nn::{NnError, Optimizer};
use crate::preprocess::{self, PreprocessError, PreprocessOptions};
use crate::threads;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    FeatureMapFile(#[from] FeatureMapError),
    #[error("sample {path}: {source}")]
    Sample {
        path: PathBuf,
        #[source]
        source: Box<TrainError>,
    },
    #[error("split `{0}` holds no samples")]
    EmptySplit(String),
    #[error("training needs at least 2 samples, got {0}")]
    TrainTooSmall(usize),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error("class tables disagree: {0}")]
    ClassMismatch(String),
    #[error("bad history file: {0}")]
    BadHistory(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn for_sample(path: &Path, source: TrainError) -> Self {
        TrainError::Sample {
            path: path.to_path_buf(),
            source: Box::new(source),
        }
    }
}

/// Numeric width of the training state. Training runs in f64; the flag
/// exists so configs and reports are explicit about it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        "f64"
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f64" | "float64" | "double" => Some(Precision::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub precision: Precision,
    /// Preprocessed-input cache; defaults to `<out_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(arch: ArchConfig) -> Self {
        Self {
            arch,
            epochs: 100,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            seed: 0,
            train_fraction: 0.75,
            precision: Precision::F64,
            cache_dir: None,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        self.arch.validate()?;
        if self.epochs < 1 {
            return Err(TrainError::BadHistory("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Nn(NnError::BatchTooSmall {
                got: self.batch_size,
            }));
        }
        Ok(())
    }
}

/// Both branch inputs of one sample, flattened row-major.
pub struct SampleFeatures {
    pub std_map: Vec<f64>,
    pub dct_map: Vec<f64>,
}

fn sanitize_cache_name(path: &Path) -> String {
    let mut s = path.to_string_lossy().into_owned();
    s = s.replace(['/', '\\', ':'], "__");
    s.trim_start_matches("__").to_string()
}

/// Computes (or loads from `cache_dir`) both branch inputs for every record,
/// in manifest order. The cache holds exact f64 values in the `.tvfm`
/// format, so cached and fresh runs are bitwise identical.
pub fn preprocess_dataset(
    manifest: &DatasetManifest,
    opts: &PreprocessOptions,
    cache_dir: Option<&Path>,
) -> Result<Vec<SampleFeatures>, TrainError> {
    let cache_dir = match cache_dir {
        Some(dir) => {
            let sub = dir.join(format!(
                "w{}_s{}_{}",
                opts.window_size,
                opts.target_size,
                if opts.dct_log { "log" } else { "raw" }
            ));
            fs::create_dir_all(&sub).map_err(|e| TrainError::io(&sub, e))?;
            Some(sub)
        }
        None => None,
    };
    let job = |record: &imageio::SampleRecord| -> Result<SampleFeatures, TrainError> {
        let run = || -> Result<SampleFeatures, TrainError> {
            if let Some(dir) = &cache_dir {
                let base = sanitize_cache_name(&record.path);
                let std_path = dir.join(format!("{base}.std.tvfm"));
                let dct_path = dir.join(format!("{base}.dct.tvfm"));
                if std_path.exists() && dct_path.exists() {
                    return Ok(SampleFeatures {
                        std_map: FeatureMap::load_tvfm(&std_path)?.into_values(),
                        dct_map: FeatureMap::load_tvfm(&dct_path)?.into_values(),
                    });
                }
                let img = imageio::load_image(&record.path)?;
                let (std_map, dct_map) = preprocess::branch_inputs(&img, opts)?;
                std_map.save_tvfm(&std_path)?;
                dct_map.save_tvfm(&dct_path)?;
                Ok(SampleFeatures {
                    std_map: std_map.into_values(),
                    dct_map: dct_map.into_values(),
                })
            } else {
                let img = imageio::load_image(&record.path)?;
                let (std_map, dct_map) = preprocess::branch_inputs(&img, opts)?;
                Ok(SampleFeatures {
                    std_map: std_map.into_values(),
                    dct_map: dct_map.into_values(),
                })
            }
        };
        run().map_err(|e| TrainError::for_sample(&record.path, e))
    };
    if threads::parallel_enabled() {
        manifest.records.par_iter().map(job).collect()
    } else {
        manifest.records.iter().map(job).collect()
    }
}

/// Batch index ranges; a trailing single sample joins the previous batch so
/// batch normalization always sees at least two samples.
fn batch_ranges(n: usize, batch: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        out.push((start, end));
        start = end;
    }
    if out.len() >= 2 && out[out.len() - 1].1 - out[out.len() - 1].0 < 2 {
        let (_, end) = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").1 = end;
    }
    out
}

fn gather_batch(
    features: &[SampleFeatures],
    indices: &[usize],
    size: usize,
    branch1: bool,
    branch2: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let plane = size * size;
    let make = |pick: fn(&SampleFeatures) -> &[f64]| -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(pick(&features[i]));
        }
        Tensor::from_vec(&[indices.len(), 1, size, size], data).expect("plane sizes agree")
    };
    (
        branch1.then(|| make(|f| &f.std_map)),
        branch2.then(|| make(|f| &f.dct_map)),
    )
}

const EVAL_BATCH: usize = 64;

/// Infer-mode probabilities for the given sample indices, row-major
/// `[indices.len(), num_classes]`. Results are independent of batching.
fn infer_probs(
    model: &Model,
    features: &[SampleFeatures],
    indices: &[usize],
    size: usize,
) -> Result<Vec<f64>, TrainError> {
    let mode = model.config().mode;
    let job = |chunk: &[usize]| -> Result<Vec<f64>, TrainError> {
        let (x1, x2) = gather_batch(
            features,
            chunk,
            size,
            mode.uses_branch1(),
            mode.uses_branch2(),
        );
        let mut tape = Tape::new();
        let probs = model.forward_infer(&mut tape, x1, x2)?;
        let values = tape.value(probs);
        if !values.is_finite() {
            return Err(TrainError::NumericFailure(
                "non-finite probabilities during evaluation".into(),
            ));
        }
        Ok(values.data().to_vec())
    };
    // Per-sample results are independent of batching, so evaluating chunks
    // in parallel changes nothing numerically.
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_BATCH).collect();
    let parts: Vec<Vec<f64>> = if threads::parallel_enabled() {
        chunks
            .par_iter()
            .map(|c| job(c))
            .collect::<Result<_, _>>()?
    } else {
        chunks.iter().map(|c| job(c)).collect::<Result<_, _>>()?
    };
    Ok(parts.concat())
}

fn argmax_rows(probs: &[f64], cols: usize) -> Vec<usize> {
    probs
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn split_metrics(
    probs: &[f64],
    labels: &[usize],
    class_names: &[String],
) -> Result<SplitMetrics, TrainError> {
    let cols = class_names.len();
    let preds = argmax_rows(probs, cols);
    let cm = ConfusionMatrix::from_labels(labels, &preds, class_names)?;
    let prf = metrics::precision_recall_f1(&cm)?;
    let target = metrics::one_hot(labels, cols)?;
    Ok(SplitMetrics {
        accuracy: metrics::accuracy(&cm)?,
        precision: prf.macro_precision,
        recall: prf.macro_recall,
        f1: prf.macro_f1,
        loss: metrics::nll_loss(probs, labels, cols)?,
        kld: metrics::kld(probs, &target, cols)?,
    })
}

pub struct TrainOutcome {
    pub history: TrainingHistory,
    pub history_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

/// Runs the full experiment: preprocess every sample once (cached), iterate
/// epochs of shuffled mini-batches, evaluate both splits after each epoch in
/// infer mode, and persist the best-test-accuracy and final checkpoints plus
/// the history. Deterministic for a fixed `(config, manifest)`.
pub fn train(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if manifest.class_names.len() != cfg.arch.num_classes {
        return Err(TrainError::ClassMismatch(format!(
            "manifest has {} classes, architecture expects {}",
            manifest.class_names.len(),
            cfg.arch.num_classes
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| TrainError::io(out_dir, e))?;
    let cache_dir = cfg
        .cache_dir
        .clone()
        .unwrap_or_else(|| out_dir.join("cache"));

    let train_idx: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let test_idx: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Test)
        .map(|(i, _)| i)
        .collect();
    if train_idx.len() < 2 {
        return Err(TrainError::TrainTooSmall(train_idx.len()));
    }
    if test_idx.is_empty() {
        return Err(TrainError::EmptySplit("test".into()));
    }
    let labels: Vec<usize> = manifest.records.iter().map(|r| r.class_id).collect();
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let test_labels: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();

    let opts = cfg.arch.preprocess_options();
    let features = preprocess_dataset(manifest, &opts, Some(&cache_dir))?;

    let mut model = Model::build(cfg.arch.clone(), cfg.seed)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    // Dropout masks draw from their own stream so batch shuffling and mask
    // sampling cannot perturb each other.
    let mut dropout_rng =
        Xoshiro256StarStar::seed_from_u64(cfg.seed.wrapping_add(0xA076_1D64_78BD_642F));

    let size = cfg.arch.input_size;
    let mode = cfg.arch.mode;
    let best_path = out_dir.join("best.tvck");
    let last_path = out_dir.join("last.tvck");
    let history_path = out_dir.join("history.json");

    let mut records: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;

    for epoch in 1..=cfg.epochs {
        // Mini-batch order is reseeded per epoch from (seed, epoch).
        let mut shuffle_rng = Xoshiro256StarStar::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);

        for &(lo, hi) in batch_ranges(order.len(), cfg.batch_size).iter() {
            let batch = &order[lo..hi];
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (x1, x2) =
                gather_batch(&features, batch, size, mode.uses_branch1(), mode.uses_branch2());
            let mut tape = Tape::new();
            let pass = model.forward_train(&mut tape, x1, x2, &mut dropout_rng)?;
            let loss = tape.softmax_cross_entropy(pass.logits, &batch_labels)?;
            let loss_value = tape.value(loss).scalar_value();
            if !loss_value.is_finite() {
                return Err(TrainError::NumericFailure(format!(
                    "loss became non-finite at epoch {epoch}"
                )));
            }
            tape.backward(loss)?;
            if !tape.grads_finite() {
                return Err(TrainError::NumericFailure(format!(
                    "gradients became non-finite at epoch {epoch}"
                )));
            }
            let grads: Vec<Tensor> = pass
                .param_nodes
                .iter()
                .map(|&id| {
                    tape.grad(id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
                })
                .collect();
            let mut params = model.params_mut();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            optimizer.step(&mut params, &grad_refs)?;
        }

        let train_probs = infer_probs(&model, &features, &train_idx, size)?;
        let test_probs = infer_probs(&model, &features, &test_idx, size)?;
        let record = EpochRecord {
            epoch,
            train: split_metrics(&train_probs, &train_labels, &manifest.class_names)?,
            test: split_metrics(&test_probs, &test_labels, &manifest.class_names)?,
        };
        if record.test.accuracy > best_acc {
            best_acc = record.test.accuracy;
            best_epoch = epoch;
            let meta = CheckpointMeta {
                epoch,
                seed: cfg.seed,
                test_accuracy: record.test.accuracy,
                class_names: manifest.class_names.clone(),
            };
            save_checkpoint(&model, &meta, &best_path)?;
        }
        records.push(record);
    }

    let last_record = records.last().expect("epochs >= 1");
    let meta = CheckpointMeta {
        epoch: cfg.epochs,
        seed: cfg.seed,
        test_accuracy: last_record.test.accuracy,
        class_names: manifest.class_names.clone(),
    };
    save_checkpoint(&model, &meta, &last_path)?;

    let history = TrainingHistory {
        version: HISTORY_VERSION,
        seed: cfg.seed,
        mode: mode.name().to_string(),
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer: cfg.optimizer.name().to_string(),
        learning_rate: cfg.learning_rate,
        records,
        best_epoch,
    };
    history.save(&history_path)?;
    Ok(TrainOutcome {
        history,
        history_path,
        best_checkpoint: best_path,
        last_checkpoint: last_path,
    })
}

/// Infer-mode evaluation of one split: full metrics report plus the
/// confusion matrix.
pub fn evaluate(
    checkpoint: &Checkpoint,
    manifest: &DatasetManifest,
    split: Split,
    cache_dir: Option<&Path>,
) -> Result<(MetricsReport, ConfusionMatrix), TrainError> {
    if manifest.class_names != checkpoint.meta.class_names {
        return Err(TrainError::ClassMismatch(format!(
            "checkpoint classes {:?} vs manifest classes {:?}",
            checkpoint.meta.class_names, manifest.class_names
        )));
    }
    let indices: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == split)
        .map(|(i, _)| i)
        .collect();
    if indices.is_empty() {
        return Err(TrainError::EmptySplit(split.name().into()));
    }
    let sub = DatasetManifest {
        records: indices
            .iter()
            .map(|&i| manifest.records[i].clone())
            .collect(),
        class_names: manifest.class_names.clone(),
    };
    let opts = checkpoint.model.config().preprocess_options();
    let features = preprocess_dataset(&sub, &opts, cache_dir)?;
    let all: Vec<usize> = (0..sub.records.len()).collect();
    let size = checkpoint.model.config().input_size;
    let probs = infer_probs(&checkpoint.model, &features, &all, size)?;
    let labels: Vec<usize> = sub.records.iter().map(|r| r.class_id).collect();
    let preds = argmax_rows(&probs, manifest.class_names.len());
    let cm = ConfusionMatrix::from_labels(&labels, &preds, &manifest.class_names)?;
    let report = MetricsReport::compute(&cm, &probs, &labels, checkpoint.meta.epoch)?;
    Ok((report, cm))
}

/// Classifies a single image with a trained checkpoint.
pub fn predict(checkpoint: &Checkpoint, image: &Path) -> Result<(String, Vec<f64>), TrainError> {
    let opts = checkpoint.model.config().preprocess_options();
    let img = imageio::load_image(image).map_err(|e| TrainError::for_sample(image, e.into()))?;
    let (std_map, dct_map) =
        preprocess::branch_inputs(&img, &opts).map_err(|e| TrainError::for_sample(image, e.into()))?;
    let size = opts.target_size;
    let to_tensor = |m: FeatureMap| {
        Tensor::from_vec(&[1, 1, size, size], m.into_values()).expect("resized plane")
    };
    let probs = checkpoint
        .model
        .forward_fused(Some(&to_tensor(std_map)), Some(&to_tensor(dct_map)))?;
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(TrainError::NumericFailure(
            "non-finite prediction probabilities".into(),
        ));
    }
    let argmax = argmax_rows(&probs, probs.len())[0];
    let name = checkpoint
        .meta
        .class_names
        .get(argmax)
        .cloned()
        .unwrap_or_else(|| format!("class_{argmax}"));
    Ok((name, probs))
}

/// Loads a checkpoint from disk; see [`crate::model::load_checkpoint`].
pub fn open_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    Ok(load_checkpoint(path)?)
}

/// Which branch inputs the standalone preprocess pass writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PreprocessTarget {
    StdFilt,
    Dct,
    Both,
}

impl PreprocessTarget {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stdfilt" => Some(PreprocessTarget::StdFilt),
            "dct" => Some(PreprocessTarget::Dct),
            "both" => Some(PreprocessTarget::Both),
            _ => None,
        }
    }
}

fn walk_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), TrainError> {
    for entry in fs::read_dir(dir).map_err(|e| TrainError::io(dir, e))? {
        let entry = entry.map_err(|e| TrainError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            walk_images(&path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| {
                ["pgm", "png", "tif", "tiff"].contains(&e.to_ascii_lowercase().as_str())
            })
            .unwrap_or(false)
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Writes per-image `.tvfm` feature maps for every image under `input_dir`.
/// Returns the number of images processed.
pub fn preprocess_directory(
    input_dir: &Path,
    out_dir: &Path,
    target: PreprocessTarget,
    opts: &PreprocessOptions,
) -> Result<usize, TrainError> {
    let mut images = Vec::new();
    walk_images(input_dir, &mut images)?;
    images.sort();
    fs::create_dir_all(out_dir).map_err(|e| TrainError::io(out_dir, e))?;
    let job = |path: &PathBuf| -> Result<(), TrainError> {
        let run = || -> Result<(), TrainError> {
            let rel = path.strip_prefix(input_dir).unwrap_or(path);
            let base = sanitize_cache_name(rel);
            let img = imageio::load_image(path)?;
            let (std_map, dct_map) = preprocess::branch_inputs(&img, opts)?;
            if matches!(target, PreprocessTarget::StdFilt | PreprocessTarget::Both) {
                std_map.save_tvfm(&out_dir.join(format!("{base}.std.tvfm")))?;
            }
            if matches!(target, PreprocessTarget::Dct | PreprocessTarget::Both) {
                dct_map.save_tvfm(&out_dir.join(format!("{base}.dct.tvfm")))?;
            }
            Ok(())
        };
        run().map_err(|e| TrainError::for_sample(path, e))
    };
    if threads::parallel_enabled() {
        images.par_iter().map(job).collect::<Result<Vec<_>, _>>()?;
    } else {
        images.iter().map(job).collect::<Result<Vec<_>, _>>()?;
    }
    Ok(images.len())
}
