//! Run configuration: one TOML file per experiment, schema-checked before
//! any work starts. Command-line flags override the matching keys.

use prunekit_core::dataset::{SplitSpec, SplitTag};
use prunekit_core::importance::IndexKind;
use prunekit_core::pruner::FineTuneMode;
use prunekit_core::train::SgdConfig;
use prunekit_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const RUN_SCHEMA: &str = "prunekit-run-v1";

fn default_eval_split() -> SplitTag {
    SplitTag::Validation
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "default_eval_split")]
    pub eval_split: SplitTag,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compress: Option<CompressSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<ReportSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Idx,
    Synth,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    // idx sources
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    // synth parameters
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_shape: Option<[usize; 3]>,
    /// How to carve the training pool into train/validation(/test).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    /// Keep only the first N examples of the training piece.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    /// Keep only the first N examples of the evaluation piece.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_limit: Option<usize>,
}

impl DatasetSection {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DatasetKind::Idx => {
                let have_train = self.train_images.is_some() && self.train_labels.is_some();
                let have_test = self.test_images.is_some() && self.test_labels.is_some();
                if !have_train && !have_test {
                    return Err(Error::config(
                        "[dataset] kind = \"idx\" needs train_images/train_labels \
                         and/or test_images/test_labels",
                    ));
                }
                if self.n.is_some() || self.class_count.is_some() || self.image_shape.is_some() {
                    return Err(Error::config(
                        "[dataset] n/class_count/image_shape only apply to kind = \"synth\"",
                    ));
                }
                if let Some(spec) = &self.split {
                    if spec.test != 0.0 {
                        return Err(Error::config(
                            "[dataset] idx split.test must be 0; the test set comes \
                             from its own files",
                        ));
                    }
                }
            }
            DatasetKind::Synth => {
                if self.n.is_none() || self.class_count.is_none() || self.image_shape.is_none() {
                    return Err(Error::config(
                        "[dataset] kind = \"synth\" needs n, class_count, and image_shape",
                    ));
                }
                if self.train_images.is_some()
                    || self.train_labels.is_some()
                    || self.test_images.is_some()
                    || self.test_labels.is_some()
                {
                    return Err(Error::config(
                        "[dataset] idx file paths only apply to kind = \"idx\"",
                    ));
                }
            }
        }
        if let Some(spec) = &self.split {
            spec.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Preset name ("lenet-desk", ...) or path to an architecture TOML.
    pub arch: String,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl TrainSection {
    /// Hyperparameters plus the run's global seed.
    pub fn sgd(&self, seed: u64) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    pub model: PathBuf,
    pub layer_id: String,
    pub target_ratio: f64,
    pub index: IndexKind,
    #[serde(default)]
    pub fine_tune: FineTuneMode,
}

fn default_idx_bits() -> u8 {
    prunekit_core::compress::DEFAULT_IDX_BITS
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressSection {
    pub model: PathBuf,
    pub sparsity: f64,
    pub code_bits: u8,
    #[serde(default = "default_idx_bits")]
    pub idx_bits: u8,
    /// Layers to compress; defaults to every layer with a weight tensor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<String>>,
    /// Masked retraining between pruning and quantization (needs [train]
    /// hyperparameters and a training dataset).
    #[serde(default)]
    pub retrain: bool,
}

fn default_patches_k() -> usize {
    9
}

fn default_baseline_repeats() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Reference model (typically the uncompressed one).
    pub model_a: PathBuf,
    /// Processed model; defaults to model_a.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_b: Option<PathBuf>,
    /// Trace JSON from a prune run, for the accuracy-vs-ratio curve.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    /// Manifest JSON from a compress run, for byte accounting.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patches_layer: Option<String>,
    #[serde(default = "default_patches_k")]
    pub patches_k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_layer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_ratios: Option<Vec<f64>>,
    #[serde(default = "default_baseline_repeats")]
    pub baseline_repeats: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub model: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != RUN_SCHEMA {
            return Err(Error::config(format!(
                "config schema '{}' not supported; expected '{RUN_SCHEMA}'",
                self.schema
            )));
        }
        if self.eval_split == SplitTag::Train {
            return Err(Error::config("eval_split must be 'validation' or 'test'"));
        }
        if let Some(ds) = &self.dataset {
            ds.validate()?;
        }
        if let Some(p) = &self.prune {
            if p.fine_tune != FineTuneMode::Off && self.train.is_none() {
                return Err(Error::config(
                    "[prune] fine_tune needs a [train] section for SGD hyperparameters",
                ));
            }
        }
        if let Some(c) = &self.compress {
            if c.retrain && self.train.is_none() {
                return Err(Error::config(
                    "[compress] retrain needs a [train] section for SGD hyperparameters",
                ));
            }
        }
        if let Some(r) = &self.report {
            if r.baseline_ratios.is_some() && r.baseline_layer.is_none() {
                return Err(Error::config(
                    "[report] baseline_ratios needs baseline_layer",
                ));
            }
        }
        Ok(())
    }

    /// The section a command requires, with a config-category error naming it.
    pub fn require<'a, S>(section: &'a Option<S>, name: &str) -> Result<&'a S> {
        section
            .as_ref()
            .ok_or_else(|| Error::config(format!("missing [{name}] section in config")))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let cfg: RunConfig =
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Flag values that shadow config keys one-to-one.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub eval_split: Option<SplitTag>,
    pub index: Option<IndexKind>,
    pub fine_tune: Option<FineTuneMode>,
}

pub fn apply_overrides(cfg: &mut RunConfig, ov: &Overrides) -> Result<()> {
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &ov.out {
        cfg.out = Some(out.clone());
    }
    if let Some(split) = ov.eval_split {
        if split == SplitTag::Train {
            return Err(Error::config("--eval-split must be 'validation' or 'test'"));
        }
        cfg.eval_split = split;
    }
    if ov.index.is_some() || ov.fine_tune.is_some() {
        let prune = cfg
            .prune
            .as_mut()
            .ok_or_else(|| Error::config("--index/--fine-tune need a [prune] section"))?;
        if let Some(index) = ov.index {
            prune.index = index;
        }
        if let Some(ft) = ov.fine_tune {
            prune.fine_tune = ft;
        }
    }
    cfg.validate()
}
