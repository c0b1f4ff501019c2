//! Turns a [dataset] section into concrete train/validation/test splits.

use crate::config::{DatasetKind, DatasetSection, RunConfig};
use prunekit_core::dataset::{split3, synth_dataset, Dataset, SplitSpec, SplitTag};
use prunekit_core::io::idx::load_idx;
use prunekit_core::{Error, Result};

pub struct Splits {
    pub train: Option<Dataset<f32>>,
    pub validation: Option<Dataset<f32>>,
    pub test: Option<Dataset<f32>>,
}

fn capped(data: Dataset<f32>, limit: Option<usize>) -> Result<Dataset<f32>> {
    match limit {
        Some(n) if n < data.len() => data.head(n),
        _ => Ok(data),
    }
}

/// Resolve every split the section can produce. The global seed drives both
/// synthesis and the default split permutation.
pub fn resolve(section: &DatasetSection, seed: u64) -> Result<Splits> {
    section.validate()?;
    match section.kind {
        DatasetKind::Idx => {
            let mut splits = Splits { train: None, validation: None, test: None };
            if let (Some(imgs), Some(labels)) = (&section.train_images, &section.train_labels) {
                let pool = load_idx::<f32>(imgs, labels, SplitTag::Train)?;
                let spec = section.split.unwrap_or(SplitSpec {
                    train: 0.9,
                    validation: 0.1,
                    test: 0.0,
                    seed,
                });
                let (train, validation, _) = split3(&pool, &spec)?;
                splits.train = Some(capped(train, section.train_limit)?);
                if !validation.is_empty() {
                    splits.validation = Some(capped(validation, section.eval_limit)?);
                }
            }
            if let (Some(imgs), Some(labels)) = (&section.test_images, &section.test_labels) {
                let test = load_idx::<f32>(imgs, labels, SplitTag::Test)?;
                splits.test = Some(capped(test, section.eval_limit)?);
            }
            Ok(splits)
        }
        DatasetKind::Synth => {
            let pool = synth_dataset::<f32>(
                seed,
                section.n.unwrap(),
                section.class_count.unwrap(),
                section.image_shape.unwrap(),
            )?;
            let spec = section.split.unwrap_or(SplitSpec {
                train: 0.8,
                validation: 0.1,
                test: 0.1,
                seed,
            });
            let (train, validation, test) = split3(&pool, &spec)?;
            let keep = |d: Dataset<f32>, limit| {
                if d.is_empty() {
                    Ok(None)
                } else {
                    capped(d, limit).map(Some)
                }
            };
            Ok(Splits {
                train: keep(train, section.train_limit)?,
                validation: keep(validation, section.eval_limit)?,
                test: keep(test, section.eval_limit)?,
            })
        }
    }
}

impl Splits {
    pub fn eval(&self, which: SplitTag) -> Result<&Dataset<f32>> {
        let piece = match which {
            SplitTag::Validation => self.validation.as_ref(),
            SplitTag::Test => self.test.as_ref(),
            SplitTag::Train => None,
        };
        piece.ok_or_else(|| {
            Error::config(format!("eval_split '{which}' resolved to no examples"))
        })
    }

    pub fn train(&self) -> Result<&Dataset<f32>> {
        self.train
            .as_ref()
            .ok_or_else(|| Error::config("this command needs a training split"))
    }
}

/// Convenience: resolve the config's dataset section or fail with a config
/// error naming it.
pub fn resolve_config(cfg: &RunConfig) -> Result<Splits> {
    let section = RunConfig::require(&cfg.dataset, "dataset")?;
    resolve(section, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_resolution_caps_and_splits() {
        let section: DatasetSection = toml::from_str(
            "kind = \"synth\"\nn = 100\nclass_count = 4\nimage_shape = [1, 8, 8]\n\
             train_limit = 20\neval_limit = 5",
        )
        .unwrap();
        let splits = resolve(&section, 7).unwrap();
        assert_eq!(splits.train.as_ref().unwrap().len(), 20);
        assert_eq!(splits.validation.as_ref().unwrap().len(), 5);
        assert_eq!(splits.test.as_ref().unwrap().len(), 5);
        assert_eq!(splits.eval(SplitTag::Validation).unwrap().split, SplitTag::Validation);
        // deterministic across calls
        let again = resolve(&section, 7).unwrap();
        assert_eq!(
            splits.train.as_ref().unwrap().labels(),
            again.train.as_ref().unwrap().labels()
        );
    }

    #[test]
    fn empty_requested_split_is_config_error() {
        let section: DatasetSection = toml::from_str(
            "kind = \"synth\"\nn = 50\nclass_count = 2\nimage_shape = [1, 6, 6]\n\
             [split]\ntrain = 0.9\nvalidation = 0.1\ntest = 0.0\nseed = 1",
        )
        .unwrap();
        let splits = resolve(&section, 3).unwrap();
        assert!(splits.test.is_none());
        let err = splits.eval(SplitTag::Test).unwrap_err();
        assert_eq!(err.category(), prunekit_core::ErrorCategory::Config);
    }
}
