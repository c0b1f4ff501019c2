//! Labeled image datasets: container type, deterministic splitting, and a
//! synthetic separable generator for tests that must not depend on MNIST.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SplitTag::Train => "train",
            SplitTag::Validation => "validation",
            SplitTag::Test => "test",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<T = f32> {
    images: Vec<Tensor<T>>,
    labels: Vec<usize>,
    pub split: SplitTag,
    pub class_count: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        images: Vec<Tensor<T>>,
        labels: Vec<usize>,
        split: SplitTag,
        class_count: usize,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(
                "dataset",
                format!("{} images vs {} labels", images.len(), labels.len()),
            ));
        }
        if class_count == 0 {
            return Err(Error::invalid("dataset", "class_count must be >= 1"));
        }
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|img| img.shape() != first.shape()) {
                return Err(Error::invalid(
                    "dataset",
                    format!("mixed image shapes {:?} vs {:?}", first.shape(), bad.shape()),
                ));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::invalid(
                "dataset",
                format!("label {bad} out of range for {class_count} classes"),
            ));
        }
        Ok(Dataset { images, labels, split, class_count })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor<T> {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|img| img.shape())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tensor<T>, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }

    fn select(&self, indices: &[usize], split: SplitTag) -> Self {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split,
            class_count: self.class_count,
        }
    }

    /// First `n` examples of a seeded permutation, keeping the split tag.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(
                "subsample",
                format!("requested {n} of {} examples", self.len()),
            ));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(n);
        Ok(self.select(&order, self.split))
    }

    /// First `n` examples in stored order.
    pub fn head(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid("head", format!("requested {n} of {}", self.len())));
        }
        let indices: Vec<usize> = (0..n).collect();
        Ok(self.select(&indices, self.split))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
            return Err(Error::invalid("split", "fractions must lie in [0, 1]"));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split", format!("fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Deterministic three-way split: a seeded permutation cut at cumulative
/// boundaries, so the pieces are disjoint and exhaustive for any fractions.
pub fn split3<T: Scalar>(data: &Dataset<T>, spec: &SplitSpec) -> Result<(Dataset<T>, Dataset<T>, Dataset<T>)> {
    spec.validate()?;
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let b1 = (spec.train * n as f64).round() as usize;
    let b2 = ((spec.train + spec.validation) * n as f64).round() as usize;
    let b1 = b1.min(n);
    let b2 = b2.clamp(b1, n);
    Ok((
        data.select(&order[..b1], SplitTag::Train),
        data.select(&order[b1..b2], SplitTag::Validation),
        data.select(&order[b2..], SplitTag::Test),
    ))
}

/// Separable synthetic data: each class is an oriented bar through the image
/// center plus uniform noise, so small networks can fit it quickly.
pub fn synth_dataset<T: Scalar>(
    seed: u64,
    n: usize,
    class_count: usize,
    image_shape: [usize; 3],
) -> Result<Dataset<T>> {
    if n == 0 {
        return Err(Error::invalid("synth_dataset", "n must be >= 1"));
    }
    if class_count == 0 {
        return Err(Error::invalid("synth_dataset", "class_count must be >= 1"));
    }
    let [c, h, w] = image_shape;
    if c == 0 || h < 2 || w < 2 {
        return Err(Error::invalid(
            "synth_dataset",
            format!("image shape {image_shape:?} too small"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let thickness = (h.min(w) as f64) / 8.0 + 0.5;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % class_count;
        let theta = std::f64::consts::PI * label as f64 / class_count as f64;
        let (dir_y, dir_x) = (theta.sin(), theta.cos());
        let mut img = Tensor::<T>::zeros(image_shape);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    // distance from the center line with direction (dir_y, dir_x)
                    let ry = y as f64 - cy;
                    let rx = x as f64 - cx;
                    let dist = (ry * dir_x - rx * dir_y).abs();
                    let bar = if dist < thickness { 1.0 } else { 0.0 };
                    let noise: f64 = rng.gen_range(0.0..0.25);
                    *img.at_mut(&[ch, y, x]) = T::from_acc((bar * 0.75 + noise).min(1.0));
                }
            }
        }
        images.push(img);
        labels.push(label);
    }
    Dataset::new(images, labels, SplitTag::Train, class_count)
}
