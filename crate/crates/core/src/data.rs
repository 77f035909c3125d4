//! Labeled image datasets: synthetic generation, few-shot subsets and
//! dataset specs that can also point at local IDX files.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::idx::load_idx;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Images are `C × H × W` tensors; labels are class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor<f32>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(Error::Data("images have differing shapes".into()));
            }
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|t| t.shape())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Affine intensity shift plus an optional relabeling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub mean_shift: f64,
    pub contrast_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_permutation: Option<Vec<usize>>,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec::identity()
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec {
            mean_shift: 0.0,
            contrast_scale: 1.0,
            label_permutation: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.mean_shift == 0.0
            && self.contrast_scale == 1.0
            && self
                .label_permutation
                .as_ref()
                .is_none_or(|p| p.iter().enumerate().all(|(i, &j)| i == j))
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !self.mean_shift.is_finite() || !self.contrast_scale.is_finite() {
            return Err(Error::Config("shift values must be finite".into()));
        }
        if let Some(p) = &self.label_permutation {
            let mut seen = vec![false; classes];
            if p.len() != classes || p.iter().any(|&j| j >= classes || std::mem::replace(&mut seen[j], true)) {
                return Err(Error::Config(format!(
                    "label_permutation must be a permutation of 0..{classes}"
                )));
            }
        }
        Ok(())
    }
}

/// Class templates are drawn once per `seed`; each sample is its class
/// template plus isotropic Gaussian noise, then shifted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_side: usize,
    pub channels: usize,
    /// Standard deviation of the per-pixel noise. Templates have unit variance.
    pub noise: f64,
    #[serde(default)]
    pub shift: ShiftSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    IdxFiles { images_path: PathBuf, labels_path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub split: Split,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match &self.source {
            DataSource::Synthetic(s) => synth_generate(s, self.split, self.seed),
            DataSource::IdxFiles {
                images_path,
                labels_path,
            } => load_idx(images_path, labels_path),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.per_class == 0 || self.image_side == 0 || self.channels == 0 {
            return Err(Error::Config(
                "synthetic data needs ≥2 classes and positive per_class, image_side, channels".into(),
            ));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config("noise must be finite and non-negative".into()));
        }
        self.shift.validate(self.classes)
    }

    /// Class templates for `seed`, independent of split and shift.
    pub fn templates(&self, seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = Rng::new(seed).fork(0);
        let shape = [self.channels, self.image_side, self.image_side];
        (0..self.classes).map(|_| rng.normal_tensor(&shape, 0.0, 1.0)).collect()
    }
}

/// Deterministic in `(spec, split, seed)`. Samples are ordered round-robin
/// over classes, so every prefix of `classes · j` samples is balanced.
pub fn synth_generate(spec: &SyntheticSpec, split: Split, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let templates = spec.templates(seed);
    let stream = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = Rng::new(seed).fork(stream);
    let shift = &spec.shift;
    let mut images = Vec::with_capacity(spec.classes * spec.per_class);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for _ in 0..spec.per_class {
        for (c, template) in templates.iter().enumerate() {
            let noisy: Vec<f32> = template
                .data()
                .iter()
                .map(|&t| {
                    let x = t as f64 + spec.noise * rng.standard_normal();
                    (shift.contrast_scale * x + shift.mean_shift) as f32
                })
                .collect();
            images.push(Tensor::new(template.shape(), noisy)?);
            labels.push(shift.label_permutation.as_ref().map_or(c, |p| p[c]));
        }
    }
    Dataset::new(images, labels, spec.classes)
}

/// Exactly `k` examples per class, without replacement. Each class is
/// shuffled independently of `k`, so subsets for growing `k` are nested.
pub fn few_shot_sample(dataset: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::Data("few-shot k must be positive".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let base = Rng::new(seed);
    let mut chosen = Vec::with_capacity(k * dataset.classes);
    for (c, idx) in by_class.iter_mut().enumerate() {
        if idx.len() < k {
            return Err(Error::Data(format!(
                "class {c} has {} examples, fewer than k = {k}",
                idx.len()
            )));
        }
        base.fork(c as u64).shuffle(idx);
        chosen.push(idx[..k].to_vec());
    }
    // interleave so the subset stays round-robin over classes
    let order: Vec<usize> = (0..k)
        .flat_map(|j| chosen.iter().map(move |v| v[j]))
        .collect();
    Ok(dataset.subset(&order))
}
