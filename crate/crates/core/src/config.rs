//! Versioned TOML experiment configuration. Every section and key is
//! required unless marked optional below, and unknown keys are rejected.
//!
//! ```toml
//! version = 1
//!
//! [backbone]            # image_side, channels, patch, d, layers, heads,
//!                       # mlp_ratio, num_classes_pretrain
//! [adapter]             # d_prime, r, r_prime, m
//! [pretrain]            # lr, betas, eps, weight_decay, warmup_frac,
//! [finetune]            # epochs, batch_size, seed, precision ("f32"|"f64")
//! [source]              # task, see below
//! [downstream]          # task, see below
//! [protocol]            # seeds, shots, m_list
//! ```
//!
//! A task is either `type = "synthetic"` with `seed`, `classes`,
//! `per_class`, `test_per_class`, `image_side`, `channels`, `noise` and an
//! optional `[*.shift]` table (`mean_shift`, `contrast_scale`, optional
//! `label_permutation`), or `type = "idx"` with `train_images`,
//! `train_labels`, `test_images`, `test_labels`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{synth_generate, Dataset, ShiftSpec, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::idx::load_idx;
use crate::sas::SasConfig;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub d_prime: usize,
    pub r: usize,
    pub r_prime: usize,
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Synthetic {
        seed: u64,
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        image_side: usize,
        channels: usize,
        noise: f64,
        #[serde(default)]
        shift: ShiftSpec,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl TaskConfig {
    /// Generator spec for one split; `None` for file-backed tasks.
    pub fn synthetic_spec(&self, split: Split) -> Option<(SyntheticSpec, u64)> {
        match self {
            TaskConfig::Synthetic {
                seed,
                classes,
                per_class,
                test_per_class,
                image_side,
                channels,
                noise,
                shift,
            } => Some((
                SyntheticSpec {
                    classes: *classes,
                    per_class: match split {
                        Split::Train => *per_class,
                        Split::Test => *test_per_class,
                    },
                    image_side: *image_side,
                    channels: *channels,
                    noise: *noise,
                    shift: shift.clone(),
                },
                *seed,
            )),
            TaskConfig::Idx { .. } => None,
        }
    }

    pub fn load(&self, split: Split) -> Result<Dataset> {
        match self {
            TaskConfig::Synthetic { .. } => {
                let (spec, seed) = self.synthetic_spec(split).expect("synthetic");
                synth_generate(&spec, split, seed)
            }
            TaskConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => match split {
                Split::Train => load_idx(train_images, train_labels),
                Split::Test => load_idx(test_images, test_labels),
            },
        }
    }

    fn validate(&self, section: &str) -> Result<()> {
        if let Some((spec, _)) = self.synthetic_spec(Split::Test) {
            spec.validate()
                .map_err(|e| Error::Config(format!("[{section}] {e}")))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    /// Fine-tuning seeds averaged over in comparisons.
    pub seeds: Vec<u64>,
    /// Shots per class for the few-shot sweep.
    pub shots: Vec<usize>,
    /// Hypernetwork counts for the M ablation.
    pub m_list: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub source: TaskConfig,
    pub downstream: TaskConfig,
    pub protocol: Protocol,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.backbone.validate()?;
        self.sas_config().validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.source.validate("source")?;
        self.downstream.validate("downstream")?;
        for (section, task) in [("source", &self.source), ("downstream", &self.downstream)] {
            if let Some((spec, _)) = task.synthetic_spec(Split::Train) {
                if spec.image_side != self.backbone.image_side || spec.channels != self.backbone.channels {
                    return Err(Error::Config(format!(
                        "[{section}] images are {}×{}×{} but the backbone expects {}×{}×{}",
                        spec.channels,
                        spec.image_side,
                        spec.image_side,
                        self.backbone.channels,
                        self.backbone.image_side,
                        self.backbone.image_side
                    )));
                }
            }
        }
        if self.protocol.seeds.is_empty() {
            return Err(Error::Config("[protocol] seeds must not be empty".into()));
        }
        if self.protocol.shots.contains(&0) {
            return Err(Error::Config("[protocol] shots must be positive".into()));
        }
        Ok(())
    }

    pub fn sas_config(&self) -> SasConfig {
        self.sas_config_with_m(self.adapter.m)
    }

    pub fn sas_config_with_m(&self, m: usize) -> SasConfig {
        SasConfig {
            d: self.backbone.d,
            layers: self.backbone.layers,
            d_prime: self.adapter.d_prime,
            r: self.adapter.r,
            r_prime: self.adapter.r_prime,
            m,
        }
    }
}

impl Default for ExperimentConfig {
    /// The desk-scale defaults used by the CLI when no file is given.
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let sas = SasConfig::with_defaults(backbone.d, backbone.layers);
        let task = |seed, per_class, test_per_class, shift| TaskConfig::Synthetic {
            seed,
            classes: 10,
            per_class,
            test_per_class,
            image_side: backbone.image_side,
            channels: backbone.channels,
            noise: 1.0,
            shift,
        };
        ExperimentConfig {
            version: CONFIG_VERSION,
            adapter: AdapterConfig {
                d_prime: sas.d_prime,
                r: sas.r,
                r_prime: sas.r_prime,
                m: sas.m,
            },
            pretrain: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            finetune: TrainConfig::default(),
            source: task(1, 100, 20, ShiftSpec::identity()),
            downstream: task(
                2,
                20,
                50,
                ShiftSpec {
                    mean_shift: 2.0,
                    contrast_scale: -1.0,
                    label_permutation: Some(vec![3, 7, 1, 9, 0, 5, 2, 8, 6, 4]),
                },
            ),
            protocol: Protocol {
                seeds: vec![0, 1, 2, 3, 4],
                shots: vec![1, 2, 4, 8, 16],
                m_list: vec![1, 3, 4, 6],
            },
            backbone,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let text = ExperimentConfig::default().to_toml().replace("[adapter]\n", "[adapter]\nalpha = 3\n");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("alpha")), "{err}");
    }

    #[test]
    fn missing_key_rejected() {
        let text = ExperimentConfig::default().to_toml().replacen("warmup_frac = 0.1\n", "", 1);
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn version_checked() {
        let text = ExperimentConfig::default().to_toml().replace("version = 1", "version = 2");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn image_shape_must_match_backbone() {
        let mut cfg = ExperimentConfig::default();
        if let TaskConfig::Synthetic { image_side, .. } = &mut cfg.downstream {
            *image_side = 8;
        }
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
