//! Experimental protocols built from a config: variant comparison, the
//! hypernetwork-count ablation and the few-shot sweep.

use crate::backbone::Backbone;
use crate::config::ExperimentConfig;
use crate::data::{few_shot_sample, Dataset, Split};
use crate::error::Result;
use crate::train::{finetune, pretrain_toy, FinetuneOutcome, PretrainOutcome, RunResult, TrainConfig};
use crate::variants::VariantKind;

/// Pretrains the backbone on the configured source task.
pub fn pretrain_source(cfg: &ExperimentConfig) -> Result<PretrainOutcome> {
    let data = cfg.source.load(Split::Train)?;
    pretrain_toy(&cfg.backbone, &data, &cfg.pretrain)
}

pub fn downstream_splits(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    Ok((cfg.downstream.load(Split::Train)?, cfg.downstream.load(Split::Test)?))
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.clone() }
}

pub fn run_one(
    cfg: &ExperimentConfig,
    backbone: &Backbone<f32>,
    kind: &VariantKind,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
) -> Result<FinetuneOutcome> {
    finetune(kind.clone(), backbone, train, test, &with_seed(&cfg.finetune, seed))
}

/// Every kind under every protocol seed, kind-major.
pub fn compare_variants(
    cfg: &ExperimentConfig,
    backbone: &Backbone<f32>,
    kinds: &[VariantKind],
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<RunResult>> {
    let mut out = Vec::new();
    for kind in kinds {
        for &seed in &cfg.protocol.seeds {
            out.push(run_one(cfg, backbone, kind, seed, train, test)?.result);
        }
    }
    Ok(out)
}

/// Full adapter with each hypernetwork count in `m_list`.
pub fn ablate_m(
    cfg: &ExperimentConfig,
    backbone: &Backbone<f32>,
    m_list: &[usize],
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<RunResult>> {
    let kinds: Vec<VariantKind> = m_list
        .iter()
        .map(|&m| VariantKind::FullSas(cfg.sas_config_with_m(m)))
        .collect();
    compare_variants(cfg, backbone, &kinds, train, test)
}

/// `kind` trained on `k` shots per class for each `k`. The subset for a
/// given seed is drawn with that seed, so subsets are nested across `k`.
/// Labels carry a ` k=<k>` suffix.
pub fn few_shot_sweep(
    cfg: &ExperimentConfig,
    backbone: &Backbone<f32>,
    kind: &VariantKind,
    shots: &[usize],
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<(usize, RunResult)>> {
    let mut out = Vec::new();
    for &k in shots {
        for &seed in &cfg.protocol.seeds {
            let subset = few_shot_sample(train, k, seed)?;
            let mut run = run_one(cfg, backbone, kind, seed, &subset, test)?.result;
            run.variant = format!("{} k={k}", run.variant);
            out.push((k, run));
        }
    }
    Ok(out)
}

/// Mean top-1 over runs whose label equals `variant`.
pub fn mean_top1(results: &[RunResult], variant: &str) -> Option<f64> {
    let xs: Vec<f64> = results.iter().filter(|r| r.variant == variant).map(|r| r.top1).collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}
