//! Pretraining, fine-tuning and evaluation loops.
//!
//! Each minibatch is split into fixed-size chunks. Chunks build their own
//! graphs and run in parallel; their gradients are summed in chunk order,
//! so results do not depend on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig, Head};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{ppt_score, top1_percent};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::params::{hex, ParamSet};
use crate::rng::Rng;
use crate::tensor::{s, Scalar, Tensor};
use crate::variants::{argmax_rows, build_variant, VariantKind, VariantModel};

/// Images per graph. Fixed so chunking never changes the arithmetic.
pub const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_frac: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    /// AdamW, lr 1e-3, betas 0.9/0.999, weight decay 1e-4, 10% warmup,
    /// batch 32, 100 epochs, f32.
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_frac: 0.1,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn steps_for(&self, examples: usize) -> usize {
        self.epochs * examples.div_ceil(self.batch_size)
    }
}

/// Per-step mean minibatch loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub adapter_params: u64,
    pub top1: f64,
    pub ppt: f64,
    pub seed: u64,
    pub config_hash: String,
    pub wall_time: f64,
}

impl RunResult {
    pub fn new(variant: String, adapter_params: u64, top1: f64, seed: u64, config_hash: String) -> Self {
        RunResult {
            variant,
            adapter_params,
            top1,
            ppt: ppt_score(top1, adapter_params),
            seed,
            config_hash,
            wall_time: 0.0,
        }
    }
}

/// Short stable hash of any serializable configuration.
pub fn config_hash<C: Serialize + ?Sized>(config: &C) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex(&Sha256::digest(&json)[..8])
}

fn check_images(dataset: &Dataset, cfg: &BackboneConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let want = [cfg.channels, cfg.image_side, cfg.image_side];
    match dataset.image_shape() {
        Some(shape) if shape == want => Ok(()),
        Some(shape) => Err(Error::Data(format!(
            "images are {shape:?} but the backbone expects {want:?}"
        ))),
        None => unreachable!(),
    }
}

/// Forward pass shared by training and evaluation: binds `params` on `g`
/// and returns `(logits, trainable vars in ParamSet order)`.
trait Model<T: Scalar>: ParamSet<T> + Sync {
    fn forward(&self, g: &mut Graph<T>, images: &[&Tensor<T>]) -> Result<(Var, Vec<Var>)>;
}

struct Pretrain<T: Scalar> {
    backbone: Backbone<T>,
    head: Head<T>,
}

impl<T: Scalar> ParamSet<T> for Pretrain<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = self.backbone.named_tensors();
        v.extend(self.head.named_tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.backbone.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }
}

impl<T: Scalar> Model<T> for Pretrain<T> {
    fn forward(&self, g: &mut Graph<T>, images: &[&Tensor<T>]) -> Result<(Var, Vec<Var>)> {
        let bb = self.backbone.bind(g);
        let head = self.head.bind(g);
        let tokens = bb.embed_batch(g, images)?;
        let out = bb.forward(g, tokens, images.len(), None)?;
        let logits = head.forward(g, out.features)?;
        let mut vars = bb.vars();
        vars.extend(head.vars());
        Ok((logits, vars))
    }
}

struct Finetune<'a, T: Scalar> {
    backbone: &'a Backbone<T>,
    model: VariantModel<T>,
}

impl<T: Scalar> ParamSet<T> for Finetune<'_, T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.model.named_tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.model.tensors_mut()
    }
}

impl<T: Scalar> Model<T> for Finetune<'_, T> {
    fn forward(&self, g: &mut Graph<T>, images: &[&Tensor<T>]) -> Result<(Var, Vec<Var>)> {
        let bb = self.backbone.bind(g);
        let bound = self.model.bind(g)?;
        let logits = VariantModel::forward(g, &bb, &bound, images)?;
        Ok((logits, bound.vars))
    }
}

/// Mean cross-entropy gradient of one minibatch, accumulated chunk by chunk.
fn batch_gradient<T: Scalar, M: Model<T>>(
    model: &M,
    images: &[&Tensor<T>],
    labels: &[usize],
) -> Result<(f64, Vec<Vec<T>>)> {
    let n = images.len();
    let weight: T = s(1.0 / n as f64);
    let parts = images
        .par_chunks(CHUNK)
        .zip(labels.par_chunks(CHUNK))
        .map(|(imgs, lbls)| -> Result<(f64, Vec<Vec<T>>)> {
            let mut g = Graph::new();
            let (logits, vars) = model.forward(&mut g, imgs)?;
            let ce = g.softmax_cross_entropy(logits, lbls)?;
            // mean over the chunk → sum over the chunk / batch size
            let loss = g.scale(ce, weight * s(lbls.len() as f64));
            g.backward(loss)?;
            let grads = vars
                .iter()
                .map(|&v| g.grad(v).map(Tensor::into_data).unwrap_or_default())
                .collect();
            Ok((g.value(loss).item().to_f64_lossy(), grads))
        })
        .collect::<Vec<_>>();
    let mut total = 0.0;
    let mut sum: Option<Vec<Vec<T>>> = None;
    for part in parts {
        let (loss, grads) = part?;
        total += loss;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x = *x + y;
                    }
                }
            }
        }
    }
    Ok((total, sum.unwrap_or_default()))
}

fn train_loop<T: Scalar, M: Model<T>>(
    model: &mut M,
    images: &[Tensor<T>],
    labels: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainLog> {
    let n = images.len();
    let total = cfg.steps_for(n);
    let schedule = CosineSchedule::new(cfg.lr, cfg.warmup_frac, total);
    let mut opt = {
        let named = model.named_tensors();
        let refs: Vec<&Tensor<T>> = named.iter().map(|(_, t)| *t).collect();
        AdamW::new(cfg.adamw(), &refs)
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let imgs: Vec<&Tensor<T>> = batch.iter().map(|&i| &images[i]).collect();
            let lbls: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = batch_gradient(model, &imgs, &lbls)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("loss is {loss}"),
                });
            }
            opt.step(model.tensors_mut(), &grads, schedule.lr(step))?;
            if model.named_tensors().iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::Training {
                    step,
                    reason: "non-finite parameter after update".into(),
                });
            }
            log.losses.push(loss);
            step += 1;
        }
    }
    Ok(log)
}

fn predict<T: Scalar, M: Model<T>>(model: &M, images: &[Tensor<T>]) -> Result<Vec<usize>> {
    let parts = images
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<Vec<usize>> {
            let refs: Vec<&Tensor<T>> = chunk.iter().collect();
            let mut g = Graph::new();
            let (logits, _) = model.forward(&mut g, &refs)?;
            Ok(argmax_rows(g.value(logits)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

fn cast_images<T: Scalar>(dataset: &Dataset) -> Vec<Tensor<T>> {
    dataset.images.iter().map(|t| t.cast()).collect()
}

pub struct PretrainOutcome {
    /// Frozen; the pretraining head has been discarded.
    pub backbone: Backbone<f32>,
    pub train_top1: f64,
    pub log: TrainLog,
}

/// Trains backbone and a temporary head on the source task, then freezes
/// the backbone. Streams: backbone init 0, head init 1, shuffling 2.
pub fn pretrain_toy(config: &BackboneConfig, dataset: &Dataset, cfg: &TrainConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    cfg.validate()?;
    check_images(dataset, config)?;
    if dataset.classes > config.num_classes_pretrain {
        return Err(Error::Config(format!(
            "source task has {} classes but num_classes_pretrain is {}",
            dataset.classes, config.num_classes_pretrain
        )));
    }
    let root = Rng::new(cfg.seed);
    let backbone = Backbone::<f32>::init(config.clone(), &mut root.fork(0))?;
    let head = Head {
        weight: root
            .fork(1)
            .normal_tensor(&[config.d, config.num_classes_pretrain], 0.0, (1.0 / config.d as f64).sqrt()),
        bias: Tensor::zeros(&[config.num_classes_pretrain]),
    };
    let mut rng = root.fork(2);
    let (mut backbone, train_top1, log) = match cfg.precision {
        Precision::F32 => {
            let mut m = Pretrain { backbone, head };
            let images = cast_images::<f32>(dataset);
            let log = train_loop(&mut m, &images, &dataset.labels, cfg, &mut rng)?;
            let acc = top1_percent(&predict(&m, &images)?, &dataset.labels);
            (m.backbone, acc, log)
        }
        Precision::F64 => {
            let mut m = Pretrain {
                backbone: backbone.cast::<f64>(),
                head: head.cast::<f64>(),
            };
            let images = cast_images::<f64>(dataset);
            let log = train_loop(&mut m, &images, &dataset.labels, cfg, &mut rng)?;
            let acc = top1_percent(&predict(&m, &images)?, &dataset.labels);
            (m.backbone.cast::<f32>(), acc, log)
        }
    };
    backbone.freeze_all();
    Ok(PretrainOutcome {
        backbone,
        train_top1,
        log,
    })
}

pub struct FinetuneOutcome {
    pub result: RunResult,
    pub model: VariantModel<f32>,
    pub log: TrainLog,
}

/// Trains only the variant's parameters on `train`, then evaluates on
/// `test`. Streams: adapter init 0, shuffling 1. The backbone is only read.
pub fn finetune(
    kind: VariantKind,
    backbone: &Backbone<f32>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if !backbone.is_frozen() {
        return Err(Error::Contract("fine-tuning requires a frozen backbone".into()));
    }
    check_images(train, &backbone.config)?;
    check_images(test, &backbone.config)?;
    let classes = train.classes.max(test.classes);
    let root = Rng::new(cfg.seed);
    let model = build_variant::<f32>(kind.clone(), backbone, classes, &mut root.fork(0))?;
    let mut rng = root.fork(1);
    let (model, top1, log) = match cfg.precision {
        Precision::F32 => run_finetune(backbone, model, train, test, cfg, &mut rng)?,
        Precision::F64 => {
            let bb = backbone.cast::<f64>();
            let (m, acc, log) = run_finetune(&bb, model.cast::<f64>(), train, test, cfg, &mut rng)?;
            (m.cast::<f32>(), acc, log)
        }
    };
    let (adapter, _) = model.trainable_params();
    // seed excluded: runs of one configuration share a hash
    let hash = config_hash(&(&kind, TrainConfig { seed: 0, ..cfg.clone() }, backbone.checksum()));
    Ok(FinetuneOutcome {
        result: RunResult::new(kind.label(), adapter as u64, top1, cfg.seed, hash),
        model,
        log,
    })
}

fn run_finetune<T: Scalar>(
    backbone: &Backbone<T>,
    model: VariantModel<T>,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(VariantModel<T>, f64, TrainLog)> {
    let mut ft = Finetune { backbone, model };
    let log = train_loop(&mut ft, &cast_images::<T>(train), &train.labels, cfg, rng)?;
    let preds = predict(&ft, &cast_images::<T>(test))?;
    Ok((ft.model, top1_percent(&preds, &test.labels), log))
}

/// Top-1 accuracy in percent; ties between logits go to the lowest class.
pub fn evaluate_top1(model: &VariantModel<f32>, backbone: &Backbone<f32>, dataset: &Dataset) -> Result<f64> {
    check_images(dataset, &backbone.config)?;
    let ft = Finetune {
        backbone,
        model: model.clone(),
    };
    let preds = predict(&ft, &dataset.images)?;
    Ok(top1_percent(&preds, &dataset.labels))
}

/// Predicted classes for a batch of images.
pub fn predict_classes(model: &VariantModel<f32>, backbone: &Backbone<f32>, images: &[Tensor<f32>]) -> Result<Vec<usize>> {
    let ft = Finetune {
        backbone,
        model: model.clone(),
    };
    predict(&ft, images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, ShiftSpec, Split, SyntheticSpec};

    fn bb_config() -> BackboneConfig {
        BackboneConfig {
            image_side: 8,
            channels: 1,
            patch: 4,
            d: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes_pretrain: 3,
        }
    }

    fn source(per_class: usize, split: Split) -> Dataset {
        let spec = SyntheticSpec {
            classes: 3,
            per_class,
            image_side: 8,
            channels: 1,
            noise: 0.3,
            shift: ShiftSpec::identity(),
        };
        synth_generate(&spec, split, 1).unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            epochs,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn chunking_matches_single_graph() {
        let out = pretrain_toy(&bb_config(), &source(4, Split::Train), &quick(0)).unwrap();
        let data = source(7, Split::Train);
        let model = build_variant::<f64>(VariantKind::BiasOnly, &out.backbone.cast(), 3, &mut Rng::new(0)).unwrap();
        let bb = out.backbone.cast::<f64>();
        let mut model = model;
        for t in model.tensors_mut() {
            *t = Rng::new(3).normal_tensor(t.shape(), 0.0, 0.3);
        }
        let ft = Finetune { backbone: &bb, model };
        let imgs = cast_images::<f64>(&data);
        let refs: Vec<&Tensor<f64>> = imgs.iter().collect();
        let (loss, grads) = batch_gradient(&ft, &refs, &data.labels).unwrap();

        let mut g = Graph::new();
        let (logits, vars) = ft.forward(&mut g, &refs).unwrap();
        let ce = g.softmax_cross_entropy(logits, &data.labels).unwrap();
        g.backward(ce).unwrap();
        assert!((g.value(ce).item() - loss).abs() < 1e-12);
        for (v, want) in vars.iter().zip(&grads) {
            let got = g.grad(*v).unwrap();
            for (a, b) in got.data().iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pretrain_learns_separable_source() {
        let data = source(30, Split::Train);
        let out = pretrain_toy(&bb_config(), &data, &quick(20)).unwrap();
        assert!(out.backbone.is_frozen());
        assert!(out.train_top1 >= 95.0, "{}", out.train_top1);
        assert!(out.log.losses.last().unwrap() < &out.log.losses[0]);
    }

    #[test]
    fn finetune_keeps_backbone_and_is_deterministic() {
        let out = pretrain_toy(&bb_config(), &source(10, Split::Train), &quick(3)).unwrap();
        let before = out.backbone.checksum();
        let (train, test) = (source(6, Split::Train), source(6, Split::Test));
        let kind = VariantKind::SharedPlusBias { d_prime: 2 };
        let a = finetune(kind.clone(), &out.backbone, &train, &test, &quick(2)).unwrap();
        let b = finetune(kind, &out.backbone, &train, &test, &quick(2)).unwrap();
        assert_eq!(a.result, b.result);
        assert_eq!(a.model, b.model);
        assert_eq!(out.backbone.checksum(), before);
        assert!((a.result.ppt - ppt_score(a.result.top1, a.result.adapter_params)).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_is_init_evaluation() {
        let out = pretrain_toy(&bb_config(), &source(4, Split::Train), &quick(1)).unwrap();
        let (train, test) = (source(3, Split::Train), source(5, Split::Test));
        let kind = VariantKind::FullSas(crate::sas::SasConfig {
            d: 8,
            layers: 2,
            d_prime: 2,
            r: 2,
            r_prime: 2,
            m: 1,
        });
        let run = finetune(kind.clone(), &out.backbone, &train, &test, &quick(0)).unwrap();
        let init = build_variant(kind, &out.backbone, 3, &mut Rng::new(0).fork(0)).unwrap();
        assert_eq!(run.model, init);
        assert_eq!(run.result.top1, evaluate_top1(&init, &out.backbone, &test).unwrap());
        // zero head: every prediction is class 0
        assert!((run.result.top1 - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn empty_and_mismatched_data_rejected() {
        let out = pretrain_toy(&bb_config(), &source(2, Split::Train), &quick(0)).unwrap();
        let empty = Dataset::new(vec![], vec![], 3).unwrap();
        let m = build_variant(VariantKind::LinearProbe, &out.backbone, 3, &mut Rng::new(0)).unwrap();
        assert!(matches!(evaluate_top1(&m, &out.backbone, &empty), Err(Error::Data(_))));
        let train = source(2, Split::Train);
        assert!(matches!(
            finetune(VariantKind::LinearProbe, &out.backbone, &empty, &train, &quick(1)),
            Err(Error::Data(_))
        ));
        let wrong = Dataset::new(vec![Tensor::zeros(&[1, 4, 4])], vec![0], 3).unwrap();
        assert!(matches!(evaluate_top1(&m, &out.backbone, &wrong), Err(Error::Data(_))));
    }

    #[test]
    fn divergence_reports_step() {
        let data = source(4, Split::Train);
        let cfg = TrainConfig {
            lr: 1e30,
            warmup_frac: 0.0,
            ..quick(5)
        };
        match pretrain_toy(&bb_config(), &data, &cfg) {
            Err(Error::Training { step, .. }) => assert!(step < 5),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.train_top1)),
        }
    }
}
