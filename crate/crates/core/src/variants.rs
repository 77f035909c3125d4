//! The ablation ladder: linear probing, per-layer biases, shared module
//! only, shared module plus biases, and the full shared + layer-specific
//! adapter. All variants keep the backbone frozen, train their own head,
//! and inject their correction at the same point (every block input).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, BlockHook, BoundBackbone, BoundHead, Head};
use crate::checkpoint::Checkpoint;
use crate::error::{CheckpointError, Error, Result};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::sas::{BoundSas, BoundShared, SasConfig, SasParams, SharedModule};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    LinearProbe,
    BiasOnly,
    SharedOnly { d_prime: usize },
    SharedPlusBias { d_prime: usize },
    FullSas(SasConfig),
}

impl VariantKind {
    pub const NAMES: [&'static str; 5] = [
        "linear_probe",
        "bias_only",
        "shared_only",
        "shared_plus_bias",
        "full_sas",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            VariantKind::LinearProbe => "linear_probe",
            VariantKind::BiasOnly => "bias_only",
            VariantKind::SharedOnly { .. } => "shared_only",
            VariantKind::SharedPlusBias { .. } => "shared_plus_bias",
            VariantKind::FullSas(_) => "full_sas",
        }
    }

    /// Builds a kind from its name; shared variants take `d'` from `sas`.
    pub fn from_name(name: &str, sas: &SasConfig) -> Result<Self> {
        Ok(match name {
            "linear_probe" => VariantKind::LinearProbe,
            "bias_only" => VariantKind::BiasOnly,
            "shared_only" => VariantKind::SharedOnly {
                d_prime: sas.d_prime,
            },
            "shared_plus_bias" => VariantKind::SharedPlusBias {
                d_prime: sas.d_prime,
            },
            "full_sas" => VariantKind::FullSas(sas.clone()),
            other => {
                return Err(Error::Config(format!(
                    "unknown variant {other:?}; expected one of {:?}",
                    Self::NAMES
                )))
            }
        })
    }

    /// Short label including the adapter hyperparameters, e.g.
    /// `full_sas(d'=8 r=4 r'=8 M=6)`.
    pub fn label(&self) -> String {
        match self {
            VariantKind::LinearProbe | VariantKind::BiasOnly => self.name().to_string(),
            VariantKind::SharedOnly { d_prime } | VariantKind::SharedPlusBias { d_prime } => {
                format!("{}(d'={d_prime})", self.name())
            }
            VariantKind::FullSas(c) => format!(
                "full_sas(d'={} r={} r'={} M={})",
                c.d_prime, c.r, c.r_prime, c.m
            ),
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// One additive bias vector per block input, zero at init.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasParams<T: Scalar = f32> {
    pub biases: Vec<Tensor<T>>,
}

impl<T: Scalar> BiasParams<T> {
    pub fn zeros(layers: usize, d: usize) -> Self {
        BiasParams {
            biases: (0..layers).map(|_| Tensor::zeros(&[d])).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Adapter<T: Scalar = f32> {
    None,
    Bias(BiasParams<T>),
    Shared(SharedModule<T>),
    SharedBias(SharedModule<T>, BiasParams<T>),
    Sas(SasParams<T>),
}

impl<T: Scalar> Adapter<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            Adapter::None => vec![],
            Adapter::Bias(b) => bias_named(b),
            Adapter::Shared(s) => prefixed("shared", s.named_tensors()),
            Adapter::SharedBias(s, b) => {
                let mut v = prefixed("shared", s.named_tensors());
                v.extend(bias_named(b));
                v
            }
            Adapter::Sas(p) => prefixed("sas", p.named_tensors()),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Adapter::None => vec![],
            Adapter::Bias(b) => b.biases.iter_mut().collect(),
            Adapter::Shared(s) => s.tensors_mut(),
            Adapter::SharedBias(s, b) => {
                let mut v = s.tensors_mut();
                v.extend(b.biases.iter_mut());
                v
            }
            Adapter::Sas(p) => p.tensors_mut(),
        }
    }

    fn cast<U: Scalar>(&self) -> Adapter<U> {
        let cast_bias = |b: &BiasParams<T>| BiasParams {
            biases: b.biases.iter().map(|t| t.cast()).collect(),
        };
        match self {
            Adapter::None => Adapter::None,
            Adapter::Bias(b) => Adapter::Bias(cast_bias(b)),
            Adapter::Shared(s) => Adapter::Shared(s.cast()),
            Adapter::SharedBias(s, b) => Adapter::SharedBias(s.cast(), cast_bias(b)),
            Adapter::Sas(p) => Adapter::Sas(p.cast()),
        }
    }
}

fn bias_named<T: Scalar>(b: &BiasParams<T>) -> Vec<(String, &Tensor<T>)> {
    b.biases
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("bias.{i}"), t))
        .collect()
}

fn prefixed<'a, T: Scalar>(prefix: &str, v: Vec<(String, &'a Tensor<T>)>) -> Vec<(String, &'a Tensor<T>)> {
    v.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// A trainable head plus the variant's adapter. The backbone is held
/// separately and always bound frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantModel<T: Scalar = f32> {
    pub kind: VariantKind,
    pub head: Head<T>,
    pub adapter: Adapter<T>,
}

/// Adapter handles for one forward pass.
#[derive(Clone, Debug)]
pub enum BoundAdapter {
    None,
    Bias(Vec<Var>),
    Shared(BoundShared),
    SharedBias(BoundShared, Vec<Var>),
    Sas(BoundSas),
}

impl<T: Scalar> BlockHook<T> for BoundAdapter {
    fn adjust(&self, g: &mut Graph<T>, layer: usize, z: Var) -> Result<Var> {
        let bias = |biases: &[Var]| {
            biases.get(layer).copied().ok_or(Error::Index {
                what: "bias layer",
                index: layer,
                len: biases.len(),
            })
        };
        match self {
            BoundAdapter::None => Ok(g.constant(Tensor::zeros(g.shape(z)))),
            BoundAdapter::Bias(b) => {
                let b = bias(b)?;
                let zeros = g.constant(Tensor::zeros(g.shape(z)));
                g.add(zeros, b)
            }
            BoundAdapter::Shared(s) => s.forward(g, z),
            BoundAdapter::SharedBias(s, b) => {
                let b = bias(b)?;
                let f = s.forward(g, z)?;
                g.add(f, b)
            }
            BoundAdapter::Sas(s) => s.adjust(g, layer, z),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundVariant {
    pub head: BoundHead,
    pub adapter: BoundAdapter,
    /// Every trainable leaf, in [`ParamSet::named_tensors`] order.
    pub vars: Vec<Var>,
}

/// Builds a variant on top of a frozen backbone. The head is zero-initialized
/// and every adapter starts at a zero correction, so all variants produce the
/// same logits at init.
pub fn build_variant<T: Scalar>(
    kind: VariantKind,
    backbone: &Backbone<T>,
    num_classes: usize,
    rng: &mut Rng,
) -> Result<VariantModel<T>> {
    if !backbone.is_frozen() {
        return Err(Error::Contract("variants require a frozen backbone".into()));
    }
    if num_classes < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    let d = backbone.config.d;
    let layers = backbone.config.layers;
    let check_d_prime = |dp: usize| {
        if dp == 0 {
            Err(Error::Config("d' must be positive".into()))
        } else {
            Ok(())
        }
    };
    let adapter = match &kind {
        VariantKind::LinearProbe => Adapter::None,
        VariantKind::BiasOnly => Adapter::Bias(BiasParams::zeros(layers, d)),
        VariantKind::SharedOnly { d_prime } => {
            check_d_prime(*d_prime)?;
            Adapter::Shared(SharedModule::init(d, *d_prime, rng))
        }
        VariantKind::SharedPlusBias { d_prime } => {
            check_d_prime(*d_prime)?;
            Adapter::SharedBias(SharedModule::init(d, *d_prime, rng), BiasParams::zeros(layers, d))
        }
        VariantKind::FullSas(cfg) => {
            if cfg.d != d || cfg.layers != layers {
                return Err(Error::Config(format!(
                    "adapter shape d={} L={} does not match backbone d={d} L={layers}",
                    cfg.d, cfg.layers
                )));
            }
            Adapter::Sas(SasParams::init(cfg.clone(), rng)?)
        }
    };
    Ok(VariantModel {
        kind,
        head: Head::zeros(d, num_classes),
        adapter,
    })
}

impl<T: Scalar> VariantModel<T> {
    /// `(adapter_count, head_count)` by enumeration of trainable scalars.
    pub fn trainable_params(&self) -> (usize, usize) {
        let adapter = self.adapter.named_tensors().iter().map(|(_, t)| t.numel()).sum();
        (adapter, self.head.num_scalars())
    }

    pub fn num_classes(&self) -> usize {
        self.head.classes()
    }

    pub fn cast<U: Scalar>(&self) -> VariantModel<U> {
        VariantModel {
            kind: self.kind.clone(),
            head: self.head.cast(),
            adapter: self.adapter.cast(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Result<BoundVariant> {
        let head = self.head.bind(g);
        let adapter = match &self.adapter {
            Adapter::None => BoundAdapter::None,
            Adapter::Bias(b) => BoundAdapter::Bias(b.biases.iter().map(|t| g.param(t.clone())).collect()),
            Adapter::Shared(s) => BoundAdapter::Shared(s.bind(g)),
            Adapter::SharedBias(s, b) => {
                let s = s.bind(g);
                BoundAdapter::SharedBias(s, b.biases.iter().map(|t| g.param(t.clone())).collect())
            }
            Adapter::Sas(p) => BoundAdapter::Sas(p.bind(g)?),
        };
        let mut vars = head.vars();
        match &adapter {
            BoundAdapter::None => {}
            BoundAdapter::Bias(b) => vars.extend(b),
            BoundAdapter::Shared(s) => vars.extend(s.vars()),
            BoundAdapter::SharedBias(s, b) => {
                vars.extend(s.vars());
                vars.extend(b);
            }
            BoundAdapter::Sas(s) => vars.extend(s.vars()),
        }
        Ok(BoundVariant { head, adapter, vars })
    }

    /// Logits `batch × classes` recorded on `g`.
    pub fn forward(
        g: &mut Graph<T>,
        backbone: &BoundBackbone,
        variant: &BoundVariant,
        images: &[&Tensor<T>],
    ) -> Result<Var> {
        let tokens = backbone.embed_batch(g, images)?;
        let hook: Option<&dyn BlockHook<T>> = match variant.adapter {
            BoundAdapter::None => None,
            ref a => Some(a),
        };
        let out = backbone.forward(g, tokens, images.len(), hook)?;
        variant.head.forward(g, out.features)
    }

    /// Eager logits for a batch of images.
    pub fn logits(&self, backbone: &Backbone<T>, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bb = backbone.bind(&mut g);
        let bound = self.bind(&mut g)?;
        let logits = Self::forward(&mut g, &bb, &bound, images)?;
        Ok(g.value(logits).clone())
    }

    /// Argmax class per image; ties resolve to the lowest class index.
    pub fn predict(&self, backbone: &Backbone<T>, images: &[&Tensor<T>]) -> Result<Vec<usize>> {
        let logits = self.logits(backbone, images)?;
        Ok(argmax_rows(&logits))
    }
}

/// Row-wise argmax with ties broken toward the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

impl<T: Scalar> ParamSet<T> for VariantModel<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = prefixed("head", self.head.named_tensors());
        v.extend(self.adapter.named_tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.head.tensors_mut();
        v.extend(self.adapter.tensors_mut());
        v
    }
}

impl VariantModel<f32> {
    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("variant.kind", self.kind.name());
        ckpt.set_meta("variant.classes", self.num_classes());
        match &self.kind {
            VariantKind::SharedOnly { d_prime } | VariantKind::SharedPlusBias { d_prime } => {
                ckpt.set_meta("variant.d_prime", d_prime);
            }
            _ => {}
        }
        if let Adapter::Sas(p) = &self.adapter {
            // config echo plus tensors under the sas namespace
            p.write_checkpoint(ckpt, "sas");
        }
        for (name, t) in self.named_tensors() {
            if !name.starts_with("sas.") {
                ckpt.push_tensor(name, t.clone());
            }
        }
    }

    pub fn read_checkpoint(ckpt: &Checkpoint, backbone: &Backbone<f32>) -> Result<Self> {
        let name: String = ckpt.meta_parse("variant.kind")?;
        let classes: usize = ckpt.meta_parse("variant.classes")?;
        let kind = match name.as_str() {
            "full_sas" => VariantKind::FullSas(SasParams::read_checkpoint(ckpt, "sas")?.config),
            "shared_only" | "shared_plus_bias" => {
                let d_prime = ckpt.meta_parse("variant.d_prime")?;
                let cfg = SasConfig {
                    d_prime,
                    ..SasConfig::with_defaults(backbone.config.d, backbone.config.layers)
                };
                VariantKind::from_name(&name, &cfg)?
            }
            other => VariantKind::from_name(other, &SasConfig::with_defaults(1, 1))?,
        };
        let mut model = build_variant(kind, backbone, classes, &mut Rng::new(0))?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (n, slot) in names.iter().zip(model.tensors_mut()) {
            let t = ckpt
                .tensor(n)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor {n}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::dim("variant tensor", t.shape(), slot.shape()));
            }
            *slot = t.clone();
        }
        Ok(model)
    }
}

/// A fine-tuned model: frozen backbone plus variant, persisted together.
pub fn save_model(path: impl AsRef<std::path::Path>, backbone: &Backbone<f32>, model: &VariantModel<f32>) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    ckpt.set_meta("kind", "model");
    backbone.write_checkpoint(&mut ckpt);
    model.write_checkpoint(&mut ckpt);
    ckpt.save(path)
}

pub fn load_model(path: impl AsRef<std::path::Path>) -> Result<(Backbone<f32>, VariantModel<f32>)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.meta("kind") != Some("model") {
        return Err(CheckpointError::Malformed("not a fine-tuned model checkpoint".into()).into());
    }
    let backbone = Backbone::read_checkpoint(&ckpt)?;
    let model = VariantModel::read_checkpoint(&ckpt, &backbone)?;
    Ok((backbone, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::sas::param_count;

    fn tiny_backbone() -> Backbone<f32> {
        let cfg = BackboneConfig {
            image_side: 8,
            channels: 1,
            patch: 4,
            d: 8,
            layers: 4,
            heads: 2,
            mlp_ratio: 2,
            num_classes_pretrain: 3,
        };
        let mut bb = Backbone::init(cfg, &mut Rng::new(1)).unwrap();
        bb.freeze_all();
        bb
    }

    fn sas_cfg() -> SasConfig {
        SasConfig {
            d: 8,
            layers: 4,
            d_prime: 3,
            r: 2,
            r_prime: 2,
            m: 2,
        }
    }

    fn all_kinds() -> Vec<VariantKind> {
        VariantKind::NAMES
            .iter()
            .map(|n| VariantKind::from_name(n, &sas_cfg()).unwrap())
            .collect()
    }

    fn perturb(model: &mut VariantModel<f32>, seed: u64) {
        let mut rng = Rng::new(seed);
        for t in model.tensors_mut() {
            *t = rng.normal_tensor(t.shape(), 0.0, 0.5);
        }
    }

    #[test]
    fn requires_frozen_backbone() {
        let mut bb = tiny_backbone();
        let unfrozen = Backbone::<f32>::init(bb.config.clone(), &mut Rng::new(1)).unwrap();
        assert!(matches!(
            build_variant(VariantKind::LinearProbe, &unfrozen, 3, &mut Rng::new(0)),
            Err(Error::Contract(_))
        ));
        bb.freeze_all();
        assert!(build_variant(VariantKind::LinearProbe, &bb, 3, &mut Rng::new(0)).is_ok());
        let mut wrong = sas_cfg();
        wrong.layers = 5;
        assert!(matches!(
            build_variant(VariantKind::FullSas(wrong), &bb, 3, &mut Rng::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn all_variants_identical_at_init() {
        let bb = tiny_backbone();
        let mut rng = Rng::new(4);
        let imgs: Vec<Tensor<f32>> = (0..3).map(|_| rng.normal_tensor(&[1, 8, 8], 0.0, 1.0)).collect();
        let refs: Vec<&Tensor<f32>> = imgs.iter().collect();
        let shared_head = {
            let mut h = Head::<f32>::zeros(8, 3);
            h.weight = Rng::new(5).normal_tensor(&[8, 3], 0.0, 1.0);
            h
        };
        let mut outputs = Vec::new();
        for kind in all_kinds() {
            let mut m = build_variant(kind, &bb, 3, &mut Rng::new(6)).unwrap();
            m.head = shared_head.clone();
            outputs.push(m.logits(&bb, &refs).unwrap());
        }
        for o in &outputs[1..] {
            assert_eq!(o, &outputs[0]);
        }
    }

    #[test]
    fn trainable_counts() {
        let bb = tiny_backbone();
        let counts: Vec<(usize, usize)> = all_kinds()
            .into_iter()
            .map(|k| build_variant(k, &bb, 3, &mut Rng::new(0)).unwrap().trainable_params())
            .collect();
        let head = 8 * 3 + 3;
        assert_eq!(counts[0], (0, head));
        assert_eq!(counts[1], (4 * 8, head));
        assert_eq!(counts[2], (2 * 3 * 8, head));
        assert_eq!(counts[3], (2 * 3 * 8 + 4 * 8, head));
        assert_eq!(counts[4], (param_count(&sas_cfg()), head));
    }

    #[test]
    fn bound_vars_follow_param_order() {
        let bb = tiny_backbone();
        for kind in all_kinds() {
            let mut m = build_variant(kind, &bb, 3, &mut Rng::new(0)).unwrap();
            perturb(&mut m, 9);
            let mut g = Graph::new();
            let bound = m.bind(&mut g).unwrap();
            let named = m.named_tensors();
            assert_eq!(bound.vars.len(), named.len());
            for (v, (_, t)) in bound.vars.iter().zip(named) {
                assert_eq!(g.value(*v), t);
            }
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::<f32>::from_f64(&[3, 3], &[1., 1., 0., 0., 2., 2., 5., 5., 5.]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1, 0]);
    }

    #[test]
    fn model_checkpoint_roundtrip() {
        let bb = tiny_backbone();
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(2);
        let img = rng.normal_tensor::<f32>(&[1, 8, 8], 0.0, 1.0);
        for kind in all_kinds() {
            let mut m = build_variant(kind, &bb, 3, &mut Rng::new(0)).unwrap();
            perturb(&mut m, 3);
            let p = dir.path().join(format!("{}.ckpt", m.kind.name()));
            save_model(&p, &bb, &m).unwrap();
            let (bb2, m2) = load_model(&p).unwrap();
            assert_eq!(bb2, bb);
            assert_eq!(m2, m);
            assert_eq!(m.logits(&bb, &[&img]).unwrap(), m2.logits(&bb2, &[&img]).unwrap());
            let p2 = dir.path().join("again.ckpt");
            save_model(&p2, &bb2, &m2).unwrap();
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
        }
    }
}
