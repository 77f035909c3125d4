//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::sas::SasConfig;
use crate::tensor::Tensor;
use crate::variants::{build_variant, VariantKind, VariantModel};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error used by every gradient check:
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of a scalar function against central
/// differences `(f(x+h) - f(x-h)) / 2h` at every coordinate of `x`, and
/// returns the maximum relative error.
///
/// `f` receives a fresh graph and the leaf holding `x` and must return a
/// single-element node.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g.grad(xv).expect("x is a param");

    let eval = |point: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(point);
        let out = f(&mut g, xv)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    if !worst.is_finite() {
        return Err(Error::Training {
            step: 0,
            reason: "non-finite value during gradient check".into(),
        });
    }
    Ok(worst)
}

/// Outcome of checking every trainable scalar of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub scalars: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst scalar.
    pub worst: String,
}

fn batch_loss(
    g: &mut Graph<f64>,
    backbone: &Backbone<f64>,
    model: &VariantModel<f64>,
    images: &[&Tensor<f64>],
    labels: &[usize],
) -> Result<(Var, Vec<Var>)> {
    let bb = backbone.bind(g);
    let bound = model.bind(g)?;
    let logits = VariantModel::forward(g, &bb, &bound, images)?;
    Ok((g.softmax_cross_entropy(logits, labels)?, bound.vars))
}

/// Central differences of the mean cross-entropy loss against the analytic
/// gradient, for every trainable scalar of `model` (adapter and head).
pub fn check_model_gradients(
    backbone: &Backbone<f64>,
    model: &VariantModel<f64>,
    images: &[Tensor<f64>],
    labels: &[usize],
    h: f64,
) -> Result<GradReport> {
    let refs: Vec<&Tensor<f64>> = images.iter().collect();
    let mut g = Graph::new();
    let (loss, vars) = batch_loss(&mut g, backbone, model, &refs, labels)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).ok_or_else(|| Error::Contract("parameter bound as constant".into())))
        .collect::<Result<_>>()?;

    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let eval = |m: &VariantModel<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = batch_loss(&mut g, backbone, m, &refs, labels)?;
        Ok(g.value(loss).item())
    };
    let mut report = GradReport {
        scalars: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut probe = model.clone();
    for (t, name) in names.iter().enumerate() {
        for i in 0..analytic[t].numel() {
            let original = probe.tensors_mut()[t].data()[i];
            probe.tensors_mut()[t].data_mut()[i] = original + h;
            let plus = eval(&probe)?;
            probe.tensors_mut()[t].data_mut()[i] = original - h;
            let minus = eval(&probe)?;
            probe.tensors_mut()[t].data_mut()[i] = original;
            let err = relative_error(analytic[t].data()[i], (plus - minus) / (2.0 * h));
            if !err.is_finite() {
                return Err(Error::Training {
                    step: 0,
                    reason: format!("non-finite gradient check at {name}[{i}]"),
                });
            }
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = err.max(report.max_rel_err);
                report.worst = format!("{name}[{i}]");
            }
            report.scalars += 1;
        }
    }
    Ok(report)
}

/// Backbone, model, images and labels for a gradient check.
pub type CheckSetup = (Backbone<f64>, VariantModel<f64>, Vec<Tensor<f64>>, Vec<usize>);

/// f64 model for a gradient check: frozen random backbone, full adapter
/// and head with randomized parameters (so no gradient is trivially zero),
/// and a random batch of `batch` images over `classes` classes.
pub fn model_setup(
    cfg: BackboneConfig,
    sas: SasConfig,
    batch: usize,
    classes: usize,
    seed: u64,
) -> Result<CheckSetup> {
    let root = Rng::new(seed);
    let shape = [cfg.channels, cfg.image_side, cfg.image_side];
    let mut backbone = Backbone::<f64>::init(cfg, &mut root.fork(0))?;
    backbone.freeze_all();
    let mut model = build_variant(VariantKind::FullSas(sas), &backbone, classes, &mut root.fork(1))?;
    let mut rng = root.fork(2);
    for t in model.tensors_mut() {
        *t = rng.normal_tensor(t.shape(), 0.0, 0.5);
    }
    let images = (0..batch).map(|_| rng.normal_tensor(&shape, 0.0, 1.0)).collect();
    let labels = (0..batch).map(|_| rng.below(classes)).collect();
    Ok((backbone, model, images, labels))
}

/// The small check configuration: an 8×8 single-channel image, d = 16,
/// L = 3, d' = 4, r = 2, r' = 2, M = 2, batch 2, three classes.
pub fn small_model_setup(seed: u64) -> Result<CheckSetup> {
    let cfg = BackboneConfig {
        image_side: 8,
        channels: 1,
        patch: 4,
        d: 16,
        layers: 3,
        heads: 2,
        mlp_ratio: 2,
        num_classes_pretrain: 3,
    };
    let sas = SasConfig {
        d: 16,
        layers: 3,
        d_prime: 4,
        r: 2,
        r_prime: 2,
        m: 2,
    };
    model_setup(cfg, sas, 2, 3, seed)
}
