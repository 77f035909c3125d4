//! A small pre-LN vision transformer used as the frozen foundation model.
//!
//! Images are split into non-overlapping square patches, linearly embedded,
//! prefixed with a class token and offset by learned positional embeddings.
//! Each of the `L` blocks computes
//!
//! ```text
//! x' = x + MHA(LN1(x))
//! y  = x' + W2 · GELU(W1 · LN2(x') + b1) + b2
//! ```
//!
//! and the pooled feature is the final-LN class token. A [`BlockHook`] may
//! add a correction to every block input; the forward pass then feeds block
//! `i` with `z_i + hook(i, z_i)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{CheckpointError, Error, Result};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::{s, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_side: usize,
    pub channels: usize,
    pub patch: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes_pretrain: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_side: 16,
            channels: 1,
            patch: 4,
            d: 32,
            layers: 12,
            heads: 4,
            mlp_ratio: 4,
            num_classes_pretrain: 10,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if [self.image_side, self.channels, self.patch, self.d, self.heads, self.mlp_ratio]
            .contains(&0)
        {
            return bad(format!("backbone extents must be positive: {self:?}"));
        }
        if self.layers < 1 {
            return bad("backbone needs at least one block".into());
        }
        if !self.image_side.is_multiple_of(self.patch) {
            return bad(format!(
                "patch {} does not divide image side {}",
                self.patch, self.image_side
            ));
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by {} heads", self.d, self.heads));
        }
        if self.num_classes_pretrain < 2 {
            return bad("pretraining needs at least two classes".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch
    }

    /// Tokens per image, class token included.
    pub fn seq_len(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_side * self.image_side
    }

    pub fn hidden(&self) -> usize {
        self.d * self.mlp_ratio
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T: Scalar = f32> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1",
    "w2", "b2",
];

impl<T: Scalar> Block<T> {
    fn init(cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let d = cfg.d;
        let h = cfg.hidden();
        let mut lin = |rows: usize, cols: usize| rng.normal_tensor(&[rows, cols], 0.0, (1.0 / rows as f64).sqrt());
        Block {
            ln1_g: Tensor::ones(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: lin(d, d),
            bq: Tensor::zeros(&[d]),
            wk: lin(d, d),
            bk: Tensor::zeros(&[d]),
            wv: lin(d, d),
            bv: Tensor::zeros(&[d]),
            wo: lin(d, d),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::ones(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w1: lin(d, h),
            b1: Tensor::zeros(&[h]),
            w2: lin(h, d),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor<T>; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }

    fn from_tensors(mut ts: impl Iterator<Item = Tensor<T>>) -> Self {
        let mut next = || ts.next().expect("block tensor count");
        Block {
            ln1_g: next(),
            ln1_b: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2_g: next(),
            ln2_b: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        }
    }
}

/// Linear classification head `features · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Head<T> {
    /// Zero-initialized head: every class scores equally until trained.
    pub fn zeros(d: usize, classes: usize) -> Self {
        Head {
            weight: Tensor::zeros(&[d, classes]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundHead {
        BoundHead {
            weight: g.param(self.weight.clone()),
            bias: g.param(self.bias.clone()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Head<U> {
        Head {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T: Scalar> ParamSet<T> for Head<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub weight: Var,
    pub bias: Var,
}

impl BoundHead {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.weight, self.bias]
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let logits = g.matmul(features, self.weight)?;
        g.add(logits, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Scalar = f32> {
    pub config: BackboneConfig,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub cls: Tensor<T>,
    pub pos: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_g: Tensor<T>,
    pub final_b: Tensor<T>,
    frozen: bool,
}

/// Per-block input correction. Returns `z̃_i` for block input `z_i`
/// (rows × d); the block then runs on `z_i + z̃_i`.
pub trait BlockHook<T: Scalar> {
    fn adjust(&self, g: &mut Graph<T>, layer: usize, z: Var) -> Result<Var>;
}

/// Graph handles for one forward pass of a backbone.
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    pub config: BackboneConfig,
    patch_w: Var,
    patch_b: Var,
    cls: Var,
    pos: Var,
    blocks: Vec<[Var; 16]>,
    final_g: Var,
    final_b: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Pooled class-token features after the final LayerNorm, `batch × d`.
    pub features: Var,
    /// Block inputs `z_1..z_L` before any hook correction, `(batch·n) × d`.
    pub intermediates: Vec<Var>,
    /// Attention probabilities, indexed `[block][image * heads + head]`.
    pub attention: Vec<Vec<Var>>,
}

impl<T: Scalar> Backbone<T> {
    /// Randomly initialized, trainable backbone.
    pub fn init(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let patch_w = rng.normal_tensor(
            &[config.patch_dim(), d],
            0.0,
            (1.0 / config.patch_dim() as f64).sqrt(),
        );
        let cls = rng.normal_tensor(&[1, d], 0.0, 0.02);
        let pos = rng.normal_tensor(&[config.seq_len(), d], 0.0, 0.02);
        let blocks = (0..config.layers).map(|_| Block::init(&config, rng)).collect();
        Ok(Backbone {
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            cls,
            pos,
            blocks,
            final_g: Tensor::ones(&[d]),
            final_b: Tensor::zeros(&[d]),
            config,
            frozen: false,
        })
    }

    /// Marks every backbone parameter non-trainable. Frozen parameters are
    /// bound as constants and never reach an optimizer.
    pub fn freeze_all(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        let tensors = self.named_tensors().into_iter().map(|(_, t)| t.cast()).collect();
        Backbone::<U>::from_ordered(self.config.clone(), tensors, self.frozen)
            .expect("same layout")
    }

    /// Rebuilds a backbone from tensors in [`ParamSet::named_tensors`] order.
    pub(crate) fn from_ordered(config: BackboneConfig, tensors: Vec<Tensor<T>>, frozen: bool) -> Result<Self> {
        let expected = 6 + 16 * config.layers;
        if tensors.len() != expected {
            return Err(Error::dim("backbone tensors", &[expected], &[tensors.len()]));
        }
        let mut it = tensors.into_iter();
        let patch_w = it.next().unwrap();
        let patch_b = it.next().unwrap();
        let cls = it.next().unwrap();
        let pos = it.next().unwrap();
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(Block::from_tensors(it.by_ref().take(16)));
        }
        let final_g = it.next().unwrap();
        let final_b = it.next().unwrap();
        let bb = Backbone {
            config,
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            final_g,
            final_b,
            frozen,
        };
        let reference = Backbone::<T>::shapes_for(&bb.config);
        for ((name, t), shape) in bb.named_tensors().iter().zip(reference) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(bb)
    }

    fn shapes_for(c: &BackboneConfig) -> Vec<Vec<usize>> {
        let (d, h) = (c.d, c.hidden());
        let mut shapes = vec![vec![c.patch_dim(), d], vec![d], vec![1, d], vec![c.seq_len(), d]];
        for _ in 0..c.layers {
            shapes.extend([
                vec![d], vec![d], vec![d, d], vec![d], vec![d, d], vec![d], vec![d, d], vec![d],
                vec![d, d], vec![d], vec![d], vec![d], vec![d, h], vec![h], vec![h, d], vec![d],
            ]);
        }
        shapes.extend([vec![d], vec![d]]);
        shapes
    }

    /// Registers the backbone on `g`; parameters require gradients only
    /// while the backbone is not frozen.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundBackbone {
        let vars = self.bind_leaves(g, !self.frozen);
        let mut it = vars.into_iter();
        let mut next = || it.next().unwrap();
        let patch_w = next();
        let patch_b = next();
        let cls = next();
        let pos = next();
        let blocks = (0..self.config.layers)
            .map(|_| std::array::from_fn(|_| next()))
            .collect();
        BoundBackbone {
            config: self.config.clone(),
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            final_g: next(),
            final_b: next(),
        }
    }

    /// Eager forward of one image: `(features [d], intermediates)`.
    pub fn features(&self, image: &Tensor<T>, hook: Option<&dyn BlockHook<T>>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let tokens = bound.patch_embed(&mut g, image)?;
        let out = bound.forward(&mut g, tokens, 1, hook)?;
        let d = self.config.d;
        let feats = g.value(out.features).clone().reshape(&[d])?;
        let inter = out.intermediates.iter().map(|&v| g.value(v).clone()).collect();
        Ok((feats, inter))
    }
}

impl<T: Scalar> ParamSet<T> for Backbone<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("patch_w".to_string(), &self.patch_w),
            ("patch_b".to_string(), &self.patch_b),
            ("cls".to_string(), &self.cls),
            ("pos".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (field, t) in BLOCK_FIELDS.iter().zip(b.tensors()) {
                out.push((format!("blocks.{i}.{field}"), t));
            }
        }
        out.push(("final_g".to_string(), &self.final_g));
        out.push(("final_b".to_string(), &self.final_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls, &mut self.pos];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_g);
        out.push(&mut self.final_b);
        out
    }
}

/// Rearranges a `C×H×W` image into `patches × (C·p·p)` rows, patches in
/// row-major grid order.
pub fn extract_patches<T: Scalar>(image: &Tensor<T>, cfg: &BackboneConfig) -> Result<Tensor<T>> {
    let side = cfg.image_side;
    let expected = [cfg.channels, side, side];
    if image.shape() != expected {
        return Err(Error::dim("patch_embed", image.shape(), &expected));
    }
    let (p, grid) = (cfg.patch, cfg.grid());
    let px = image.data();
    let mut out = Vec::with_capacity(grid * grid * cfg.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..cfg.channels {
                for y in 0..p {
                    let row = c * side * side + (gy * p + y) * side + gx * p;
                    out.extend_from_slice(&px[row..row + p]);
                }
            }
        }
    }
    Tensor::new(&[grid * grid, cfg.patch_dim()], out)
}

impl BoundBackbone {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.patch_w, self.patch_b, self.cls, self.pos];
        for b in &self.blocks {
            v.extend_from_slice(b);
        }
        v.push(self.final_g);
        v.push(self.final_b);
        v
    }

    /// Tokens for one image: `n × d` with the class token first.
    pub fn patch_embed<T: Scalar>(&self, g: &mut Graph<T>, image: &Tensor<T>) -> Result<Var> {
        let patches = g.constant(extract_patches(image, &self.config)?);
        let emb = g.matmul(patches, self.patch_w)?;
        let emb = g.add(emb, self.patch_b)?;
        let tokens = g.concat_rows(&[self.cls, emb])?;
        g.add(tokens, self.pos)
    }

    /// Tokens for a batch, stacked image after image: `(batch·n) × d`.
    pub fn embed_batch<T: Scalar>(&self, g: &mut Graph<T>, images: &[&Tensor<T>]) -> Result<Var> {
        let parts = images
            .iter()
            .map(|img| self.patch_embed(g, img))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&parts)
    }

    /// Runs all blocks over `batch` stacked token sequences.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        tokens: Var,
        batch: usize,
        hook: Option<&dyn BlockHook<T>>,
    ) -> Result<ForwardOutput> {
        let n = self.config.seq_len();
        let d = self.config.d;
        if g.shape(tokens) != [batch * n, d] {
            return Err(Error::dim("backbone_forward", g.shape(tokens), &[batch * n, d]));
        }
        let mut z = tokens;
        let mut intermediates = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            intermediates.push(z);
            let input = match hook {
                Some(h) => {
                    let delta = h.adjust(g, i, z)?;
                    if g.shape(delta) != g.shape(z) {
                        return Err(Error::dim("block hook", g.shape(delta), g.shape(z)));
                    }
                    g.add(z, delta)?
                }
                None => z,
            };
            let (out, probs) = self.block_forward(g, block, input, batch)?;
            attention.push(probs);
            z = out;
        }
        let cls_rows = (0..batch)
            .map(|b| g.slice_rows(z, b * n, 1))
            .collect::<Result<Vec<_>>>()?;
        let pooled = g.concat_rows(&cls_rows)?;
        let features = g.layer_norm(pooled, self.final_g, self.final_b, s(LN_EPS))?;
        Ok(ForwardOutput {
            features,
            intermediates,
            attention,
        })
    }

    fn block_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var; 16],
        x: Var,
        batch: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] = *p;
        let n = self.config.seq_len();
        let heads = self.config.heads;
        let dh = self.config.d / heads;
        let inv_sqrt = s::<T>(1.0 / (dh as f64).sqrt());

        let h = g.layer_norm(x, ln1_g, ln1_b, s(LN_EPS))?;
        let q = affine(g, h, wq, bq)?;
        let k = affine(g, h, wk, bk)?;
        let v = affine(g, h, wv, bv)?;

        let mut probs = Vec::with_capacity(batch * heads);
        let mut per_image = Vec::with_capacity(batch);
        for b in 0..batch {
            let qb = g.slice_rows(q, b * n, n)?;
            let kb = g.slice_rows(k, b * n, n)?;
            let vb = g.slice_rows(v, b * n, n)?;
            let mut head_out = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice_cols(qb, hd * dh, dh)?;
                let kh = g.slice_cols(kb, hd * dh, dh)?;
                let vh = g.slice_cols(vb, hd * dh, dh)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, inv_sqrt);
                let a = g.softmax_rows(scores)?;
                probs.push(a);
                head_out.push(g.matmul(a, vh)?);
            }
            per_image.push(g.concat_cols(&head_out)?);
        }
        let attn = g.concat_rows(&per_image)?;
        let attn = affine(g, attn, wo, bo)?;
        let x = g.add(x, attn)?;

        let h = g.layer_norm(x, ln2_g, ln2_b, s(LN_EPS))?;
        let h = affine(g, h, w1, b1)?;
        let h = g.gelu(h);
        let h = affine(g, h, w2, b2)?;
        Ok((g.add(x, h)?, probs))
    }
}

fn affine<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

impl Backbone<f32> {
    /// Adds config echo and tensors under the `backbone` namespace.
    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        let c = &self.config;
        ckpt.set_meta("backbone.image_side", c.image_side);
        ckpt.set_meta("backbone.channels", c.channels);
        ckpt.set_meta("backbone.patch", c.patch);
        ckpt.set_meta("backbone.d", c.d);
        ckpt.set_meta("backbone.layers", c.layers);
        ckpt.set_meta("backbone.heads", c.heads);
        ckpt.set_meta("backbone.mlp_ratio", c.mlp_ratio);
        ckpt.set_meta("backbone.num_classes_pretrain", c.num_classes_pretrain);
        ckpt.set_meta("backbone.frozen", self.frozen);
        for (name, t) in self.named_tensors() {
            ckpt.push_tensor(format!("backbone.{name}"), t.clone());
        }
    }

    pub fn read_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = BackboneConfig {
            image_side: ckpt.meta_parse("backbone.image_side")?,
            channels: ckpt.meta_parse("backbone.channels")?,
            patch: ckpt.meta_parse("backbone.patch")?,
            d: ckpt.meta_parse("backbone.d")?,
            layers: ckpt.meta_parse("backbone.layers")?,
            heads: ckpt.meta_parse("backbone.heads")?,
            mlp_ratio: ckpt.meta_parse("backbone.mlp_ratio")?,
            num_classes_pretrain: ckpt.meta_parse("backbone.num_classes_pretrain")?,
        };
        config.validate()?;
        let frozen = ckpt.meta_parse("backbone.frozen")?;
        let names: Vec<String> = Backbone::<f32>::init(config.clone(), &mut Rng::new(0))?
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let tensors = names
            .iter()
            .map(|n| {
                ckpt.tensor(&format!("backbone.{n}"))
                    .cloned()
                    .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor backbone.{n}")).into())
            })
            .collect::<Result<Vec<_>>>()?;
        Backbone::from_ordered(config, tensors, frozen)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("kind", "backbone");
        self.write_checkpoint(&mut ckpt);
        ckpt.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::read_checkpoint(&Checkpoint::load(path)?)
    }
}
