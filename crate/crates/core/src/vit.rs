//! A small pre-norm Vision Transformer.
//!
//! Layout: patch projection, a single class token prepended, learned
//! positional embeddings for every grid position, `depth` blocks of
//! `LN → MHSA → residual → LN → MLP → residual`, final LN, linear head on the
//! class token.
//!
//! Masked inputs are handled by dropping tokens: a forward pass given a
//! [`KeepSet`] expects only the kept patch tokens and gathers positional
//! embeddings at their original grid positions, so the sequence length (and
//! the compute) shrinks to `k + 1`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::KeepSet;
use crate::tensor::{Real, Tape, Tensor, Var};

pub const LAYERNORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

fn default_mlp_ratio() -> f64 {
    4.0
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::param(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::param(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::param("mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens N.
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    /// `in × out`
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub norm1: Norm<P>,
    pub qkv: Linear<P>,
    pub proj: Linear<P>,
    pub norm2: Norm<P>,
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
}

/// The parameter layout of a ViT, generic over what is stored per parameter:
/// tensors for a model ([`ViTParams`]), tape handles while a forward pass is
/// being recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<P> {
    pub patch: Linear<P>,
    pub cls_token: P,
    pub pos_embed: P,
    pub blocks: Vec<Block<P>>,
    pub norm: Norm<P>,
    pub head: Linear<P>,
}

pub type ViTParams<T> = Weights<Tensor<T>>;

impl<P> Linear<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }
}

impl<P> Norm<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Norm<Q> {
        Norm {
            gamma: f(&format!("{prefix}.gamma"), &self.gamma),
            beta: f(&format!("{prefix}.beta"), &self.beta),
        }
    }
}

impl<P> Weights<P> {
    /// Applies `f` to every parameter in canonical order, producing a
    /// structurally identical container.
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> Weights<Q> {
        let patch = self.patch.map("patch", &mut f);
        let cls_token = f("cls_token", &self.cls_token);
        let pos_embed = f("pos_embed", &self.pos_embed);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let p = format!("blocks.{i}");
                Block {
                    norm1: b.norm1.map(&format!("{p}.norm1"), &mut f),
                    qkv: b.qkv.map(&format!("{p}.qkv"), &mut f),
                    proj: b.proj.map(&format!("{p}.proj"), &mut f),
                    norm2: b.norm2.map(&format!("{p}.norm2"), &mut f),
                    fc1: b.fc1.map(&format!("{p}.fc1"), &mut f),
                    fc2: b.fc2.map(&format!("{p}.fc2"), &mut f),
                }
            })
            .collect();
        let norm = self.norm.map("norm", &mut f);
        let head = self.head.map("head", &mut f);
        Weights {
            patch,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
        }
    }

    /// Parameters with their names, in canonical order.
    pub fn entries(&self) -> Vec<(String, &P)> {
        fn push_linear<'a, P>(out: &mut Vec<(String, &'a P)>, prefix: &str, l: &'a Linear<P>) {
            out.push((format!("{prefix}.weight"), &l.weight));
            out.push((format!("{prefix}.bias"), &l.bias));
        }
        let mut out: Vec<(String, &P)> = Vec::new();
        push_linear(&mut out, "patch", &self.patch);
        out.push(("cls_token".into(), &self.cls_token));
        out.push(("pos_embed".into(), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.norm1.gamma"), &b.norm1.gamma));
            out.push((format!("{p}.norm1.beta"), &b.norm1.beta));
            push_linear(&mut out, &format!("{p}.qkv"), &b.qkv);
            push_linear(&mut out, &format!("{p}.proj"), &b.proj);
            out.push((format!("{p}.norm2.gamma"), &b.norm2.gamma));
            out.push((format!("{p}.norm2.beta"), &b.norm2.beta));
            push_linear(&mut out, &format!("{p}.fc1"), &b.fc1);
            push_linear(&mut out, &format!("{p}.fc2"), &b.fc2);
        }
        out.push(("norm.gamma".into(), &self.norm.gamma));
        out.push(("norm.beta".into(), &self.norm.beta));
        push_linear(&mut out, "head", &self.head);
        out
    }

    /// Mutable parameters in the same order as [`Weights::entries`].
    pub fn values_mut(&mut self) -> Vec<&mut P> {
        let mut out: Vec<&mut P> = vec![
            &mut self.patch.weight,
            &mut self.patch.bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.norm1.gamma,
                &mut b.norm1.beta,
                &mut b.qkv.weight,
                &mut b.qkv.bias,
                &mut b.proj.weight,
                &mut b.proj.bias,
                &mut b.norm2.gamma,
                &mut b.norm2.beta,
                &mut b.fc1.weight,
                &mut b.fc1.bias,
                &mut b.fc2.weight,
                &mut b.fc2.bias,
            ]);
        }
        out.extend([
            &mut self.norm.gamma,
            &mut self.norm.beta,
            &mut self.head.weight,
            &mut self.head.bias,
        ]);
        out
    }
}

/// Expected `(name, shape)` list for a configuration, in canonical order.
pub fn param_shapes(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let template = Weights {
        patch: Linear {
            weight: vec![cfg.patch_dim(), d],
            bias: vec![d],
        },
        cls_token: vec![1, d],
        pos_embed: vec![cfg.num_patches() + 1, d],
        blocks: (0..cfg.depth)
            .map(|_| Block {
                norm1: Norm {
                    gamma: vec![d],
                    beta: vec![d],
                },
                qkv: Linear {
                    weight: vec![d, 3 * d],
                    bias: vec![3 * d],
                },
                proj: Linear {
                    weight: vec![d, d],
                    bias: vec![d],
                },
                norm2: Norm {
                    gamma: vec![d],
                    beta: vec![d],
                },
                fc1: Linear {
                    weight: vec![d, cfg.mlp_hidden()],
                    bias: vec![cfg.mlp_hidden()],
                },
                fc2: Linear {
                    weight: vec![cfg.mlp_hidden(), d],
                    bias: vec![d],
                },
            })
            .collect(),
        norm: Norm {
            gamma: vec![d],
            beta: vec![d],
        },
        head: Linear {
            weight: vec![d, cfg.num_classes],
            bias: vec![cfg.num_classes],
        },
    };
    template
        .entries()
        .into_iter()
        .map(|(n, s)| (n, s.clone()))
        .collect()
}

/// Whether AdamW applies weight decay to the named parameter: only linear
/// weight matrices are decayed; norms, biases, the class token and the
/// positional embeddings are not.
pub fn is_decayed(name: &str) -> bool {
    name.ends_with(".weight")
}

impl<T: Real> ViTParams<T> {
    /// Truncated-normal (σ = [`INIT_STD`], cut at ±2σ) weights, tokens and
    /// positional embeddings; zero biases; unit/zero layernorm affines.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(cfg, seed, INIT_STD)
    }

    pub fn init_with_std(cfg: &ViTConfig, seed: u64, std: f64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::param(e.to_string()))?;
        let shapes = param_shapes(cfg);
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            let numel: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".bias") || name.ends_with(".beta") {
                vec![T::zero(); numel]
            } else if name.ends_with(".gamma") {
                vec![T::one(); numel]
            } else {
                (0..numel)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * std {
                            break T::from_f64(v);
                        }
                    })
                    .collect()
            };
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        Self::from_entries(cfg, tensors)
    }

    /// Rebuilds a parameter set from tensors listed in canonical order,
    /// checking every shape against `cfg`.
    pub fn from_entries(cfg: &ViTConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = param_shapes(cfg);
        if shapes.len() != tensors.len() {
            return Err(Error::Load(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Load(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked above");
        let linear = |next: &mut dyn FnMut() -> Tensor<T>| Linear {
            weight: next(),
            bias: next(),
        };
        let patch = linear(&mut next);
        let cls_token = next();
        let pos_embed = next();
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let norm1 = Norm {
                gamma: next(),
                beta: next(),
            };
            let qkv = linear(&mut next);
            let proj = linear(&mut next);
            let norm2 = Norm {
                gamma: next(),
                beta: next(),
            };
            let fc1 = linear(&mut next);
            let fc2 = linear(&mut next);
            blocks.push(Block {
                norm1,
                qkv,
                proj,
                norm2,
                fc1,
                fc2,
            });
        }
        let norm = Norm {
            gamma: next(),
            beta: next(),
        };
        let head = linear(&mut next);
        Ok(Weights {
            patch,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
        })
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Weights<Var> {
        self.map(|_, t| tape.leaf(t.clone().with_requires_grad(trainable)))
    }

    pub fn num_parameters(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ViTParams<U> {
        self.map(|_, t| t.cast())
    }
}

/// Per-example result of recording a forward pass on a tape.
pub struct TokenPass<T> {
    /// `1 × C`
    pub logits: Var,
    /// Last block, class query to each patch key, per head: `H × n_in`.
    pub class_attention: Vec<T>,
    /// Last block, head-averaged patch-to-patch attention: `n_in × n_in`.
    pub patch_attention: Option<Vec<T>>,
    /// Softmaxed attention matrices, `[block][head]`, each `(n_in+1)²`.
    pub attention: Vec<Vec<Var>>,
}

/// Flattens non-overlapping patches of a `channels × H × W` image into an
/// `N × (channels·p·p)` matrix, patches in raster order, each patch
/// flattened channel-major.
pub fn extract_patches<T: Real>(image: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let expected = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != expected {
        return Err(Error::shape("patch_embed", image.shape(), &expected));
    }
    let (p, side, g) = (cfg.patch_size, cfg.image_size, cfg.grid_side());
    let src = image.data();
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..cfg.channels {
                for py in 0..p {
                    let row = c * side * side + (gy * p + py) * side + gx * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], out)
}

/// Records the patch projection: `N × d` tokens.
pub fn embed_on_tape<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ViTConfig,
    w: &Weights<Var>,
    image: &Tensor<T>,
) -> Result<Var> {
    let patches = tape.constant(extract_patches(image, cfg)?);
    let proj = tape.matmul(patches, w.patch.weight)?;
    tape.add_bias(proj, w.patch.bias)
}

fn linear_on_tape<T: Real>(tape: &mut Tape<T>, x: Var, l: &Linear<Var>) -> Result<Var> {
    let y = tape.matmul(x, l.weight)?;
    tape.add_bias(y, l.bias)
}

/// Records a forward pass over `tokens` (`n_in × d`). With `keep`, the
/// tokens are the kept patches in `keep` order and positional embeddings are
/// gathered at those grid positions.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ViTConfig,
    w: &Weights<Var>,
    tokens: Var,
    keep: Option<&KeepSet>,
    want_patch_attention: bool,
) -> Result<TokenPass<T>> {
    let d = cfg.embed_dim;
    let n_full = cfg.num_patches();
    let n_in = tape.shape(tokens)[0];
    if tape.shape(tokens) != [n_in, d] {
        return Err(Error::shape("forward", tape.shape(tokens), &[n_in, d]));
    }
    let pos = match keep {
        None => {
            if n_in != n_full {
                return Err(Error::shape("forward", &[n_in, d], &[n_full, d]));
            }
            w.pos_embed
        }
        Some(keep) => {
            if keep.universe() != n_full {
                return Err(Error::param(format!(
                    "keep set built for {} patches, model has {n_full}",
                    keep.universe()
                )));
            }
            if keep.len() != n_in {
                return Err(Error::shape("forward", &[n_in, d], &[keep.len(), d]));
            }
            let rows: Vec<usize> = std::iter::once(0)
                .chain(keep.indices().iter().map(|&i| i + 1))
                .collect();
            tape.gather_rows(w.pos_embed, &rows)?
        }
    };

    let x = tape.concat_rows(&[w.cls_token, tokens])?;
    let mut x = tape.add(x, pos)?;

    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
    let eps = T::from_f64(LAYERNORM_EPS);
    let mut attention = Vec::with_capacity(cfg.depth);

    for block in &w.blocks {
        let h = tape.layernorm(x, block.norm1.gamma, block.norm1.beta, eps)?;
        let qkv = linear_on_tape(tape, h, &block.qkv)?;
        let mut head_out = Vec::with_capacity(heads);
        let mut head_att = Vec::with_capacity(heads);
        for hi in 0..heads {
            let q = tape.slice_cols(qkv, hi * dh, dh)?;
            let k = tape.slice_cols(qkv, d + hi * dh, dh)?;
            let v = tape.slice_cols(qkv, 2 * d + hi * dh, dh)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let att = tape.softmax(scores, 1)?;
            head_out.push(tape.matmul(att, v)?);
            head_att.push(att);
        }
        let merged = if heads == 1 {
            head_out[0]
        } else {
            tape.concat_cols(&head_out)?
        };
        let attn_out = linear_on_tape(tape, merged, &block.proj)?;
        x = tape.add(x, attn_out)?;

        let h = tape.layernorm(x, block.norm2.gamma, block.norm2.beta, eps)?;
        let h = linear_on_tape(tape, h, &block.fc1)?;
        let h = tape.gelu(h)?;
        let h = linear_on_tape(tape, h, &block.fc2)?;
        x = tape.add(x, h)?;
        attention.push(head_att);
    }

    // layernorm is row-wise, so normalizing only the class row is exact
    let cls = tape.gather_rows(x, &[0])?;
    let cls = tape.layernorm(cls, w.norm.gamma, w.norm.beta, eps)?;
    let logits = linear_on_tape(tape, cls, &w.head)?;

    let last = attention.last().expect("depth >= 1");
    let n_tok = n_in + 1;
    let mut class_attention = Vec::with_capacity(heads * n_in);
    for &att in last {
        class_attention.extend_from_slice(&tape.value(att).data()[1..n_tok]);
    }
    let patch_attention = want_patch_attention.then(|| {
        let mut mean = vec![T::zero(); n_in * n_in];
        let inv_h = T::one() / T::from_usize(heads);
        for &att in last {
            let a = tape.value(att).data();
            for i in 0..n_in {
                for j in 0..n_in {
                    mean[i * n_in + j] += a[(i + 1) * n_tok + j + 1] * inv_h;
                }
            }
        }
        mean
    });

    Ok(TokenPass {
        logits,
        class_attention,
        patch_attention,
        attention,
    })
}

/// Outputs of a (batched) forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardRecord<T> {
    /// `batch × C`
    pub logits: Tensor<T>,
    /// `batch × H × N_in`: the class query's softmaxed attention to each
    /// fed patch key in the last block.
    pub class_attention: Option<Tensor<T>>,
    /// `batch × N_in × N_in`, head-averaged, when requested.
    pub patch_attention: Option<Tensor<T>>,
}

impl<T: Real> ForwardRecord<T> {
    pub fn batch(&self) -> usize {
        self.logits.shape()[0]
    }

    /// Heads and patch count of the class-attention record.
    pub fn attention_dims(&self) -> Option<(usize, usize)> {
        self.class_attention
            .as_ref()
            .map(|a| (a.shape()[1], a.shape()[2]))
    }
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ViT<T> {
    pub config: ViTConfig,
    pub params: ViTParams<T>,
}

impl<T: Real> ViT<T> {
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        let params = ViTParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ViTConfig, params: ViTParams<T>) -> Result<Self> {
        config.validate()?;
        let tensors = params.entries().into_iter().map(|(_, t)| t.clone()).collect();
        // re-validate shapes
        ViTParams::from_entries(&config, tensors)?;
        Ok(Self { config, params })
    }

    pub fn patch_embed(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        patch_embed(image, &self.config, &self.params)
    }

    pub fn forward(
        &self,
        tokens: &Tensor<T>,
        keep: Option<&KeepSet>,
        want_patch_attention: bool,
    ) -> Result<ForwardRecord<T>> {
        forward(tokens, keep, &self.config, &self.params, want_patch_attention)
    }

    /// Embeds and runs each image, optionally dropping patches per example.
    /// All keep sets must have the same size.
    pub fn forward_images(
        &self,
        images: &[Tensor<T>],
        keeps: Option<&[KeepSet]>,
        want_patch_attention: bool,
    ) -> Result<ForwardRecord<T>> {
        if images.is_empty() {
            return Err(Error::param("empty batch"));
        }
        if let Some(k) = keeps {
            if k.len() != images.len() {
                return Err(Error::param("one keep set per image required"));
            }
        }
        let mut records = Vec::with_capacity(images.len());
        let mut tape = Tape::new();
        let w = self.params.bind(&mut tape, false);
        for (i, image) in images.iter().enumerate() {
            let mut tokens = embed_on_tape(&mut tape, &self.config, &w, image)?;
            let keep = keeps.map(|k| &k[i]);
            if let Some(keep) = keep {
                tokens = tape.gather_rows(tokens, keep.indices())?;
            }
            let pass =
                forward_on_tape(&mut tape, &self.config, &w, tokens, keep, want_patch_attention)?;
            records.push(record_from_pass(&tape, &pass, self.config.heads)?);
        }
        stack_records(records)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }
}

/// Patch projection of one image: `N × d`.
pub fn patch_embed<T: Real>(
    image: &Tensor<T>,
    cfg: &ViTConfig,
    params: &ViTParams<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false);
    let tokens = embed_on_tape(&mut tape, cfg, &w, image)?;
    Ok(tape.value(tokens).clone())
}

/// Inference over one token matrix; the record has batch size 1.
pub fn forward<T: Real>(
    tokens: &Tensor<T>,
    keep: Option<&KeepSet>,
    cfg: &ViTConfig,
    params: &ViTParams<T>,
    want_patch_attention: bool,
) -> Result<ForwardRecord<T>> {
    if keep.is_some_and(|k| k.is_empty()) {
        return Err(Error::param("empty keep set: the class token alone is not a valid input"));
    }
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false);
    let tv = tape.constant(tokens.clone());
    let pass = forward_on_tape(&mut tape, cfg, &w, tv, keep, want_patch_attention)?;
    record_from_pass(&tape, &pass, cfg.heads)
}

pub(crate) fn record_from_pass<T: Real>(
    tape: &Tape<T>,
    pass: &TokenPass<T>,
    heads: usize,
) -> Result<ForwardRecord<T>> {
    let n_in = pass.class_attention.len() / heads;
    let logits = tape.value(pass.logits).clone();
    let class_attention = Tensor::new(vec![1, heads, n_in], pass.class_attention.clone())?;
    let patch_attention = pass
        .patch_attention
        .as_ref()
        .map(|p| Tensor::new(vec![1, n_in, n_in], p.clone()))
        .transpose()?;
    Ok(ForwardRecord {
        logits,
        class_attention: Some(class_attention),
        patch_attention,
    })
}

fn stack_records<T: Real>(records: Vec<ForwardRecord<T>>) -> Result<ForwardRecord<T>> {
    let b = records.len();
    let c = records[0].logits.numel();
    let mut logits = Vec::with_capacity(b * c);
    let mut att = Vec::new();
    let mut patch = Vec::new();
    let dims = records[0].attention_dims();
    let has_patch = records[0].patch_attention.is_some();
    for r in &records {
        if r.attention_dims() != dims {
            return Err(Error::param("keep sets within a batch must have equal size"));
        }
        logits.extend_from_slice(r.logits.data());
        if let Some(a) = &r.class_attention {
            att.extend_from_slice(a.data());
        }
        if let Some(p) = &r.patch_attention {
            patch.extend_from_slice(p.data());
        }
    }
    let (h, n) = dims.expect("records carry attention");
    Ok(ForwardRecord {
        logits: Tensor::new(vec![b, c], logits)?,
        class_attention: Some(Tensor::new(vec![b, h, n], att)?),
        patch_attention: if has_patch {
            Some(Tensor::new(vec![b, n, n], patch)?)
        } else {
            None
        },
    })
}
