//! Model configuration, the full learnable parameter set, and the
//! assembled forward passes used by training and evaluation.
//!
//! `ModelParams<C>` is generic over its cell type so the same canonical
//! traversal serves tensor storage (`C = Tensor<E>`), tape binding
//! (`C = Var`) and gradient collection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{self, ReconstructionOutput};
use crate::encoder::{self, EncodedSequence};
use crate::error::{Error, Result};
use crate::fusion::{self, PoolMode};
use crate::losses::{self, LossBreakdown, LossWeights, Regularizer};
use crate::masking::MaskPlan;
use crate::numerics::{NamedTensor, Scalar, Tape, Tensor, Var};
use crate::tokenizer::{self, MultiChannelImage, PatchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub h: usize,
    pub w: usize,
    /// Patch side length in pixels.
    pub p: usize,
    /// Embedding width.
    pub d: usize,
    /// Memory token count.
    pub l: usize,
    pub heads: usize,
    pub enc_depth: usize,
    pub mlp_ratio: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub num_classes: usize,
    /// Capacity contract for the channel-token table.
    pub n_max_channels: usize,
}

impl ModelConfig {
    /// Patches per channel.
    pub fn n(&self) -> usize {
        self.h * self.w / (self.p * self.p)
    }

    /// Default desk-scale configuration.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            h: 32,
            w: 32,
            p: 8,
            d: 64,
            l: 4,
            heads: 4,
            enc_depth: 4,
            mlp_ratio: 4,
            dec_depth: 1,
            dec_heads: 4,
            num_classes,
            n_max_channels: 16,
        }
    }

    /// Minimal configuration for gradient verification.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            h: 8,
            w: 8,
            p: 4,
            d: 8,
            l: 2,
            heads: 2,
            enc_depth: 1,
            mlp_ratio: 2,
            dec_depth: 1,
            dec_heads: 2,
            num_classes,
            n_max_channels: 8,
        }
    }

    /// ViT-S-shaped preset (one encoder block moved to the decoder).
    pub fn vit_small(num_classes: usize) -> Self {
        Self {
            h: 224,
            w: 224,
            p: 16,
            d: 384,
            l: 4,
            heads: 6,
            enc_depth: 11,
            mlp_ratio: 4,
            dec_depth: 1,
            dec_heads: 6,
            num_classes,
            n_max_channels: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || !self.h.is_multiple_of(self.p) || !self.w.is_multiple_of(self.p) {
            return Err(Error::NonDivisible {
                h: self.h,
                w: self.w,
                p: self.p,
            });
        }
        if self.d < 4
            || !self.d.is_multiple_of(self.heads)
            || !self.d.is_multiple_of(self.dec_heads)
        {
            return Err(Error::Config(format!(
                "width {} must be >= 4 and divisible by heads {}/{}",
                self.d, self.heads, self.dec_heads
            )));
        }
        if self.enc_depth == 0 || self.dec_depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            p: self.p,
            d: self.d,
            l: self.l,
            n_max_channels: self.n_max_channels,
        }
    }
}

// ---- parameter containers ----

#[derive(Debug, Clone)]
pub struct LinearP<C> {
    pub w: C,
    pub b: C,
}

#[derive(Debug, Clone)]
pub struct NormP<C> {
    pub gamma: C,
    pub beta: C,
}

#[derive(Debug, Clone)]
pub struct AttnP<C> {
    pub wq: LinearP<C>,
    pub wk: LinearP<C>,
    pub wv: LinearP<C>,
    pub wo: LinearP<C>,
}

#[derive(Debug, Clone)]
pub struct BlockP<C> {
    pub ln1: NormP<C>,
    pub attn: AttnP<C>,
    pub ln2: NormP<C>,
    pub mlp_in: LinearP<C>,
    pub mlp_out: LinearP<C>,
}

#[derive(Debug, Clone)]
pub struct FusionP<C> {
    /// Learnable query vector (1 x d).
    pub q_patch: C,
    /// Key projection of the single-head cross-attention (d x d).
    pub wk: C,
    /// Value projection, maps back to width d.
    pub wv: C,
    pub mlp_in: LinearP<C>,
    pub mlp_out: LinearP<C>,
}

/// Every learnable tensor of the model plus the registered channel ids
/// (row i of `channel_tokens` belongs to `channel_ids[i]`).
#[derive(Debug, Clone)]
pub struct ModelParams<C> {
    pub patch_proj: C,
    pub pos_embed: C,
    pub cls_token: C,
    pub memory_tokens: C,
    pub channel_ids: Vec<u16>,
    pub channel_tokens: C,
    pub mask_token: C,
    pub enc_blocks: Vec<BlockP<C>>,
    pub enc_norm: NormP<C>,
    pub dec_blocks: Vec<BlockP<C>>,
    pub dec_norm: NormP<C>,
    pub dec_head: C,
    pub fusion: FusionP<C>,
    pub classifier: LinearP<C>,
}

impl<C> LinearP<C> {
    fn map<D>(&self, path: &str, f: &mut impl FnMut(&str, &C) -> D) -> LinearP<D> {
        LinearP {
            w: f(&format!("{path}.w"), &self.w),
            b: f(&format!("{path}.b"), &self.b),
        }
    }
    fn fields_mut(&mut self, path: &str, out: &mut Vec<(String, *mut C)>) {
        out.push((format!("{path}.w"), &mut self.w as *mut C));
        out.push((format!("{path}.b"), &mut self.b as *mut C));
    }
}

impl<C> NormP<C> {
    fn map<D>(&self, path: &str, f: &mut impl FnMut(&str, &C) -> D) -> NormP<D> {
        NormP {
            gamma: f(&format!("{path}.gamma"), &self.gamma),
            beta: f(&format!("{path}.beta"), &self.beta),
        }
    }
    fn fields_mut(&mut self, path: &str, out: &mut Vec<(String, *mut C)>) {
        out.push((format!("{path}.gamma"), &mut self.gamma as *mut C));
        out.push((format!("{path}.beta"), &mut self.beta as *mut C));
    }
}

impl<C> BlockP<C> {
    fn map<D>(&self, path: &str, f: &mut impl FnMut(&str, &C) -> D) -> BlockP<D> {
        BlockP {
            ln1: self.ln1.map(&format!("{path}.ln1"), f),
            attn: AttnP {
                wq: self.attn.wq.map(&format!("{path}.attn.q"), f),
                wk: self.attn.wk.map(&format!("{path}.attn.k"), f),
                wv: self.attn.wv.map(&format!("{path}.attn.v"), f),
                wo: self.attn.wo.map(&format!("{path}.attn.o"), f),
            },
            ln2: self.ln2.map(&format!("{path}.ln2"), f),
            mlp_in: self.mlp_in.map(&format!("{path}.mlp_in"), f),
            mlp_out: self.mlp_out.map(&format!("{path}.mlp_out"), f),
        }
    }
    fn fields_mut(&mut self, path: &str, out: &mut Vec<(String, *mut C)>) {
        self.ln1.fields_mut(&format!("{path}.ln1"), out);
        self.attn.wq.fields_mut(&format!("{path}.attn.q"), out);
        self.attn.wk.fields_mut(&format!("{path}.attn.k"), out);
        self.attn.wv.fields_mut(&format!("{path}.attn.v"), out);
        self.attn.wo.fields_mut(&format!("{path}.attn.o"), out);
        self.ln2.fields_mut(&format!("{path}.ln2"), out);
        self.mlp_in.fields_mut(&format!("{path}.mlp_in"), out);
        self.mlp_out.fields_mut(&format!("{path}.mlp_out"), out);
    }
}

impl<C> ModelParams<C> {
    /// Canonical traversal; every other parameter walk derives from it.
    pub fn map_with_path<D>(&self, f: &mut impl FnMut(&str, &C) -> D) -> ModelParams<D> {
        ModelParams {
            patch_proj: f("patch_proj", &self.patch_proj),
            pos_embed: f("pos_embed", &self.pos_embed),
            cls_token: f("cls_token", &self.cls_token),
            memory_tokens: f("memory_tokens", &self.memory_tokens),
            channel_ids: self.channel_ids.clone(),
            channel_tokens: f("channel_tokens", &self.channel_tokens),
            mask_token: f("mask_token", &self.mask_token),
            enc_blocks: self
                .enc_blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("enc{i}"), f))
                .collect(),
            enc_norm: self.enc_norm.map("enc_norm", f),
            dec_blocks: self
                .dec_blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("dec{i}"), f))
                .collect(),
            dec_norm: self.dec_norm.map("dec_norm", f),
            dec_head: f("dec_head", &self.dec_head),
            fusion: FusionP {
                q_patch: f("fusion.q_patch", &self.fusion.q_patch),
                wk: f("fusion.wk", &self.fusion.wk),
                wv: f("fusion.wv", &self.fusion.wv),
                mlp_in: self.fusion.mlp_in.map("fusion.mlp_in", f),
                mlp_out: self.fusion.mlp_out.map("fusion.mlp_out", f),
            },
            classifier: self.classifier.map("classifier", f),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &C)) {
        self.map_with_path(&mut |path, c| f(path, c));
    }

    /// Mutable references to every cell in canonical order. Kept in sync
    /// with `map_with_path` by a unit test.
    pub fn fields_mut(&mut self) -> Vec<(String, &mut C)> {
        let mut raw: Vec<(String, *mut C)> = Vec::new();
        raw.push(("patch_proj".into(), &mut self.patch_proj as *mut C));
        raw.push(("pos_embed".into(), &mut self.pos_embed as *mut C));
        raw.push(("cls_token".into(), &mut self.cls_token as *mut C));
        raw.push(("memory_tokens".into(), &mut self.memory_tokens as *mut C));
        raw.push(("channel_tokens".into(), &mut self.channel_tokens as *mut C));
        raw.push(("mask_token".into(), &mut self.mask_token as *mut C));
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            b.fields_mut(&format!("enc{i}"), &mut raw);
        }
        self.enc_norm.fields_mut("enc_norm", &mut raw);
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            b.fields_mut(&format!("dec{i}"), &mut raw);
        }
        self.dec_norm.fields_mut("dec_norm", &mut raw);
        raw.push(("dec_head".into(), &mut self.dec_head as *mut C));
        raw.push(("fusion.q_patch".into(), &mut self.fusion.q_patch as *mut C));
        raw.push(("fusion.wk".into(), &mut self.fusion.wk as *mut C));
        raw.push(("fusion.wv".into(), &mut self.fusion.wv as *mut C));
        self.fusion.mlp_in.fields_mut("fusion.mlp_in", &mut raw);
        self.fusion.mlp_out.fields_mut("fusion.mlp_out", &mut raw);
        self.classifier.fields_mut("classifier", &mut raw);
        // Each pointer targets a distinct field of self, so re-borrowing
        // them mutably is sound.
        raw.into_iter()
            .map(|(name, ptr)| (name, unsafe { &mut *ptr }))
            .collect()
    }

    /// Shared references to every cell, same order as `fields_mut`.
    pub fn fields_ref(&self) -> Vec<(String, &C)> {
        let mut out = Vec::new();
        self.visit(&mut |path, c| {
            // extend the borrow to &self's lifetime: visit only hands out
            // references into self
            let ptr = c as *const C;
            out.push((path.to_string(), unsafe { &*ptr }));
        });
        out
    }

    /// Row index of a channel id in the token table.
    pub fn channel_row(&self, id: u16) -> Result<usize> {
        self.channel_ids
            .iter()
            .position(|&x| x == id)
            .ok_or(Error::UnknownChannel(id))
    }
}

/// Gradients use the same container as the parameters.
pub type Gradients<E> = ModelParams<Tensor<E>>;

impl<E: Scalar> ModelParams<Tensor<E>> {
    /// Fresh parameters. Token-like tensors and projections start from a
    /// 0.02-scaled normal, norms at identity, biases at zero.
    pub fn init(cfg: &ModelConfig, channel_ids: &[u16], seed: u64) -> Result<Self> {
        cfg.validate()?;
        if channel_ids.len() > cfg.n_max_channels {
            return Err(Error::Config(format!(
                "{} channels exceed table capacity {}",
                channel_ids.len(),
                cfg.n_max_channels
            )));
        }
        let mut sorted = channel_ids.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != channel_ids.len() {
            return Err(Error::Config("duplicate channel ids".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        // channel identity must stay legible next to Xavier-scale patch
        // content, so the token table starts an order of magnitude hotter
        let channel_std = 0.2;
        let d = cfg.d;
        let block = |rng: &mut ChaCha8Rng| BlockP {
            ln1: NormP {
                gamma: Tensor::full(&[1, d], 1.0),
                beta: Tensor::zeros(&[1, d]),
            },
            attn: AttnP {
                wq: LinearP {
                    w: Tensor::xavier(&[d, d], rng),
                    b: Tensor::zeros(&[1, d]),
                },
                wk: LinearP {
                    w: Tensor::xavier(&[d, d], rng),
                    b: Tensor::zeros(&[1, d]),
                },
                wv: LinearP {
                    w: Tensor::xavier(&[d, d], rng),
                    b: Tensor::zeros(&[1, d]),
                },
                wo: LinearP {
                    w: Tensor::xavier(&[d, d], rng),
                    b: Tensor::zeros(&[1, d]),
                },
            },
            ln2: NormP {
                gamma: Tensor::full(&[1, d], 1.0),
                beta: Tensor::zeros(&[1, d]),
            },
            mlp_in: LinearP {
                w: Tensor::xavier(&[d, d * cfg.mlp_ratio], rng),
                b: Tensor::zeros(&[1, d * cfg.mlp_ratio]),
            },
            mlp_out: LinearP {
                w: Tensor::xavier(&[d * cfg.mlp_ratio, d], rng),
                b: Tensor::zeros(&[1, d]),
            },
        };
        Ok(Self {
            patch_proj: Tensor::xavier(&[cfg.p * cfg.p, d], &mut rng),
            pos_embed: Tensor::randn(&[cfg.n(), d], std, &mut rng),
            cls_token: Tensor::randn(&[1, d], std, &mut rng),
            memory_tokens: Tensor::randn(&[cfg.l, d], std, &mut rng),
            channel_ids: channel_ids.to_vec(),
            channel_tokens: Tensor::randn(&[channel_ids.len(), d], channel_std, &mut rng),
            mask_token: Tensor::randn(&[1, d], std, &mut rng),
            enc_blocks: (0..cfg.enc_depth).map(|_| block(&mut rng)).collect(),
            enc_norm: NormP {
                gamma: Tensor::full(&[1, d], 1.0),
                beta: Tensor::zeros(&[1, d]),
            },
            dec_blocks: (0..cfg.dec_depth).map(|_| block(&mut rng)).collect(),
            dec_norm: NormP {
                gamma: Tensor::full(&[1, d], 1.0),
                beta: Tensor::zeros(&[1, d]),
            },
            dec_head: Tensor::xavier(&[d, cfg.p * cfg.p], &mut rng),
            fusion: FusionP {
                q_patch: Tensor::randn(&[1, d], std, &mut rng),
                wk: Tensor::xavier(&[d, d], &mut rng),
                wv: Tensor::xavier(&[d, d], &mut rng),
                mlp_in: LinearP {
                    w: Tensor::xavier(&[d, d], &mut rng),
                    b: Tensor::zeros(&[1, d]),
                },
                mlp_out: LinearP {
                    w: Tensor::xavier(&[d, d], &mut rng),
                    b: Tensor::zeros(&[1, d]),
                },
            },
            classifier: LinearP {
                w: Tensor::xavier(&[d, cfg.num_classes], &mut rng),
                b: Tensor::zeros(&[1, cfg.num_classes]),
            },
        })
    }

    /// Bind every tensor as a differentiable leaf of the tape.
    pub fn bind(&self, tape: &Tape<E>) -> ModelParams<Var> {
        self.map_with_path(&mut |_, t| tape.leaf(t.clone()))
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor<E>> {
        let mut out = Vec::new();
        self.visit(&mut |path, t| out.push(NamedTensor::new(path, t.clone())));
        out
    }

    pub fn zeros_like(&self) -> Self {
        self.map_with_path(&mut |_, t| Tensor::zeros(t.shape()))
    }

    pub fn to_f64_params(&self) -> ModelParams<Tensor<f64>> {
        self.map_with_path(&mut |_, t| t.to_f64_tensor())
    }
}

impl ModelParams<Var> {
    /// Rebuild a `Var` container from a flat slice in canonical order
    /// (the order `named_tensors` / `visit` produce).
    pub fn from_vars<X>(template: &ModelParams<X>, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        let rebuilt = template.map_with_path(&mut |_, _| it.next().expect("var count mismatch"));
        assert!(it.next().is_none(), "var count mismatch");
        rebuilt
    }

    /// Read gradients for every parameter off the tape.
    pub fn grads<E: Scalar>(&self, tape: &Tape<E>) -> Gradients<E> {
        self.map_with_path(&mut |_, &v| tape.grad(v))
    }
}

/// Decoupled weight decay applies to projection matrices only; biases,
/// norm affines, tokens and positional embeddings are excluded.
pub fn decays(path: &str) -> bool {
    path.ends_with(".w")
        || path == "patch_proj"
        || path == "dec_head"
        || path == "fusion.wk"
        || path == "fusion.wv"
}

// ---- assembled forward passes ----

pub struct TrainingForward {
    pub final_loss: Var,
    pub breakdown: LossBreakdown,
    pub enc: EncodedSequence,
    pub recon: Option<ReconstructionOutput>,
}

/// Encoder + dual heads + blended objective for one image.
#[allow(clippy::too_many_arguments)]
pub fn training_forward<E: Scalar>(
    tape: &Tape<E>,
    pvars: &ModelParams<Var>,
    cfg: &ModelConfig,
    image: &MultiChannelImage,
    plan: &MaskPlan,
    label: usize,
    weights: &LossWeights,
    pool: PoolMode,
    reg: &dyn Regularizer<E>,
) -> Result<TrainingForward> {
    weights.validate()?;
    if label >= cfg.num_classes {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: cfg.num_classes,
        });
    }
    let tokens = tokenizer::patchify(tape, image, &cfg.patch_config(), pvars)?;
    let enc = encoder::encode(tape, &tokens, plan, pvars, cfg, None)?;

    let need_task = weights.lambda_recon < 1.0;
    let need_recon = weights.lambda_recon > 0.0 && plan.masked_count() > 0;

    let task = if need_task {
        let feat = fusion::pool(tape, &enc, pool, pvars)?;
        let logits = tape.add_row(tape.matmul(feat, pvars.classifier.w), pvars.classifier.b);
        Some(tape.cross_entropy(logits, label))
    } else {
        None
    };
    let reg_loss = if need_task {
        let patch_tokens = encoder::patch_rows(tape, &enc);
        Some(reg.loss(tape, pvars.channel_tokens, patch_tokens))
    } else {
        None
    };

    let (recon, pixel, fourier) = if need_recon {
        let out = decoder::decode(tape, &enc, plan, pvars, cfg)?;
        let targets = tokenizer::extract_patches::<E>(image, cfg.p);
        let pixel = losses::pixel_loss_op(tape, out.preds, &targets, plan);
        let fourier = losses::fourier_loss_op(tape, out.preds, &targets, plan, cfg.p);
        (Some(out), Some(pixel), Some(fourier))
    } else {
        // empty masks occur legitimately under the dynamic channel
        // branch (k = 0); the reconstruction term is an exact zero
        (None, None, None)
    };

    let recon_var = match (pixel, fourier) {
        (Some(p), Some(f)) => Some(tape.lincomb(p, 1.0 - weights.lambda_f, f, weights.lambda_f)),
        _ => None,
    };

    let final_loss = losses::final_loss_op(tape, task, reg_loss, recon_var, weights);

    let breakdown = LossBreakdown {
        l_pixel: pixel.map_or(0.0, |v| tape.value_scalar(v)),
        l_fourier: fourier.map_or(0.0, |v| tape.value_scalar(v)),
        l_recon: recon_var.map_or(0.0, |v| tape.value_scalar(v)),
        l_task: task.map_or(0.0, |v| tape.value_scalar(v)),
        l_d: reg_loss.map_or(0.0, |v| tape.value_scalar(v)),
        l_final: tape.value_scalar(final_loss),
        masked_patches: plan.masked_count(),
    };

    Ok(TrainingForward {
        final_loss,
        breakdown,
        enc,
        recon,
    })
}

/// Classification logits for an unmasked image (any channel subset).
pub fn infer_logits<E: Scalar>(
    tape: &Tape<E>,
    pvars: &ModelParams<Var>,
    cfg: &ModelConfig,
    image: &MultiChannelImage,
    pool: PoolMode,
) -> Result<Var> {
    let tokens = tokenizer::patchify(tape, image, &cfg.patch_config(), pvars)?;
    let plan = MaskPlan::empty(cfg.n(), image.num_channels());
    let enc = encoder::encode(tape, &tokens, &plan, pvars, cfg, None)?;
    let feat = fusion::pool(tape, &enc, pool, pvars)?;
    Ok(tape.add_row(tape.matmul(feat, pvars.classifier.w), pvars.classifier.b))
}

/// Gradient-check every objective of a model against central finite
/// differences: masked pixel loss, masked Fourier loss, their blend,
/// the task loss, and the blended final objective. `coords = 0` checks
/// every coordinate of every parameter.
pub fn loss_grad_reports(
    params: &ModelParams<Tensor<f64>>,
    cfg: &ModelConfig,
    epsilon: f64,
    coords: usize,
    seed: u64,
) -> Result<Vec<(String, crate::numerics::GradCheckReport)>> {
    use crate::losses::{fourier_loss_op, pixel_loss_op};
    use rand::Rng;

    cfg.validate()?;
    let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(seed);
    let c = params.channel_ids.len();
    let pixels: Vec<f32> = (0..cfg.h * cfg.w * c)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let image = MultiChannelImage::new(cfg.h, cfg.w, params.channel_ids.clone(), pixels)?;
    let plan = crate::masking::dcp_mask(
        cfg.n(),
        c,
        &crate::masking::MaskConfig::dcp_combination(),
        seed,
    )?;
    if plan.masked_count() == 0 || plan.visible_count() == 0 {
        return Err(Error::Config("degenerate plan for gradient check".into()));
    }
    let weights = LossWeights::default();
    let label = 1 % cfg.num_classes;
    let named = params.named_tensors();
    let targets = tokenizer::extract_patches::<f64>(&image, cfg.p);

    enum Objective {
        Pixel,
        Fourier,
        Recon,
        Task,
        Final,
    }
    let cases = [
        ("pixel", Objective::Pixel),
        ("fourier", Objective::Fourier),
        ("recon", Objective::Recon),
        ("task", Objective::Task),
        ("final", Objective::Final),
    ];
    let mut out = Vec::new();
    for (name, objective) in cases {
        let report = crate::numerics::grad_check(&named, epsilon, coords, seed, |tape, vars| {
            let pv = ModelParams::from_vars(params, vars);
            let tokens = tokenizer::patchify(tape, &image, &cfg.patch_config(), &pv)
                .expect("patchify in grad check");
            let enc = encoder::encode(tape, &tokens, &plan, &pv, cfg, None).expect("encode");
            match objective {
                Objective::Pixel | Objective::Fourier | Objective::Recon => {
                    let dec = decoder::decode(tape, &enc, &plan, &pv, cfg).expect("decode");
                    let lp = pixel_loss_op(tape, dec.preds, &targets, &plan);
                    let lf = fourier_loss_op(tape, dec.preds, &targets, &plan, cfg.p);
                    match objective {
                        Objective::Pixel => lp,
                        Objective::Fourier => lf,
                        _ => tape.lincomb(lp, 1.0 - weights.lambda_f, lf, weights.lambda_f),
                    }
                }
                Objective::Task => {
                    let feat = fusion::pool(tape, &enc, PoolMode::Hybrid, &pv).expect("pool");
                    let logits = tape.add_row(tape.matmul(feat, pv.classifier.w), pv.classifier.b);
                    tape.cross_entropy(logits, label)
                }
                Objective::Final => {
                    let dec = decoder::decode(tape, &enc, &plan, &pv, cfg).expect("decode");
                    let lp = pixel_loss_op(tape, dec.preds, &targets, &plan);
                    let lf = fourier_loss_op(tape, dec.preds, &targets, &plan, cfg.p);
                    let recon = tape.lincomb(lp, 1.0 - weights.lambda_f, lf, weights.lambda_f);
                    let feat = fusion::pool(tape, &enc, PoolMode::Hybrid, &pv).expect("pool");
                    let logits = tape.add_row(tape.matmul(feat, pv.classifier.w), pv.classifier.b);
                    let task = tape.cross_entropy(logits, label);
                    let reg = crate::losses::ZeroRegularizer.loss(
                        tape,
                        pv.channel_tokens,
                        encoder::patch_rows(tape, &enc),
                    );
                    crate::losses::final_loss_op(tape, Some(task), Some(reg), Some(recon), &weights)
                }
            }
        })?;
        out.push((name.to_string(), report));
    }
    Ok(out)
}
