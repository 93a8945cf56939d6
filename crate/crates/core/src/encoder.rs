//! Pre-norm transformer encoder over the visible tokens, plus the
//! patch-to-channel and patch-to-memory attention diagnostics.

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::model::{AttnP, BlockP, ModelConfig, ModelParams};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::tokenizer::{TokenMeta, TokenSequence};

/// Encoder output: `1 + l + v` token embeddings and their metadata.
#[derive(Debug)]
pub struct EncodedSequence {
    pub embeddings: Var,
    pub meta: Vec<TokenMeta>,
    /// Visible patch count.
    pub v: usize,
    pub l: usize,
    /// Patches per channel in the source image.
    pub n: usize,
    /// Channel count of the source image.
    pub c: usize,
    /// Channel ids in source column order.
    pub channel_ids: Vec<u16>,
}

impl EncodedSequence {
    pub fn seq_len(&self) -> usize {
        self.meta.len()
    }
    /// Row range of the patch tokens.
    pub fn patch_range(&self) -> std::ops::Range<usize> {
        1 + self.l..1 + self.l + self.v
    }
}

/// Per-layer, per-head attention probabilities captured during a
/// forward pass, for the diagnostics below.
#[derive(Default)]
pub struct AttnTrace<E> {
    /// `layers x heads` matrices of shape `s x s`.
    pub layers: Vec<Vec<Tensor<E>>>,
}

pub(crate) fn multi_head_attention<E: Scalar>(
    tape: &Tape<E>,
    x: Var,
    p: &AttnP<Var>,
    heads: usize,
    trace: Option<&mut Vec<Tensor<E>>>,
) -> Var {
    let d = tape.shape_of(x)[1];
    assert_eq!(d % heads, 0);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = tape.add_row(tape.matmul(x, p.wq.w), p.wq.b);
    let k = tape.add_row(tape.matmul(x, p.wk.w), p.wk.b);
    let v = tape.add_row(tape.matmul(x, p.wv.w), p.wv.b);
    let mut ctxs = Vec::with_capacity(heads);
    let mut head_probs = Vec::new();
    for h in 0..heads {
        let qs = tape.slice_cols(q, h * dh, dh);
        let ks = tape.slice_cols(k, h * dh, dh);
        let vs = tape.slice_cols(v, h * dh, dh);
        let scores = tape.scale(tape.matmul_nt(qs, ks), scale);
        let probs = tape.softmax_rows(scores);
        if trace.is_some() {
            head_probs.push(tape.value(probs));
        }
        ctxs.push(tape.matmul(probs, vs));
    }
    if let Some(tr) = trace {
        *tr = head_probs;
    }
    let ctx = tape.concat_cols(&ctxs);
    tape.add_row(tape.matmul(ctx, p.wo.w), p.wo.b)
}

pub(crate) fn transformer_block<E: Scalar>(
    tape: &Tape<E>,
    x: Var,
    b: &BlockP<Var>,
    heads: usize,
    trace: Option<&mut Vec<Tensor<E>>>,
) -> Var {
    let h = tape.layer_norm_rows(x, b.ln1.gamma, b.ln1.beta);
    let a = multi_head_attention(tape, h, &b.attn, heads, trace);
    let x = tape.add(x, a);
    let h2 = tape.layer_norm_rows(x, b.ln2.gamma, b.ln2.beta);
    let m = tape.add_row(tape.matmul(h2, b.mlp_in.w), b.mlp_in.b);
    let m = tape.gelu(m);
    let m = tape.add_row(tape.matmul(m, b.mlp_out.w), b.mlp_out.b);
    tape.add(x, m)
}

/// Drop masked patch tokens, then run the encoder blocks and final norm.
/// CLS and memory tokens always survive.
pub fn encode<E: Scalar>(
    tape: &Tape<E>,
    tokens: &TokenSequence,
    plan: &MaskPlan,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    mut trace: Option<&mut AttnTrace<E>>,
) -> Result<EncodedSequence> {
    if plan.n != tokens.n || plan.c != tokens.c {
        return Err(Error::PlanMismatch(format!(
            "plan {}x{} vs tokens {}x{}",
            plan.n, plan.c, tokens.n, tokens.c
        )));
    }
    let prefix = 1 + tokens.l;
    let mut keep: Vec<usize> = (0..prefix).collect();
    let mut meta: Vec<TokenMeta> = tokens.meta[..prefix].to_vec();
    let mut channel_ids = Vec::with_capacity(tokens.c);
    for j in 0..tokens.c {
        for i in 0..tokens.n {
            let t = prefix + j * tokens.n + i;
            if j >= channel_ids.len() {
                channel_ids.push(tokens.meta[t].channel_id.expect("patch meta"));
            }
            if !plan.is_masked(i, j) {
                keep.push(t);
                meta.push(tokens.meta[t]);
            }
        }
    }
    let v = keep.len() - prefix;
    if v == 0 {
        return Err(Error::AllMasked);
    }
    let mut x = tape.gather_rows(tokens.embeddings, keep);
    for b in &params.enc_blocks {
        let layer_trace = trace.as_deref_mut().map(|t| {
            t.layers.push(Vec::new());
            t.layers.last_mut().expect("just pushed")
        });
        x = transformer_block(tape, x, b, cfg.heads, layer_trace);
    }
    let x = tape.layer_norm_rows(x, params.enc_norm.gamma, params.enc_norm.beta);
    Ok(EncodedSequence {
        embeddings: x,
        meta,
        v,
        l: tokens.l,
        n: tokens.n,
        c: tokens.c,
        channel_ids,
    })
}

/// Patch-token rows of an encoded sequence.
pub fn patch_rows<E: Scalar>(tape: &Tape<E>, enc: &EncodedSequence) -> Var {
    tape.slice_rows(enc.embeddings, 1 + enc.l, enc.v)
}

/// Mean attention mass from each channel's patch queries onto channel /
/// CLS / memory targets, averaged over layers, heads and queries.
pub struct PatchChannelAttention {
    pub channel_ids: Vec<u16>,
    /// `c x c`: query channel -> key channel mass.
    pub to_channels: Vec<Vec<f64>>,
    /// Mass on the CLS token per query channel.
    pub to_cls: Vec<f64>,
    /// `c x l`: mass on each memory token per query channel.
    pub to_memory: Vec<Vec<f64>>,
}

impl PatchChannelAttention {
    /// The `c x (c+1)` matrix: channels plus a trailing CLS column.
    pub fn rows_with_cls(&self) -> Vec<Vec<f64>> {
        self.to_channels
            .iter()
            .zip(self.to_cls.iter())
            .map(|(row, &cls)| {
                let mut r = row.clone();
                r.push(cls);
                r
            })
            .collect()
    }

    /// Row sums over every target group (channels + CLS + memory);
    /// softmax normalization makes these 1.
    pub fn full_row_sums(&self) -> Vec<f64> {
        (0..self.to_channels.len())
            .map(|i| {
                self.to_channels[i].iter().sum::<f64>()
                    + self.to_cls[i]
                    + self.to_memory[i].iter().sum::<f64>()
            })
            .collect()
    }
}

/// Run an unmasked forward pass and summarize attention by channel.
pub fn patch_channel_attention<E: Scalar>(
    tokens: &TokenSequence,
    tape: &Tape<E>,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<PatchChannelAttention> {
    let plan = MaskPlan::empty(tokens.n, tokens.c);
    let mut trace = AttnTrace::default();
    let enc = encode(tape, tokens, &plan, params, cfg, Some(&mut trace))?;
    summarize_attention(&trace, &enc)
}

fn summarize_attention<E: Scalar>(
    trace: &AttnTrace<E>,
    enc: &EncodedSequence,
) -> Result<PatchChannelAttention> {
    let c = enc.c;
    let l = enc.l;
    let n = enc.n;
    let prefix = 1 + l;
    let mut to_channels = vec![vec![0.0f64; c]; c];
    let mut to_cls = vec![0.0f64; c];
    let mut to_memory = vec![vec![0.0f64; l]; c];
    let mut denom = 0.0f64;
    for layer in &trace.layers {
        for head in layer {
            denom += 1.0;
            for qj in 0..c {
                // unmasked pass: channel j's queries are contiguous
                for qi in 0..n {
                    let q = prefix + qj * n + qi;
                    let row = head.row(q);
                    to_cls[qj] += row[0].as_f64();
                    for m in 0..l {
                        to_memory[qj][m] += row[1 + m].as_f64();
                    }
                    for kj in 0..c {
                        let mut acc = 0.0;
                        for ki in 0..n {
                            acc += row[prefix + kj * n + ki].as_f64();
                        }
                        to_channels[qj][kj] += acc;
                    }
                }
            }
        }
    }
    if denom == 0.0 {
        return Err(Error::Config("attention trace is empty".into()));
    }
    let queries = n as f64;
    for qj in 0..c {
        to_cls[qj] /= denom * queries;
        for m in 0..l {
            to_memory[qj][m] /= denom * queries;
        }
        for kj in 0..c {
            to_channels[qj][kj] /= denom * queries;
        }
    }
    Ok(PatchChannelAttention {
        channel_ids: enc.channel_ids.clone(),
        to_channels,
        to_cls,
        to_memory,
    })
}

/// Mean attention from each channel's patches to each memory token.
/// Errors when the model has no memory tokens.
pub fn memory_attention<E: Scalar>(
    tokens: &TokenSequence,
    tape: &Tape<E>,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<Vec<Vec<f64>>> {
    if tokens.l == 0 {
        return Err(Error::NoMemoryTokens);
    }
    Ok(patch_channel_attention(tokens, tape, params, cfg)?.to_memory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking;
    use crate::model::ModelConfig;
    use crate::tokenizer::{patchify, MultiChannelImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (ModelConfig, crate::model::ModelParams<Tensor<f32>>) {
        let mut cfg = ModelConfig::toy(3);
        cfg.h = 16;
        cfg.w = 16;
        cfg.p = 8;
        cfg.enc_depth = 2;
        let params = crate::model::ModelParams::init(&cfg, &[0, 1, 2], 3).unwrap();
        (cfg, params)
    }

    fn random_image(h: usize, w: usize, ids: &[u16], seed: u64) -> MultiChannelImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..h * w * ids.len())
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        MultiChannelImage::new(h, w, ids.to_vec(), pixels).unwrap()
    }

    #[test]
    fn output_length_is_one_plus_l_plus_v() {
        let (cfg, params) = toy();
        let img = random_image(16, 16, &[0, 1, 2], 1);
        let tape = Tape::<f32>::new();
        let pv = params.bind(&tape);
        let tokens = patchify(&tape, &img, &cfg.patch_config(), &pv).unwrap();
        for seed in 0..5 {
            let plan =
                masking::dcp_mask(4, 3, &masking::MaskConfig::dcp_alternate(), seed).unwrap();
            let enc = encode(&tape, &tokens, &plan, &pv, &cfg, None).unwrap();
            assert_eq!(enc.seq_len(), 1 + cfg.l + plan.visible_count());
            assert_eq!(enc.v, plan.visible_count());
            assert_eq!(
                tape.shape_of(enc.embeddings),
                vec![1 + cfg.l + enc.v, cfg.d]
            );
        }
    }

    #[test]
    fn empty_mask_keeps_full_sequence() {
        let (cfg, params) = toy();
        let img = random_image(16, 16, &[0, 1, 2], 2);
        let tape = Tape::<f32>::new();
        let pv = params.bind(&tape);
        let tokens = patchify(&tape, &img, &cfg.patch_config(), &pv).unwrap();
        let plan = MaskPlan::empty(4, 3);
        let enc = encode(&tape, &tokens, &plan, &pv, &cfg, None).unwrap();
        assert_eq!(enc.v, 12);
    }

    #[test]
    fn plan_dimension_mismatch_errors() {
        let (cfg, params) = toy();
        let img = random_image(16, 16, &[0, 1, 2], 2);
        let tape = Tape::<f32>::new();
        let pv = params.bind(&tape);
        let tokens = patchify(&tape, &img, &cfg.patch_config(), &pv).unwrap();
        let plan = MaskPlan::empty(4, 2);
        assert!(matches!(
            encode(&tape, &tokens, &plan, &pv, &cfg, None),
            Err(Error::PlanMismatch(_))
        ));
    }

    #[test]
    fn drop_then_encode_equals_encode_of_dropped() {
        // encoding with a plan must equal running the blocks on the
        // pre-filtered sequence, bit-exactly.
        let (cfg, params) = toy();
        let img = random_image(16, 16, &[0, 1, 2], 3);
        let plan = masking::random_patch_mask(4, 3, 0.5, true, 77).unwrap();

        let tape = Tape::<f32>::new();
        let pv = params.bind(&tape);
        let tokens = patchify(&tape, &img, &cfg.patch_config(), &pv).unwrap();
        let enc = encode(&tape, &tokens, &plan, &pv, &cfg, None).unwrap();

        // manual pre-filter: copy the visible token values into a fresh
        // sequence and encode with an empty plan of matching dims
        let full = tape.value(tokens.embeddings);
        let prefix = 1 + cfg.l;
        let mut rows: Vec<usize> = (0..prefix).collect();
        let mut meta = tokens.meta[..prefix].to_vec();
        for j in 0..3 {
            for i in 0..4 {
                if !plan.is_masked(i, j) {
                    rows.push(prefix + j * 4 + i);
                    meta.push(tokens.meta[prefix + j * 4 + i]);
                }
            }
        }
        let mut filtered = Tensor::zeros(&[rows.len(), cfg.d]);
        for (r, &src) in rows.iter().enumerate() {
            filtered.row_mut(r).copy_from_slice(full.row(src));
        }
        let seq = crate::tokenizer::TokenSequence {
            embeddings: tape.constant(filtered),
            meta,
            n: enc.v,
            c: 1,
            l: cfg.l,
        };
        let empty = MaskPlan::empty(enc.v, 1);
        let enc2 = encode(&tape, &seq, &empty, &pv, &cfg, None).unwrap();
        assert_eq!(
            tape.value(enc.embeddings).data(),
            tape.value(enc2.embeddings).data()
        );
    }

    #[test]
    fn channel_permutation_equivariance() {
        let (cfg, params) = toy();
        let img = random_image(16, 16, &[0, 1, 2], 4);
        let perm = [2usize, 0, 1];
        let permuted = img.permute_channels(&perm).unwrap();
        let plan = MaskPlan::empty(4, 3);

        let tape = Tape::<f32>::new();
        let pv = params.bind(&tape);
        let t1 = patchify(&tape, &img, &cfg.patch_config(), &pv).unwrap();
        let t2 = patchify(&tape, &permuted, &cfg.patch_config(), &pv).unwrap();
        let e1 = tape.value(
            encode(&tape, &t1, &plan, &pv, &cfg, None)
                .unwrap()
                .embeddings,
        );
        let e2 = tape.value(
            encode(&tape, &t2, &plan, &pv, &cfg, None)
                .unwrap()
                .embeddings,
        );

        let prefix = 1 + cfg.l;
        let mut max_abs = 0.0f64;
        let mut max_diff = 0.0f64;
        // CLS and memory unchanged
        for r in 0..prefix {
            for (a, b) in e1.row(r).iter().zip(e2.row(r).iter()) {
                max_abs = max_abs.max((*a as f64).abs());
                max_diff = max_diff.max((*a as f64 - *b as f64).abs());
            }
        }
        // patch blocks permuted
        for (new_j, &old_j) in perm.iter().enumerate() {
            for i in 0..4 {
                let a = e1.row(prefix + old_j * 4 + i);
                let b = e2.row(prefix + new_j * 4 + i);
                for (x, y) in a.iter().zip(b.iter()) {
                    max_abs = max_abs.max((*x as f64).abs());
                    max_diff = max_diff.max((*x as f64 - *y as f64).abs());
                }
            }
        }
        assert!(
            max_diff / (max_abs + 1e-12) < 1e-5,
            "rel {max_diff}/{max_abs}"
        );
    }

    #[test]
    fn attention_rows_sum_to_one_over_all_targets() {
        let (cfg, params) = toy();
        let img = random_image(16, 16, &[0, 1, 2], 5);
        let tape = Tape::<f32>::new();
        let pv = params.bind(&tape);
        let tokens = patchify(&tape, &img, &cfg.patch_config(), &pv).unwrap();
        let attn = patch_channel_attention(&tokens, &tape, &pv, &cfg).unwrap();
        for s in attn.full_row_sums() {
            assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
        }
        // partial rows (channels + CLS) cannot exceed 1
        for row in attn.rows_with_cls() {
            assert!(row.iter().sum::<f64>() <= 1.0 + 1e-6);
        }
        for row in &attn.to_memory {
            for &m in row {
                assert!(m >= 0.0);
            }
        }
    }

    #[test]
    fn single_channel_diagnostic_has_one_row() {
        let (cfg, params) = toy();
        let img = random_image(16, 16, &[1], 6);
        let tape = Tape::<f32>::new();
        let pv = params.bind(&tape);
        let tokens = patchify(&tape, &img, &cfg.patch_config(), &pv).unwrap();
        let attn = patch_channel_attention(&tokens, &tape, &pv, &cfg).unwrap();
        assert_eq!(attn.rows_with_cls().len(), 1);
        assert_eq!(attn.rows_with_cls()[0].len(), 2);
    }

    #[test]
    fn identical_channels_and_tokens_give_symmetric_attention() {
        let (cfg, mut params) = toy();
        // make channel token rows 0 and 1 identical
        let row0: Vec<f32> = params.channel_tokens.row(0).to_vec();
        params.channel_tokens.row_mut(1).copy_from_slice(&row0);
        let mut img = random_image(16, 16, &[0, 1, 2], 7);
        let plane: Vec<f32> = img.channel_plane(0).to_vec();
        let hw = 16 * 16;
        img.pixels_mut()[hw..2 * hw].copy_from_slice(&plane);

        let tape = Tape::<f32>::new();
        let pv = params.bind(&tape);
        let tokens = patchify(&tape, &img, &cfg.patch_config(), &pv).unwrap();
        let attn = patch_channel_attention(&tokens, &tape, &pv, &cfg).unwrap();
        let a = attn.to_channels[0][1];
        let b = attn.to_channels[1][0];
        assert!(
            (a - b).abs() / (a.abs() + 1e-12) < 1e-5,
            "asymmetric: {a} vs {b}"
        );
    }

    #[test]
    fn memory_attention_requires_memory_tokens() {
        let (mut cfg, _) = toy();
        cfg.l = 0;
        let params = crate::model::ModelParams::<Tensor<f32>>::init(&cfg, &[0, 1, 2], 3).unwrap();
        let img = random_image(16, 16, &[0, 1, 2], 8);
        let tape = Tape::<f32>::new();
        let pv = params.bind(&tape);
        let tokens = patchify(&tape, &img, &cfg.patch_config(), &pv).unwrap();
        assert!(matches!(
            memory_attention(&tokens, &tape, &pv, &cfg),
            Err(Error::NoMemoryTokens)
        ));

        let (cfg, params) = toy();
        let pv = params.bind(&tape);
        let tokens = patchify(&tape, &img, &cfg.patch_config(), &pv).unwrap();
        let mem = memory_attention(&tokens, &tape, &pv, &cfg).unwrap();
        assert_eq!(mem.len(), 3);
        assert_eq!(mem[0].len(), cfg.l);
    }
}
