//! Channel-aware decoder: rebuilds the full-length token sequence with
//! shared mask tokens at the masked slots, injects channel tokens and
//! positional embeddings additively, runs lightweight transformer
//! blocks, and regresses pixels through a linear head.

use crate::encoder::{transformer_block, EncodedSequence};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::tokenizer::{unpatchify, MultiChannelImage};

/// Pixel predictions for every (position, channel) slot in the shared
/// channel-major layout, visible slots included (the loss ignores them).
pub struct ReconstructionOutput {
    /// `(n*c) x p^2` predictions.
    pub preds: Var,
    pub n: usize,
    pub c: usize,
    pub p: usize,
    pub channel_ids: Vec<u16>,
    /// Per-slot masked flag, slot index `j * n + i`.
    pub masked: Vec<bool>,
}

impl ReconstructionOutput {
    pub fn is_masked_slot(&self, slot: usize) -> bool {
        self.masked[slot]
    }
}

/// Decode an encoded sequence under its mask plan.
pub fn decode<E: Scalar>(
    tape: &Tape<E>,
    enc: &EncodedSequence,
    plan: &MaskPlan,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<ReconstructionOutput> {
    if plan.n != enc.n || plan.c != enc.c {
        return Err(Error::PlanMismatch(format!(
            "plan {}x{} vs encoded {}x{}",
            plan.n, plan.c, enc.n, enc.c
        )));
    }
    if plan.visible_count() != enc.v {
        return Err(Error::PlanMismatch(format!(
            "plan has {} visible patches, encoder produced {}",
            plan.visible_count(),
            enc.v
        )));
    }
    let n = enc.n;
    let c = enc.c;
    let prefix = 1 + enc.l;
    let enc_len = prefix + enc.v;

    // Append the shared mask token to the encoder output, then gather a
    // full-length sequence: special tokens, then one row per slot in
    // canonical order (visible rows from the encoder, masked slots all
    // pointing at the mask-token row).
    let base = tape.concat_rows(&[enc.embeddings, params.mask_token]);
    let mask_row = enc_len;
    let mut idx: Vec<usize> = (0..prefix).collect();
    let mut masked_flags = vec![false; n * c];
    let mut pos_idx = Vec::with_capacity(n * c);
    let mut chan_idx = Vec::with_capacity(n * c);
    let mut next_visible = prefix;
    for j in 0..c {
        let row = params.channel_row(enc.channel_ids[j])?;
        for i in 0..n {
            if plan.is_masked(i, j) {
                idx.push(mask_row);
                masked_flags[j * n + i] = true;
            } else {
                idx.push(next_visible);
                next_visible += 1;
            }
            pos_idx.push(i);
            chan_idx.push(row);
        }
    }
    debug_assert_eq!(next_visible, enc_len);
    let ordered = tape.gather_rows(base, idx);

    // additive channel-token and positional context for every patch slot
    let specials = tape.slice_rows(ordered, 0, prefix);
    let slots = tape.slice_rows(ordered, prefix, n * c);
    let slots = tape.add(slots, tape.gather_rows(params.channel_tokens, chan_idx));
    let slots = tape.add(slots, tape.gather_rows(params.pos_embed, pos_idx));
    let mut x = tape.concat_rows(&[specials, slots]);

    for b in &params.dec_blocks {
        x = transformer_block(tape, x, b, cfg.dec_heads, None);
    }
    let x = tape.layer_norm_rows(x, params.dec_norm.gamma, params.dec_norm.beta);
    let patch_out = tape.slice_rows(x, prefix, n * c);
    let preds = tape.matmul(patch_out, params.dec_head);

    Ok(ReconstructionOutput {
        preds,
        n,
        c,
        p: cfg.p,
        channel_ids: enc.channel_ids.clone(),
        masked: masked_flags,
    })
}

/// Assemble predicted patches into an image. With `ground_truth`
/// supplied, visible slots pass the original pixels through and only
/// masked slots show predictions.
pub fn reconstruct_image<E: Scalar>(
    out: &ReconstructionOutput,
    pred_values: &Tensor<E>,
    h: usize,
    w: usize,
    ground_truth: Option<&MultiChannelImage>,
) -> Result<MultiChannelImage> {
    let (rows, cols) = pred_values.dims2();
    if rows != out.n * out.c || cols != out.p * out.p {
        return Err(Error::ShapeMismatch(format!(
            "predictions {rows}x{cols} vs {} slots of {} pixels",
            out.n * out.c,
            out.p * out.p
        )));
    }
    let mut patches = Tensor::<f32>::zeros(&[rows, cols]);
    for s in 0..rows {
        let dst = patches.row_mut(s);
        for (d, &v) in dst.iter_mut().zip(pred_values.row(s).iter()) {
            *d = v.as_f32();
        }
    }
    if let Some(gt) = ground_truth {
        let gt_patches = crate::tokenizer::extract_patches::<f32>(gt, out.p);
        for s in 0..rows {
            if !out.masked[s] {
                patches.row_mut(s).copy_from_slice(gt_patches.row(s));
            }
        }
    }
    unpatchify(&patches, h, w, &out.channel_ids, out.p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::encode;
    use crate::masking::{self, MaskConfig};
    use crate::model::ModelConfig;
    use crate::tokenizer::{extract_patches, patchify, MultiChannelImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (ModelConfig, crate::model::ModelParams<Tensor<f32>>) {
        let mut cfg = ModelConfig::toy(3);
        cfg.h = 16;
        cfg.w = 16;
        cfg.p = 8;
        cfg.enc_depth = 2;
        let params = crate::model::ModelParams::init(&cfg, &[0, 1, 2], 11).unwrap();
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
    fn decoder_sees_full_length_sequence_for_any_mask() {
        let (cfg, params) = toy();
        let img = random_image(16, 16, &[0, 1, 2], 1);
        for seed in 0..6 {
            let plan = masking::dcp_mask(4, 3, &MaskConfig::dcp_alternate(), seed).unwrap();
            let tape = Tape::<f32>::new();
            let pv = params.bind(&tape);
            let tokens = patchify(&tape, &img, &cfg.patch_config(), &pv).unwrap();
            let enc = encode(&tape, &tokens, &plan, &pv, &cfg, None).unwrap();
            let out = decode(&tape, &enc, &plan, &pv, &cfg).unwrap();
            assert_eq!(tape.shape_of(out.preds), vec![12, 64]);
            let flags: usize = out.masked.iter().map(|&m| m as usize).sum();
            assert_eq!(flags, plan.masked_count());
        }
    }

    #[test]
    fn mismatched_plan_is_rejected() {
        let (cfg, params) = toy();
        let img = random_image(16, 16, &[0, 1, 2], 2);
        let plan = masking::random_patch_mask(4, 3, 0.5, true, 3).unwrap();
        let other = masking::random_patch_mask(4, 3, 0.75, true, 3).unwrap();
        let tape = Tape::<f32>::new();
        let pv = params.bind(&tape);
        let tokens = patchify(&tape, &img, &cfg.patch_config(), &pv).unwrap();
        let enc = encode(&tape, &tokens, &plan, &pv, &cfg, None).unwrap();
        assert!(matches!(
            decode(&tape, &enc, &other, &pv, &cfg),
            Err(Error::PlanMismatch(_))
        ));
    }

    #[test]
    fn masked_slot_inputs_differ_only_through_channel_and_position() {
        // with zeroed channel tokens and positional embeddings, every
        // masked slot must decode identically (shared mask token).
        let (cfg, mut params) = toy();
        params.channel_tokens = Tensor::zeros(&[3, cfg.d]);
        params.pos_embed = Tensor::zeros(&[4, cfg.d]);
        let img = random_image(16, 16, &[0, 1, 2], 5);
        // one masked position per channel
        let plan = masking::random_patch_mask(4, 3, 0.25, true, 9).unwrap();
        let tape = Tape::<f32>::new();
        let pv = params.bind(&tape);
        let tokens = patchify(&tape, &img, &cfg.patch_config(), &pv).unwrap();
        let enc = encode(&tape, &tokens, &plan, &pv, &cfg, None).unwrap();
        let out = decode(&tape, &enc, &plan, &pv, &cfg).unwrap();
        let preds = tape.value(out.preds);
        let masked_slots: Vec<usize> = (0..12).filter(|&s| out.masked[s]).collect();
        assert!(masked_slots.len() >= 2);
        let first = preds.row(masked_slots[0]);
        for &s in &masked_slots[1..] {
            for (a, b) in first.iter().zip(preds.row(s).iter()) {
                assert!((a - b).abs() < 1e-6, "masked slots decoded differently");
            }
        }
    }

    #[test]
    fn ground_truth_passthrough_with_empty_mask_returns_input() {
        let (cfg, params) = toy();
        let img = random_image(16, 16, &[0, 1, 2], 6);
        let plan = MaskPlan::empty(4, 3);
        let tape = Tape::<f32>::new();
        let pv = params.bind(&tape);
        let tokens = patchify(&tape, &img, &cfg.patch_config(), &pv).unwrap();
        let enc = encode(&tape, &tokens, &plan, &pv, &cfg, None).unwrap();
        let out = decode(&tape, &enc, &plan, &pv, &cfg).unwrap();
        assert_eq!(enc.v, 12); // u = 0: decoder saw only encoded tokens
        let img2 = reconstruct_image(&out, &tape.value(out.preds), 16, 16, Some(&img)).unwrap();
        assert_eq!(img2, img);
    }

    #[test]
    fn fully_masked_channel_is_covered_by_predictions() {
        let (cfg, params) = toy();
        let img = random_image(16, 16, &[0, 1, 2], 7);
        // find a dynamic channel mask that actually masks something
        let plan = (0..100)
            .map(|s| masking::dynamic_channel_mask(4, 3, s))
            .find(|p| !p.masked_channels.is_empty())
            .unwrap();
        let tape = Tape::<f32>::new();
        let pv = params.bind(&tape);
        let tokens = patchify(&tape, &img, &cfg.patch_config(), &pv).unwrap();
        let enc = encode(&tape, &tokens, &plan, &pv, &cfg, None).unwrap();
        let out = decode(&tape, &enc, &plan, &pv, &cfg).unwrap();
        let recon = reconstruct_image(&out, &tape.value(out.preds), 16, 16, None).unwrap();
        assert_eq!(recon.h, 16);
        assert_eq!(recon.w, 16);
        assert_eq!(recon.num_channels(), 3);
        for &j in &plan.masked_channels {
            // every slot of the masked channel carries a prediction
            for i in 0..4 {
                assert!(out.masked[j * 4 + i]);
            }
        }
    }

    #[test]
    fn extract_matches_decoder_slot_order() {
        let (_cfg, _) = toy();
        let img = random_image(16, 16, &[0, 1, 2], 8);
        let t = extract_patches::<f32>(&img, 8);
        assert_eq!(t.shape(), &[12, 64]);
    }
}
