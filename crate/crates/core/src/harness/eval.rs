use serde::Serialize;

use super::train::ChannelStats;
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::fusion::PoolMode;
use crate::losses::{fourier_loss, pixel_loss, LossWeights};
use crate::masking::MaskPlan;
use crate::model::{infer_logits, ModelConfig, ModelParams};
use crate::numerics::{Scalar, Tape, Tensor};
use crate::tokenizer::{self, MultiChannelImage};

fn argmax(row: &[impl Scalar]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if v > &row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy on a channel subset: absent channels are simply not
/// tokenized (no mask-token placeholders at inference).
pub fn evaluate<E: Scalar>(
    params: &ModelParams<Tensor<E>>,
    cfg: &ModelConfig,
    stats: &ChannelStats,
    samples: &[LabeledSample],
    subset: &[u16],
    pool: PoolMode,
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    for &id in subset {
        params.channel_row(id)?;
    }
    if samples.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for s in samples {
        let sub = s.image.select_channels(subset)?;
        let norm = stats.normalize(&sub)?;
        let tape = Tape::<E>::inference();
        let pvars = params.bind(&tape);
        let logits = infer_logits(&tape, &pvars, cfg, &norm, pool)?;
        let row = tape.value(logits);
        if argmax(row.row(0)) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub channels: Vec<u16>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    /// Channels left out per row count.
    pub k: usize,
    pub rows: Vec<SweepRow>,
    pub mean: f64,
    /// Population standard deviation across channel combinations.
    pub std: f64,
}

fn combinations(ids: &[u16], size: usize) -> Vec<Vec<u16>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(size);
    fn rec(ids: &[u16], size: usize, start: usize, cur: &mut Vec<u16>, out: &mut Vec<Vec<u16>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for i in start..ids.len() {
            cur.push(ids[i]);
            rec(ids, size, i + 1, cur, out);
            cur.pop();
        }
    }
    rec(ids, size, 0, &mut cur, &mut out);
    out
}

/// Evaluate every subset that leaves out exactly `k` of the image's
/// channels; reports per-subset accuracy plus mean and spread.
pub fn leave_k_out_sweep<E: Scalar>(
    params: &ModelParams<Tensor<E>>,
    cfg: &ModelConfig,
    stats: &ChannelStats,
    samples: &[LabeledSample],
    k: usize,
    pool: PoolMode,
) -> Result<SweepReport> {
    if samples.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let ids = samples[0].image.channel_ids.clone();
    let c = ids.len();
    if k == 0 || k >= c {
        return Err(Error::Config(format!("k = {k} must satisfy 1 <= k < {c}")));
    }
    let mut rows = Vec::new();
    for subset in combinations(&ids, c - k) {
        let accuracy = evaluate(params, cfg, stats, samples, &subset, pool)?;
        rows.push(SweepRow {
            channels: subset,
            accuracy,
        });
    }
    let mean = rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64;
    let var = rows
        .iter()
        .map(|r| (r.accuracy - mean) * (r.accuracy - mean))
        .sum::<f64>()
        / rows.len() as f64;
    Ok(SweepReport {
        k,
        rows,
        mean,
        std: var.sqrt(),
    })
}

/// Mean reconstruction loss over images under a caller-chosen mask per
/// image. Deterministic; used by fine-tuning probes and exports.
pub fn recon_loss_on<E: Scalar>(
    params: &ModelParams<Tensor<E>>,
    cfg: &ModelConfig,
    stats: &ChannelStats,
    images: &[MultiChannelImage],
    weights: &LossWeights,
    plan_for: impl Fn(usize, &MultiChannelImage) -> Result<MaskPlan>,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Config("empty image set".into()));
    }
    let mut total = 0.0;
    for (i, img) in images.iter().enumerate() {
        let norm = stats.normalize(img)?;
        let plan = plan_for(i, img)?;
        let tape = Tape::<E>::inference();
        let pvars = params.bind(&tape);
        let tokens = tokenizer::patchify(&tape, &norm, &cfg.patch_config(), &pvars)?;
        let enc = crate::encoder::encode(&tape, &tokens, &plan, &pvars, cfg, None)?;
        let out = crate::decoder::decode(&tape, &enc, &plan, &pvars, cfg)?;
        let preds = tape.value(out.preds);
        let targets = tokenizer::extract_patches::<E>(&norm, cfg.p);
        let lp = pixel_loss(&targets, &preds, &plan)?.as_f64();
        let lf = fourier_loss(&targets, &preds, &plan, cfg.p)?.as_f64();
        total += (1.0 - weights.lambda_f) * lp + weights.lambda_f * lf;
    }
    Ok(total / images.len() as f64)
}

/// Aggregated evaluation artifact the CLI serializes.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub full_accuracy: f64,
    pub sweeps: Vec<SweepReport>,
}
