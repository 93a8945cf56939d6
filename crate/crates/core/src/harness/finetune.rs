use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::train::ChannelStats;
use crate::error::{Error, Result};
use crate::fusion::PoolMode;
use crate::losses::{LossWeights, ZeroRegularizer};
use crate::masking::MaskPlan;
use crate::model::{training_forward, ModelConfig, ModelParams};
use crate::numerics::{Scalar, Tape, Tensor};
use crate::seeds::{derive_seed, Stream};
use crate::tokenizer::MultiChannelImage;

/// Mask chosen per fine-tuning step: (derived seed, image, novel ids).
pub type PlanFn<'a> = &'a dyn Fn(u64, &MultiChannelImage, &[u16]) -> Result<MaskPlan>;

/// Default fine-tuning mask: hide a random subset of the novel
/// channels' patches so every reconstruction target depends on the new
/// tokens, with the rest of the image fully visible as context.
pub fn novel_patch_plan(
    img: &MultiChannelImage,
    n: usize,
    novel_ids: &[u16],
    ratio: f64,
    seed: u64,
) -> Result<MaskPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = ((n as f64 * ratio).floor() as usize).clamp(1, n - 1);
    let mut cells = Vec::new();
    for (j, id) in img.channel_ids.iter().enumerate() {
        if novel_ids.contains(id) {
            for i in index::sample(&mut rng, n, k) {
                cells.push((i, j));
            }
        }
    }
    MaskPlan::from_cells(n, img.num_channels(), &cells)
}

pub struct FinetuneOutcome<E: Scalar> {
    pub params: ModelParams<Tensor<E>>,
    /// Stats extended with the novel channels (estimated from the
    /// fine-tuning images).
    pub stats: ChannelStats,
    pub novel_ids: Vec<u16>,
    /// Mean reconstruction loss per optimization step.
    pub loss_curve: Vec<f64>,
}

/// Adapt a trained model to channels it has never seen: register fresh
/// channel tokens for the novel ids and optimize only those rows
/// against the reconstruction loss on unlabeled images. Every other
/// parameter (and every pre-existing channel-token row) stays
/// bit-identical.
#[allow(clippy::too_many_arguments)]
pub fn finetune_channel_tokens<E: Scalar>(
    params: &ModelParams<Tensor<E>>,
    cfg: &ModelConfig,
    stats: &ChannelStats,
    images: &[MultiChannelImage],
    steps: usize,
    lr: f64,
    plan_for: PlanFn<'_>,
    weights: &LossWeights,
    seed: u64,
) -> Result<FinetuneOutcome<E>> {
    if images.is_empty() {
        return Err(Error::Config("no fine-tuning images".into()));
    }
    let mut novel_ids: Vec<u16> = Vec::new();
    for img in images {
        for &id in &img.channel_ids {
            if params.channel_row(id).is_err() && !novel_ids.contains(&id) {
                novel_ids.push(id);
            }
        }
    }
    if novel_ids.is_empty() {
        return Err(Error::NoNovelChannels);
    }
    let old_rows = params.channel_ids.len();
    if old_rows + novel_ids.len() > cfg.n_max_channels {
        return Err(Error::Config(format!(
            "channel table capacity {} exceeded",
            cfg.n_max_channels
        )));
    }

    // extend the token table with freshly initialized rows
    let mut new_params = params.clone();
    let d = cfg.d;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(derive_seed(
        seed,
        Stream::FinetuneInit,
        0,
    ));
    let fresh = Tensor::<E>::randn(&[novel_ids.len(), d], 0.02, &mut rng);
    let mut table = Tensor::<E>::zeros(&[old_rows + novel_ids.len(), d]);
    for r in 0..old_rows {
        table
            .row_mut(r)
            .copy_from_slice(params.channel_tokens.row(r));
    }
    for r in 0..novel_ids.len() {
        table.row_mut(old_rows + r).copy_from_slice(fresh.row(r));
    }
    new_params.channel_tokens = table;
    new_params.channel_ids.extend_from_slice(&novel_ids);

    let stats = stats.extended_with(images);
    let recon_weights = LossWeights {
        lambda_f: weights.lambda_f,
        lambda_recon: 1.0,
        lambda_d: 0.0,
    };

    // Adam restricted to the novel rows of the channel-token table.
    let rows = old_rows + novel_ids.len();
    let mut m = Tensor::<E>::zeros(&[rows, d]);
    let mut v = Tensor::<E>::zeros(&[rows, d]);
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);

    let mut loss_curve = Vec::with_capacity(steps);
    let mut draw = 0u64;
    for t in 1..=steps {
        let img = &images[(t - 1) % images.len()];
        let norm = stats.normalize(img)?;
        let plan = plan_for(derive_seed(seed, Stream::Mask, draw), img, &novel_ids)?;
        draw += 1;
        if plan.masked_count() == 0 {
            loss_curve.push(loss_curve.last().copied().unwrap_or(0.0));
            continue;
        }
        let tape = Tape::<E>::new();
        let pvars = new_params.bind(&tape);
        let fwd = training_forward(
            &tape,
            &pvars,
            cfg,
            &norm,
            &plan,
            0,
            &recon_weights,
            PoolMode::Hybrid,
            &ZeroRegularizer,
        )?;
        if !fwd.breakdown.l_final.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: t,
                which: "finetune recon".into(),
            });
        }
        loss_curve.push(fwd.breakdown.l_recon);
        tape.backward(fwd.final_loss);
        let mut g = tape.grad(pvars.channel_tokens);
        // freeze pre-existing rows
        for r in 0..old_rows {
            for x in g.row_mut(r) {
                *x = E::zero();
            }
        }
        let b1 = E::from_f64(beta1);
        let b2 = E::from_f64(beta2);
        let one = E::one();
        let inv_bc1 = E::from_f64(1.0 / (1.0 - beta1.powi(t as i32)));
        let inv_bc2 = E::from_f64(1.0 / (1.0 - beta2.powi(t as i32)));
        let lr_e = E::from_f64(lr);
        let eps_e = E::from_f64(eps);
        for r in old_rows..rows {
            let gr = g.row(r).to_vec();
            let mr = m.row_mut(r);
            for (mi, &gi) in mr.iter_mut().zip(gr.iter()) {
                *mi = b1 * *mi + (one - b1) * gi;
            }
            let vr = v.row_mut(r);
            for (vi, &gi) in vr.iter_mut().zip(gr.iter()) {
                *vi = b2 * *vi + (one - b2) * gi * gi;
            }
            let (mrow, vrow) = (m.row(r).to_vec(), v.row(r).to_vec());
            let prow = new_params.channel_tokens.row_mut(r);
            for ((p, &mi), &vi) in prow.iter_mut().zip(mrow.iter()).zip(vrow.iter()) {
                let mhat = mi * inv_bc1;
                let vhat = vi * inv_bc2;
                *p -= lr_e * mhat / (vhat.sqrt() + eps_e);
            }
        }
    }

    Ok(FinetuneOutcome {
        params: new_params,
        stats,
        novel_ids,
        loss_curve,
    })
}
