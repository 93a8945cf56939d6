use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSplits;
use crate::error::{Error, Result};
use crate::fusion::PoolMode;
use crate::losses::{LossBreakdown, LossWeights, Regularizer};
use crate::masking::{generate_mask, MaskConfig};
use crate::model::{decays, training_forward, Gradients, ModelConfig, ModelParams};
use crate::numerics::{Scalar, Tape, Tensor};
use crate::seeds::{derive_seed, Stream};
use crate::tokenizer::MultiChannelImage;

/// Per-channel standardization computed on the training split and
/// applied everywhere. Keyed by channel id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub ids: Vec<u16>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    pub fn compute(
        images: impl Iterator<Item = impl std::borrow::Borrow<MultiChannelImage>>,
    ) -> Self {
        use std::collections::BTreeMap;
        let mut acc: BTreeMap<u16, (f64, f64, u64)> = BTreeMap::new();
        for img in images {
            let img = img.borrow();
            for (j, &id) in img.channel_ids.iter().enumerate() {
                let e = acc.entry(id).or_insert((0.0, 0.0, 0));
                for &px in img.channel_plane(j) {
                    e.0 += px as f64;
                    e.1 += (px as f64) * (px as f64);
                    e.2 += 1;
                }
            }
        }
        let mut ids = Vec::new();
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (id, (s, sq, n)) in acc {
            let m = s / n as f64;
            let var = (sq / n as f64 - m * m).max(0.0);
            ids.push(id);
            mean.push(m as f32);
            std.push((var.sqrt() as f32).max(1e-6));
        }
        Self { ids, mean, std }
    }

    pub fn lookup(&self, id: u16) -> Result<(f32, f32)> {
        let i = self
            .ids
            .iter()
            .position(|&x| x == id)
            .ok_or(Error::UnknownChannel(id))?;
        Ok((self.mean[i], self.std[i]))
    }

    /// Standardize an image channel-by-channel.
    pub fn normalize(&self, img: &MultiChannelImage) -> Result<MultiChannelImage> {
        let mut out = img.clone();
        let hw = img.h * img.w;
        for (j, &id) in img.channel_ids.iter().enumerate() {
            let (m, s) = self.lookup(id)?;
            for px in &mut out.pixels_mut()[j * hw..(j + 1) * hw] {
                *px = (*px - m) / s;
            }
        }
        Ok(out)
    }

    /// Add stats for ids not yet covered, estimated from the given images.
    pub fn extended_with(&self, images: &[MultiChannelImage]) -> Self {
        let fresh = ChannelStats::compute(images.iter());
        let mut out = self.clone();
        for (i, &id) in fresh.ids.iter().enumerate() {
            if !out.ids.contains(&id) {
                out.ids.push(id);
                out.mean.push(fresh.mean[i]);
                out.std.push(fresh.std[i]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mask: MaskConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_pool")]
    pub pool: PoolMode,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_min_lr")]
    pub min_lr: f64,
    pub warmup_epochs: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
}

fn default_pool() -> PoolMode {
    PoolMode::Hybrid
}
fn default_peak_lr() -> f64 {
    4e-4
}
fn default_min_lr() -> f64 {
    1e-6
}
fn default_weight_decay() -> f64 {
    0.04
}

impl TrainConfig {
    /// Desk-scale defaults around a model configuration.
    pub fn desk_default(model: ModelConfig, seed: u64) -> Self {
        Self {
            model,
            mask: MaskConfig::dcp_alternate(),
            weights: LossWeights::default(),
            pool: PoolMode::Hybrid,
            epochs: 30,
            batch_size: 32,
            peak_lr: default_peak_lr(),
            min_lr: default_min_lr(),
            warmup_epochs: 3,
            weight_decay: default_weight_decay(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mask.validate()?;
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be < epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.peak_lr <= 0.0 || self.min_lr < 0.0 || self.min_lr > self.peak_lr {
            return Err(Error::Config("bad learning-rate range".into()));
        }
        Ok(())
    }
}

/// Linear warmup to the peak, then cosine decay to the floor.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, peak: f64, min_lr: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return peak * (step + 1) as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return peak;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    let progress = progress.min(1.0);
    min_lr + 0.5 * (peak - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay on projection matrices only.
pub struct AdamW<E: Scalar> {
    m: Gradients<E>,
    v: Gradients<E>,
    t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<E: Scalar> AdamW<E> {
    pub fn new(template: &ModelParams<Tensor<E>>) -> Self {
        Self {
            m: template.zeros_like(),
            v: template.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams<Tensor<E>>,
        grads: &Gradients<E>,
        lr: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::one();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let eps = E::from_f64(self.eps);
        let lr_e = E::from_f64(lr);
        let wd = E::from_f64(lr * weight_decay);
        let inv_bc1 = E::from_f64(1.0 / bc1);
        let inv_bc2 = E::from_f64(1.0 / bc2);

        let grad_fields = grads.fields_ref();
        let m_fields = self.m.fields_mut();
        let v_fields = self.v.fields_mut();
        let p_fields = params.fields_mut();
        for (((pf, gf), mf), vf) in p_fields
            .into_iter()
            .zip(grad_fields)
            .zip(m_fields)
            .zip(v_fields)
        {
            debug_assert_eq!(pf.0, gf.0, "parameter/gradient order mismatch");
            let decay = decays(&pf.0);
            let p = pf.1.data_mut();
            let g = gf.1.data();
            let m = mf.1.data_mut();
            let v = vf.1.data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] * inv_bc1;
                let vhat = v[i] * inv_bc2;
                p[i] -= lr_e * mhat / (vhat.sqrt() + eps);
                if decay {
                    p[i] = p[i] - wd * p[i];
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

pub struct TrainOutcome<E: Scalar> {
    pub params: ModelParams<Tensor<E>>,
    pub stats: ChannelStats,
    pub log: Vec<TrainLogRecord>,
}

/// Full training run: deterministic under the config seed when executed
/// single-threaded (the only mode implemented).
pub fn train<E: Scalar>(
    cfg: &TrainConfig,
    data: &DatasetSplits,
    reg: &dyn Regularizer<E>,
) -> Result<TrainOutcome<E>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let channel_ids = data.train[0].image.channel_ids.clone();
    let stats = ChannelStats::compute(data.train.iter().map(|s| &s.image));
    let normalized: Vec<(MultiChannelImage, usize)> = data
        .train
        .iter()
        .map(|s| Ok((stats.normalize(&s.image)?, s.label)))
        .collect::<Result<_>>()?;

    let mut params = ModelParams::<Tensor<E>>::init(
        &cfg.model,
        &channel_ids,
        derive_seed(cfg.seed, Stream::ParamInit, 0),
    )?;
    let mut opt = AdamW::new(&params);

    let n_samples = data.train.len();
    let steps_per_epoch = n_samples.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;
    let n_patches = cfg.model.n();
    let c = channel_ids.len();

    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    let mut sample_counter = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_samples).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Shuffle, epoch as u64));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let lr = lr_at(step, total_steps, warmup_steps, cfg.peak_lr, cfg.min_lr);
            let mut grad_sum: Option<Gradients<E>> = None;
            let mut mean = LossBreakdown {
                l_pixel: 0.0,
                l_fourier: 0.0,
                l_recon: 0.0,
                l_task: 0.0,
                l_d: 0.0,
                l_final: 0.0,
                masked_patches: 0,
            };
            for &si in batch {
                let (image, label) = &normalized[si];
                let plan = generate_mask(
                    n_patches,
                    c,
                    &cfg.mask,
                    derive_seed(cfg.seed, Stream::Mask, sample_counter),
                )?;
                sample_counter += 1;
                let tape = Tape::<E>::new();
                let pvars = params.bind(&tape);
                let fwd = training_forward(
                    &tape,
                    &pvars,
                    &cfg.model,
                    image,
                    &plan,
                    *label,
                    &cfg.weights,
                    cfg.pool,
                    reg,
                )?;
                if !fwd.breakdown.l_final.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        which: "l_final".into(),
                    });
                }
                tape.backward(fwd.final_loss);
                let g = pvars.grads(&tape);
                match &mut grad_sum {
                    Some(acc) => {
                        for ((_, a), (_, b)) in acc.fields_mut().into_iter().zip(g.fields_ref()) {
                            a.add_assign(b);
                        }
                    }
                    None => grad_sum = Some(g),
                }
                mean.l_pixel += fwd.breakdown.l_pixel;
                mean.l_fourier += fwd.breakdown.l_fourier;
                mean.l_recon += fwd.breakdown.l_recon;
                mean.l_task += fwd.breakdown.l_task;
                mean.l_d += fwd.breakdown.l_d;
                mean.l_final += fwd.breakdown.l_final;
                mean.masked_patches += fwd.breakdown.masked_patches;
            }
            let bsz = batch.len() as f64;
            let mut grads = grad_sum.expect("non-empty batch");
            for (_, g) in grads.fields_mut() {
                g.scale_assign(1.0 / bsz);
            }
            mean.l_pixel /= bsz;
            mean.l_fourier /= bsz;
            mean.l_recon /= bsz;
            mean.l_task /= bsz;
            mean.l_d /= bsz;
            mean.l_final /= bsz;

            opt.step(&mut params, &grads, lr, cfg.weight_decay);
            log.push(TrainLogRecord {
                step,
                epoch,
                lr,
                losses: mean,
            });
            step += 1;
        }
    }

    Ok(TrainOutcome { params, stats, log })
}
