//! Objectives: masked pixel L2, masked Fourier-amplitude L1, their
//! blend, softmax cross-entropy task loss, the pluggable regularizer
//! hook, and the blended final objective.
//!
//! Each loss exists as a plain tensor function (the reference the tests
//! oracle against) and as a tape op whose forward calls that same
//! function, so the differentiated path and the checked path cannot
//! drift apart.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::numerics::{DftBasis, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    /// Fourier share inside the reconstruction loss.
    #[serde(default = "default_lambda_f")]
    pub lambda_f: f64,
    /// Reconstruction share inside the final loss.
    #[serde(default = "default_lambda_recon")]
    pub lambda_recon: f64,
    /// Regularizer weight inside the task term.
    #[serde(default = "default_lambda_d")]
    pub lambda_d: f64,
}

fn default_lambda_f() -> f64 {
    0.01
}
fn default_lambda_recon() -> f64 {
    0.99
}
fn default_lambda_d() -> f64 {
    0.001
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_f: default_lambda_f(),
            lambda_recon: default_lambda_recon(),
            lambda_d: default_lambda_d(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_f) || !(0.0..=1.0).contains(&self.lambda_recon) {
            return Err(Error::Config(format!(
                "lambda_f={} and lambda_recon={} must lie in [0,1]",
                self.lambda_f, self.lambda_recon
            )));
        }
        if self.lambda_d < 0.0 {
            return Err(Error::Config("lambda_d must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-step scalar record of every objective component.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pixel: f64,
    pub l_fourier: f64,
    pub l_recon: f64,
    pub l_task: f64,
    pub l_d: f64,
    pub l_final: f64,
    pub masked_patches: usize,
}

fn slot_is_masked(plan: &MaskPlan, slot: usize) -> bool {
    let i = slot % plan.n;
    let j = slot / plan.n;
    plan.is_masked(i, j)
}

fn check_patch_shapes<E: Scalar>(
    targets: &Tensor<E>,
    preds: &Tensor<E>,
    plan: &MaskPlan,
) -> Result<usize> {
    let (tr, tc) = targets.dims2();
    let (pr, pc) = preds.dims2();
    if (tr, tc) != (pr, pc) || tr != plan.n * plan.c {
        return Err(Error::ShapeMismatch(format!(
            "targets {tr}x{tc}, preds {pr}x{pc}, plan {}x{}",
            plan.n, plan.c
        )));
    }
    Ok(tc)
}

/// Mean-over-masked-patches of the per-patch mean squared pixel error.
pub fn pixel_loss<E: Scalar>(targets: &Tensor<E>, preds: &Tensor<E>, plan: &MaskPlan) -> Result<E> {
    let pixels = check_patch_shapes(targets, preds, plan)?;
    let total = plan.masked_count();
    if total == 0 {
        eprintln!("warning: pixel loss over zero masked patches, defined as 0");
        return Ok(E::zero());
    }
    let mut acc = E::zero();
    for s in 0..plan.n * plan.c {
        if !slot_is_masked(plan, s) {
            continue;
        }
        let t = targets.row(s);
        let p = preds.row(s);
        let mut sq = E::zero();
        for (&tv, &pv) in t.iter().zip(p.iter()) {
            let d = tv - pv;
            sq += d * d;
        }
        acc += sq / E::from_f64(pixels as f64);
    }
    Ok(acc / E::from_f64(total as f64))
}

/// Mean-over-masked-patches of the mean absolute difference between
/// DFT amplitude spectra (patches reshaped `p x p` before the 2-D DFT).
pub fn fourier_loss<E: Scalar>(
    targets: &Tensor<E>,
    preds: &Tensor<E>,
    plan: &MaskPlan,
    p: usize,
) -> Result<E> {
    let pixels = check_patch_shapes(targets, preds, plan)?;
    if pixels != p * p {
        return Err(Error::ShapeMismatch(format!(
            "{pixels} pixels per patch but p = {p}"
        )));
    }
    let total = plan.masked_count();
    if total == 0 {
        eprintln!("warning: fourier loss over zero masked patches, defined as 0");
        return Ok(E::zero());
    }
    let basis = DftBasis::<E>::new(p);
    let mut acc = E::zero();
    for s in 0..plan.n * plan.c {
        if !slot_is_masked(plan, s) {
            continue;
        }
        let at = basis.amplitude(&Tensor::new(&[p, p], targets.row(s).to_vec()));
        let ap = basis.amplitude(&Tensor::new(&[p, p], preds.row(s).to_vec()));
        let mut l1 = E::zero();
        for (&a, &b) in at.data().iter().zip(ap.data().iter()) {
            l1 += (a - b).abs();
        }
        acc += l1 / E::from_f64(pixels as f64);
    }
    Ok(acc / E::from_f64(total as f64))
}

/// `(1 - lambda_f) * pixel + lambda_f * fourier`.
pub fn recon_loss<E: Scalar>(
    targets: &Tensor<E>,
    preds: &Tensor<E>,
    plan: &MaskPlan,
    p: usize,
    w: &LossWeights,
) -> Result<E> {
    w.validate()?;
    let lp = pixel_loss(targets, preds, plan)?;
    let lf = fourier_loss(targets, preds, plan, p)?;
    Ok(E::from_f64(1.0 - w.lambda_f) * lp + E::from_f64(w.lambda_f) * lf)
}

/// Softmax cross-entropy of one logits row.
pub fn task_loss<E: Scalar>(logits: &Tensor<E>, label: usize) -> Result<E> {
    let (rows, k) = logits.dims2();
    if rows != 1 {
        return Err(Error::ShapeMismatch("logits must be a single row".into()));
    }
    if label >= k {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: k,
        });
    }
    let row = logits.row(0);
    let mut mx = row[0];
    for &x in row {
        if x > mx {
            mx = x;
        }
    }
    let mut sum = E::zero();
    for &x in row {
        sum += (x - mx).exp();
    }
    Ok(mx + sum.ln() - row[label])
}

/// `(1 - lambda_recon) * (task + lambda_d * reg) + lambda_recon * recon`.
pub fn final_loss(task: f64, reg: f64, recon: f64, w: &LossWeights) -> f64 {
    (1.0 - w.lambda_recon) * (task + w.lambda_d * reg) + w.lambda_recon * recon
}

/// Pluggable regularizer; receives the channel-token table and the
/// encoder's patch-token outputs on the tape.
pub trait Regularizer<E: Scalar> {
    fn loss(&self, tape: &Tape<E>, channel_tokens: Var, patch_tokens: Var) -> Var;
}

/// Default hook: contributes nothing.
pub struct ZeroRegularizer;

impl<E: Scalar> Regularizer<E> for ZeroRegularizer {
    fn loss(&self, tape: &Tape<E>, _channel_tokens: Var, _patch_tokens: Var) -> Var {
        tape.constant(Tensor::scalar(0.0))
    }
}

// ---- tape ops ----

/// Differentiable masked pixel loss; forward delegates to [`pixel_loss`].
pub fn pixel_loss_op<E: Scalar>(
    tape: &Tape<E>,
    preds: Var,
    targets: &Tensor<E>,
    plan: &MaskPlan,
) -> Var {
    let pv = tape.value(preds);
    let value = pixel_loss(targets, &pv, plan).expect("pixel loss shapes");
    let total = plan.masked_count();
    if total == 0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let targets = targets.clone();
    let flags: Vec<bool> = (0..plan.n * plan.c)
        .map(|s| slot_is_masked(plan, s))
        .collect();
    tape.push_custom(Tensor::new(&[1], vec![value]), &[preds], move |g| {
        let gs = g.data()[0];
        let (rows, pixels) = targets.dims2();
        let scale = E::from_f64(2.0 / (total as f64 * pixels as f64)) * gs;
        let mut d = Tensor::zeros(&[rows, pixels]);
        for s in 0..rows {
            if !flags[s] {
                continue;
            }
            let dr = d.row_mut(s);
            for ((dv, &pvv), &tv) in dr
                .iter_mut()
                .zip(pv.row(s).iter())
                .zip(targets.row(s).iter())
            {
                *dv = scale * (pvv - tv);
            }
        }
        vec![(preds, d)]
    })
}

/// Differentiable masked Fourier-amplitude loss; forward delegates to
/// [`fourier_loss`].
pub fn fourier_loss_op<E: Scalar>(
    tape: &Tape<E>,
    preds: Var,
    targets: &Tensor<E>,
    plan: &MaskPlan,
    p: usize,
) -> Var {
    let pv = tape.value(preds);
    let value = fourier_loss(targets, &pv, plan, p).expect("fourier loss shapes");
    let total = plan.masked_count();
    if total == 0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let basis = DftBasis::<E>::new(p);
    let target_amps: Vec<Option<Tensor<E>>> = (0..plan.n * plan.c)
        .map(|s| {
            slot_is_masked(plan, s)
                .then(|| basis.amplitude(&Tensor::new(&[p, p], targets.row(s).to_vec())))
        })
        .collect();
    tape.push_custom(Tensor::new(&[1], vec![value]), &[preds], move |g| {
        let gs = g.data()[0];
        let (rows, pixels) = pv.dims2();
        let scale = E::from_f64(1.0 / (total as f64 * pixels as f64)) * gs;
        let mut d = Tensor::zeros(&[rows, pixels]);
        for (s, ta) in target_amps.iter().enumerate() {
            let Some(ta) = ta else { continue };
            let patch = Tensor::new(&[p, p], pv.row(s).to_vec());
            let (re, im) = basis.re_im(&patch);
            let amp = re.zip(&im, |r, i| (r * r + i * i).sqrt());
            // d|A|/dA_pred = sign(A_pred - A_target), zero at ties
            let mut d_amp = Tensor::zeros(&[p, p]);
            for ((dv, &a), &t) in d_amp
                .data_mut()
                .iter_mut()
                .zip(amp.data().iter())
                .zip(ta.data().iter())
            {
                *dv = if a > t {
                    scale
                } else if a < t {
                    -scale
                } else {
                    E::zero()
                };
            }
            let dpatch = basis.amplitude_backward(&re, &im, &amp, &d_amp);
            d.row_mut(s).copy_from_slice(dpatch.data());
        }
        vec![(preds, d)]
    })
}

/// Blend the available loss components per the final objective. Absent
/// components are treated as exact zeros, so pure-supervised
/// (`lambda_recon = 0`) and pure-reconstruction (`lambda_recon = 1`)
/// modes stay exact.
pub fn final_loss_op<E: Scalar>(
    tape: &Tape<E>,
    task: Option<Var>,
    reg: Option<Var>,
    recon: Option<Var>,
    w: &LossWeights,
) -> Var {
    let task_term = match (task, reg) {
        (Some(t), Some(r)) => Some(tape.lincomb(t, 1.0, r, w.lambda_d)),
        (Some(t), None) => Some(t),
        (None, Some(r)) => Some(tape.scale(r, w.lambda_d)),
        (None, None) => None,
    };
    match (task_term, recon) {
        (Some(t), Some(r)) => tape.lincomb(t, 1.0 - w.lambda_recon, r, w.lambda_recon),
        (Some(t), None) => tape.scale(t, 1.0 - w.lambda_recon),
        (None, Some(r)) => tape.scale(r, w.lambda_recon),
        (None, None) => tape.constant(Tensor::scalar(0.0)),
    }
}
