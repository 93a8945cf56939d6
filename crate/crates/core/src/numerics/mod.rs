//! Math backend: tensors, reverse-mode autodiff, DFT amplitudes,
//! finite-difference gradient checking.
//!
//! Everything else in the crate goes through this module for real-valued
//! computation, so swapping or verifying the backend touches one place.
//! Training code instantiates `f32`; gradient-check tests instantiate
//! `f64`.

mod fourier;
mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use fourier::{dft2_amplitude, dft2_amplitude_backward, DftBasis};
pub use gradcheck::{grad_check, GradCheckReport, NamedTensor};
pub use scalar::{Dtype, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Capabilities the backend must provide. Mirrors what the model code
/// actually calls; [`verify_backend`] exercises each one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capability {
    MatMul,
    ElementwiseAddMul,
    SoftmaxLastAxis,
    LayerNorm,
    Gelu,
    Sigmoid,
    Dft2Amplitude,
    ReverseModeGrad,
}

/// Full capability list required by the model.
pub fn required_ops() -> &'static [Capability] {
    &[
        Capability::MatMul,
        Capability::ElementwiseAddMul,
        Capability::SoftmaxLastAxis,
        Capability::LayerNorm,
        Capability::Gelu,
        Capability::Sigmoid,
        Capability::Dft2Amplitude,
        Capability::ReverseModeGrad,
    ]
}

/// Startup self-check: runs every required op on small inputs and fails
/// hard if anything is missing or produces non-finite output.
pub fn verify_backend<E: Scalar>() -> crate::Result<()> {
    use crate::error::Error;
    let fail = |cap: Capability| Error::Config(format!("backend capability check failed: {cap:?}"));

    let tape = Tape::<E>::new();
    let a = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = tape.leaf(Tensor::from_rows(&[&[0.5, -1.0], &[2.0, 0.0]]));

    let mm = tape.matmul(a, b);
    if !tape.value(mm).all_finite() {
        return Err(fail(Capability::MatMul));
    }
    let s = tape.add(a, b);
    let m = tape.mul(a, b);
    if !tape.value(s).all_finite() || !tape.value(m).all_finite() {
        return Err(fail(Capability::ElementwiseAddMul));
    }

    // softmax of a constant row is uniform
    let z = tape.leaf(Tensor::zeros(&[1, 3]));
    let sm = tape.softmax_rows(z);
    let third = 1.0 / 3.0;
    for &v in tape.value(sm).data() {
        if (v.as_f64() - third).abs() > 1e-6 {
            return Err(fail(Capability::SoftmaxLastAxis));
        }
    }

    let gamma = tape.leaf(Tensor::full(&[1, 2], 1.0));
    let beta = tape.leaf(Tensor::zeros(&[1, 2]));
    let ln = tape.layer_norm_rows(a, gamma, beta);
    if !tape.value(ln).all_finite() {
        return Err(fail(Capability::LayerNorm));
    }
    if !tape.value(tape.gelu(a)).all_finite() {
        return Err(fail(Capability::Gelu));
    }
    if !tape.value(tape.sigmoid(a)).all_finite() {
        return Err(fail(Capability::Sigmoid));
    }

    // DC amplitude of a constant patch is value * p^2
    let patch = Tensor::<E>::full(&[2, 2], 0.25);
    let amp = dft2_amplitude(&patch);
    if (amp.data()[0].as_f64() - 1.0).abs() > 1e-6 {
        return Err(fail(Capability::Dft2Amplitude));
    }

    // d(sum(a*a))/da = 2a
    let sq = tape.mul(a, a);
    let total = tape.sum_all(sq);
    tape.backward(total);
    let g = tape.grad(a);
    for (gv, av) in g.data().iter().zip(tape.value(a).data()) {
        if (gv.as_f64() - 2.0 * av.as_f64()).abs() > 1e-6 {
            return Err(fail(Capability::ReverseModeGrad));
        }
    }
    Ok(())
}
