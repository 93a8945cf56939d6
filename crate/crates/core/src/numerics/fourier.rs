use super::scalar::Scalar;
use super::tensor::Tensor;

/// Precomputed cos/sin DFT matrices for a `p x p` transform,
/// unnormalized convention (no `1/p^2` factor).
pub struct DftBasis<E> {
    pub p: usize,
    cos: Tensor<E>,
    sin: Tensor<E>,
}

impl<E: Scalar> DftBasis<E> {
    pub fn new(p: usize) -> Self {
        let mut cos = Tensor::zeros(&[p, p]);
        let mut sin = Tensor::zeros(&[p, p]);
        for u in 0..p {
            for a in 0..p {
                let theta = 2.0 * std::f64::consts::PI * (u * a) as f64 / p as f64;
                cos.set2(u, a, E::from_f64(theta.cos()));
                sin.set2(u, a, E::from_f64(theta.sin()));
            }
        }
        Self { p, cos, sin }
    }

    /// Real and imaginary parts of the 2-D DFT of a `p x p` patch:
    /// `Y = (C - iS) X (C - iS)^T`.
    pub fn re_im(&self, x: &Tensor<E>) -> (Tensor<E>, Tensor<E>) {
        assert_eq!(x.dims2(), (self.p, self.p), "patch must be p x p");
        let cx = self.cos.matmul(x);
        let sx = self.sin.matmul(x);
        let re = cx.matmul_nt(&self.cos).sub(&sx.matmul_nt(&self.sin));
        let im = cx.matmul_nt(&self.sin).add(&sx.matmul_nt(&self.cos));
        (re, im.scale(-1.0))
    }

    /// Amplitude spectrum `|F(x)|` of a `p x p` patch.
    pub fn amplitude(&self, x: &Tensor<E>) -> Tensor<E> {
        let (re, im) = self.re_im(x);
        re.zip(&im, |r, i| (r * r + i * i).sqrt())
    }

    /// Gradient of a loss w.r.t. the patch given `dL/d|F|`.
    /// Uses the zero subgradient where the amplitude vanishes.
    pub fn amplitude_backward(
        &self,
        re: &Tensor<E>,
        im: &Tensor<E>,
        amp: &Tensor<E>,
        d_amp: &Tensor<E>,
    ) -> Tensor<E> {
        let p = self.p;
        let mut d_re = Tensor::zeros(&[p, p]);
        let mut d_im = Tensor::zeros(&[p, p]);
        for i in 0..p * p {
            let a = amp.data()[i];
            if a > E::zero() {
                let g = d_amp.data()[i] / a;
                d_re.data_mut()[i] = g * re.data()[i];
                d_im.data_mut()[i] = g * im.data()[i];
            }
        }
        // re = C X C^T - S X S^T  =>  dX += C^T dRe C - S^T dRe S
        // im = -(C X S^T + S X C^T) => dX += -(C^T dIm S + S^T dIm C)
        let mut dx = self.cos.matmul_tn(&d_re.matmul(&self.cos));
        dx = dx.sub(&self.sin.matmul_tn(&d_re.matmul(&self.sin)));
        dx = dx.sub(&self.cos.matmul_tn(&d_im.matmul(&self.sin)));
        dx = dx.sub(&self.sin.matmul_tn(&d_im.matmul(&self.cos)));
        dx
    }
}

/// One-shot amplitude spectrum of a square patch.
pub fn dft2_amplitude<E: Scalar>(patch: &Tensor<E>) -> Tensor<E> {
    let (p, q) = patch.dims2();
    assert_eq!(p, q, "dft2_amplitude wants a square patch");
    DftBasis::new(p).amplitude(patch)
}

/// One-shot backward helper for [`dft2_amplitude`].
pub fn dft2_amplitude_backward<E: Scalar>(patch: &Tensor<E>, d_amp: &Tensor<E>) -> Tensor<E> {
    let (p, _) = patch.dims2();
    let basis = DftBasis::new(p);
    let (re, im) = basis.re_im(patch);
    let amp = re.zip(&im, |r, i| (r * r + i * i).sqrt());
    basis.amplitude_backward(&re, &im, &amp, d_amp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: direct double-sum complex DFT.
    fn dft2_amplitude_oracle(x: &Tensor<f64>) -> Tensor<f64> {
        let (p, _) = x.dims2();
        let mut out = Tensor::zeros(&[p, p]);
        for u in 0..p {
            for v in 0..p {
                let mut re = 0.0;
                let mut im = 0.0;
                for a in 0..p {
                    for b in 0..p {
                        let theta =
                            -2.0 * std::f64::consts::PI * ((u * a + v * b) as f64) / p as f64;
                        re += x.at2(a, b) * theta.cos();
                        im += x.at2(a, b) * theta.sin();
                    }
                }
                out.set2(u, v, (re * re + im * im).sqrt());
            }
        }
        out
    }

    #[test]
    fn constant_patch_has_only_dc_amplitude() {
        let a = 0.37;
        for p in [2usize, 3, 4] {
            let patch = Tensor::<f64>::full(&[p, p], a);
            let amp = dft2_amplitude(&patch);
            assert!((amp.at2(0, 0) - a * (p * p) as f64).abs() < 1e-9);
            for i in 1..p * p {
                assert!(
                    amp.data()[i].abs() < 1e-9,
                    "non-DC bin {i} = {}",
                    amp.data()[i]
                );
            }
        }
    }

    #[test]
    fn single_corner_impulse_has_flat_spectrum() {
        // |DFT| of [[1,0],[0,0]] is 1 in every bin.
        let mut patch = Tensor::<f64>::zeros(&[2, 2]);
        patch.set2(0, 0, 1.0);
        let amp = dft2_amplitude(&patch);
        for &v in amp.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_double_sum_oracle_up_to_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for p in 1..=8usize {
            for _ in 0..8 {
                let patch = Tensor::<f64>::randn(&[p, p], 1.0, &mut rng);
                let fast = dft2_amplitude(&patch);
                let slow = dft2_amplitude_oracle(&patch);
                assert!(
                    fast.max_rel_diff(&slow) < 1e-6,
                    "p={p}: rel diff {}",
                    fast.max_rel_diff(&slow)
                );
            }
        }
    }

    #[test]
    fn amplitude_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = 4;
        let basis = DftBasis::<f64>::new(p);
        let x = Tensor::<f64>::randn(&[p, p], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[p, p], 1.0, &mut rng);
        // loss = sum(w * |F(x)|)
        let (re, im) = basis.re_im(&x);
        let amp = re.zip(&im, |r, i| (r * r + i * i).sqrt());
        let dx = basis.amplitude_backward(&re, &im, &amp, &w);
        let eps = 1e-6;
        for i in 0..p * p {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let lp = basis.amplitude(&xp).mul(&w).sum();
            let lm = basis.amplitude(&xm).mul(&w).sum();
            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (dx.data()[i] - fd).abs() / (fd.abs() + 1e-9) < 1e-5,
                "coord {i}: analytic {} vs fd {fd}",
                dx.data()[i]
            );
        }
    }
}
