use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scalar::Scalar;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Parameter tensor with a path used in failure reports.
#[derive(Debug, Clone)]
pub struct NamedTensor<E> {
    pub name: String,
    pub tensor: Tensor<E>,
}

impl<E: Scalar> NamedTensor<E> {
    pub fn new(name: impl Into<String>, tensor: Tensor<E>) -> Self {
        Self {
            name: name.into(),
            tensor,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over checked coordinates of |analytic - fd| / (|fd| + 1e-12).
    pub max_rel_err: f64,
    /// Parameter path and flat coordinate of the worst error.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    /// Coordinates where both |analytic| and |fd| sit below the
    /// finite-difference resolution floor; excluded from the max.
    pub below_resolution: usize,
    pub loss_value: f64,
}

/// Both-sides-tiny floor: central differences in f64 cannot resolve
/// gradients this small, so such coordinates are tallied instead of
/// contributing spurious relative errors.
const RESOLUTION_FLOOR: f64 = 1e-7;

/// Compare reverse-mode gradients against central finite differences.
///
/// `loss_fn` rebuilds the scalar loss from fresh leaves, so it must be a
/// pure function of the parameter values. `max_coords_per_param = 0`
/// checks every coordinate; otherwise a seeded sample per parameter.
pub fn grad_check<F>(
    params: &[NamedTensor<f64>],
    epsilon: f64,
    max_coords_per_param: usize,
    seed: u64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Var,
{
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(Error::Config(format!(
            "grad_check epsilon {epsilon} outside [1e-6, 1e-4]"
        )));
    }

    // Analytic pass.
    let tape = Tape::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.tensor.clone())).collect();
    let loss = loss_fn(&tape, &vars);
    let loss_value = tape.value_scalar(loss);
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteGradCheck {
            path: "<unperturbed loss>".into(),
        });
    }
    tape.backward(loss);
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();

    let eval = |perturbed: &[NamedTensor<f64>]| -> f64 {
        let t = Tape::<f64>::inference();
        let vs: Vec<Var> = perturbed.iter().map(|p| t.leaf(p.tensor.clone())).collect();
        let l = loss_fn(&t, &vs);
        t.value_scalar(l)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<NamedTensor<f64>> = params.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut coords_checked = 0usize;
    let mut below_resolution = 0usize;

    for (pi, p) in params.iter().enumerate() {
        let n = p.tensor.len();
        let coords: Vec<usize> = if max_coords_per_param == 0 || max_coords_per_param >= n {
            (0..n).collect()
        } else {
            index::sample(&mut rng, n, max_coords_per_param).into_vec()
        };
        for ci in coords {
            let orig = p.tensor.data()[ci];
            // Perturbation scaled with the coordinate magnitude keeps the
            // relative step sane for large weights.
            let h = epsilon * orig.abs().max(1.0);

            work[pi].tensor.data_mut()[ci] = orig + h;
            let lp = eval(&work);
            work[pi].tensor.data_mut()[ci] = orig - h;
            let lm = eval(&work);
            work[pi].tensor.data_mut()[ci] = orig;

            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::NonFiniteGradCheck {
                    path: format!("{}[{}]", p.name, ci),
                });
            }
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[pi].data()[ci];
            coords_checked += 1;
            if a.abs() < RESOLUTION_FLOOR && fd.abs() < RESOLUTION_FLOOR {
                below_resolution += 1;
                continue;
            }
            let rel = (a - fd).abs() / (fd.abs() + 1e-12);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((p.name.clone(), ci));
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        worst,
        coords_checked,
        below_resolution,
        loss_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_recovered() {
        // loss = sum x_i^2, gradient 2x: essentially exact.
        let params = vec![NamedTensor::new(
            "x",
            Tensor::from_rows(&[&[1.0, -2.0, 3.0]]),
        )];
        let report = grad_check(&params, 1e-5, 0, 0, |t, v| {
            let sq = t.mul(v[0], v[0]);
            t.sum_all(sq)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "got {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn epsilon_out_of_range_is_rejected() {
        let params = vec![NamedTensor::new("x", Tensor::<f64>::zeros(&[2]))];
        let err = grad_check(&params, 1e-3, 0, 0, |t, v| t.sum_all(v[0]));
        assert!(err.is_err());
    }

    #[test]
    fn non_finite_loss_reports_offending_path() {
        let params = vec![NamedTensor::new("w", Tensor::from_rows(&[&[1.0e308]]))];
        let err = grad_check(&params, 1e-5, 0, 0, |t, v| {
            let sq = t.mul(v[0], v[0]);
            t.sum_all(sq)
        })
        .unwrap_err();
        match err {
            Error::NonFiniteGradCheck { path } => {
                assert!(path.starts_with('w') || path.contains("loss"))
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn deliberately_wrong_gradient_is_caught() {
        // custom op with a broken backward: forward x^2, backward claims 3x.
        let params = vec![NamedTensor::new("x", Tensor::from_rows(&[&[1.5, -0.5]]))];
        let report = grad_check(&params, 1e-5, 0, 0, |t, v| {
            let x = v[0];
            let xv = t.value(x);
            let broken =
                t.push_custom(xv.mul(&xv), &[x], move |g| vec![(x, g.mul(&xv.scale(3.0)))]);
            t.sum_all(broken)
        })
        .unwrap();
        assert!(report.max_rel_err > 0.3, "broken op slipped through");
    }
}
