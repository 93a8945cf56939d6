use std::cell::{Cell, RefCell};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<E> = Box<dyn FnOnce(&Tensor<E>) -> Vec<(Var, Tensor<E>)>>;

struct Node<E> {
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    /// Whether gradients should flow into this node.
    track: bool,
    back: Option<BackFn<E>>,
}

/// Append-only reverse-mode autodiff tape.
///
/// Forward ops push nodes whose backward closures capture the values
/// they need; [`Tape::backward`] walks the tape in reverse creation
/// order (which is a topological order) and accumulates gradients.
/// A tape built with [`Tape::inference`] records values only.
pub struct Tape<E: Scalar> {
    nodes: RefCell<Vec<Node<E>>>,
    recording: bool,
    ran_backward: Cell<bool>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            ran_backward: Cell::new(false),
        }
    }

    /// A tape that skips all backward bookkeeping.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
            ran_backward: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<E>, track: bool, back: Option<BackFn<E>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let (track, back) = if self.recording {
            (track, back)
        } else {
            (false, None)
        };
        nodes.push(Node {
            value,
            grad: None,
            track,
            back,
        });
        Var(id)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].track
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.tracked(v))
    }

    /// Differentiable leaf (parameters).
    pub fn leaf(&self, value: Tensor<E>) -> Var {
        self.push(value, true, None)
    }

    /// Non-differentiable input (data, targets, masks).
    pub fn constant(&self, value: Tensor<E>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> Tensor<E> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let t = &nodes[v.0].value;
        assert_eq!(t.len(), 1, "value_scalar on non-scalar node");
        t.data()[0].as_f64()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Gradient of the last backward pass w.r.t. `v`; zeros if the node
    /// never received a contribution.
    pub fn grad(&self, v: Var) -> Tensor<E> {
        let nodes = self.nodes.borrow();
        match &nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(nodes[v.0].value.shape()),
        }
    }

    /// Run reverse-mode accumulation from a scalar root. One shot per tape.
    pub fn backward(&self, root: Var) {
        assert!(self.recording, "backward on an inference tape");
        assert!(
            !self.ran_backward.get(),
            "backward already ran on this tape"
        );
        self.ran_backward.set(true);
        let mut nodes = self.nodes.borrow_mut();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        let root_shape = nodes[root.0].value.shape().to_vec();
        nodes[root.0].grad = Some(Tensor::full(&root_shape, 1.0));
        for i in (0..=root.0).rev() {
            if nodes[i].grad.is_none() {
                continue;
            }
            let Some(back) = nodes[i].back.take() else {
                continue;
            };
            let g = nodes[i].grad.clone().expect("grad present");
            for (v, contrib) in back(&g) {
                debug_assert!(v.0 < i, "backward contribution to a later node");
                let node = &mut nodes[v.0];
                if !node.track {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&contrib),
                    None => node.grad = Some(contrib),
                }
            }
        }
    }

    /// Custom op: caller supplies the forward value, the parents (for
    /// reachability tracking), and a backward closure producing
    /// per-parent gradient contributions.
    pub fn push_custom(
        &self,
        value: Tensor<E>,
        parents: &[Var],
        back: impl FnOnce(&Tensor<E>) -> Vec<(Var, Tensor<E>)> + 'static,
    ) -> Var {
        let track = self.any_tracked(parents);
        let back: Option<BackFn<E>> = if self.recording && track {
            Some(Box::new(back))
        } else {
            None
        };
        self.push(value, track, back)
    }

    // ---- arithmetic ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(&self.value(b));
        self.push_custom(out, &[a, b], move |g| vec![(a, g.clone()), (b, g.clone())])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(&self.value(b));
        self.push_custom(out, &[a, b], move |g| {
            vec![(a, g.clone()), (b, g.scale(-1.0))]
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.mul(&bv);
        self.push_custom(out, &[a, b], move |g| {
            vec![(a, g.mul(&bv)), (b, g.mul(&av))]
        })
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push_custom(out, &[a], move |g| vec![(a, g.scale(s))])
    }

    /// `ca * a + cb * b` with equal shapes.
    pub fn lincomb(&self, a: Var, ca: f64, b: Var, cb: f64) -> Var {
        let out = self.value(a).scale(ca).add(&self.value(b).scale(cb));
        self.push_custom(out, &[a, b], move |g| {
            vec![(a, g.scale(ca)), (b, g.scale(cb))]
        })
    }

    /// `a (m x n) + row (1 x n)` broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        let (m, n) = av.dims2();
        let (rm, rn) = rv.dims2();
        assert_eq!((rm, rn), (1, n), "add_row wants a 1 x {n} row");
        let mut out = av.clone();
        for i in 0..m {
            let orow = out.row_mut(i);
            for (o, &r) in orow.iter_mut().zip(rv.data().iter()) {
                *o += r;
            }
        }
        self.push_custom(out, &[a, row], move |g| {
            let (m, n) = g.dims2();
            let mut rg = Tensor::zeros(&[1, n]);
            for i in 0..m {
                let grow = g.row(i);
                for (acc, &gv) in rg.data_mut().iter_mut().zip(grow.iter()) {
                    *acc += gv;
                }
            }
            vec![(a, g.clone()), (row, rg)]
        })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.matmul(&bv);
        self.push_custom(out, &[a, b], move |g| {
            vec![(a, g.matmul_nt(&bv)), (b, av.matmul_tn(g))]
        })
    }

    /// `a (m x k) * b^T (n x k)`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.matmul_nt(&bv);
        self.push_custom(out, &[a, b], move |g| {
            vec![(a, g.matmul(&bv)), (b, g.matmul_tn(&av))]
        })
    }

    // ---- nonlinearities ----

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let one = E::one();
            one / (one + (-x).exp())
        });
        let y = out.clone();
        self.push_custom(out, &[a], move |g| {
            let one = E::one();
            vec![(a, g.zip(&y, |gv, yv| gv * yv * (one - yv)))]
        })
    }

    /// Elementwise inverse square root (inputs must be positive).
    pub fn rsqrt(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(|x| E::one() / x.sqrt());
        let y = out.clone();
        self.push_custom(out, &[a], move |g| {
            // d(x^-1/2)/dx = -1/2 x^-3/2 = -1/2 y^3
            let half = E::from_f64(-0.5);
            vec![(a, g.zip(&y, |gv, yv| gv * half * yv * yv * yv))]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let av = self.value(a);
        let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let one = E::one();
        let out = av.map(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (one + u.tanh())
        });
        self.push_custom(out, &[a], move |g| {
            let d = av.map(|x| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (one + E::from_f64(3.0) * k * x * x);
                half * (one + t) + half * x * (one - t * t) * du
            });
            vec![(a, g.mul(&d))]
        })
    }

    /// Row-wise numerically stable softmax (last axis of a 2-D tensor).
    pub fn softmax_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims2();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = av.row(i);
            let mut mx = row[0];
            for &x in row {
                if x > mx {
                    mx = x;
                }
            }
            let mut sum = E::zero();
            let orow = out.row_mut(i);
            for (o, &x) in orow.iter_mut().zip(row.iter()) {
                let e = (x - mx).exp();
                *o = e;
                sum += e;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let y = out.clone();
        self.push_custom(out, &[a], move |g| {
            let (m, n) = y.dims2();
            let mut dx = Tensor::zeros(&[m, n]);
            for i in 0..m {
                let yr = y.row(i);
                let gr = g.row(i);
                let mut dot = E::zero();
                for (&gv, &yv) in gr.iter().zip(yr.iter()) {
                    dot += gv * yv;
                }
                let dr = dx.row_mut(i);
                for ((d, &gv), &yv) in dr.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                    *d = yv * (gv - dot);
                }
            }
            vec![(a, dx)]
        })
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm_rows(&self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let (m, n) = xv.dims2();
        assert_eq!(gv.dims2(), (1, n), "gamma must be 1 x {n}");
        assert_eq!(bv.dims2(), (1, n), "beta must be 1 x {n}");
        let eps = E::from_f64(EPS);
        let nn = E::from_f64(n as f64);
        let mut xhat = Tensor::zeros(&[m, n]);
        let mut inv_std = vec![E::zero(); m];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = xv.row(i);
            let mut mean = E::zero();
            for &v in row {
                mean += v;
            }
            mean /= nn;
            let mut var = E::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var /= nn;
            let istd = E::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            let hr = xhat.row_mut(i);
            for (h, &v) in hr.iter_mut().zip(row.iter()) {
                *h = (v - mean) * istd;
            }
            let or = out.row_mut(i);
            for (((o, h), &gm), &bt) in or
                .iter_mut()
                .zip(hr.iter())
                .zip(gv.data().iter())
                .zip(bv.data().iter())
            {
                *o = *h * gm + bt;
            }
        }
        self.push_custom(out, &[x, gamma, beta], move |g| {
            let (m, n) = xhat.dims2();
            let nn = E::from_f64(n as f64);
            let mut dgamma = Tensor::zeros(&[1, n]);
            let mut dbeta = Tensor::zeros(&[1, n]);
            let mut dx = Tensor::zeros(&[m, n]);
            for i in 0..m {
                let gr = g.row(i);
                let hr = xhat.row(i);
                for ((dg, &gvv), &hv) in dgamma.data_mut().iter_mut().zip(gr.iter()).zip(hr.iter())
                {
                    *dg += gvv * hv;
                }
                for (db, &gvv) in dbeta.data_mut().iter_mut().zip(gr.iter()) {
                    *db += gvv;
                }
                // dxhat = g * gamma; dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                let mut mean_dh = E::zero();
                let mut mean_dh_h = E::zero();
                let mut dh = vec![E::zero(); n];
                for (j, ((&gvv, &gm), &hv)) in
                    gr.iter().zip(gv.data().iter()).zip(hr.iter()).enumerate()
                {
                    let d = gvv * gm;
                    dh[j] = d;
                    mean_dh += d;
                    mean_dh_h += d * hv;
                }
                mean_dh /= nn;
                mean_dh_h /= nn;
                let istd = inv_std[i];
                let dr = dx.row_mut(i);
                for ((d, &dhv), &hv) in dr.iter_mut().zip(dh.iter()).zip(hr.iter()) {
                    *d = istd * (dhv - mean_dh - hv * mean_dh_h);
                }
            }
            vec![(x, dx), (gamma, dgamma), (beta, dbeta)]
        })
    }

    // ---- shape ops ----

    /// Select rows by index; indices may repeat (backward scatter-adds).
    pub fn gather_rows(&self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims2();
        let mut out = Tensor::zeros(&[idx.len(), n]);
        for (i, &src) in idx.iter().enumerate() {
            assert!(src < m, "gather_rows index {src} out of {m}");
            out.row_mut(i).copy_from_slice(av.row(src));
        }
        self.push_custom(out, &[a], move |g| {
            let mut da = Tensor::zeros(&[m, n]);
            for (i, &src) in idx.iter().enumerate() {
                let dr = da.row_mut(src);
                for (d, &gv) in dr.iter_mut().zip(g.row(i).iter()) {
                    *d += gv;
                }
            }
            vec![(a, da)]
        })
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims2();
        assert!(start + len <= m, "slice_rows out of range");
        let mut out = Tensor::zeros(&[len, n]);
        for i in 0..len {
            out.row_mut(i).copy_from_slice(av.row(start + i));
        }
        self.push_custom(out, &[a], move |g| {
            let mut da = Tensor::zeros(&[m, n]);
            for i in 0..len {
                da.row_mut(start + i).copy_from_slice(g.row(i));
            }
            vec![(a, da)]
        })
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<Tensor<E>> = parts.iter().map(|&v| self.value(v)).collect();
        let n = values[0].dims2().1;
        let total: usize = values.iter().map(|t| t.dims2().0).sum();
        let mut out = Tensor::zeros(&[total, n]);
        let mut r = 0;
        for t in &values {
            let (tm, tn) = t.dims2();
            assert_eq!(tn, n, "concat_rows column mismatch");
            for i in 0..tm {
                out.row_mut(r).copy_from_slice(t.row(i));
                r += 1;
            }
        }
        let owners: Vec<(Var, usize)> = parts
            .iter()
            .zip(values.iter())
            .map(|(&v, t)| (v, t.dims2().0))
            .collect();
        self.push_custom(out, parts, move |g| {
            let n = g.dims2().1;
            let mut res = Vec::with_capacity(owners.len());
            let mut r = 0;
            for &(v, rows) in &owners {
                let mut part = Tensor::zeros(&[rows, n]);
                for i in 0..rows {
                    part.row_mut(i).copy_from_slice(g.row(r + i));
                }
                r += rows;
                res.push((v, part));
            }
            res
        })
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims2();
        assert!(start + len <= n, "slice_cols out of range");
        let mut out = Tensor::zeros(&[m, len]);
        for i in 0..m {
            out.row_mut(i)
                .copy_from_slice(&av.row(i)[start..start + len]);
        }
        self.push_custom(out, &[a], move |g| {
            let mut da = Tensor::zeros(&[m, n]);
            for i in 0..m {
                da.row_mut(i)[start..start + len].copy_from_slice(g.row(i));
            }
            vec![(a, da)]
        })
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<Tensor<E>> = parts.iter().map(|&v| self.value(v)).collect();
        let m = values[0].dims2().0;
        let total: usize = values.iter().map(|t| t.dims2().1).sum();
        let mut out = Tensor::zeros(&[m, total]);
        let mut c0 = 0;
        for t in &values {
            let (tm, tn) = t.dims2();
            assert_eq!(tm, m, "concat_cols row mismatch");
            for i in 0..m {
                out.row_mut(i)[c0..c0 + tn].copy_from_slice(t.row(i));
            }
            c0 += tn;
        }
        let owners: Vec<(Var, usize)> = parts
            .iter()
            .zip(values.iter())
            .map(|(&v, t)| (v, t.dims2().1))
            .collect();
        self.push_custom(out, parts, move |g| {
            let m = g.dims2().0;
            let mut res = Vec::with_capacity(owners.len());
            let mut c0 = 0;
            for &(v, cols) in &owners {
                let mut part = Tensor::zeros(&[m, cols]);
                for i in 0..m {
                    part.row_mut(i).copy_from_slice(&g.row(i)[c0..c0 + cols]);
                }
                c0 += cols;
                res.push((v, part));
            }
            res
        })
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let out = Tensor::new(&[1], vec![av.sum()]);
        self.push_custom(out, &[a], move |g| {
            let gs = g.data()[0];
            vec![(a, Tensor::full(&shape, 1.0).map(|x| x * gs))]
        })
    }

    /// Column-wise mean over rows: `(m x n) -> (1 x n)`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.dims2();
        assert!(m > 0);
        let inv = 1.0 / m as f64;
        let mut out = Tensor::zeros(&[1, n]);
        for i in 0..m {
            for (o, &v) in out.data_mut().iter_mut().zip(av.row(i).iter()) {
                *o += v;
            }
        }
        out.scale_assign(inv);
        self.push_custom(out, &[a], move |g| {
            let mut da = Tensor::zeros(&[m, n]);
            for i in 0..m {
                let dr = da.row_mut(i);
                for (d, &gv) in dr.iter_mut().zip(g.data().iter()) {
                    *d = gv * E::from_f64(inv);
                }
            }
            vec![(a, da)]
        })
    }

    /// Softmax cross-entropy of a single logits row against a class index.
    pub fn cross_entropy(&self, logits: Var, label: usize) -> Var {
        let lv = self.value(logits);
        let (m, k) = lv.dims2();
        assert_eq!(m, 1, "cross_entropy expects a single logits row");
        assert!(label < k, "label {label} out of range {k}");
        let row = lv.row(0);
        let mut mx = row[0];
        for &x in row {
            if x > mx {
                mx = x;
            }
        }
        let mut sum = E::zero();
        let mut probs = vec![E::zero(); k];
        for (p, &x) in probs.iter_mut().zip(row.iter()) {
            let e = (x - mx).exp();
            *p = e;
            sum += e;
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
        let lse = mx + sum.ln();
        let loss = lse - row[label];
        let out = Tensor::new(&[1], vec![loss]);
        self.push_custom(out, &[logits], move |g| {
            let gs = g.data()[0];
            let mut d = Tensor::zeros(&[1, k]);
            for (j, (dv, &p)) in d.data_mut().iter_mut().zip(probs.iter()).enumerate() {
                let onehot = if j == label { E::one() } else { E::zero() };
                *dv = (p - onehot) * gs;
            }
            vec![(logits, d)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{grad_check, NamedTensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0x5eed)
    }

    fn check_op(name: &str, shapes: &[&[usize]], f: impl Fn(&Tape<f64>, &[Var]) -> Var + 'static) {
        let mut r = rng();
        let params: Vec<NamedTensor<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| NamedTensor::new(format!("p{i}"), Tensor::randn(s, 0.8, &mut r)))
            .collect();
        let report = grad_check(&params, 1e-5, 0, 7, |tape, vars| f(tape, vars)).unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "{name}: max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn grad_matmul_chain() {
        check_op("matmul", &[&[3, 4], &[4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1]);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_matmul_nt() {
        check_op("matmul_nt", &[&[3, 4], &[5, 4]], |t, v| {
            let y = t.matmul_nt(v[0], v[1]);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_elementwise_and_broadcast() {
        check_op("mix", &[&[3, 4], &[3, 4], &[1, 4]], |t, v| {
            let s = t.add(v[0], v[1]);
            let p = t.mul(s, v[0]);
            let q = t.add_row(p, v[2]);
            let l = t.lincomb(q, 0.3, p, -1.7);
            t.sum_all(l)
        });
    }

    #[test]
    fn grad_nonlinearities() {
        check_op("nonlin", &[&[2, 5]], |t, v| {
            let a = t.gelu(v[0]);
            let b = t.sigmoid(a);
            let c = t.softmax_rows(b);
            let sq = t.mul(c, c);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_layer_norm() {
        check_op("layernorm", &[&[4, 6], &[1, 6], &[1, 6]], |t, v| {
            let y = t.layer_norm_rows(v[0], v[1], v[2]);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_shape_ops() {
        check_op("shapes", &[&[5, 4], &[2, 4]], |t, v| {
            let g = t.gather_rows(v[0], vec![0, 2, 2, 4]);
            let c = t.concat_rows(&[g, v[1]]);
            let s = t.slice_rows(c, 1, 4);
            let cc = t.slice_cols(s, 1, 2);
            let joined = t.concat_cols(&[cc, cc]);
            let m = t.mean_rows(joined);
            let sq = t.mul(m, m);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_cross_entropy() {
        check_op("ce", &[&[1, 7]], |t, v| t.cross_entropy(v[0], 3));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::<f64>::new();
        let mut r = rng();
        let x = tape.constant(Tensor::randn(&[6, 9], 3.0, &mut r));
        let y = tape.value(tape.softmax_rows(x));
        for i in 0..6 {
            let s: f64 = y.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let y = tape.value(tape.softmax_rows(x));
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let l = tape.cross_entropy(x, 2);
        assert!((tape.value_scalar(l) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logit_tends_to_zero() {
        let tape = Tape::<f64>::new();
        let mut logits = Tensor::<f64>::zeros(&[1, 4]);
        logits.set2(0, 1, 50.0);
        let x = tape.constant(logits);
        let l = tape.cross_entropy(x, 1);
        assert!(tape.value_scalar(l) < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_rows(&[&[2.0, 3.0]]));
        let c = tape.constant(Tensor::from_rows(&[&[4.0, 5.0]]));
        let y = tape.mul(a, c);
        let s = tape.sum_all(y);
        tape.backward(s);
        assert_eq!(tape.grad(c).data(), &[0.0, 0.0]);
        assert_eq!(tape.grad(a).data(), &[4.0, 5.0]);
    }

    #[test]
    fn untouched_leaf_has_zero_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_rows(&[&[2.0]]));
        let b = tape.leaf(Tensor::from_rows(&[&[7.0]]));
        let y = tape.mul(a, a);
        let s = tape.sum_all(y);
        tape.backward(s);
        assert_eq!(tape.grad(b).data(), &[0.0]);
    }
}
