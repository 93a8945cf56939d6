use super::scalar::Scalar;

/// Dense row-major tensor. Most of the model lives in 2-D shapes
/// (`rows x cols`); 1-D tensors are treated as a single row where a
/// matrix is expected.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "element count {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![E::from_f64(value); n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![E::from_f64(value)])
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&x| E::from_f64(x)));
        }
        Self::new(&[r, c], data)
    }

    /// Normal(0, std) entries from the given rng.
    pub fn randn<R: rand::Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                E::from_f64(z * std)
            })
            .collect();
        Self::new(shape, data)
    }

    /// Xavier-uniform init for a `fan_in x fan_out` projection.
    pub fn xavier<R: rand::Rng>(shape: &[usize], rng: &mut R) -> Self {
        assert_eq!(shape.len(), 2, "xavier wants a 2-D shape");
        let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
        let n = shape[0] * shape[1];
        let data = (0..n)
            .map(|_| E::from_f64(rng.random_range(-limit..limit)))
            .collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Rows/cols view of a 1-D or 2-D tensor.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("expected rank <= 2 tensor, got shape {:?}", self.shape),
        }
    }

    pub fn row(&self, r: usize) -> &[E] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [E] {
        let (_, cols) = self.dims2();
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn at2(&self, r: usize, c: usize) -> E {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: E) {
        let (_, cols) = self.dims2();
        self.data[r * cols + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self (m x k) * other (k x n)`.
    pub fn matmul(&self, other: &Tensor<E>) -> Tensor<E> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// `self (m x k) * other^T (n x k)` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor<E>) -> Tensor<E> {
        let (m, k) = self.dims2();
        let (n, k2) = other.dims2();
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &other.data[j * k..(j + 1) * k];
                let mut acc = E::zero();
                for (&a, &b) in arow.iter().zip(brow.iter()) {
                    acc += a * b;
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// `self^T (k x m) * other (k x n)` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor<E>) -> Tensor<E> {
        let (k, m) = self.dims2();
        let (k2, n) = other.dims2();
        assert_eq!(k, k2, "matmul_tn inner dims {k} vs {k2}");
        let mut out = vec![E::zero(); m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Tensor<E> {
        let (m, n) = self.dims2();
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor<E>) -> Tensor<E> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Tensor<E> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<E>) -> Tensor<E> {
        self.zip(other, |a, b| a * b)
    }

    pub fn zip(&self, other: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<E>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Tensor<E> {
        let s = E::from_f64(s);
        self.map(|x| x * s)
    }

    pub fn scale_assign(&mut self, s: f64) {
        let s = E::from_f64(s);
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn sum(&self) -> E {
        let mut acc = E::zero();
        for &x in &self.data {
            acc += x;
        }
        acc
    }

    /// Max |a - b| over elements, relative to the largest |a|.
    pub fn max_rel_diff(&self, other: &Tensor<E>) -> f64 {
        assert_eq!(self.shape, other.shape);
        let mut max_abs = 0.0f64;
        let mut max_diff = 0.0f64;
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            max_abs = max_abs.max(a.as_f64().abs());
            max_diff = max_diff.max((a.as_f64() - b.as_f64()).abs());
        }
        max_diff / (max_abs + 1e-12)
    }

    pub fn to_f64_tensor(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|x| x.as_f32()).collect()
    }
}
