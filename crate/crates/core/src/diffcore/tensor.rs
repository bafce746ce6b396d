use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Dense row-major array of `f64`.
///
/// Rank 1 tensors are treated as column vectors by [`matmul`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        ensure!(
            shape.iter().all(|&s| s > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            "shape {shape:?} needs {n} values, got {}",
            data.len()
        );
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns for rank ≤ 2, with vectors viewed as a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (self.len() / self.shape[self.rank() - 1], self.shape[self.rank() - 1]),
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == self.data.len(),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        let (_, c) = self.rows_cols();
        self.data[i * c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.rows_cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.rows_cols();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.data.len(), other.data.len());
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Matrix product `a · b` where `b` may be a matrix or a column vector.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure!(a.rank() == 2, "matmul lhs must be a matrix, got shape {:?}", a.shape);
    let (r, s) = (a.shape[0], a.shape[1]);
    let (s2, t, vector_rhs) = match b.shape.as_slice() {
        [n] => (*n, 1, true),
        [n, t] => (*n, *t, false),
        _ => {
            return Err(crate::Error::contract(format!(
                "matmul rhs must be rank 1 or 2, got shape {:?}",
                b.shape
            )))
        }
    };
    ensure!(
        s == s2,
        "matmul shape mismatch: {:?} x {:?}",
        a.shape,
        b.shape
    );
    let mut out = vec![0.0; r * t];
    for i in 0..r {
        let arow = &a.data[i * s..(i + 1) * s];
        let orow = &mut out[i * t..(i + 1) * t];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * t..(k + 1) * t];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    let shape = if vector_rhs { vec![r] } else { vec![r, t] };
    Ok(Tensor { shape, data: out })
}

/// Numerically stable softmax of a slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

pub fn log_softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v - lse).collect()
}

/// Softmax along the last axis of a rank 1 or rank 2 tensor.
pub fn softmax(x: &Tensor) -> Tensor {
    let (r, c) = x.rows_cols();
    let mut data = Vec::with_capacity(x.len());
    for i in 0..r {
        data.extend(softmax_slice(&x.data[i * c..(i + 1) * c]));
    }
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], r: usize, s: usize, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * t];
        for i in 0..r {
            for j in 0..t {
                for k in 0..s {
                    out[i * t + j] += a[i * s + k] * b[k * t + j];
                }
            }
        }
        out
    }

    #[test]
    fn identity_times_matrix() {
        let b = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn zeros_annihilate() {
        let b = Tensor::matrix(4, 2, (0..8).map(|v| v as f64 + 0.5).collect()).unwrap();
        let c = matmul(&Tensor::zeros(&[3, 4]), &b).unwrap();
        assert_eq!(c, Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn random_matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = matmul(
            &Tensor::matrix(3, 3, a.clone()).unwrap(),
            &Tensor::matrix(3, 3, b.clone()).unwrap(),
        )
        .unwrap();
        for (x, y) in c.data().iter().zip(naive_matmul(&a, &b, 3, 3, 3)) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let u = softmax_slice(&[2.0; 4]);
        assert!(u.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let s = softmax_slice(&[1000.0, 0.0]);
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1].abs() < 1e-12);
        assert!(s.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn shape_must_match_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }
}
