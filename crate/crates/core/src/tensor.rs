//! Dense row-major matrices and vectors.
//!
//! Vectors are stored as `n × 1` columns. Every product in the crate is of
//! the form `W · x` with `W` stored `out × in`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Column vector.
    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::from_vec(rows, cols, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_vector(&self) -> bool {
        self.rows == 1 || self.cols == 1
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// First element; the value of a `1 × 1` tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(other, op)?;
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Self {
        self.map(T::tanh)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Matrix product `a · b`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.cols != b.rows {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `w · x` for a vector `x` of length `w.cols()`; returns a column vector.
pub fn matvec<T: Scalar>(w: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.is_vector() || x.len() != w.cols {
        return Err(Error::Dimension {
            op: "matvec",
            left: w.shape(),
            right: x.shape(),
        });
    }
    let mut out = vec![T::zero(); w.rows];
    matvec_into(w, x.data(), &mut out);
    Ok(Tensor::vector(out))
}

/// Accumulates `w · x` into `out`. Lengths are the caller's responsibility.
#[inline]
pub(crate) fn matvec_into<T: Scalar>(w: &Tensor<T>, x: &[T], out: &mut [T]) {
    for (o, row) in out.iter_mut().zip(w.data.chunks_exact(w.cols)) {
        let mut acc = T::zero();
        for (&a, &b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o += acc;
    }
}

/// Logistic function, branching on sign so neither branch overflows.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform on `[-s, s]` with `s = 1 / sqrt(cols)`.
    Uniform,
    Zeros,
}

/// Seeded parameter initialization. Identical `(rows, cols, seed, scheme)`
/// always yields a bitwise-identical tensor.
pub fn init_params<T: Scalar>(rows: usize, cols: usize, seed: u64, scheme: InitScheme) -> Tensor<T> {
    match scheme {
        InitScheme::Zeros => Tensor::zeros(rows, cols),
        InitScheme::Uniform => {
            let s = 1.0 / (cols as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..rows * cols)
                .map(|_| T::of(rng.random_range(-s..=s)))
                .collect();
            Tensor { rows, cols, data }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_product() {
        let i = Tensor::<f64>::from_f64(2, 2, &[1., 0., 0., 1.]).unwrap();
        let v = Tensor::<f64>::from_f64(2, 1, &[3., 4.]).unwrap();
        assert_eq!(matmul(&i, &v).unwrap().data(), &[3., 4.]);
    }

    #[test]
    fn small_product() {
        let a = Tensor::<f64>::from_f64(2, 2, &[1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::from_f64(2, 1, &[5., 6.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17., 39.]);
        assert_eq!(matvec(&a, &b).unwrap().data(), &[17., 39.]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let a = init_params::<f64>(8, 8, 11, InitScheme::Uniform);
        let b = init_params::<f64>(8, 8, 12, InitScheme::Uniform);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&naive(&a, &b)) < 1e-12);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let a = Tensor::<f64>::zeros(2, 3);
        let b = Tensor::<f64>::zeros(2, 3);
        match matmul(&a, &b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
        assert!(matvec(&a, &Tensor::vector(vec![1.0, 2.0])).is_err());
        assert!(a.add(&Tensor::zeros(3, 2)).is_err());
    }

    #[test]
    fn activations_at_origin_and_saturation() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(0.0f64.tanh(), 0.0);
        // closed forms: 1/(1+e^-40) and e^-40/(1+e^-40)
        let tail = (-40.0f64).exp();
        assert!((sigmoid(40.0f64) - 1.0 / (1.0 + tail)).abs() < 1e-15);
        assert!((sigmoid(-40.0f64) - tail / (1.0 + tail)).abs() < 1e-15);
        assert!((sigmoid(40.0f64) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-40.0f64) < 1e-15);
        assert!(sigmoid(-1000.0f64).is_finite() && sigmoid(1000.0f64).is_finite());
        assert_eq!(sigmoid(0.0f32), 0.5);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_params::<f64>(4, 4, 1, InitScheme::Uniform);
        let b = init_params::<f64>(4, 4, 1, InitScheme::Uniform);
        let c = init_params::<f64>(4, 4, 2, InitScheme::Uniform);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let s = 0.5;
        assert!(a.data().iter().all(|v| v.abs() <= s));
    }

    #[test]
    fn init_mean_is_centered() {
        let n = 100_000;
        let t = init_params::<f64>(1, n, 3, InitScheme::Uniform);
        let s = 1.0 / (n as f64).sqrt();
        let mean = t.data().iter().sum::<f64>() / n as f64;
        // uniform on [-s, s] has variance s²/3
        let sigma_of_mean = (s * s / 3.0).sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma_of_mean, "mean {mean}");
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |d| Tensor::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-9);
        }

        #[test]
        fn sigmoid_is_symmetric(xs in proptest::collection::vec(-50.0f64..50.0, 1..32)) {
            let t = Tensor::vector(xs);
            let pos = t.sigmoid();
            let neg = t.scale(-1.0).sigmoid();
            for (p, n) in pos.data().iter().zip(neg.data()) {
                prop_assert!((p + n - 1.0).abs() < 1e-12);
                prop_assert!(*p >= 0.0 && *p <= 1.0);
            }
        }

        #[test]
        fn activations_are_monotone(mut xs in proptest::collection::vec(-60.0f64..60.0, 2..64)) {
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let t = Tensor::vector(xs);
            for act in [t.sigmoid(), t.tanh()] {
                for w in act.data().windows(2) {
                    prop_assert!(w[0] <= w[1]);
                }
            }
        }

        #[test]
        fn tanh_is_bounded(xs in proptest::collection::vec(-5.0f64..5.0, 1..16)) {
            for v in Tensor::vector(xs).tanh().data() {
                prop_assert!(*v > -1.0 && *v < 1.0);
            }
        }
    }
}
