use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

/// Dense row-major tensor of `f64` values.
///
/// Every tensor built through [`Tensor::from_vec`] is finite; the arithmetic
/// helpers below keep that property for finite inputs.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return invalid(format!("dims must be non-empty and positive, got {dims:?}"));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return shape_err(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {pos}")));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::from_vec(&[rows.len(), cols], data).expect("finite literal")
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        assert!(!dims.is_empty() && !dims.contains(&0), "bad dims {dims:?}");
        Self {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of rows when viewed as a matrix (leading dims collapsed).
    pub fn rows(&self) -> usize {
        if self.dims.len() == 1 {
            1
        } else {
            self.data.len() / self.cols()
        }
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }

    pub fn is_matrix(&self) -> bool {
        self.dims.len() == 2
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() || dims.contains(&0) {
            return shape_err(format!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.dims.len() != 2 {
            return shape_err(format!("{what} expects a matrix, got {:?}", self.dims));
        }
        Ok((self.dims[0], self.dims[1]))
    }

    /// Standard matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return shape_err(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.dims, other.dims
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            dims: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            dims: vec![n, m],
            data: out,
        }
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Tensor {
        let cols = self.cols();
        let mut out = self.clone();
        for row in out.data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return shape_err(format!(
                "elementwise op on {:?} and {:?}",
                self.dims, other.dims
            ));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.chunks(self.cols()).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let cols = self.cols();
        let mut out = vec![0.0; cols];
        for row in self.data.chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference; `INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.dims != other.dims {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Matrix-vector product treating `v` as a column.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let (_, n) = self.require_matrix("matvec")?;
        if v.len() != n {
            return shape_err(format!("matvec: {:?} x len {}", self.dims, v.len()));
        }
        Ok(self
            .data
            .chunks(n)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn to_le_bytes_f64(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_times_matrix() {
        let m = Tensor::from_rows(&[[1.5, -2.0], [0.25, 4.0]]);
        assert_eq!(Tensor::eye(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn idempotent_example() {
        let a = Tensor::from_rows(&[[1.0, 1.0], [0.0, 0.0]]);
        let prod = a.matmul(&a).unwrap();
        assert_eq!(prod, a);
        assert_eq!(naive_matmul(&a, &a), a);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::from_rows(&[[0.0, 0.0]]).softmax_rows();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor::from_rows(&[[1e300, 1e300]]).softmax_rows();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = Tensor::from_rows(&[[1f64.ln(), 3f64.ln()]]).softmax_rows();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::from_vec(&[2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    }

    fn matrix(max: usize) -> impl Strategy<Value = Tensor> {
        (1..=max, 1..=max).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-10.0f64..10.0, r * c)
                .prop_map(move |d| Tensor::from_vec(&[r, c], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matmul_matches_triple_loop(
            (a, b) in (1usize..=8, 1usize..=8, 1usize..=8).prop_flat_map(|(m, k, n)| (
                proptest::collection::vec(-10.0f64..10.0, m * k)
                    .prop_map(move |d| Tensor::from_vec(&[m, k], d).unwrap()),
                proptest::collection::vec(-10.0f64..10.0, k * n)
                    .prop_map(move |d| Tensor::from_vec(&[k, n], d).unwrap()),
            ))
        ) {
            let fast = a.matmul(&b).unwrap();
            let slow = naive_matmul(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }

    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn softmax_rows_sum_to_one(m in matrix(8)) {
            let s = m.scale(5.0).softmax_rows();
            for r in s.row_sums() {
                prop_assert!((r - 1.0).abs() <= 1e-12);
            }
            prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        }
    }
}
