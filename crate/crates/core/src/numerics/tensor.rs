use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Rank-1 tensors are used for single data points, rank-2 tensors for
/// batches (one example per row) and weight matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero-sized axis in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericGuard(format!("non-finite entry {bad}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for results whose shape is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Standard normal draws.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Uniform draws on `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| bound * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Stacks equally shaped rank-1 tensors into a `[n, d]` matrix.
    pub fn stack_rows(rows: &[Tensor]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack zero rows".into()))?;
        let width = first.numel();
        let mut data = Vec::with_capacity(width * rows.len());
        for r in rows {
            if r.numel() != width {
                return Err(Error::Dimension(format!(
                    "row width {} differs from {width}",
                    r.numel()
                )));
            }
            data.extend_from_slice(&r.data);
        }
        Ok(Tensor::from_parts(vec![rows.len(), width], data))
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a matrix; a rank-1 tensor counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Row `i` of a matrix as a rank-1 tensor.
    pub fn row_tensor(&self, i: usize) -> Tensor {
        Tensor::from_parts(vec![self.cols()], self.row(i).to_vec())
    }

    pub fn split_rows(&self) -> Vec<Tensor> {
        (0..self.rows()).map(|i| self.row_tensor(i)).collect()
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// `[1, d]` view of a rank-1 tensor; matrices are returned unchanged.
    pub fn as_matrix(&self) -> Tensor {
        match self.shape.len() {
            1 => Tensor::from_parts(vec![1, self.shape[0]], self.data.clone()),
            _ => self.clone(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, "elementwise op")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    /// `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &Tensor, b: f64) -> Result<Tensor> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    pub fn distance(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "distance")?;
        Ok(euclidean(&self.data, &other.data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    /// Matrix product `[m, k] x [k, n] -> [m, n]`.
    ///
    /// Every output row is accumulated in the same order regardless of how
    /// many rows the left operand has, so batching never changes results.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul lhs")?;
        let (k2, n) = other.dims2("matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions {m}x{k} * {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub(crate) fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Dimension(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `c += a * b` with `a: [m, k]`, `b: [k, n]`, all row-major.
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    // Register-blocked over 4 rows and 8 columns. Every output entry is
    // accumulated from zero over p in increasing order whatever block it
    // falls in, so a row's result does not depend on the other rows.
    const MR: usize = 4;
    const NR: usize = 8;
    let full_rows = m - m % MR;
    let full_cols = n - n % NR;
    for i0 in (0..full_rows).step_by(MR) {
        for j0 in (0..full_cols).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let brow: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + p];
                    for (cv, &bv) in acc_r.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                let at = (i0 + r) * n + j0;
                for (cv, &v) in c[at..at + NR].iter_mut().zip(acc_r) {
                    *cv += v;
                }
            }
        }
        for i in i0..i0 + MR {
            gemm_tail(a, b, c, i, k, n, full_cols);
        }
    }
    for i in full_rows..m {
        gemm_tail(a, b, c, i, k, n, 0);
    }
}

/// Columns `from..n` of row `i`, in the same accumulation order as the
/// blocked kernel.
fn gemm_tail(a: &[f64], b: &[f64], c: &mut [f64], i: usize, k: usize, n: usize, from: usize) {
    const NR: usize = 8;
    let arow = &a[i * k..(i + 1) * k];
    for j0 in (from..n).step_by(NR) {
        let w = NR.min(n - j0);
        let mut acc = [0.0f64; NR];
        for (p, &av) in arow.iter().enumerate() {
            for (cv, &bv) in acc[..w].iter_mut().zip(&b[p * n + j0..p * n + j0 + w]) {
                *cv += av * bv;
            }
        }
        for (cv, &v) in c[i * n + j0..i * n + j0 + w].iter_mut().zip(&acc[..w]) {
            *cv += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap();
        let b = Tensor::matrix(2, 2, vec![3., 4., 5., 6.]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_row_by_column() {
        let a = Tensor::matrix(1, 2, vec![1., 2.]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3., 4.]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = seeded(11);
        let a = Tensor::randn(&[3, 4], &mut rng);
        let b = Tensor::randn(&[4, 2], &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn batching_does_not_change_rows() {
        let mut rng = seeded(3);
        let a = Tensor::randn(&[5, 7], &mut rng);
        let w = Tensor::randn(&[7, 6], &mut rng);
        let full = a.matmul(&w).unwrap();
        for i in 0..5 {
            let single = a.row_tensor(i).as_matrix().matmul(&w).unwrap();
            assert_eq!(single.data(), full.row(i));
        }
    }

    #[test]
    fn construction_checks() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = seeded(5);
        let a = Tensor::randn(&[3, 5], &mut rng);
        assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
    }
}
