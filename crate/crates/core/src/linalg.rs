//! Dense f64 kernels shared by the rest of the crate.
//!
//! Everything here is a pure function over owned or borrowed buffers. Reductions
//! run sequentially in index order so results are bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector {
    data: Vec<f64>,
}

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(self.data.iter().map(|x| x * c).collect())
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(data: Vec<f64>) -> Self {
        Self::new(data)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::contract(format!(
                    "row {i} has length {} but row 0 has {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Adds `scale * u vᵀ` in place.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(Error::contract(format!(
                "outer product {}x{} does not fit {}x{} matrix",
                u.len(),
                v.len(),
                self.rows,
                self.cols
            )));
        }
        for (i, &ui) in u.iter().enumerate() {
            let s = scale * ui;
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &vj) in row.iter_mut().zip(v) {
                *r += s * vj;
            }
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `m · v`.
pub fn matvec(m: &DenseMatrix, v: &DenseVector) -> Result<DenseVector> {
    if m.cols != v.dim() {
        return Err(Error::contract(format!(
            "matvec: matrix has {} cols, vector has dim {}",
            m.cols,
            v.dim()
        )));
    }
    let out = (0..m.rows).map(|i| dot(m.row(i), v.as_slice())).collect();
    Ok(DenseVector::new(out))
}

/// `mᵀ · v`.
pub fn matvec_transposed(m: &DenseMatrix, v: &DenseVector) -> Result<DenseVector> {
    if m.rows != v.dim() {
        return Err(Error::contract(format!(
            "matvec_transposed: matrix has {} rows, vector has dim {}",
            m.rows,
            v.dim()
        )));
    }
    let mut out = vec![0.0; m.cols];
    for (i, &vi) in v.as_slice().iter().enumerate() {
        for (o, &mij) in out.iter_mut().zip(m.row(i)) {
            *o += mij * vi;
        }
    }
    Ok(DenseVector::new(out))
}

/// `a · b` for matrices.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::contract(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Max-subtracted softmax.
pub fn softmax(v: &DenseVector) -> Result<DenseVector> {
    Ok(DenseVector::new(softmax_slice(v.as_slice())?))
}

pub(crate) fn softmax_slice(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::contract("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::contract("softmax input contains non-finite entries"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

/// `log softmax(v)` via log-sum-exp.
pub(crate) fn log_softmax_slice(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::contract("log_softmax of an empty vector"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(v.iter().map(|x| x - lse).collect())
}

pub fn l2_normalize(v: &DenseVector) -> Result<DenseVector> {
    let n = v.norm();
    if !(n > NORM_EPS) {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector with norm {n:e}"
        )));
    }
    Ok(v.scaled(1.0 / n))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &DenseVector) -> Result<usize> {
    argmax_slice(v.as_slice())
}

pub(crate) fn argmax_slice(v: &[f64]) -> Result<usize> {
    let mut it = v.iter().enumerate();
    let (mut best, mut best_val) = match it.next() {
        Some((i, &x)) => (i, x),
        None => return Err(Error::contract("argmax of an empty vector")),
    };
    for (i, &x) in it {
        if x > best_val {
            best = i;
            best_val = x;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec())
    }

    #[test]
    fn matvec_examples() {
        let i3 = DenseMatrix::identity(3);
        assert_eq!(matvec(&i3, &v(&[1.0, 2.0, 3.0])).unwrap(), v(&[1.0, 2.0, 3.0]));
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matvec(&m, &v(&[1.0, 1.0])).unwrap(), v(&[3.0, 7.0]));
        let z = DenseMatrix::zeros(2, 2);
        assert_eq!(matvec(&z, &v(&[5.0, 6.0])).unwrap(), v(&[0.0, 0.0]));
    }

    #[test]
    fn matvec_dimension_mismatch() {
        let m = DenseMatrix::zeros(2, 3);
        assert!(matches!(matvec(&m, &v(&[1.0, 2.0])), Err(Error::Contract(_))));
        assert!(matches!(
            matvec_transposed(&m, &v(&[1.0, 2.0, 3.0])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn transposed_and_matmul_agree_with_hand_values() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matvec_transposed(&m, &v(&[1.0, 1.0])).unwrap(), v(&[4.0, 6.0]));
        let sq = matmul(&m, &m).unwrap();
        assert_eq!(sq.as_slice(), &[7.0, 10.0, 15.0, 22.0]);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&v(&[0.0, 0.0, 0.0])).unwrap();
        for p in s.as_slice() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&v(&[1000.0, 1000.0])).unwrap();
        assert_eq!(s.as_slice(), &[0.5, 0.5]);
        // exp(ln 3) / (1 + exp(ln 3)) = 3/4
        let s = softmax(&v(&[0.0, 3f64.ln()])).unwrap();
        assert!((s.as_slice()[0] - 0.25).abs() < 1e-12);
        assert!((s.as_slice()[1] - 0.75).abs() < 1e-12);
        assert!(matches!(softmax(&v(&[])), Err(Error::Contract(_))));
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&v(&[3.0, 4.0])).unwrap();
        assert!((n.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((n.as_slice()[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&v(&[2.0, 0.0, 0.0])).unwrap(), v(&[1.0, 0.0, 0.0]));
        assert_eq!(l2_normalize(&v(&[0.0, 1.0])).unwrap(), v(&[0.0, 1.0]));
        assert!(matches!(
            l2_normalize(&v(&[0.0, 1e-13])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax(&v(&[0.1, 0.9, 0.5])).unwrap(), 1);
        assert_eq!(argmax(&v(&[1.0, 1.0])).unwrap(), 0);
        assert_eq!(argmax(&v(&[-5.0])).unwrap(), 0);
        assert!(argmax(&v(&[])).is_err());
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = [0.3, -1.2, 2.5, 0.0];
        let ls = log_softmax_slice(&x).unwrap();
        let s = softmax_slice(&x).unwrap();
        for (a, b) in ls.iter().zip(&s) {
            assert!((a - b.ln()).abs() < 1e-14);
        }
    }

    fn finite_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-500.0f64..500.0, 1..40)
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(x in finite_vec()) {
            let s = softmax(&v(&x)).unwrap();
            let sum: f64 = s.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(s.as_slice().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn normalize_is_idempotent(x in prop::collection::vec(-10.0f64..10.0, 1..40)) {
            let x = v(&x);
            prop_assume!(x.norm() > 1e-6);
            let once = l2_normalize(&x).unwrap();
            prop_assert!((once.norm() - 1.0).abs() < 1e-9);
            let twice = l2_normalize(&once).unwrap();
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn identity_matvec_is_exact(x in prop::collection::vec(-1e6f64..1e6, 1..20)) {
            let i = DenseMatrix::identity(x.len());
            prop_assert_eq!(matvec(&i, &v(&x)).unwrap(), v(&x));
        }

        #[test]
        fn argmax_invariant_under_softmax(x in prop::collection::vec(-50.0f64..50.0, 1..30)) {
            let x = v(&x);
            prop_assert_eq!(argmax(&x).unwrap(), argmax(&softmax(&x).unwrap()).unwrap());
        }
    }
}
