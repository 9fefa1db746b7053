//! Dense row-major `f64` matrices.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, MvpError, Result};

/// A dense row-major matrix. Vectors are stored as `1 × n` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor2 {
    type Error = MvpError;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor2::new(raw.rows, raw.cols, raw.data)
    }
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Dimension,
            "{} values cannot fill a {rows}x{cols} tensor",
            data.len()
        );
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn column_vector(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            Dimension,
            "ragged rows"
        );
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies row `r` out as a `1 × cols` tensor.
    pub fn row_tensor(&self, r: usize) -> Tensor2 {
        Tensor2::row_vector(self.row(r).to_vec())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Tensor2 {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor2 {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        ensure!(
            self.cols == other.rows,
            Dimension,
            "matmul {}x{} by {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor2 {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        ensure!(
            self.rows == other.rows,
            Dimension,
            "t_matmul {}x{} by {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; k * m];
        for r in 0..n {
            let a_row = &self.data[r * k..(r + 1) * k];
            let b_row = &other.data[r * m..(r + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[p * m..(p + 1) * m];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor2 {
            rows: k,
            cols: m,
            data: out,
        })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor2) -> Result<Tensor2> {
        ensure!(
            self.cols == other.cols,
            Dimension,
            "matmul_t {}x{} by {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let (n, m) = (self.rows, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out[i * m + j] = dot(a, other.row(j));
            }
        }
        Ok(Tensor2 {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2> {
        ensure!(
            self.shape() == other.shape(),
            Dimension,
            "elementwise op on {:?} and {:?}",
            self.shape(),
            other.shape()
        );
        Ok(Tensor2 {
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

    pub fn add(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2) -> Result<Tensor2> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor2 {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor2) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds a `1 × cols` row to every row.
    pub fn add_row(&self, row: &Tensor2) -> Result<Tensor2> {
        ensure!(
            row.rows == 1 && row.cols == self.cols,
            Dimension,
            "row broadcast of {:?} onto {:?}",
            row.shape(),
            self.shape()
        );
        let mut out = self.clone();
        for r in 0..self.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Column means as a `1 × cols` row.
    pub fn mean_rows(&self) -> Tensor2 {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let n = self.rows.max(1) as f64;
        Tensor2::row_vector(out.into_iter().map(|v| v / n).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn hstack(parts: &[&Tensor2]) -> Result<Tensor2> {
        let rows = parts.first().map_or(0, |p| p.rows);
        ensure!(
            parts.iter().all(|p| p.rows == rows),
            Dimension,
            "hstack with differing row counts"
        );
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn vstack(parts: &[&Tensor2]) -> Result<Tensor2> {
        let cols = parts.first().map_or(0, |p| p.cols);
        ensure!(
            parts.iter().all(|p| p.cols == cols),
            Dimension,
            "vstack with differing column counts"
        );
        let rows = parts.iter().map(|p| p.rows).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor2> {
        ensure!(
            start + len <= self.cols,
            Dimension,
            "column slice {start}..{} of {} columns",
            start + len,
            self.cols
        );
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Ok(Tensor2 {
            rows: self.rows,
            cols: len,
            data,
        })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x · W + b`, with `b` broadcast over rows.
pub fn affine(x: &Tensor2, w: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    ensure!(
        b.rows() == 1 && b.cols() == w.cols(),
        Dimension,
        "bias {:?} for weight {:?}",
        b.shape(),
        w.shape()
    );
    x.matmul(w)?.add_row(b)
}

/// Row-wise softmax. Entries equal to `-inf` map to exactly zero.
pub fn softmax(v: &Tensor2) -> Result<Tensor2> {
    let mut out = v.clone();
    for r in 0..v.rows() {
        softmax_in_place(out.row_mut(r))?;
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    let max = row
        .iter()
        .copied()
        .filter(|v| *v != f64::NEG_INFINITY)
        .fold(f64::NEG_INFINITY, f64::max);
    ensure!(
        max.is_finite(),
        DegenerateDistribution,
        "softmax over a row with no finite entry"
    );
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = if *v == f64::NEG_INFINITY {
            0.0
        } else {
            (*v - max).exp()
        };
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
    Ok(())
}

/// `log Σ exp(row)`, stabilized.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    ensure!(
        u.len() == v.len(),
        Dimension,
        "cosine of lengths {} and {}",
        u.len(),
        v.len()
    );
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    ensure!(
        nu > 0.0 && nv > 0.0,
        DegenerateVector,
        "cosine with a zero-norm vector"
    );
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Target for [`cross_entropy`].
#[derive(Clone, Debug)]
pub enum Target<'a> {
    Class(usize),
    Distribution(&'a [f64]),
}

/// `-Σ target_j · log softmax(logits)_j` for a single row of logits.
pub fn cross_entropy(logits: &[f64], target: Target<'_>) -> Result<f64> {
    ensure!(
        logits.iter().all(|v| v.is_finite()),
        Validation,
        "non-finite logits"
    );
    let lse = log_sum_exp(logits);
    match target {
        Target::Class(c) => {
            ensure!(
                c < logits.len(),
                Validation,
                "class {c} out of range for {} logits",
                logits.len()
            );
            Ok(lse - logits[c])
        }
        Target::Distribution(t) => {
            validate_distribution(t, logits.len())?;
            Ok(t.iter().zip(logits).map(|(p, z)| p * (lse - z)).sum())
        }
    }
}

fn validate_distribution(t: &[f64], len: usize) -> Result<()> {
    ensure!(
        t.len() == len,
        Validation,
        "target of length {} for {len} classes",
        t.len()
    );
    ensure!(
        t.iter().all(|p| p.is_finite() && *p >= 0.0),
        Validation,
        "target has negative or non-finite mass"
    );
    let total: f64 = t.iter().sum();
    ensure!(
        (total - 1.0).abs() <= 1e-9,
        Validation,
        "target sums to {total}, not 1"
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn affine_identity_and_zero_weights() {
        let i2 = Tensor2::identity(2);
        let out = affine(&i2, &i2, &Tensor2::zeros(1, 2)).unwrap();
        assert_eq!(out, i2);

        let x = Tensor2::row_vector(vec![1.0, 2.0]);
        let b = Tensor2::row_vector(vec![3.0, 4.0]);
        let out = affine(&x, &Tensor2::zeros(2, 2), &b).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let x = Tensor2::zeros(2, 3);
        let w = Tensor2::zeros(2, 2);
        assert!(matches!(
            affine(&x, &w, &Tensor2::zeros(1, 2)),
            Err(MvpError::Dimension(_))
        ));
    }

    #[test]
    fn affine_matches_naive_triple_loop() {
        // 3x4 input, 4x2 weights: fixed pseudo-random entries.
        let x: Vec<f64> = (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.37).collect();
        let w: Vec<f64> = (0..8).map(|i| ((i * 5 % 9) as f64 - 4.0) * 0.21).collect();
        let b = vec![0.5, -1.25];
        let mut expected = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = b[j];
                for k in 0..4 {
                    acc += x[i * 4 + k] * w[k * 2 + j];
                }
                expected[i * 2 + j] = acc;
            }
        }
        let out = affine(
            &Tensor2::new(3, 4, x).unwrap(),
            &Tensor2::new(4, 2, w).unwrap(),
            &Tensor2::row_vector(b),
        )
        .unwrap();
        for (o, e) in out.data().iter().zip(&expected) {
            assert_abs_diff_eq!(o, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor2::row_vector(vec![0.3; 3])).unwrap();
        for v in s.data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let s = softmax(&Tensor2::row_vector(vec![0.0, f64::NEG_INFINITY])).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
        let s = softmax(&Tensor2::row_vector(vec![2.0, 1.0])).unwrap();
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        assert_abs_diff_eq!(s.data()[0], e2 / (e2 + e1), epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[0], 0.731059, epsilon = 1e-6);
        assert_abs_diff_eq!(s.data()[1], 0.268941, epsilon = 1e-6);
    }

    #[test]
    fn softmax_all_masked_is_degenerate() {
        let v = Tensor2::row_vector(vec![f64::NEG_INFINITY; 3]);
        assert!(matches!(
            softmax(&v),
            Err(MvpError::DegenerateDistribution(_))
        ));
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(40.0) - 1.0).abs() < 1e-9);
        assert_abs_diff_eq!(sigmoid(1.0), 1.0 / (1.0 + (-1f64).exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(sigmoid(1.0), 0.731059, epsilon = 1e-6);
        assert_abs_diff_eq!(sigmoid(-0.7), 1.0 - sigmoid(0.7), epsilon = 1e-15);
    }

    #[test]
    fn cosine_examples() {
        let u = [1.0, 2.0, -0.5];
        assert_abs_diff_eq!(cosine(&u, &u).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(cosine(&u, &neg).unwrap(), -1.0, epsilon = 1e-15);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(MvpError::DegenerateVector(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&[50.0, 0.0, 0.0], Target::Class(0)).unwrap();
        assert!(ce < 1e-20);
        let ce = cross_entropy(&[0.2; 5], Target::Class(3)).unwrap();
        assert_abs_diff_eq!(ce, 5f64.ln(), epsilon = 1e-14);
        let ce = cross_entropy(&[1.0, 0.0], Target::Distribution(&[0.5, 0.5])).unwrap();
        let direct = -0.5 * (1f64.exp() / (1f64.exp() + 1.0)).ln()
            - 0.5 * (1.0 / (1f64.exp() + 1.0)).ln();
        assert_abs_diff_eq!(ce, direct, epsilon = 1e-14);
        assert_abs_diff_eq!(ce, 0.813262, epsilon = 1e-6);
        assert!(matches!(
            cross_entropy(&[1.0, 0.0], Target::Distribution(&[0.7, 0.7])),
            Err(MvpError::Validation(_))
        ));
    }

    #[test]
    fn tensor_rejects_wrong_length() {
        assert!(Tensor2::new(2, 2, vec![1.0; 3]).is_err());
        let bad: std::result::Result<Tensor2, _> =
            serde_json::from_str(r#"{"rows":2,"cols":2,"data":[1.0]}"#);
        assert!(bad.is_err());
    }
}
