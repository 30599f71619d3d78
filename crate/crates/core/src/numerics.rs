//! Dense row-major `f64` matrices and the few numerically careful primitives
//! the attention code is built on.
//!
//! There is no broadcasting. Every operation checks shapes up front and
//! returns [`Error::Shape`] naming both operands on mismatch. Constructors
//! reject NaN and infinities, and operations whose arithmetic could overflow
//! re-validate their result instead of handing back non-finite data.

use crate::error::{Error, Result};

/// Dense real matrix stored in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        let m = Matrix { rows, cols, data };
        m.check_finite("Matrix::new")?;
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from a slice of equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: (0, cols),
                    rhs: (i, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    /// Builds a matrix entry by entry.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::new(rows, cols, data)
    }

    /// Wraps data produced by an operation that already guarantees finiteness.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a 0-column matrix still has `rows` empty rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix::from_parts(self.cols, self.rows, out)
    }

    /// Copies columns `start..start + width` into a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Matrix> {
        if start + width > self.cols {
            return Err(Error::Shape {
                op: "column_block",
                lhs: self.shape(),
                rhs: (start, width),
            });
        }
        let mut out = Vec::with_capacity(self.rows * width);
        for r in self.row_iter() {
            out.extend_from_slice(&r[start..start + width]);
        }
        Ok(Matrix::from_parts(self.rows, width, out))
    }

    /// Concatenates matrices with equal row counts left to right.
    pub fn hstack(blocks: &[Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, Matrix::rows);
        for b in blocks {
            if b.rows != rows {
                return Err(Error::Shape {
                    op: "hstack",
                    lhs: blocks[0].shape(),
                    rhs: b.shape(),
                });
            }
        }
        let cols = blocks.iter().map(Matrix::cols).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                out.extend_from_slice(b.row(i));
            }
        }
        Ok(Matrix::from_parts(rows, cols, out))
    }

    /// Multiplies every entry by `factor`.
    pub fn scale(&self, factor: f64) -> Result<Matrix> {
        let m = Matrix::from_parts(
            self.rows,
            self.cols,
            self.data.iter().map(|x| x * factor).collect(),
        );
        m.check_finite("scale")?;
        Ok(m)
    }

    /// Applies `f` to every entry and validates the result.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Matrix> {
        let m = Matrix::from_parts(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| f(x)).collect(),
        );
        m.check_finite("map")?;
        Ok(m)
    }

    /// Largest absolute entrywise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "max_abs_diff",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub(crate) fn check_finite(&self, context: &'static str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(idx) => Err(Error::NonFinite {
                context,
                row: idx / self.cols.max(1),
                col: idx % self.cols.max(1),
                value: self.data[idx],
            }),
        }
    }
}

/// Dot product of two equally long slices.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out += alpha * x`.
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = vec![0.0; a.rows * b.cols];
    if b.cols > 0 {
        for (i, out_row) in out.chunks_exact_mut(b.cols).enumerate() {
            for (k, &aik) in a.row(i).iter().enumerate() {
                axpy(aik, b.row(k), out_row);
            }
        }
    }
    let m = Matrix::from_parts(a.rows, b.cols, out);
    m.check_finite("matmul")?;
    Ok(m)
}

/// Product `a · bᵀ` without forming the transpose. Both operands are read
/// along contiguous rows.
pub fn matmul_transb(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape {
            op: "matmul_transb",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for ai in a.row_iter() {
        out.extend(b.row_iter().map(|bj| dot(ai, bj)));
    }
    let m = Matrix::from_parts(a.rows, b.rows, out);
    m.check_finite("matmul_transb")?;
    Ok(m)
}

/// Row-wise softmax with per-row max subtraction.
pub fn row_softmax(scores: &Matrix) -> Result<Matrix> {
    let mut out = scores.clone();
    row_softmax_in_place(&mut out)?;
    Ok(out)
}

pub(crate) fn row_softmax_in_place(m: &mut Matrix) -> Result<()> {
    m.check_finite("row_softmax")?;
    if m.cols == 0 {
        return Ok(());
    }
    for row in m.data.chunks_exact_mut(m.cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        // sum >= 1 because the max entry maps to exp(0).
        let inv = 1.0 / sum;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
    Ok(())
}

/// Tolerance on a row sum for [`row_entropy`] to accept it as a distribution.
pub const DISTRIBUTION_SUM_TOL: f64 = 1e-9;

/// Shannon entropy (nats) of every row, with `0 · ln 0 = 0`.
pub fn row_entropy(dist: &Matrix) -> Result<Vec<f64>> {
    dist.row_iter()
        .enumerate()
        .map(|(i, row)| {
            if let Some(j) = row.iter().position(|&p| p < 0.0) {
                return Err(Error::NotDistribution {
                    row: i,
                    reason: format!("negative entry {} at column {j}", row[j]),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > DISTRIBUTION_SUM_TOL {
                return Err(Error::NotDistribution {
                    row: i,
                    reason: format!("row sum {sum}"),
                });
            }
            Ok(-row
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::normal_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
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
    fn construction_rejects_bad_data() {
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0; 3]),
            Err(Error::DataLength { .. })
        ));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { row: 0, col: 1, .. })
        ));
        assert!(Matrix::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn identity_product() {
        let m = Matrix::from_rows(&[[1.5, -2.0], [0.25, 7.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn small_product_by_hand() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[[2.0], [4.0]]).unwrap());
    }

    #[test]
    fn product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = normal_matrix(&mut rng, 5, 3);
        let b = normal_matrix(&mut rng, 3, 4);
        let diff = matmul(&a, &b)
            .unwrap()
            .max_abs_diff(&naive_matmul(&a, &b))
            .unwrap();
        assert!(diff < 1e-12, "{diff}");
        let bt = b.transpose();
        let diff = matmul_transb(&a, &bt)
            .unwrap()
            .max_abs_diff(&naive_matmul(&a, &b))
            .unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                op: "matmul",
                lhs: (2, 3),
                rhs: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn overflowing_product_is_reported() {
        let a = Matrix::from_rows(&[[1e200]]).unwrap();
        assert!(matches!(matmul(&a, &a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_uniform_row() {
        let s = row_softmax(&Matrix::from_rows(&[[0.0, 0.0, 0.0]]).unwrap()).unwrap();
        for &x in s.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let s = row_softmax(&Matrix::from_rows(&[[1000.0, 0.0]]).unwrap()).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-15);
        assert!(s.get(0, 1) >= 0.0 && s.get(0, 1) < 1e-300);
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn softmax_matches_extended_precision() {
        // 40-digit evaluation of exp(i) / sum exp.
        let expected = [
            0.090_030_573_170_380_457_998,
            0.244_728_471_054_797_652_473,
            0.665_240_955_774_821_889_529,
        ];
        let s = row_softmax(&Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap()).unwrap();
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn entropy_cases() {
        let h = row_entropy(&Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(h, vec![0.0]);
        let h = row_entropy(&Matrix::from_rows(&[[0.125; 8]]).unwrap()).unwrap();
        assert!((h[0] - 2.079_441_541_679_836).abs() < 1e-12);
        let h = row_entropy(&Matrix::from_rows(&[[0.25, 0.75]]).unwrap()).unwrap();
        assert!((h[0] - 0.562_335_144_618_808_4).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_non_distributions() {
        let m = Matrix::from_rows(&[[0.5, 0.5], [1.2, -0.2]]).unwrap();
        assert!(matches!(
            row_entropy(&m),
            Err(Error::NotDistribution { row: 1, .. })
        ));
        let m = Matrix::from_rows(&[[0.5, 0.6]]).unwrap();
        assert!(matches!(
            row_entropy(&m),
            Err(Error::NotDistribution { row: 0, .. })
        ));
    }

    #[test]
    fn block_and_stack_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = normal_matrix(&mut rng, 4, 6);
        let left = m.column_block(0, 2).unwrap();
        let right = m.column_block(2, 4).unwrap();
        assert_eq!(Matrix::hstack(&[left, right]).unwrap(), m);
        assert!(m.column_block(5, 2).is_err());
    }
}
