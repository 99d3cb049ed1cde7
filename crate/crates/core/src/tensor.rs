//! Minimal dense numeric kernel.
//!
//! Row-major `f32` matrices with 64-bit accumulation in every
//! reduction, a causal mask with optional per-position invalidation
//! (used for padded batches), masked softmax, and causal scaled
//! dot-product attention. Attention probabilities are kept at `f64`
//! precision ([`ProbMatrix`]); they are the raw input of the pruning
//! metric and only get rounded to 32 bits at the trace boundary.
//! Everything here is a pure function of its inputs.

use crate::error::Error;
use crate::Result;

/// Row-major matrix of `f32` values.
///
/// Storage is 32-bit; all reductions (dot products, row sums, square
/// sums) accumulate in `f64` before rounding back.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `self · rhs` with `f64` accumulation per output element.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "Matrix::matmul",
                format!("{}x{} . {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        // Accumulate a whole output row at a time so rhs is read
        // row-sequentially; per output element the sum still runs over
        // ascending t.
        let mut acc = vec![0.0f64; rhs.cols];
        for i in 0..self.rows {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let a_row = self.row(i);
            for (t, &av) in a_row.iter().enumerate() {
                let b_row = rhs.row(t);
                let av = av as f64;
                for (accv, &bv) in acc.iter_mut().zip(b_row.iter()) {
                    *accv += av * bv as f64;
                }
            }
            for (o, &a) in out.row_mut(i).iter_mut().zip(acc.iter()) {
                *o = a as f32;
            }
        }
        out.check_finite("Matrix::matmul")?;
        Ok(out)
    }

    /// `self · rhsᵀ` with `f64` accumulation; avoids materializing the transpose.
    pub fn matmul_transpose(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::shape(
                "Matrix::matmul_transpose",
                format!("{}x{} . ({}x{})T", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                let b = rhs.row(j);
                let mut acc = 0.0f64;
                for (av, bv) in a.iter().zip(b.iter()) {
                    acc += *av as f64 * *bv as f64;
                }
                out.set(i, j, acc as f32);
            }
        }
        out.check_finite("Matrix::matmul_transpose")?;
        Ok(out)
    }

    pub fn scaled(&self, s: f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn check_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }
}

/// Row-major matrix of attention probabilities, kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ProbMatrix {
    pub fn zeros(rows: usize, cols: usize) -> ProbMatrix {
        ProbMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Causal attention mask over a sequence, with optional extra
/// invalidation per key position (padded or evicted slots).
///
/// Entry `(i, j)` is attendable iff `j <= i` and position `j` is not
/// marked invalid.
#[derive(Debug, Clone)]
pub struct CausalMask {
    seq_len: usize,
    extra_invalid: Option<Vec<bool>>,
}

impl CausalMask {
    pub fn new(seq_len: usize) -> CausalMask {
        CausalMask {
            seq_len,
            extra_invalid: None,
        }
    }

    pub fn with_invalid(seq_len: usize, invalid: Vec<bool>) -> Result<CausalMask> {
        if invalid.len() != seq_len {
            return Err(Error::shape(
                "CausalMask::with_invalid",
                format!("mask length {} != seq_len {}", invalid.len(), seq_len),
            ));
        }
        Ok(CausalMask {
            seq_len,
            extra_invalid: Some(invalid),
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[inline]
    pub fn is_attendable(&self, i: usize, j: usize) -> bool {
        j <= i
            && match &self.extra_invalid {
                Some(inv) => !inv[j],
                None => true,
            }
    }
}

/// Row-wise softmax over attendable entries; non-attendable entries are
/// exactly zero in the output.
///
/// Each row subtracts its max over attendable entries before
/// exponentiating, and normalizes with an `f64` sum. A row with no
/// attendable entries (a fully padded query) comes back all-zero.
pub fn masked_softmax(scores: &Matrix, mask: &CausalMask) -> Result<ProbMatrix> {
    if scores.rows() != scores.cols() || scores.rows() != mask.seq_len() {
        return Err(Error::shape(
            "masked_softmax",
            format!(
                "scores {}x{} vs mask seq_len {}",
                scores.rows(),
                scores.cols(),
                mask.seq_len()
            ),
        ));
    }
    let n = scores.rows();
    let mut out = ProbMatrix::zeros(n, n);
    for i in 0..n {
        let mut max = f32::NEG_INFINITY;
        for j in 0..n {
            if mask.is_attendable(i, j) {
                max = max.max(scores.get(i, j));
            }
        }
        if max == f32::NEG_INFINITY {
            continue; // no attendable entry; row stays zero
        }
        let mut sum = 0.0f64;
        for j in 0..n {
            if mask.is_attendable(i, j) {
                sum += ((scores.get(i, j) - max) as f64).exp();
            }
        }
        for j in 0..n {
            if mask.is_attendable(i, j) {
                let e = ((scores.get(i, j) - max) as f64).exp();
                out.set(i, j, e / sum);
            }
        }
    }
    Ok(out)
}

/// Causal scaled dot-product attention.
///
/// Returns `(output, probs)` where `probs = masked_softmax(q·kᵀ·scale)`
/// and `output = probs·v`. The probability matrix is returned so that
/// pruners can consume its last row(s).
pub fn attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &CausalMask,
    scale: f32,
) -> Result<(Matrix, ProbMatrix)> {
    if q.cols() != k.cols() {
        return Err(Error::shape(
            "attention",
            format!("q cols {} != k cols {}", q.cols(), k.cols()),
        ));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(
            "attention",
            format!("k rows {} != v rows {}", k.rows(), v.rows()),
        ));
    }
    if q.rows() != mask.seq_len() || k.rows() != mask.seq_len() {
        return Err(Error::shape(
            "attention",
            format!(
                "q rows {} / k rows {} vs mask seq_len {}",
                q.rows(),
                k.rows(),
                mask.seq_len()
            ),
        ));
    }
    let scores = q.matmul_transpose(k)?.scaled(scale);
    let probs = masked_softmax(&scores, mask)?;
    let mut output = Matrix::zeros(probs.rows(), v.cols());
    for i in 0..probs.rows() {
        let p_row = probs.row(i);
        for j in 0..v.cols() {
            let mut acc = 0.0f64;
            for (t, &p) in p_row.iter().enumerate() {
                acc += p * v.get(t, j) as f64;
            }
            output.set(i, j, acc as f32);
        }
    }
    Ok((output, probs))
}
