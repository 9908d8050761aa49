//! Compressed sparse row matrices with the handful of products the
//! operators and the autodiff engine need.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("entry ({row}, {col}) outside a {rows}x{cols} matrix")]
    OutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed CSR arrays: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are
    /// summed in input order; columns within a row end up sorted.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self, SparseError> {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        for &(r, c, v) in triplets {
            if r >= rows || c >= cols {
                return Err(SparseError::OutOfBounds {
                    row: r,
                    col: c,
                    rows,
                    cols,
                });
            }
            per_row[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        for mut entries in per_row {
            // stable sort keeps the summation order of duplicates deterministic
            entries.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in entries {
                if last == Some(c) {
                    *values.last_mut().expect("previous entry") += v;
                } else {
                    indices.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            indptr.push(indices.len());
        }
        Ok(CsrMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    /// Reassembles a matrix from raw CSR arrays, validating their structure.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, SparseError> {
        if indptr.len() != rows + 1 || indptr[0] != 0 {
            return Err(SparseError::Malformed("indptr length or start".into()));
        }
        if indptr.windows(2).any(|w| w[0] > w[1]) || indptr[rows] != indices.len() {
            return Err(SparseError::Malformed("indptr not monotone".into()));
        }
        if indices.len() != values.len() {
            return Err(SparseError::Malformed("indices and values differ in length".into()));
        }
        if let Some(&c) = indices.iter().find(|&&c| c >= cols) {
            return Err(SparseError::Malformed(format!("column {c} out of range")));
        }
        Ok(CsrMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).1.iter().sum()).collect()
    }

    pub fn max_row_nnz(&self) -> usize {
        self.indptr.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    /// `self · diag(d)`: scales column `j` by `d[j]`.
    pub fn scale_columns(&self, d: &[f64]) -> Result<Self, SparseError> {
        if d.len() != self.cols {
            return Err(SparseError::ShapeMismatch(format!(
                "column scale of length {} for {} columns",
                d.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for (v, &c) in out.values.iter_mut().zip(&self.indices) {
            *v *= d[c];
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for (r, row) in d.iter_mut().enumerate() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c] += v;
            }
        }
        d
    }

    /// `Y = S · X` for a row-major `cols × channels` matrix `X`.
    pub fn matmul_dense(&self, x: &[f64], channels: usize) -> Result<Vec<f64>, SparseError> {
        if x.len() != self.cols * channels {
            return Err(SparseError::ShapeMismatch(format!(
                "operand has {} values, expected {}x{}",
                x.len(),
                self.cols,
                channels
            )));
        }
        let mut y = vec![0.0; self.rows * channels];
        self.matmul_into(x, channels, &mut y);
        Ok(y)
    }

    /// Accumulating kernel behind [`CsrMatrix::matmul_dense`]; no shape checks.
    pub fn matmul_into(&self, x: &[f64], channels: usize, y: &mut [f64]) {
        for r in 0..self.rows {
            let out = &mut y[r * channels..(r + 1) * channels];
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let src = &x[c * channels..(c + 1) * channels];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
    }

    /// `X += Sᵀ · Y`, the adjoint product used for backpropagation.
    pub fn transpose_matmul_into(&self, y: &[f64], channels: usize, x: &mut [f64]) {
        for r in 0..self.rows {
            let src = &y[r * channels..(r + 1) * channels];
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let out = &mut x[c * channels..(c + 1) * channels];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
    }

    /// Sparse-sparse product `self · other`.
    pub fn matmul(&self, other: &CsrMatrix) -> Result<CsrMatrix, SparseError> {
        if self.cols != other.rows {
            return Err(SparseError::ShapeMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut triplets = Vec::new();
        for r in 0..self.rows {
            let (cols, vals) = self.row(r);
            for (&k, &a) in cols.iter().zip(vals) {
                let (c2, v2) = other.row(k);
                for (&c, &b) in c2.iter().zip(v2) {
                    triplets.push((r, c, a * b));
                }
            }
        }
        CsrMatrix::from_triplets(self.rows, other.cols, &triplets)
    }
}
