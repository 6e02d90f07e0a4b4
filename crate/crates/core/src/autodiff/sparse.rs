/// Compressed sparse row matrix used for fixed graph operators
/// (normalized adjacency, Laplacian rows).
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < rows && c < cols, "triplet ({r},{c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
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

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `y[rows, width] = self * x[cols, width]` for one batch item.
    pub fn apply(&self, x: &[f64], width: usize, y: &mut [f64]) {
        for r in 0..self.rows {
            let yr = &mut y[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let xc = &x[c * width..(c + 1) * width];
                for (yv, xv) in yr.iter_mut().zip(xc) {
                    *yv += v * xv;
                }
            }
        }
    }

    /// `x[cols, width] += self^T * y[rows, width]` for one batch item.
    pub fn apply_transpose(&self, y: &[f64], width: usize, x: &mut [f64]) {
        for r in 0..self.rows {
            let yr = &y[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let xc = &mut x[c * width..(c + 1) * width];
                for (xv, yv) in xc.iter_mut().zip(yr) {
                    *xv += v * yv;
                }
            }
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                d[r * self.cols + c] = v;
            }
        }
        d
    }
}
