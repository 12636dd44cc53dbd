//! Small dense linear-algebra kernels used by the graph and analysis layers.
//!
//! Matrices here are tiny (sensor networks of a few dozen nodes), so plain
//! row-major `Vec<f64>` storage with Gaussian elimination is sufficient.

use num_complex::Complex64;

/// Relative pivot threshold under which a column is treated as dependent.
pub const RANK_TOL: f64 = 1e-10;

/// Row-major dense real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Induced infinity norm (maximum absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `xᵀ·self` as a row vector.
    pub fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += xi * a;
            }
        }
        out
    }

    /// `self·x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Outcome of a null-space computation.
#[derive(Debug, Clone, PartialEq)]
pub enum NullSpace {
    /// Full column rank: only the trivial solution.
    Trivial,
    /// Exactly one free column; the basis vector is returned.
    Simple(Vec<f64>),
    /// More than one free column (nullity reported).
    Degenerate(usize),
}

/// Null space of a square or rectangular matrix via Gaussian elimination with
/// partial pivoting. Columns whose best pivot falls below `RANK_TOL` times the
/// largest pivot seen so far are declared free.
pub fn null_space(m: &Matrix) -> NullSpace {
    let (rows, cols) = (m.rows(), m.cols());
    let mut a = m.clone();
    let mut pivot_cols = Vec::new();
    let mut free_cols = Vec::new();
    let mut r = 0;
    let mut max_pivot: f64 = 0.0;
    let scale = a.data.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));

    for c in 0..cols {
        if r == rows {
            free_cols.push(c);
            continue;
        }
        let (best, best_abs) =
            (r..rows)
                .map(|i| (i, a.get(i, c).abs()))
                .fold((r, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        let reference = if max_pivot > 0.0 { max_pivot } else { scale };
        if best_abs <= RANK_TOL * reference || best_abs == 0.0 {
            free_cols.push(c);
            continue;
        }
        max_pivot = max_pivot.max(best_abs);
        if best != r {
            for j in 0..cols {
                a.data.swap(r * cols + j, best * cols + j);
            }
        }
        let p = a.get(r, c);
        for i in (r + 1)..rows {
            let f = a.get(i, c) / p;
            if f != 0.0 {
                for j in c..cols {
                    let v = a.get(i, j) - f * a.get(r, j);
                    a.set(i, j, v);
                }
            }
        }
        pivot_cols.push(c);
        r += 1;
    }

    match free_cols.len() {
        0 => NullSpace::Trivial,
        1 => {
            let free = free_cols[0];
            let mut x = vec![0.0; cols];
            x[free] = 1.0;
            for (row, &pc) in pivot_cols.iter().enumerate().rev() {
                let s: f64 = ((pc + 1)..cols).map(|j| a.get(row, j) * x[j]).sum();
                x[pc] = -s / a.get(row, pc);
            }
            NullSpace::Simple(x)
        }
        k => NullSpace::Degenerate(k),
    }
}

/// Determinant of a dense complex matrix given row-major, by elimination with
/// partial pivoting.
pub fn complex_det(n: usize, mut a: Vec<Complex64>) -> Complex64 {
    assert_eq!(a.len(), n * n);
    let mut det = Complex64::new(1.0, 0.0);
    for c in 0..n {
        let best = (c..n)
            .max_by(|&i, &j| a[i * n + c].norm().total_cmp(&a[j * n + c].norm()))
            .unwrap_or(c);
        if a[best * n + c].norm() == 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        if best != c {
            for j in 0..n {
                a.swap(c * n + j, best * n + j);
            }
            det = -det;
        }
        let p = a[c * n + c];
        det *= p;
        for i in (c + 1)..n {
            let f = a[i * n + c] / p;
            for j in c..n {
                let v = a[c * n + j];
                a[i * n + j] -= f * v;
            }
        }
    }
    det
}
