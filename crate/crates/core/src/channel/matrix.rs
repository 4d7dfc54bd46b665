use num_complex::Complex64;

use crate::error::{Error, Result};

/// Dense complex matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Shape("non-finite matrix entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds an `M x N` matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<Complex64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::Shape("columns of unequal length".into()));
        }
        Ok(Self::from_fn(rows, columns.len(), |r, c| columns[c][r]))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn column(&self, c: usize) -> Vec<Complex64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[Complex64]) {
        for (r, v) in values.iter().enumerate() {
            self[(r, c)] = *v;
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Self::from_fn(self.rows, cols.len(), |r, c| self[(r, cols[c])])
    }

    pub fn conj_transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        Ok(out)
    }

    /// `Hᴴ H`.
    pub fn gram(&self) -> Self {
        let n = self.cols;
        let mut g = Self::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for r in 0..self.rows {
                    acc += self[(r, i)].conj() * self[(r, j)];
                }
                g[(i, j)] = acc;
                g[(j, i)] = acc.conj();
            }
        }
        g
    }

    /// Induced 1-norm (maximum absolute column sum).
    pub fn norm_1(&self) -> f64 {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self[(r, c)].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Inverse of a square matrix by Gauss-Jordan elimination with partial
    /// pivoting on the real `2n x 2n` embedding `[[A, -B], [B, A]]` of `A + iB`.
    pub fn inverse(&self) -> Result<Self> {
        if self.rows != self.cols {
            return Err(Error::Shape(format!(
                "inverse of non-square {}x{} matrix",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        let m = 2 * n;
        let w = 2 * m;
        // augmented [real embedding | I]
        let mut aug = vec![0.0; m * w];
        for i in 0..n {
            for j in 0..n {
                let z = self[(i, j)];
                aug[i * w + j] = z.re;
                aug[i * w + j + n] = -z.im;
                aug[(i + n) * w + j] = z.im;
                aug[(i + n) * w + j + n] = z.re;
            }
        }
        for i in 0..m {
            aug[i * w + m + i] = 1.0;
        }
        let scale = aug
            .chunks(w)
            .flat_map(|row| row[..m].iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        if scale == 0.0 {
            return Err(Error::Singular {
                cond: f64::INFINITY,
            });
        }
        for col in 0..m {
            let pivot = (col..m)
                .max_by(|&a, &b| aug[a * w + col].abs().total_cmp(&aug[b * w + col].abs()))
                .expect("non-empty pivot range");
            if aug[pivot * w + col].abs() <= scale * 1e-14 {
                return Err(Error::Singular {
                    cond: f64::INFINITY,
                });
            }
            if pivot != col {
                for k in 0..w {
                    aug.swap(col * w + k, pivot * w + k);
                }
            }
            let p = aug[col * w + col];
            for k in 0..w {
                aug[col * w + k] /= p;
            }
            for r in 0..m {
                if r == col {
                    continue;
                }
                let f = aug[r * w + col];
                if f != 0.0 {
                    for k in 0..w {
                        aug[r * w + k] -= f * aug[col * w + k];
                    }
                }
            }
        }
        // the inverse embedding has the same block structure; read the left column of blocks
        Ok(Self::from_fn(n, n, |i, j| {
            Complex64::new(aug[i * w + m + j], aug[(i + n) * w + m + j])
        }))
    }
}

impl std::ops::Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;

    fn index(&self, (r, c): (usize, usize)) -> &Complex64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm_sqr(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}
