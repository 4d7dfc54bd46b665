use serde::{Deserialize, Serialize};

/// Dense row-major `f64` matrix; vectors are `1 x n` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::filled(1, 1, v)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape {rows}x{cols} vs {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn select_cols(&self, cols: &[usize]) -> Self {
        Self::from_fn(self.rows, cols.len(), |r, c| self.get(r, cols[c]))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Self {
        let (r, k, c) = (self.rows, self.cols, other.cols);
        assert_eq!(k, other.rows, "matmul {}x{} · {}x{}", r, k, other.rows, c);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let orow = &mut out[i * c..(i + 1) * c];
            for (kk, &a) in self.data[i * k..(i + 1) * k].iter().enumerate() {
                if a != 0.0 {
                    axpy(a, &other.data[kk * c..(kk + 1) * c], orow);
                }
            }
        }
        Self::from_vec(r, c, out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Self {
        let (r, k, c) = (self.rows, self.cols, other.rows);
        assert_eq!(k, other.cols, "matmul_nt {}x{} · ({}x{})ᵀ", r, k, c, other.cols);
        if r >= 8 && c >= 8 {
            // axpy form vectorises better than row dot products
            return self.matmul(&other.transpose());
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..c {
                out.push(dot(a, &other.data[j * k..(j + 1) * k]));
            }
        }
        Self::from_vec(r, c, out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Self {
        let (k, r, c) = (self.rows, self.cols, other.cols);
        assert_eq!(k, other.rows, "matmul_tn ({}x{})ᵀ · {}x{}", k, r, other.rows, c);
        let mut out = vec![0.0; r * c];
        for kk in 0..k {
            let brow = &other.data[kk * c..(kk + 1) * c];
            for (i, &a) in self.data[kk * r..(kk + 1) * r].iter().enumerate() {
                if a != 0.0 {
                    axpy(a, brow, &mut out[i * c..(i + 1) * c]);
                }
            }
        }
        Self::from_vec(r, c, out)
    }
}

#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        Tensor::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_fn(9, 7, |i, j| (i as f64 * 0.3 - j as f64 * 0.7).sin());
        let b = Tensor::from_fn(7, 10, |i, j| (i as f64 + 2.0 * j as f64).cos());
        let expected = naive(&a, &b);
        let close = |x: &Tensor| x.zip_map(&expected, |p, q| (p - q).abs()).data().iter().all(|d| *d < 1e-12);
        assert!(close(&a.matmul(&b)));
        assert!(close(&a.matmul_nt(&b.transpose())));
        assert!(close(&a.transpose().matmul_tn(&b)));
        let small = Tensor::from_fn(2, 7, |i, j| (i * j) as f64);
        let e2 = naive(&small, &b);
        assert!(small.matmul_nt(&b.transpose()).zip_map(&e2, |p, q| (p - q).abs()).data().iter().all(|d| *d < 1e-12));
    }
}
