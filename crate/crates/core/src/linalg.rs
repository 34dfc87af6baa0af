//! Dense matrices sized for LMI blocks (a few dozen rows at most).
//!
//! `Matrix` is a general row-major matrix; `SymMatrix` keeps full storage but
//! every constructor goes through the upper triangle, so it is exactly
//! symmetric.

use crate::error::{Error, Result};
use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Build from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        if rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        Ok(Self { rows: r, cols: c, data: rows.iter().flatten().copied().collect() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| c * x).collect() }
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    fn zip(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch("elementwise op".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// Assemble from a grid of blocks. `None` entries are zero blocks; every
    /// block row needs at least one concrete block to fix its height (and
    /// likewise for block columns).
    pub fn from_blocks(blocks: &[Vec<Option<&Matrix>>]) -> Result<Self> {
        let nbr = blocks.len();
        let nbc = blocks.first().map_or(0, |r| r.len());
        let mut heights = vec![None; nbr];
        let mut widths = vec![None; nbc];
        for (bi, brow) in blocks.iter().enumerate() {
            if brow.len() != nbc {
                return Err(Error::DimensionMismatch("ragged block grid".into()));
            }
            for (bj, b) in brow.iter().enumerate() {
                if let Some(m) = b {
                    for (slot, v) in [(&mut heights[bi], m.rows), (&mut widths[bj], m.cols)] {
                        match slot {
                            Some(prev) if *prev != v => {
                                return Err(Error::DimensionMismatch("block sizes disagree".into()))
                            }
                            _ => *slot = Some(v),
                        }
                    }
                }
            }
        }
        let heights: Vec<usize> = heights
            .into_iter()
            .map(|h| h.ok_or_else(|| Error::DimensionMismatch("empty block row".into())))
            .collect::<Result<_>>()?;
        let widths: Vec<usize> = widths
            .into_iter()
            .map(|w| w.ok_or_else(|| Error::DimensionMismatch("empty block column".into())))
            .collect::<Result<_>>()?;
        let mut out = Self::zeros(heights.iter().sum(), widths.iter().sum());
        let mut r0 = 0;
        for (bi, brow) in blocks.iter().enumerate() {
            let mut c0 = 0;
            for (bj, b) in brow.iter().enumerate() {
                if let Some(m) = b {
                    for i in 0..m.rows {
                        for j in 0..m.cols {
                            out[(r0 + i, c0 + j)] = m[(i, j)];
                        }
                    }
                }
                c0 += widths[bj];
            }
            r0 += heights[bi];
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let cells: Vec<String> = self.row(i).iter().map(|x| format!("{x:.6}")).collect();
            writeln!(f, "[{}]", cells.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    /// Only `f(i, j)` with `i <= j` is consulted.
    pub fn from_upper(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                m.data[i * dim + j] = v;
                m.data[j * dim + i] = v;
            }
        }
        m
    }

    /// Reads the upper triangle of a square matrix.
    pub fn from_matrix_upper(m: &Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch("symmetric matrix must be square".into()));
        }
        Ok(Self::from_upper(m.rows(), |i, j| m[(i, j)]))
    }

    /// (m + mᵀ)/2.
    pub fn symmetric_part(m: &Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch("symmetric part of non-square".into()));
        }
        Ok(Self::from_upper(m.rows(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)])))
    }

    /// m + mᵀ, exactly symmetric.
    pub fn sym_sum(m: &Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch("sym_sum of non-square".into()));
        }
        Ok(Self::from_upper(m.rows(), |i, j| m[(i, j)] + m[(j, i)]))
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = *v;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix { rows: self.dim, cols: self.dim, data: self.data.clone() }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// self += c * other
    pub fn axpy(&mut self, c: f64, other: &SymMatrix) {
        assert_eq!(self.dim, other.dim, "axpy dimension mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { dim: self.dim, data: self.data.iter().map(|x| c * x).collect() }
    }

    pub fn shifted(&self, c: f64) -> Self {
        let mut m = self.clone();
        for i in 0..self.dim {
            m.data[i * self.dim + i] += c;
        }
        m
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|x| *x == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Fᵀ S F.
    pub fn congruence(&self, f: &Matrix) -> Result<SymMatrix> {
        if f.rows() != self.dim {
            return Err(Error::DimensionMismatch("congruence".into()));
        }
        let sf = self.to_matrix().matmul(f)?;
        let m = f.transpose().matmul(&sf)?;
        Ok(Self::from_upper(m.rows(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)])))
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim);
        let mut s = 0.0;
        for i in 0..self.dim {
            s += x[i] * dot(&self.data[i * self.dim..(i + 1) * self.dim], x);
        }
        s
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        (0..self.dim).map(|i| dot(&self.data[i * self.dim..(i + 1) * self.dim], x)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column k pairs with `values[k]`.
    pub vectors: Matrix,
}

impl SymEigen {
    /// V f(Λ) Vᵀ.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.values.len();
        let fv: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        SymMatrix::from_upper(n, |i, j| {
            (0..n).map(|k| self.vectors[(i, k)] * fv[k] * self.vectors[(j, k)]).sum()
        })
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_TOL: f64 = 1e-14;

/// Cyclic Jacobi eigendecomposition.
pub fn eig_sym(m: &SymMatrix) -> Result<SymEigen> {
    if !m.is_finite() {
        return Err(Error::NonFinite("eig_sym input".into()));
    }
    let n = m.dim();
    let mut a = m.to_matrix();
    let mut v = Matrix::identity(n);
    let threshold = JACOBI_REL_TOL * m.frobenius_norm();

    let off = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * a[(i, j)] * a[(i, j)];
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off(&a) > threshold {
        if sweeps == JACOBI_MAX_SWEEPS {
            log::warn!("eig_sym: sweep cap reached with off-diagonal norm {:e}", off(&a));
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s, t);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable sort: equal eigenvalues keep original column order
    order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).expect("finite eigenvalues"));
    let values = order.iter().map(|&k| a[(k, k)]).collect();
    let vectors = Matrix::from_fn(n, n, |i, k| v[(i, order[k])]);
    Ok(SymEigen { values, vectors })
}

fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64, t: f64) {
    let n = a.rows();
    let apq = a[(p, q)];
    let tau = s / (1.0 + c);
    a[(p, p)] -= t * apq;
    a[(q, q)] += t * apq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for r in 0..n {
        if r != p && r != q {
            let arp = a[(r, p)];
            let arq = a[(r, q)];
            let np = arp - s * (arq + tau * arp);
            let nq = arq + s * (arp - tau * arq);
            a[(r, p)] = np;
            a[(p, r)] = np;
            a[(r, q)] = nq;
            a[(q, r)] = nq;
        }
        let vrp = v[(r, p)];
        let vrq = v[(r, q)];
        v[(r, p)] = vrp - s * (vrq + tau * vrp);
        v[(r, q)] = vrq + s * (vrp - tau * vrq);
    }
}

pub fn min_eigenvalue(m: &SymMatrix) -> Result<f64> {
    if m.dim() == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(eig_sym(m)?.values[0])
}

pub fn is_positive_definite(m: &SymMatrix, tol: f64) -> Result<bool> {
    Ok(min_eigenvalue(m)? > tol)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Upper-triangular factor of a Householder QR, `j = Q r`, for tall `j`.
pub fn qr_r_factor(j: &Matrix) -> Result<Matrix> {
    let (m, p) = (j.rows(), j.cols());
    if m < p {
        return Err(Error::DimensionMismatch("QR needs rows >= cols".into()));
    }
    let mut a = j.clone();
    for k in 0..p {
        let norm = (k..m).map(|i| a[(i, k)] * a[(i, k)]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if a[(k, k)] > 0.0 { -norm } else { norm };
        let mut w: Vec<f64> = (k..m).map(|i| a[(i, k)]).collect();
        w[0] -= alpha;
        let wn2: f64 = w.iter().map(|x| x * x).sum();
        if wn2 == 0.0 {
            continue;
        }
        for c in k..p {
            let proj: f64 = (k..m).map(|i| w[i - k] * a[(i, c)]).sum::<f64>() * 2.0 / wn2;
            for i in k..m {
                a[(i, c)] -= proj * w[i - k];
            }
        }
    }
    Ok(Matrix::from_fn(p, p, |i, c| if c >= i { a[(i, c)] } else { 0.0 }))
}

/// Solves `rᵀ r x = b` for upper-triangular `r`; also returns `w = r⁻ᵀ b`.
pub fn solve_normal_from_r(r: &Matrix, b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = r.rows();
    let scale = r.max_abs();
    for i in 0..p {
        if !(r[(i, i)].abs() > 1e-15 * scale) {
            return Err(Error::Numerical("singular triangular factor".into()));
        }
    }
    let mut w = vec![0.0; p];
    for i in 0..p {
        let s: f64 = (0..i).map(|k| r[(k, i)] * w[k]).sum();
        w[i] = (b[i] - s) / r[(i, i)];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = ((i + 1)..p).map(|k| r[(i, k)] * x[k]).sum();
        x[i] = (w[i] - s) / r[(i, i)];
    }
    Ok((x, w))
}
