//! Dense complex matrices and the tensor-leg bookkeeping used by every
//! r-matrix identity.
//!
//! Storage is row-major and all indices are 0-based. Kronecker products follow
//! `(A ⊗ B)[(i,k), (j,l)] = A[i,j] B[k,l]` with the pair `(i,k)` flattened
//! to `i*n + k`.

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use num_complex::Complex64;

use crate::error::{LaxError, Result};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// Relative pivot threshold of the LU inverse.
pub const PIVOT_TOL: f64 = 1e-13;

/// Largest accepted condition estimate of [`mat_inv`].
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![ZERO; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LaxError::Dimension(format!("{} entries for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn try_from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Result<Complex64>) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j)?);
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn diag(entries: &[Complex64]) -> Self {
        let mut m = Self::zeros(entries.len(), entries.len());
        for (i, &e) in entries.iter().enumerate() {
            m[(i, i)] = e;
        }
        m
    }

    /// Matrix unit with a single one at `(row, col)`.
    pub fn unit(n: usize, row: usize, col: usize) -> Self {
        let mut m = Self::zeros(n, n);
        m[(row, col)] = ONE;
        m
    }

    pub fn scalar(z: Complex64) -> Self {
        Self { rows: 1, cols: 1, data: vec![z] }
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

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scale(&self, z: Complex64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| x * z).collect() }
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn matmul(&self, rhs: &CMatrix) -> CMatrix {
        assert_eq!(self.cols, rhs.rows, "matmul: {}x{} * {}x{}", self.rows, self.cols, rhs.rows, rhs.cols);
        let mut out = CMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in row.iter().enumerate() {
                if a == ZERO {
                    continue;
                }
                let src = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for CMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                let z = self[(i, j)];
                write!(f, "{:>11.4e}{:+.4e}i  ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

macro_rules! elementwise {
    ($trait:ident, $method:ident, $op:tt, $assign_trait:ident, $assign:ident) => {
        impl $trait<&CMatrix> for &CMatrix {
            type Output = CMatrix;
            fn $method(self, rhs: &CMatrix) -> CMatrix {
                assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "shape mismatch");
                CMatrix {
                    rows: self.rows,
                    cols: self.cols,
                    data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a $op b).collect(),
                }
            }
        }
        impl $trait<CMatrix> for CMatrix {
            type Output = CMatrix;
            fn $method(self, rhs: CMatrix) -> CMatrix {
                &self $op &rhs
            }
        }
        impl $assign_trait<&CMatrix> for CMatrix {
            fn $assign(&mut self, rhs: &CMatrix) {
                assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "shape mismatch");
                for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
                    *a = *a $op b;
                }
            }
        }
        impl $assign_trait<CMatrix> for CMatrix {
            fn $assign(&mut self, rhs: CMatrix) {
                <CMatrix as $assign_trait<&CMatrix>>::$assign(self, &rhs);
            }
        }
    };
}

elementwise!(Add, add, +, AddAssign, add_assign);
elementwise!(Sub, sub, -, SubAssign, sub_assign);

impl Mul<&CMatrix> for &CMatrix {
    type Output = CMatrix;
    fn mul(self, rhs: &CMatrix) -> CMatrix {
        self.matmul(rhs)
    }
}

impl Mul<CMatrix> for CMatrix {
    type Output = CMatrix;
    fn mul(self, rhs: CMatrix) -> CMatrix {
        self.matmul(&rhs)
    }
}

impl Neg for &CMatrix {
    type Output = CMatrix;
    fn neg(self) -> CMatrix {
        self.scale(-ONE)
    }
}

/// Kronecker product.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let rows = a.rows * b.rows;
    let cols = a.cols * b.cols;
    let mut out = CMatrix::zeros(rows, cols);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let aij = a[(i, j)];
            if aij == ZERO {
                continue;
            }
            for k in 0..b.rows {
                for l in 0..b.cols {
                    out[(i * b.rows + k, j * b.cols + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// `[A, B] = AB - BA`.
pub fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    &a.matmul(b) - &b.matmul(a)
}

/// Largest entry modulus.
pub fn max_norm(a: &CMatrix) -> f64 {
    a.data.iter().fold(0.0, |m, z| m.max(z.norm()))
}

fn row_sum_norm(a: &CMatrix) -> f64 {
    (0..a.rows).map(|i| (0..a.cols).map(|j| a[(i, j)].norm()).sum::<f64>()).fold(0.0, f64::max)
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
///
/// Fails when a pivot falls below `PIVOT_TOL * max|A|` or when the
/// infinity-norm condition estimate exceeds `MAX_CONDITION`.
pub fn mat_inv(a: &CMatrix) -> Result<CMatrix> {
    if !a.is_square() {
        return Err(LaxError::Dimension(format!("inverse of a {}x{} matrix", a.rows, a.cols)));
    }
    let n = a.rows;
    let scale = max_norm(a);
    let threshold = PIVOT_TOL * scale;
    let mut lu = a.clone();
    let mut inv = CMatrix::identity(n);
    for col in 0..n {
        let (piv, mag) =
            (col..n)
                .map(|r| (r, lu[(r, col)].norm()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(mag >= threshold) || mag == 0.0 {
            return Err(LaxError::Singular { pivot: mag, threshold });
        }
        if piv != col {
            for j in 0..n {
                lu.data.swap(piv * n + j, col * n + j);
                inv.data.swap(piv * n + j, col * n + j);
            }
        }
        let p = lu[(col, col)];
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = lu[(r, col)] / p;
            if factor == ZERO {
                continue;
            }
            for j in 0..n {
                let (lc, ic) = (lu[(col, j)], inv[(col, j)]);
                lu[(r, j)] -= factor * lc;
                inv[(r, j)] -= factor * ic;
            }
        }
    }
    for r in 0..n {
        let p = lu[(r, r)];
        for j in 0..n {
            inv[(r, j)] /= p;
        }
    }
    let cond = row_sum_norm(a) * row_sum_norm(&inv);
    if !(cond < MAX_CONDITION) {
        return Err(LaxError::IllConditioned(cond));
    }
    Ok(inv)
}

/// Determinant by elimination with partial pivoting; exact zero pivots give 0.
pub fn det(a: &CMatrix) -> Result<Complex64> {
    if !a.is_square() {
        return Err(LaxError::Dimension(format!("determinant of a {}x{} matrix", a.rows, a.cols)));
    }
    let n = a.rows;
    let mut m = a.clone();
    let mut acc = Complex64::new(1.0, 0.0);
    for col in 0..n {
        let piv = (col..n).fold(col, |b, r| if m[(r, col)].norm() > m[(b, col)].norm() { r } else { b });
        if m[(piv, col)] == ZERO {
            return Ok(ZERO);
        }
        if piv != col {
            for j in 0..n {
                m.data.swap(piv * n + j, col * n + j);
            }
            acc = -acc;
        }
        let p = m[(col, col)];
        acc *= p;
        for r in col + 1..n {
            let f = m[(r, col)] / p;
            for j in col..n {
                let v = m[(col, j)];
                m[(r, j)] -= f * v;
            }
        }
    }
    Ok(acc)
}

/// `tr(A^k)`; `k = 0` gives the dimension.
pub fn trace_pow(a: &CMatrix, k: u32) -> Complex64 {
    assert!(a.is_square());
    if k == 0 {
        return Complex64::new(a.rows as f64, 0.0);
    }
    let mut p = a.clone();
    for _ in 1..k {
        p = p.matmul(a);
    }
    p.trace()
}

/// Permutation operator on `C^n ⊗ C^n`: `P (x ⊗ y) = y ⊗ x`.
pub fn perm_op(n: usize) -> CMatrix {
    let mut p = CMatrix::zeros(n * n, n * n);
    for i in 0..n {
        for k in 0..n {
            p[(k * n + i, i * n + k)] = ONE;
        }
    }
    p
}

/// Conjugates a two-leg operator by the leg swap: `P X P`.
pub fn swap_legs(x: &CMatrix, n: usize) -> CMatrix {
    // P is an involutive permutation, so P X P is a pure re-indexing.
    CMatrix::from_fn(n * n, n * n, |r, c| {
        let (r1, r2) = (r / n, r % n);
        let (c1, c2) = (c / n, c % n);
        x[(r2 * n + r1, c2 * n + c1)]
    })
}

fn digits(mut flat: usize, n: usize, legs: usize) -> Vec<usize> {
    let mut d = vec![0; legs];
    for slot in d.iter_mut().rev() {
        *slot = flat % n;
        flat /= n;
    }
    d
}

/// Embeds an operator acting on the tensor legs `on` (in that order) into the
/// `total`-fold product `C^n ⊗ ... ⊗ C^n`, with the identity on the other legs.
///
/// `embed(r, n, &[0, 2], 3)` is `r_13`; `embed(r, n, &[2, 1], 3)` is `r_32`.
pub fn embed(m: &CMatrix, n: usize, on: &[usize], total: usize) -> CMatrix {
    let k = on.len();
    let dim = n.pow(total as u32);
    assert_eq!(m.rows(), n.pow(k as u32), "operator does not act on {k} legs of size {n}");
    assert!(on.iter().all(|&l| l < total));
    let mut out = CMatrix::zeros(dim, dim);
    let sub = |d: &[usize]| on.iter().fold(0, |acc, &l| acc * n + d[l]);
    for row in 0..dim {
        let dr = digits(row, n, total);
        let sr = sub(&dr);
        for sc in 0..m.cols() {
            let v = m[(sr, sc)];
            if v == ZERO {
                continue;
            }
            // Column digits: the legs in `on` from `sc`, the others copied from the row.
            let mut dc = dr.clone();
            let spread = digits(sc, n, k);
            for (slot, &l) in on.iter().enumerate() {
                dc[l] = spread[slot];
            }
            let col = dc.iter().fold(0, |acc, &x| acc * n + x);
            out[(row, col)] = v;
        }
    }
    out
}
