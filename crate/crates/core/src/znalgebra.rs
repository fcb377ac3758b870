//! Z_n shift matrices, the Belavin R-matrix, the classical Z_n-symmetric
//! r-matrix and the residuals of their defining identities.
//!
//! A two-leg tensor `t^{lk}_{ij}` is stored as an `n² × n²` matrix with the
//! component at row `i*n + j`, column `l*n + k`. This is the placement under
//! which `t = Σ t^{lk}_{ij} E^{lk}_{ij}` acts on `L ⊗ 1` and `1 ⊗ L` in the
//! Poisson-bracket identities of the twist and Calogero-Moser modules.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::elliptic::EllipticParams;
use crate::error::{LaxError, Result};
use crate::tensorops::{commutator, embed, kron, mat_inv, max_norm, swap_legs, CMatrix};

const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// `h_{ij} = δ_{i+1, j mod n}`, `g = diag(ω^0, …, ω^{n-1})`.
///
/// The diagonal of `g` starts at `ω^0`; starting at `ω^1` changes `g` by the
/// global scalar `ω`, which drops out of every conjugation `a⊗a (·) (a⊗a)^{-1}`.
#[derive(Debug, Clone)]
pub struct ShiftMatrices {
    pub n: usize,
    pub h: CMatrix,
    pub g: CMatrix,
    pub omega: Complex64,
}

impl ShiftMatrices {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(LaxError::InvalidParameter(format!("rank n = {n} must be at least 2")));
        }
        let omega = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI / n as f64);
        let h = CMatrix::from_fn(n, n, |i, j| if (i + 1) % n == j { ONE } else { Complex64::new(0.0, 0.0) });
        let g = CMatrix::diag(&(0..n).map(|i| omega.powu(i as u32)).collect::<Vec<_>>());
        Ok(Self { n, h, g, omega })
    }

    /// `I_{(a1, a2)} = g^{a2} h^{a1}`.
    pub fn weyl(&self, a1: u32, a2: u32) -> CMatrix {
        let mut m = CMatrix::identity(self.n);
        for _ in 0..a2 {
            m = m.matmul(&self.g);
        }
        for _ in 0..a1 {
            m = m.matmul(&self.h);
        }
        m
    }

    pub fn generator(&self, which: Generator) -> &CMatrix {
        match which {
            Generator::G => &self.g,
            Generator::H => &self.h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Generator {
    G,
    H,
}

pub fn shift_matrices(n: usize) -> Result<ShiftMatrices> {
    ShiftMatrices::new(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RKind {
    Quantum,
    Classical,
}

/// One stored component of an [`RTensor`], as written by `dump`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub l: usize,
    pub k: usize,
    pub i: usize,
    pub j: usize,
    pub re: f64,
    pub im: f64,
}

#[derive(Debug, Clone)]
pub struct RTensor {
    pub n: usize,
    pub kind: RKind,
    pub entries: CMatrix,
}

/// Selection rule shared by the quantum and classical tensors.
pub fn on_pattern(n: usize, l: usize, k: usize, i: usize, j: usize) -> bool {
    (i + j) % n == (l + k) % n
}

/// Row and column of `t^{lk}_{ij}`.
pub fn slot(n: usize, l: usize, k: usize, i: usize, j: usize) -> (usize, usize) {
    (i * n + j, l * n + k)
}

/// `(a - b) mod n` as a theta index.
fn diff(a: usize, b: usize, n: usize) -> i64 {
    (a as i64 - b as i64).rem_euclid(n as i64)
}

impl RTensor {
    fn build(
        n: usize,
        kind: RKind,
        mut component: impl FnMut(usize, usize, usize, usize) -> Result<Complex64>,
    ) -> Result<Self> {
        let mut entries = CMatrix::zeros(n * n, n * n);
        for l in 0..n {
            for k in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        if on_pattern(n, l, k, i, j) {
                            entries[slot(n, l, k, i, j)] = component(l, k, i, j)?;
                        }
                    }
                }
            }
        }
        Ok(Self { n, kind, entries })
    }

    pub fn component(&self, l: usize, k: usize, i: usize, j: usize) -> Complex64 {
        self.entries[slot(self.n, l, k, i, j)]
    }

    /// Components on the selection pattern, in `(l, k, i, j)` order.
    pub fn pattern_entries(&self) -> Vec<TensorEntry> {
        let n = self.n;
        let mut out = Vec::new();
        for l in 0..n {
            for k in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        if on_pattern(n, l, k, i, j) {
                            let z = self.component(l, k, i, j);
                            out.push(TensorEntry { l, k, i, j, re: z.re, im: z.im });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Belavin's R-matrix with the normalisation prefactor
/// `θ'^{(0)}(0) σ(v) σ(w) / (σ'(0) θ^{(0)}(v) σ(v+w))`, so that `R(v, w) → 1⊗1` as `w → 0`.
pub fn belavin_r_quantum(v: Complex64, w: Complex64, params: &EllipticParams) -> Result<RTensor> {
    let n = params.n;
    let lat = params.lattice();
    let theta0_v = params.theta_j_nonzero(0, v, "R-matrix prefactor")?;
    let pre = params.theta_prime_zero() * lat.sigma(v)? * lat.sigma(w)?
        / (params.sigma_prime_zero() * theta0_v * lat.sigma_nonzero(v + w, "R-matrix prefactor")?);
    let den_w: Vec<Complex64> =
        (0..n as i64).map(|a| params.theta_j_nonzero(a, w, "R-matrix")).collect::<Result<_>>()?;
    let den_v: Vec<Complex64> =
        (0..n as i64).map(|a| params.theta_j_nonzero(a, v, "R-matrix")).collect::<Result<_>>()?;
    let num_vw: Vec<Complex64> = (0..n as i64).map(|a| params.theta_j(a, v + w)).collect::<Result<_>>()?;
    RTensor::build(n, RKind::Quantum, |l, _k, i, j| {
        let nij = num_vw[diff(i, j, n) as usize];
        Ok(pre * theta0_v * nij / (den_w[diff(i, l, n) as usize] * den_v[diff(l, j, n) as usize]))
    })
}

/// The scalar `θ'^{(0)}(0) σ(v) / (σ'(0) θ^{(0)}(v)) · Π_{m=1}^{n-1} θ^{(m)}(v)/θ^{(m)}(0)`
/// of the alternative normalisation of `R`.
pub fn belavin_rescaling_scalar(v: Complex64, params: &EllipticParams) -> Result<Complex64> {
    let mut s = params.theta_prime_zero() * params.sigma(v)?
        / (params.sigma_prime_zero() * params.theta_j_nonzero(0, v, "normalisation scalar")?);
    for m in 1..params.n as i64 {
        s *= params.theta_j(m, v)? / params.theta_j_nonzero(m, Complex64::new(0.0, 0.0), "normalisation scalar")?;
    }
    Ok(s)
}

/// Classical Z_n-symmetric r-matrix.
pub fn classical_r(v: Complex64, params: &EllipticParams) -> Result<RTensor> {
    let n = params.n;
    let zero = Complex64::new(0.0, 0.0);
    let tp0 = params.theta_prime_zero();
    let xi_v = params.xi(v)?;
    let th_v: Vec<Complex64> =
        (0..n as i64).map(|a| params.theta_j_nonzero(a, v, "classical r-matrix")).collect::<Result<_>>()?;
    let dth_v: Vec<Complex64> = (0..n as i64).map(|a| params.theta_j_deriv(a, v)).collect::<Result<_>>()?;
    // θ^{(a)}(0) for a ≠ 0; index 0 is never used as a denominator.
    let th_0: Vec<Complex64> = (0..n as i64)
        .map(|a| if a == 0 { Ok(zero) } else { params.theta_j_nonzero(a, zero, "classical r-matrix") })
        .collect::<Result<_>>()?;
    RTensor::build(n, RKind::Classical, |l, k, i, j| {
        let dij = diff(i, j, n) as usize;
        if l != i {
            Ok(tp0 * th_v[dij] / (th_v[diff(l, j, n) as usize] * th_0[diff(i, l, n) as usize]))
        } else if k == j {
            Ok(dth_v[dij] / th_v[dij] - xi_v)
        } else {
            Ok(zero)
        }
    })
}

/// `max |R12 R13 R23 - R23 R13 R12|` on `(C^n)^{⊗3}`.
pub fn qybe_residual(
    v1: Complex64,
    v2: Complex64,
    v3: Complex64,
    w: Complex64,
    params: &EllipticParams,
) -> Result<f64> {
    let n = params.n;
    let r12 = embed(&belavin_r_quantum(v1 - v2, w, params)?.entries, n, &[0, 1], 3);
    let r13 = embed(&belavin_r_quantum(v1 - v3, w, params)?.entries, n, &[0, 2], 3);
    let r23 = embed(&belavin_r_quantum(v2 - v3, w, params)?.entries, n, &[1, 2], 3);
    let lhs = r12.matmul(&r13).matmul(&r23);
    let rhs = r23.matmul(&r13).matmul(&r12);
    Ok(max_norm(&(lhs - rhs)))
}

/// `max |[r12, r13] + [r12, r23] + [r13, r23]|` with `r_ab = r(v_a - v_b)`.
pub fn cybe_residual(v1: Complex64, v2: Complex64, v3: Complex64, params: &EllipticParams) -> Result<f64> {
    let n = params.n;
    let r12 = embed(&classical_r(v1 - v2, params)?.entries, n, &[0, 1], 3);
    let r13 = embed(&classical_r(v1 - v3, params)?.entries, n, &[0, 2], 3);
    let r23 = embed(&classical_r(v2 - v3, params)?.entries, n, &[1, 2], 3);
    let sum = commutator(&r12, &r13) + commutator(&r12, &r23) + commutator(&r13, &r23);
    Ok(max_norm(&sum))
}

/// `max |r12(v) + r21(-v)|` with `r21 = P r12 P`.
pub fn antisymmetry_residual(v: Complex64, params: &EllipticParams) -> Result<f64> {
    let r = classical_r(v, params)?;
    let rm = classical_r(-v, params)?;
    Ok(max_norm(&(r.entries + swap_legs(&rm.entries, params.n))))
}

/// `max |(a⊗a) t (a⊗a)^{-1} - t|`.
pub fn zn_symmetry_residual(t: &RTensor, which: Generator) -> Result<f64> {
    let shifts = ShiftMatrices::new(t.n)?;
    let a = shifts.generator(which);
    let aa = kron(a, a);
    let conj = aa.matmul(&t.entries).matmul(&mat_inv(&aa)?);
    Ok(max_norm(&(conj - t.entries.clone())))
}

/// `max |(R(v, w) - 1⊗1)/w - r(v)|`; decays like `O(w)`.
pub fn classical_limit_residual(v: Complex64, w: Complex64, params: &EllipticParams) -> Result<f64> {
    let n = params.n;
    let quantum = belavin_r_quantum(v, w, params)?;
    let classical = classical_r(v, params)?;
    let deriv = (quantum.entries - CMatrix::identity(n * n)).scale(ONE / w);
    Ok(max_norm(&(deriv - classical.entries)))
}

/// Same as [`classical_limit_residual`] but for `scalar · R`, with the scalar of
/// [`belavin_rescaling_scalar`].
pub fn classical_limit_residual_rescaled(v: Complex64, w: Complex64, params: &EllipticParams) -> Result<f64> {
    let n = params.n;
    let quantum = belavin_r_quantum(v, w, params)?.entries.scale(belavin_rescaling_scalar(v, params)?);
    let classical = classical_r(v, params)?;
    let deriv = (quantum - CMatrix::identity(n * n)).scale(ONE / w);
    Ok(max_norm(&(deriv - classical.entries)))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).map(|(x, y)| (x.ln(), y.ln())).collect();
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / m, sy / m);
    let (num, den) = pts.iter().fold((0.0, 0.0), |(n, d), (x, y)| (n + (x - mx) * (y - my), d + (x - mx) * (x - mx)));
    num / den
}

/// `1e-2, 5e-3, 2e-3, 1e-3, …, 1e-5`.
pub fn crossing_ladder() -> Vec<f64> {
    let mut out = Vec::new();
    for decade in 2..5 {
        let base = 10f64.powi(-decade);
        out.extend([base, base / 2.0, base / 5.0]);
    }
    out.push(1e-5);
    out
}
