//! Real phase space, matrix-valued fields with analytic partials, and the
//! canonical bracket `{p_i, q_j} = +δ_ij`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::elliptic::{EllipticParams, Lattice};
use crate::error::{LaxError, Result};
use crate::tensorops::{embed, kron, max_norm, CMatrix};

pub const FD_STEP: f64 = 1e-6;

/// Largest imaginary part tolerated when a quantity must be real.
pub const REAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl PhasePoint {
    pub fn new(p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if p.len() != q.len() || p.is_empty() {
            return Err(LaxError::Dimension(format!("p has {} entries, q has {}", p.len(), q.len())));
        }
        if p.iter().chain(&q).any(|v| !v.is_finite()) {
            return Err(LaxError::InvalidPoint("non-finite coordinate".into()));
        }
        Ok(Self { p, q })
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn q_diff(&self, i: usize, j: usize) -> f64 {
        self.q[i] - self.q[j]
    }

    /// Checks `|σ(q_i - q_j)| > pole guard` for every pair.
    pub fn validate(&self, lattice: &Lattice) -> Result<()> {
        for i in 0..self.n() {
            for j in i + 1..self.n() {
                let s = lattice.sigma(Complex64::new(self.q_diff(i, j), 0.0))?;
                if s.norm() <= lattice.pole_guard() {
                    return Err(LaxError::InvalidPoint(format!("q_{i} - q_{j} sits on a lattice point")));
                }
            }
        }
        Ok(())
    }

    /// Coordinates as `(p_0..p_{n-1}, q_0..q_{n-1})`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.p.iter().chain(&self.q).copied().collect()
    }

    pub fn from_slice(z: &[f64]) -> Result<Self> {
        if !z.len().is_multiple_of(2) {
            return Err(LaxError::Dimension(format!("odd coordinate count {}", z.len())));
        }
        let n = z.len() / 2;
        Self::new(z[..n].to_vec(), z[n..].to_vec())
    }

    fn shifted(&self, coord: usize, h: f64) -> Self {
        let mut z = self.clone();
        let n = self.n();
        if coord < n {
            z.p[coord] += h;
        } else {
            z.q[coord - n] += h;
        }
        z
    }
}

/// A field value with its partials in every `p_k` and `q_k`.
#[derive(Debug, Clone)]
pub struct FieldJet {
    pub value: CMatrix,
    pub dp: Vec<CMatrix>,
    pub dq: Vec<CMatrix>,
}

impl FieldJet {
    /// A jet with no momentum dependence.
    pub fn q_only(value: CMatrix, dq: Vec<CMatrix>) -> Self {
        let zero = CMatrix::zeros(value.rows(), value.cols());
        Self { dp: vec![zero; dq.len()], value, dq }
    }

    pub fn n(&self) -> usize {
        self.dq.len()
    }
}

/// A smooth matrix-valued function on phase space.
pub trait MatrixField: Sync {
    fn label(&self) -> String;

    fn jet(&self, x: &PhasePoint) -> Result<FieldJet>;

    fn eval(&self, x: &PhasePoint) -> Result<CMatrix> {
        Ok(self.jet(x)?.value)
    }
}

type JetFn = dyn Fn(&PhasePoint) -> Result<FieldJet> + Send + Sync;

/// A field defined by a closure, mostly for tests and ad hoc observables.
pub struct FnField {
    label: String,
    f: Box<JetFn>,
}

impl FnField {
    pub fn new(label: impl Into<String>, f: impl Fn(&PhasePoint) -> Result<FieldJet> + Send + Sync + 'static) -> Self {
        Self { label: label.into(), f: Box::new(f) }
    }
}

impl MatrixField for FnField {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn jet(&self, x: &PhasePoint) -> Result<FieldJet> {
        (self.f)(x)
    }
}

/// `Σ_k ∂_{p_k}F ⊗ ∂_{q_k}G − ∂_{q_k}F ⊗ ∂_{p_k}G`.
pub fn bracket_of_jets(f: &FieldJet, g: &FieldJet) -> CMatrix {
    let mut out = CMatrix::zeros(f.value.rows() * g.value.rows(), f.value.cols() * g.value.cols());
    for k in 0..f.n() {
        out += kron(&f.dp[k], &g.dq[k]);
        out -= kron(&f.dq[k], &g.dp[k]);
    }
    out
}

pub fn poisson_bracket(f: &dyn MatrixField, g: &dyn MatrixField, x: &PhasePoint) -> Result<CMatrix> {
    Ok(bracket_of_jets(&f.jet(x)?, &g.jet(x)?))
}

/// Partials of `f` by central differences.
pub fn fd_jet(f: &dyn MatrixField, x: &PhasePoint, step: f64) -> Result<FieldJet> {
    let n = x.n();
    let value = f.eval(x)?;
    let mut partial = |coord: usize| -> Result<CMatrix> {
        let plus = f.eval(&x.shifted(coord, step))?;
        let minus = f.eval(&x.shifted(coord, -step))?;
        Ok((plus - minus).scale(Complex64::new(0.5 / step, 0.0)))
    };
    let dp = (0..n).map(&mut partial).collect::<Result<Vec<_>>>()?;
    let dq = (n..2 * n).map(&mut partial).collect::<Result<Vec<_>>>()?;
    Ok(FieldJet { value, dp, dq })
}

/// Same contract as [`poisson_bracket`], with every partial from central differences.
pub fn fd_bracket_oracle(f: &dyn MatrixField, g: &dyn MatrixField, x: &PhasePoint, step: f64) -> Result<CMatrix> {
    Ok(bracket_of_jets(&fd_jet(f, x, step)?, &fd_jet(g, x, step)?))
}

/// Largest disagreement between analytic and finite-difference partials,
/// relative to `max(1, |analytic partials|)`.
pub fn jet_fd_residual(f: &dyn MatrixField, x: &PhasePoint, step: f64) -> Result<f64> {
    let a = f.jet(x)?;
    let b = fd_jet(f, x, step)?;
    let mut scale: f64 = 1.0;
    let mut diff: f64 = 0.0;
    for (da, db) in a.dp.iter().zip(&b.dp).chain(a.dq.iter().zip(&b.dq)) {
        scale = scale.max(max_norm(da));
        diff = diff.max(max_norm(&(da.clone() - db.clone())));
    }
    Ok(diff / scale)
}

/// Bracket of two jets placed on disjoint legs of a `total`-fold tensor product.
pub fn lifted_bracket(
    a: &FieldJet,
    a_legs: &[usize],
    b: &FieldJet,
    b_legs: &[usize],
    n: usize,
    total: usize,
) -> CMatrix {
    let dim = n.pow(total as u32);
    let mut out = CMatrix::zeros(dim, dim);
    let is_zero = |m: &CMatrix| m.as_slice().iter().all(|z| *z == Complex64::new(0.0, 0.0));
    for k in 0..a.n() {
        if !is_zero(&a.dp[k]) && !is_zero(&b.dq[k]) {
            out += embed(&a.dp[k], n, a_legs, total).matmul(&embed(&b.dq[k], n, b_legs, total));
        }
        if !is_zero(&a.dq[k]) && !is_zero(&b.dp[k]) {
            out -= embed(&a.dq[k], n, a_legs, total).matmul(&embed(&b.dp[k], n, b_legs, total));
        }
    }
    out
}

fn real_part(z: Complex64) -> Result<f64> {
    if z.im.abs() > REAL_TOL {
        return Err(LaxError::NotReal(z.im));
    }
    Ok(z.re)
}

/// `p_i ↦ p_i − sign·(s/n)·Σ_{l≠i} ξ(q_i − q_l)`, `q` unchanged.
///
/// `sign = +1` is `p_i − ∂_{q_i} ln Δ^{s/n}(q)` with `Δ = Π_{i<j} σ(q_ij)`.
pub fn momentum_shift_map(x: &PhasePoint, s: Complex64, sign: f64, params: &EllipticParams) -> Result<PhasePoint> {
    let lat = params.lattice();
    x.validate(lat)?;
    let n = x.n();
    let mut p = x.p.clone();
    for (i, pi) in p.iter_mut().enumerate() {
        let mut sum = Complex64::new(0.0, 0.0);
        for l in (0..n).filter(|&l| l != i) {
            sum += lat.xi(Complex64::new(x.q_diff(i, l), 0.0))?;
        }
        *pi -= real_part(sum * s * sign / n as f64)?;
    }
    PhasePoint::new(p, x.q.clone())
}

/// `Ω` with `Ω^{-1}` the Poisson tensor of `{p_i, q_j} = δ_ij` in `(p, q)` order.
pub fn canonical_form(n: usize) -> Vec<Vec<f64>> {
    let mut omega = vec![vec![0.0; 2 * n]; 2 * n];
    for i in 0..n {
        omega[i][n + i] = -1.0;
        omega[n + i][i] = 1.0;
    }
    omega
}

/// `max |Jᵀ Ω J − Ω|` with `J` the central-difference Jacobian of `map` at `x`.
pub fn symplecticity_residual(
    map: &dyn Fn(&PhasePoint) -> Result<PhasePoint>,
    x: &PhasePoint,
    step: f64,
) -> Result<f64> {
    let dim = 2 * x.n();
    // jac[a][b] = ∂ out_a / ∂ in_b
    let mut jac = vec![vec![0.0; dim]; dim];
    for b in 0..dim {
        let plus = map(&x.shifted(b, step))?.to_vec();
        let minus = map(&x.shifted(b, -step))?.to_vec();
        for a in 0..dim {
            jac[a][b] = (plus[a] - minus[a]) / (2.0 * step);
        }
    }
    let omega = canonical_form(x.n());
    let mut worst: f64 = 0.0;
    for a in 0..dim {
        for b in 0..dim {
            let mut acc = 0.0;
            for c in 0..dim {
                for d in 0..dim {
                    acc += jac[c][a] * omega[c][d] * jac[d][b];
                }
            }
            worst = worst.max((acc - omega[a][b]).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn scalar_jet(value: f64, dp: Vec<f64>, dq: Vec<f64>) -> FieldJet {
        FieldJet {
            value: CMatrix::scalar(c(value)),
            dp: dp.into_iter().map(|v| CMatrix::scalar(c(v))).collect(),
            dq: dq.into_iter().map(|v| CMatrix::scalar(c(v))).collect(),
        }
    }

    fn coordinate(which: char, idx: usize, n: usize) -> FnField {
        FnField::new(format!("{which}{idx}"), move |x: &PhasePoint| {
            let unit = |k: usize| if k == idx { 1.0 } else { 0.0 };
            let (value, dp, dq) = match which {
                'p' => (x.p[idx], (0..n).map(unit).collect(), vec![0.0; n]),
                _ => (x.q[idx], vec![0.0; n], (0..n).map(unit).collect()),
            };
            Ok(scalar_jet(value, dp, dq))
        })
    }

    fn point() -> PhasePoint {
        PhasePoint::new(vec![0.3, -0.7, 0.2], vec![-0.31, 0.05, 0.4]).unwrap()
    }

    #[test]
    fn canonical_pairs() {
        let x = point();
        for i in 0..3 {
            for j in 0..3 {
                let b = poisson_bracket(&coordinate('p', i, 3), &coordinate('q', j, 3), &x).unwrap()[(0, 0)];
                assert_eq!(b, c(if i == j { 1.0 } else { 0.0 }));
                let fd = fd_bracket_oracle(&coordinate('p', i, 3), &coordinate('q', j, 3), &x, FD_STEP).unwrap();
                assert!((fd[(0, 0)] - b).norm() < 1e-10);
                let qq = poisson_bracket(&coordinate('q', i, 3), &coordinate('q', j, 3), &x).unwrap();
                assert_eq!(qq[(0, 0)], c(0.0));
            }
        }
    }

    #[test]
    fn leibniz_on_p_times_q() {
        let pq = FnField::new("p0 q0", |x: &PhasePoint| {
            Ok(scalar_jet(x.p[0] * x.q[0], vec![x.q[0], 0.0, 0.0], vec![x.p[0], 0.0, 0.0]))
        });
        let x = point();
        let b = poisson_bracket(&pq, &coordinate('q', 0, 3), &x).unwrap();
        assert!((b[(0, 0)] - c(x.q[0])).norm() < 1e-15);
        assert_eq!(poisson_bracket(&pq, &pq, &x).unwrap()[(0, 0)], c(0.0));
    }

    #[test]
    fn fd_partials_are_second_order() {
        let f = FnField::new("exp", |x: &PhasePoint| {
            let e = (x.p[0] * x.q[1]).exp();
            Ok(scalar_jet(e, vec![x.q[1] * e, 0.0, 0.0], vec![0.0, x.p[0] * e, 0.0]))
        });
        let x = point();
        let e1 = jet_fd_residual(&f, &x, 1e-3).unwrap();
        let e2 = jet_fd_residual(&f, &x, 5e-4).unwrap();
        assert!((3.6..4.4).contains(&(e1 / e2)), "{}", e1 / e2);
    }

    #[test]
    fn lifted_bracket_on_two_legs_is_the_plain_bracket() {
        // Matrix-valued field on C^2: [[p0, q1], [p1 q0, 1]].
        let f = FnField::new("m", |x: &PhasePoint| {
            let m = |a: f64, b: f64, cc: f64, d: f64| CMatrix::from_vec(2, 2, vec![c(a), c(b), c(cc), c(d)]).unwrap();
            Ok(FieldJet {
                value: m(x.p[0], x.q[1], x.p[1] * x.q[0], 1.0),
                dp: vec![m(1.0, 0.0, 0.0, 0.0), m(0.0, 0.0, x.q[0], 0.0)],
                dq: vec![m(0.0, 0.0, x.p[1], 0.0), m(0.0, 1.0, 0.0, 0.0)],
            })
        });
        let x = PhasePoint::new(vec![0.2, 0.5], vec![-0.1, 0.3]).unwrap();
        let j = f.jet(&x).unwrap();
        let plain = bracket_of_jets(&j, &j);
        let lifted = lifted_bracket(&j, &[0], &j, &[1], 2, 2);
        assert!(max_norm(&(plain.clone() - lifted)) < 1e-15);
        assert!(max_norm(&(plain - fd_bracket_oracle(&f, &f, &x, FD_STEP).unwrap())) < 1e-9);
    }

    #[test]
    fn validity() {
        let lat = Lattice::new(Complex64::new(0.0, 1.0)).unwrap();
        assert!(point().validate(&lat).is_ok());
        let bad = PhasePoint::new(vec![0.0, 0.0], vec![0.2, 1.2]).unwrap();
        assert!(matches!(bad.validate(&lat), Err(LaxError::InvalidPoint(_))));
        assert!(PhasePoint::new(vec![0.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn momentum_shift() {
        let params = EllipticParams::new(Complex64::new(0.0, 1.0), 2).unwrap();
        let x = PhasePoint::new(vec![0.1, 0.2], vec![-0.2, 0.25]).unwrap();
        assert_eq!(momentum_shift_map(&x, c(0.0), 1.0, &params).unwrap(), x);
        let s = 0.7;
        let y = momentum_shift_map(&x, c(s), 1.0, &params).unwrap();
        let xi = params.xi(c(-0.45)).unwrap().re;
        assert!((y.p[0] - (0.1 - s / 2.0 * xi)).abs() < 1e-14);
        assert!((y.p[1] - (0.2 + s / 2.0 * xi)).abs() < 1e-14);
        assert!(matches!(momentum_shift_map(&x, Complex64::new(0.0, 0.5), 1.0, &params), Err(LaxError::NotReal(_))));
    }

    #[test]
    fn momentum_shift_matches_log_vandermonde_gradient() {
        let params = EllipticParams::new(Complex64::new(0.0, 1.0), 3).unwrap();
        let s = 0.7;
        let x = point();
        let log_delta = |q: &[f64]| {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..3 {
                for j in i + 1..3 {
                    acc += params.sigma(c(q[i] - q[j])).unwrap().ln();
                }
            }
            acc * (s / 3.0)
        };
        let y = momentum_shift_map(&x, c(s), 1.0, &params).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let (mut qp, mut qm) = (x.q.clone(), x.q.clone());
            qp[i] += h;
            qm[i] -= h;
            let grad = ((log_delta(&qp) - log_delta(&qm)) / (2.0 * h)).re;
            assert!((y.p[i] - (x.p[i] - grad)).abs() < 1e-8);
        }
    }

    #[test]
    fn symplecticity() {
        let x = point();
        let id = |z: &PhasePoint| Ok(z.clone());
        assert!(symplecticity_residual(&id, &x, FD_STEP).unwrap() < 1e-9);
        let params = EllipticParams::new(Complex64::new(0.0, 1.0), 3).unwrap();
        let shift = |z: &PhasePoint| momentum_shift_map(z, c(0.7), 1.0, &params);
        assert!(symplecticity_residual(&shift, &x, FD_STEP).unwrap() < 1e-6);
        let scale = |z: &PhasePoint| PhasePoint::new(z.p.iter().map(|v| 2.0 * v).collect(), z.q.clone());
        assert!(symplecticity_residual(&scale, &x, FD_STEP).unwrap() > 0.5);
    }

    #[test]
    fn shift_preserves_brackets_of_observables() {
        // {f∘Φ, g∘Φ}(x) = {f, g}(Φ(x)) for f = p0 q1², g = p1 + p2 q0.
        let params = EllipticParams::new(Complex64::new(0.0, 1.0), 3).unwrap();
        let x = point();
        let f = |z: &PhasePoint| z.p[0] * z.q[1] * z.q[1];
        let g = |z: &PhasePoint| z.p[1] + z.p[2] * z.q[0];
        let phi = |z: &PhasePoint| momentum_shift_map(z, c(0.7), 1.0, &params).unwrap();
        let grad = |h: &dyn Fn(&PhasePoint) -> f64, z: &PhasePoint| -> Vec<f64> {
            (0..6).map(|k| (h(&z.shifted(k, 1e-5)) - h(&z.shifted(k, -1e-5))) / 2e-5).collect()
        };
        let bracket = |a: &[f64], b: &[f64]| (0..3).map(|k| a[k] * b[3 + k] - a[3 + k] * b[k]).sum::<f64>();
        let lhs = bracket(&grad(&|z| f(&phi(z)), &x), &grad(&|z| g(&phi(z)), &x));
        let y = phi(&x);
        let rhs = bracket(&grad(&f, &y), &grad(&g, &y));
        assert!((lhs - rhs).abs() < 1e-6, "{lhs} {rhs}");
    }
}
