//! Theta functions with characteristics and the derived elliptic family.
//!
//! Everything here is a truncated lattice sum
//!
//! ```text
//! theta[a; b](z, tau) = sum_m exp{ i*pi*[ (m+a)^2 tau + 2 (m+a)(z+b) ] }
//! ```
//!
//! evaluated on a symmetric window `m in [-M, M]`. `M` is chosen from the
//! Gaussian tail bound so that every dropped term is below `eps` relative to
//! the largest retained one. Derivatives in `z` are summed termwise.
//!
//! * `sigma(u)    = theta[1/2; 1/2](u, tau)` (odd, simple zero at 0)
//! * `theta_j(u)  = theta[1/2 - j/n; 1/2](u, n tau)`
//! * `xi(u)       = sigma'(u) / sigma(u)`
//! * `E(u, v)     = sigma(u+v) / (sigma(u) sigma(v))`
//! * `Q(u)        = xi'(u) / sigma'(0)^2`, normalised so that
//!   `Q(v) - Q(u) = E(u,v) E(u,-v)` holds exactly.
//!
//! No argument reduction is performed; callers keep `|Im z|` moderate.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{LaxError, Result};

/// Default relative tail bound of the lattice sums.
pub const DEFAULT_EPS: f64 = 1e-15;

/// Largest admissible truncation index `M`.
pub const TERM_CAP: usize = 10_000;

/// Relative pole guard: a value below `POLE_GUARD * |f'(0)|` counts as a zero.
pub const POLE_GUARD: f64 = 1e-10;

/// Highest termwise derivative order supported by the jets.
pub const MAX_ORDER: usize = 3;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Values of `f, f', f'', f'''` at one point (entries above the requested
/// order are zero).
pub type Jet = [Complex64; MAX_ORDER + 1];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaChar {
    pub a: f64,
    pub b: f64,
}

impl ThetaChar {
    pub const HALF_HALF: ThetaChar = ThetaChar { a: 0.5, b: 0.5 };

    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }
}

fn check_tau(tau: Complex64) -> Result<()> {
    if !(tau.im > 0.0) || !tau.re.is_finite() || !tau.im.is_finite() {
        return Err(LaxError::InvalidModulus(tau.im));
    }
    Ok(())
}

/// Truncation index for the window `[-M, M]`.
fn window(ch: ThetaChar, z: Complex64, tau: Complex64, eps: f64, order: usize) -> Result<usize> {
    let im_tau = tau.im;
    // |term(m)| = exp(-pi Im(tau) x^2 - 2 pi x Im(z)), x = m + a, peaked at x = centre.
    let centre = -z.im / im_tau;
    let log_eps = -eps.ln() + 4.0_f64.ln();
    let mut spread = (log_eps / (PI * im_tau)).sqrt();
    if order > 0 {
        let poly = order as f64 * (2.0 * PI * (centre.abs() + spread + 2.0)).ln().max(0.0);
        spread = ((log_eps + poly) / (PI * im_tau)).sqrt();
    }
    let m = (centre.abs() + ch.a.abs() + spread).ceil() + 1.0;
    if !m.is_finite() || m > TERM_CAP as f64 {
        return Err(LaxError::NonConvergence { cap: TERM_CAP, im_z: z.im.abs() });
    }
    Ok(m as usize)
}

/// Termwise jet of `theta[a; b](z, tau)` up to `order`.
pub fn theta_char_jet(ch: ThetaChar, z: Complex64, tau: Complex64, order: usize, eps: f64) -> Result<Jet> {
    check_tau(tau)?;
    if order > MAX_ORDER {
        return Err(LaxError::InvalidParameter(format!("derivative order {order} > {MAX_ORDER}")));
    }
    if !(eps > 0.0) {
        return Err(LaxError::InvalidParameter(format!("eps = {eps} must be positive")));
    }
    let big_m = window(ch, z, tau, eps, order)? as i64;
    let zb = z + ch.b;
    let mut jet = [Complex64::new(0.0, 0.0); MAX_ORDER + 1];
    for m in -big_m..=big_m {
        let x = m as f64 + ch.a;
        let term = (I * PI * (tau * (x * x) + zb * (2.0 * x))).exp();
        let step = I * (2.0 * PI * x);
        let mut t = term;
        for slot in jet.iter_mut().take(order + 1) {
            *slot += t;
            t *= step;
        }
    }
    Ok(jet)
}

/// `theta[a; b](z, tau)` at the default tail bound.
pub fn theta_char(ch: ThetaChar, z: Complex64, tau: Complex64) -> Result<Complex64> {
    Ok(theta_char_jet(ch, z, tau, 0, DEFAULT_EPS)?[0])
}

/// `d^order/dz^order theta[a; b](z, tau)`.
pub fn theta_char_deriv(ch: ThetaChar, z: Complex64, tau: Complex64, order: usize) -> Result<Complex64> {
    Ok(theta_char_jet(ch, z, tau, order, DEFAULT_EPS)?[order])
}

/// The `sigma`-family on a fixed lattice `Z + tau Z`.
///
/// Holds `sigma'(0)`, which fixes both the pole guard and the normalisation of `Q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    tau: Complex64,
    eps: f64,
    sigma_p0: Complex64,
}

impl Lattice {
    pub fn new(tau: Complex64) -> Result<Self> {
        Self::with_eps(tau, DEFAULT_EPS)
    }

    pub fn with_eps(tau: Complex64, eps: f64) -> Result<Self> {
        let sigma_p0 = theta_char_jet(ThetaChar::HALF_HALF, Complex64::new(0.0, 0.0), tau, 1, eps)?[1];
        Ok(Self { tau, eps, sigma_p0 })
    }

    pub fn tau(&self) -> Complex64 {
        self.tau
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// `sigma'(0)`.
    pub fn sigma_prime_zero(&self) -> Complex64 {
        self.sigma_p0
    }

    pub fn pole_guard(&self) -> f64 {
        POLE_GUARD * self.sigma_p0.norm()
    }

    pub fn sigma_jet(&self, u: Complex64, order: usize) -> Result<Jet> {
        theta_char_jet(ThetaChar::HALF_HALF, u, self.tau, order, self.eps)
    }

    pub fn sigma(&self, u: Complex64) -> Result<Complex64> {
        Ok(self.sigma_jet(u, 0)?[0])
    }

    pub fn sigma_deriv(&self, u: Complex64) -> Result<Complex64> {
        Ok(self.sigma_jet(u, 1)?[1])
    }

    /// `sigma(u)`, failing when `u` sits on the lattice.
    pub fn sigma_nonzero(&self, u: Complex64, what: &str) -> Result<Complex64> {
        let s = self.sigma(u)?;
        self.guard(s, u, what)?;
        Ok(s)
    }

    fn guard(&self, s: Complex64, u: Complex64, what: &str) -> Result<()> {
        if s.norm() < self.pole_guard() {
            return Err(LaxError::Pole(format!("sigma({u}) vanishes in {what}")));
        }
        Ok(())
    }

    /// Jet of `sigma` with the pole guard applied to the value.
    fn sigma_jet_guarded(&self, u: Complex64, order: usize, what: &str) -> Result<Jet> {
        let jet = self.sigma_jet(u, order)?;
        self.guard(jet[0], u, what)?;
        Ok(jet)
    }

    /// `xi(u) = sigma'(u) / sigma(u)`.
    pub fn xi(&self, u: Complex64) -> Result<Complex64> {
        let s = self.sigma_jet_guarded(u, 1, "xi")?;
        Ok(s[1] / s[0])
    }

    /// `xi'(u)`.
    pub fn xi_deriv(&self, u: Complex64) -> Result<Complex64> {
        let s = self.sigma_jet_guarded(u, 2, "xi'")?;
        let r1 = s[1] / s[0];
        Ok(s[2] / s[0] - r1 * r1)
    }

    /// `xi''(u)`.
    pub fn xi_deriv2(&self, u: Complex64) -> Result<Complex64> {
        let s = self.sigma_jet_guarded(u, 3, "xi''")?;
        let r1 = s[1] / s[0];
        let r2 = s[2] / s[0];
        let r3 = s[3] / s[0];
        Ok(r3 - 3.0 * r1 * r2 + 2.0 * r1 * r1 * r1)
    }

    /// `E(u, v) = sigma(u+v) / (sigma(u) sigma(v))`.
    pub fn e_fn(&self, u: Complex64, v: Complex64) -> Result<Complex64> {
        let su = self.sigma_nonzero(u, "E(u, v) (first argument)")?;
        let sv = self.sigma_nonzero(v, "E(u, v) (second argument)")?;
        Ok(self.sigma(u + v)? / (su * sv))
    }

    /// `d/dv E(u, v)`, written without `xi(u+v)` so it stays finite at zeros of `E`.
    pub fn e_fn_dv(&self, u: Complex64, v: Complex64) -> Result<Complex64> {
        let su = self.sigma_nonzero(u, "dE/dv")?;
        let sv = self.sigma_jet_guarded(v, 1, "dE/dv")?;
        let suv = self.sigma_jet(u + v, 1)?;
        Ok((suv[1] * sv[0] - suv[0] * sv[1]) / (su * sv[0] * sv[0]))
    }

    /// `Q(u) = xi'(u) / sigma'(0)^2`.
    pub fn q_fn(&self, u: Complex64) -> Result<Complex64> {
        Ok(self.xi_deriv(u)? / (self.sigma_p0 * self.sigma_p0))
    }

    /// `Q'(u) = xi''(u) / sigma'(0)^2`.
    pub fn q_fn_deriv(&self, u: Complex64) -> Result<Complex64> {
        Ok(self.xi_deriv2(u)? / (self.sigma_p0 * self.sigma_p0))
    }
}

/// Evaluation context shared by every construction in the crate: the modulus
/// `tau`, the rank `n` and the series tail bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipticParams {
    pub n: usize,
    lattice: Lattice,
    theta0_p0: Complex64,
}

impl EllipticParams {
    pub fn new(tau: Complex64, n: usize) -> Result<Self> {
        Self::with_eps(tau, n, DEFAULT_EPS)
    }

    pub fn with_eps(tau: Complex64, n: usize, eps: f64) -> Result<Self> {
        check_tau(tau)?;
        if n < 2 {
            return Err(LaxError::InvalidParameter(format!("rank n = {n} must be at least 2")));
        }
        if !(eps > 0.0) {
            return Err(LaxError::InvalidParameter(format!("eps = {eps} must be positive")));
        }
        let lattice = Lattice::with_eps(tau, eps)?;
        let ch = Self::char_of(0, n);
        let theta0_p0 = theta_char_jet(ch, Complex64::new(0.0, 0.0), tau * n as f64, 1, eps)?[1];
        Ok(Self { n, lattice, theta0_p0 })
    }

    fn char_of(j: i64, n: usize) -> ThetaChar {
        ThetaChar::new(0.5 - j as f64 / n as f64, 0.5)
    }

    pub fn tau(&self) -> Complex64 {
        self.lattice.tau
    }

    pub fn eps(&self) -> f64 {
        self.lattice.eps
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    /// `omega = exp(2 pi i / n)`.
    pub fn omega(&self) -> Complex64 {
        Complex64::from_polar(1.0, 2.0 * PI / self.n as f64)
    }

    /// `theta'^{(0)}(0)`.
    pub fn theta_prime_zero(&self) -> Complex64 {
        self.theta0_p0
    }

    pub fn theta_j_jet(&self, j: i64, u: Complex64, order: usize) -> Result<Jet> {
        theta_char_jet(Self::char_of(j, self.n), u, self.tau() * self.n as f64, order, self.eps())
    }

    /// `theta^{(j)}(u)`; `j` is used as given.
    pub fn theta_j(&self, j: i64, u: Complex64) -> Result<Complex64> {
        Ok(self.theta_j_jet(j, u, 0)?[0])
    }

    pub fn theta_j_deriv(&self, j: i64, u: Complex64) -> Result<Complex64> {
        Ok(self.theta_j_jet(j, u, 1)?[1])
    }

    /// `theta^{(j)}(u)` used as a denominator.
    pub fn theta_j_nonzero(&self, j: i64, u: Complex64, what: &str) -> Result<Complex64> {
        let t = self.theta_j(j, u)?;
        if t.norm() < POLE_GUARD * self.theta0_p0.norm() {
            return Err(LaxError::Pole(format!("theta^({j})({u}) vanishes in {what}")));
        }
        Ok(t)
    }

    pub fn sigma(&self, u: Complex64) -> Result<Complex64> {
        self.lattice.sigma(u)
    }

    pub fn sigma_deriv(&self, u: Complex64) -> Result<Complex64> {
        self.lattice.sigma_deriv(u)
    }

    pub fn sigma_prime_zero(&self) -> Complex64 {
        self.lattice.sigma_p0
    }

    pub fn xi(&self, u: Complex64) -> Result<Complex64> {
        self.lattice.xi(u)
    }

    pub fn e_fn(&self, u: Complex64, v: Complex64) -> Result<Complex64> {
        self.lattice.e_fn(u, v)
    }

    pub fn q_fn(&self, u: Complex64) -> Result<Complex64> {
        self.lattice.q_fn(u)
    }
}

pub fn sigma(u: Complex64, tau: Complex64) -> Result<Complex64> {
    Lattice::new(tau)?.sigma(u)
}

pub fn sigma_deriv(u: Complex64, tau: Complex64) -> Result<Complex64> {
    Lattice::new(tau)?.sigma_deriv(u)
}

pub fn xi(u: Complex64, tau: Complex64) -> Result<Complex64> {
    Lattice::new(tau)?.xi(u)
}

pub fn e_fn(u: Complex64, v: Complex64, tau: Complex64) -> Result<Complex64> {
    Lattice::new(tau)?.e_fn(u, v)
}

pub fn q_fn(u: Complex64, tau: Complex64) -> Result<Complex64> {
    Lattice::new(tau)?.q_fn(u)
}

pub fn theta_j(j: i64, u: Complex64, params: &EllipticParams) -> Result<Complex64> {
    params.theta_j(j, u)
}

pub fn theta_j_deriv(j: i64, u: Complex64, params: &EllipticParams) -> Result<Complex64> {
    params.theta_j_deriv(j, u)
}

fn rel(diff: Complex64, scale: f64) -> f64 {
    diff.norm() / scale.max(f64::MIN_POSITIVE)
}

/// Relative residuals of `σ(u+1) = −σ(u)` and `σ(u+τ) = −e^{−iπτ − 2πiu} σ(u)`.
pub fn quasi_periodicity_residual(u: Complex64, lat: &Lattice) -> Result<f64> {
    let s = lat.sigma(u)?;
    let s1 = lat.sigma(u + 1.0)?;
    let st = lat.sigma(u + lat.tau)?;
    let mult = -(-I * PI * lat.tau - 2.0 * PI * I * u).exp();
    Ok(rel(s1 + s, s.norm()).max(rel(st - mult * s, st.norm().max((mult * s).norm()))))
}

/// Relative residuals of `σ` and `ξ` odd, `Q` even.
pub fn parity_residual(u: Complex64, lat: &Lattice) -> Result<f64> {
    let (s, sm) = (lat.sigma(u)?, lat.sigma(-u)?);
    let (x, xm) = (lat.xi(u)?, lat.xi(-u)?);
    let (q, qm) = (lat.q_fn(u)?, lat.q_fn(-u)?);
    Ok(rel(s + sm, s.norm()).max(rel(x + xm, x.norm())).max(rel(q - qm, q.norm())))
}

/// `|Q(v) − Q(u) − E(u, v) E(u, −v)|` relative to the largest of the three terms.
pub fn q_difference_residual(u: Complex64, v: Complex64, lat: &Lattice) -> Result<f64> {
    let (qu, qv) = (lat.q_fn(u)?, lat.q_fn(v)?);
    let rhs = lat.e_fn(u, v)? * lat.e_fn(u, -v)?;
    Ok(rel(qv - qu - rhs, qu.norm().max(qv.norm()).max(rhs.norm())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// Fixed M = 60 partial sum, written straight from the series.
    fn direct_sum(a: f64, b: f64, z: Complex64, tau: Complex64) -> Complex64 {
        (-60..=60)
            .map(|m| {
                let x = m as f64 + a;
                (I * PI * (x * x * tau + 2.0 * x * (z + b))).exp()
            })
            .sum()
    }

    #[test]
    fn odd_characteristic_vanishes_at_origin() {
        let v = theta_char(ThetaChar::HALF_HALF, c(0.0, 0.0), c(0.0, 1.0)).unwrap();
        assert!(v.norm() < 1e-14, "{v}");
    }

    #[test]
    fn unit_shift_multiplier() {
        let ch = ThetaChar::new(0.25, 0.5);
        let z = c(0.17, 0.05);
        let tau = c(0.3, 0.9);
        let ratio = theta_char(ch, z + 1.0, tau).unwrap() / theta_char(ch, z, tau).unwrap();
        let expected = Complex64::from_polar(1.0, 2.0 * PI * 0.25);
        assert!((ratio - expected).norm() < 1e-12);
    }

    #[test]
    fn matches_frozen_direct_sums() {
        // mpmath, 30 digits, M = 60
        let v = theta_char(ThetaChar::HALF_HALF, c(0.3, 0.0), c(0.0, 1.0)).unwrap();
        assert!((v - c(-0.737_197_163_718_681_7, 0.0)).norm() < 1e-14);
        assert!((v - direct_sum(0.5, 0.5, c(0.3, 0.0), c(0.0, 1.0))).norm() < 1e-14);

        let p = EllipticParams::new(c(0.0, 0.8), 3).unwrap();
        let t = p.theta_j(1, c(0.4, 0.0)).unwrap();
        assert!((t - c(0.476_749_793_479_931_6, 0.661_476_444_803_078_1)).norm() < 1e-14);

        let x = xi(c(0.25, 0.0), c(0.0, 0.9)).unwrap();
        assert!((x - c(3.185_734_450_955_113, 0.0)).norm() < 1e-12);

        let s0 = Lattice::new(c(0.0, 1.0)).unwrap().sigma_prime_zero();
        assert!((s0 - c(-2.848_694_603_987_787, 0.0)).norm() < 1e-13);
    }

    #[test]
    fn theta_zero_rank_two_is_odd_with_simple_zero() {
        let p = EllipticParams::new(c(0.0, 1.0), 2).unwrap();
        assert!(p.theta_j(0, c(0.0, 0.0)).unwrap().norm() < 1e-14);
        assert!(p.theta_j_deriv(0, c(0.0, 0.0)).unwrap().norm() > 1e-3);
    }

    #[test]
    fn theta_reflection_uses_derived_phase() {
        let p = EllipticParams::new(c(0.0, 1.0), 3).unwrap();
        let v = c(0.21, 0.1);
        let lhs = p.theta_j(1, v).unwrap();
        let rhs = Complex64::from_polar(1.0, -2.0 * PI / 3.0) * p.theta_j(-1, -v).unwrap();
        assert!((lhs + rhs).norm() < 1e-12);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let p = EllipticParams::new(c(0.0, 1.0), 3).unwrap();
        let u = c(0.37, 0.0);
        let h = 1e-5;
        let f = |x: Complex64| p.theta_j(1, x).unwrap();
        let fd1 = (f(u + h) - f(u - h)) / (2.0 * h);
        assert!((fd1 - p.theta_j_deriv(1, u).unwrap()).norm() < 1e-8 * fd1.norm().max(1.0));
        let fd2 = (f(u + h) - 2.0 * f(u) + f(u - h)) / (h * h);
        let d2 = p.theta_j_jet(1, u, 2).unwrap()[2];
        assert!((fd2 - d2).norm() < 1e-6 * d2.norm().max(1.0), "{fd2} {d2}");
    }

    #[test]
    fn sigma_symmetries() {
        let tau = c(0.0, 1.0);
        assert!(sigma(c(0.0, 0.0), tau).unwrap().norm() < 1e-15);
        let u = c(0.23, 0.0);
        assert!((sigma(-u, tau).unwrap() + sigma(u, tau).unwrap()).norm() < 1e-14);
        let u = c(0.4, 0.1);
        let tau = c(0.0, 0.7);
        assert!((sigma(u + 1.0, tau).unwrap() + sigma(u, tau).unwrap()).norm() < 1e-13);
    }

    #[test]
    fn xi_is_odd_and_has_unit_residue() {
        let tau = c(0.0, 1.0);
        let u = c(0.31, 0.0);
        assert!((xi(u, tau).unwrap() + xi(-u, tau).unwrap()).norm() < 1e-12);
        let u = c(1e-4, 0.0);
        assert!((u * xi(u, tau).unwrap() - 1.0).norm() < 1e-6);
    }

    #[test]
    fn e_fn_identities() {
        let l = Lattice::new(c(0.0, 1.0)).unwrap();
        let (u, v) = (c(0.3, 0.05), c(0.17, -0.02));
        assert!((l.e_fn(u, v).unwrap() - l.e_fn(v, u).unwrap()).norm() < 1e-13);
        assert!(l.e_fn(c(0.3, 0.0), c(-0.3, 0.0)).unwrap().norm() < 1e-13);
        let back = l.sigma(u).unwrap() * l.sigma(v).unwrap() * l.e_fn(u, v).unwrap();
        assert!((back - l.sigma(u + v).unwrap()).norm() < 1e-13);
        let h = 1e-6;
        let fd = (l.e_fn(u, v + h).unwrap() - l.e_fn(u, v - h).unwrap()) / (2.0 * h);
        assert!((fd - l.e_fn_dv(u, v).unwrap()).norm() < 1e-7 * fd.norm().max(1.0));
    }

    #[test]
    fn q_difference_identity() {
        let l = Lattice::new(c(0.0, 1.0)).unwrap();
        let (u, v) = (c(0.21, 0.0), c(0.43, 0.0));
        let lhs = l.q_fn(v).unwrap() - l.q_fn(u).unwrap();
        let rhs = l.e_fn(u, v).unwrap() * l.e_fn(u, -v).unwrap();
        assert!((lhs - rhs).norm() < 1e-11 * rhs.norm().max(1.0));
        let q = l.q_fn(u).unwrap();
        assert!((q - c(-3.233_099_220_019_936, 0.0)).norm() < 1e-11);
        assert!(q.im.abs() < 1e-12);
        assert!((l.q_fn(-u).unwrap() - q).norm() < 1e-11);
    }

    #[test]
    fn q_laurent_limit() {
        let l = Lattice::new(c(0.0, 1.0)).unwrap();
        let u = c(1e-3, 0.0);
        let s0 = l.sigma_prime_zero();
        let lead = u * u * l.q_fn(u).unwrap() * s0 * s0;
        assert!((lead + 1.0).norm() < 1e-4, "{lead}");
    }

    #[test]
    fn error_paths() {
        assert!(matches!(theta_char(ThetaChar::HALF_HALF, c(0.1, 0.0), c(0.5, 0.0)), Err(LaxError::InvalidModulus(_))));
        assert!(matches!(
            theta_char(ThetaChar::HALF_HALF, c(0.1, 1e9), c(0.0, 1.0)),
            Err(LaxError::NonConvergence { .. })
        ));
        assert!(matches!(xi(c(0.0, 0.0), c(0.0, 1.0)), Err(LaxError::Pole(_))));
        assert!(matches!(q_fn(c(1.0, 0.0), c(0.0, 1.0)), Err(LaxError::Pole(_))));
        assert!(EllipticParams::new(c(0.0, 1.0), 1).is_err());
    }
}
