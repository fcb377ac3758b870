//! The elliptic A_{n-1} Calogero-Moser model: Hamiltonian, Krichever's Lax
//! operator, its dynamical r-matrix, trace invariants and Verlet integration.

use std::fmt::Write as _;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::elliptic::EllipticParams;
use crate::error::{LaxError, Result};
use crate::phasespace::{
    bracket_of_jets, fd_bracket_oracle, lifted_bracket, FieldJet, MatrixField, PhasePoint, REAL_TOL,
};
use crate::sampling;
use crate::tensorops::{commutator, embed, kron, max_norm, swap_legs, trace_pow, CMatrix};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Coupling, modulus and rank. `gamma` may have either sign: `gamma < 0` is the
/// repulsive model, and twist parameters with imaginary `s` land there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub elliptic: EllipticParams,
    pub gamma: f64,
    pub s: Option<Complex64>,
    amplitude: Complex64,
}

impl ModelParams {
    pub fn new(tau: Complex64, n: usize, gamma: f64) -> Result<Self> {
        Self::from_elliptic(EllipticParams::new(tau, n)?, gamma)
    }

    /// `sqrt(gamma)` on the principal branch.
    pub fn from_elliptic(elliptic: EllipticParams, gamma: f64) -> Result<Self> {
        if !gamma.is_finite() {
            return Err(LaxError::InvalidParameter(format!("coupling {gamma} is not finite")));
        }
        Ok(Self { elliptic, gamma, s: None, amplitude: c(gamma).sqrt() })
    }

    /// Coupling fixed by the twist parameter, `sqrt(gamma) = -s σ'(0) / n`.
    pub fn from_s(elliptic: EllipticParams, s: Complex64) -> Result<Self> {
        let amplitude = -s * elliptic.sigma_prime_zero() / elliptic.n as f64;
        let g = amplitude * amplitude;
        if g.im.abs() > REAL_TOL * g.norm().max(1.0) {
            return Err(LaxError::NotReal(g.im));
        }
        Ok(Self { elliptic, gamma: g.re, s: Some(s), amplitude })
    }

    /// Both given; they must satisfy `gamma = (-s σ'(0)/n)^2`.
    pub fn with_twist(elliptic: EllipticParams, gamma: f64, s: Complex64) -> Result<Self> {
        let linked = Self::from_s(elliptic, s)?;
        if (linked.gamma - gamma).abs() >= 1e-10 * gamma.abs().max(f64::MIN_POSITIVE) {
            return Err(LaxError::InvalidParameter(format!(
                "coupling {gamma} does not match (-s sigma'(0)/n)^2 = {}",
                linked.gamma
            )));
        }
        Ok(linked)
    }

    pub fn n(&self) -> usize {
        self.elliptic.n
    }

    pub fn amplitude(&self) -> Complex64 {
        self.amplitude
    }

    pub fn tau(&self) -> Complex64 {
        self.elliptic.tau()
    }
}

fn real(z: Complex64) -> Result<f64> {
    if z.im.abs() > REAL_TOL * z.re.abs().max(1.0) {
        return Err(LaxError::NotReal(z.im));
    }
    Ok(z.re)
}

/// `V(u) = gamma Q(u)`.
pub fn potential(u: f64, params: &ModelParams) -> Result<f64> {
    if params.gamma == 0.0 {
        return Ok(0.0);
    }
    real(params.elliptic.q_fn(c(u))? * params.gamma)
}

/// `V'(u) = gamma Q'(u)`.
pub fn potential_deriv(u: f64, params: &ModelParams) -> Result<f64> {
    if params.gamma == 0.0 {
        return Ok(0.0);
    }
    real(params.elliptic.lattice().q_fn_deriv(c(u))? * params.gamma)
}

/// `H = Σ p_i² + Σ_{i≠j} V(q_i − q_j)`.
pub fn hamiltonian(x: &PhasePoint, params: &ModelParams) -> Result<f64> {
    x.validate(params.elliptic.lattice())?;
    let n = x.n();
    let mut h: f64 = x.p.iter().map(|p| p * p).sum();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                h += potential(x.q_diff(i, j), params)?;
            }
        }
    }
    Ok(h)
}

fn check_dim(x: &PhasePoint, n: usize) -> Result<()> {
    if x.n() != n {
        return Err(LaxError::Dimension(format!("phase point has {} particles, model has {n}", x.n())));
    }
    Ok(())
}

/// `L^i_j = p_i δ_ij + (1 − δ_ij) sqrt(gamma) E(u, q_j − q_i)`.
#[derive(Debug, Clone, Copy)]
pub struct KricheverL {
    pub u: Complex64,
    pub params: ModelParams,
}

impl KricheverL {
    pub fn new(u: Complex64, params: &ModelParams) -> Self {
        Self { u, params: *params }
    }
}

impl MatrixField for KricheverL {
    fn label(&self) -> String {
        format!("L({})", self.u)
    }

    fn jet(&self, x: &PhasePoint) -> Result<FieldJet> {
        let n = self.params.n();
        check_dim(x, n)?;
        let lat = self.params.elliptic.lattice();
        lat.sigma_nonzero(self.u, "Lax operator")?;
        let amp = self.params.amplitude();
        let mut value = CMatrix::diag(&x.p.iter().map(|&p| c(p)).collect::<Vec<_>>());
        let dp: Vec<CMatrix> = (0..n).map(|k| CMatrix::unit(n, k, k)).collect();
        let mut dq = vec![CMatrix::zeros(n, n); n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let qji = c(x.q_diff(j, i));
                value[(i, j)] = amp * lat.e_fn(self.u, qji)?;
                let d = amp * lat.e_fn_dv(self.u, qji)?;
                dq[j][(i, j)] += d;
                dq[i][(i, j)] -= d;
            }
        }
        Ok(FieldJet { value, dp, dq })
    }
}

pub fn krichever_l(u: Complex64, params: &ModelParams) -> KricheverL {
    KricheverL::new(u, params)
}

/// Which form of the dynamical r-matrix to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RForm {
    /// `a = ξ(u−v) + ξ(v)`, `c_ij = σ'(0) E(u−v, q_ij)`, `d_ij = σ'(0)/2 E(v, q_ij)`,
    /// placed as `a E_ii⊗E_ii + c_ij E_ji⊗E_ij + d_ij (E_ii + E_jj)⊗E_ji`.
    UnitResidue,
    /// `a = −ξ(u−v) − ξ(v)`, `c_ij = sqrt(−gamma) E(u−v, q_ij)`, `d_ij = sqrt(−gamma)/2 E(v, q_ij)`,
    /// placed as `a E_ii⊗E_ii + c_ij E_ij⊗E_ji + d_ij (E_ii⊗E_ij + E_jj⊗E_ij)`.
    SqrtCoupling,
}

/// The dynamical r-matrix `r12(u, v)` with its `q` partials, `E_ab` the unit
/// matrix at row `a`, column `b`.
pub fn dynamical_r(u: Complex64, v: Complex64, q: &[f64], params: &ModelParams, form: RForm) -> Result<FieldJet> {
    let n = params.n();
    if q.len() != n {
        return Err(LaxError::Dimension(format!("{} positions for rank {n}", q.len())));
    }
    let lat = params.elliptic.lattice();
    let dim = n * n;
    let mut value = CMatrix::zeros(dim, dim);
    let mut dq = vec![CMatrix::zeros(dim, dim); n];
    let xi_sum = lat.xi(u - v)? + lat.xi(v)?;
    let (a, kc) = match form {
        RForm::UnitResidue => (xi_sum, lat.sigma_prime_zero()),
        RForm::SqrtCoupling => (-xi_sum, c(-params.gamma).sqrt()),
    };
    let slot = |a: usize, b: usize, cc: usize, d: usize| (a * n + cc, b * n + d);
    for i in 0..n {
        value[slot(i, i, i, i)] += a;
        for j in 0..n {
            if i == j {
                continue;
            }
            let qij = c(q[i] - q[j]);
            let cij = kc * lat.e_fn(u - v, qij)?;
            let dij = kc * 0.5 * lat.e_fn(v, qij)?;
            let dc = kc * lat.e_fn_dv(u - v, qij)?;
            let dd = kc * 0.5 * lat.e_fn_dv(v, qij)?;
            // (A⊗B) with A = E_ab, B = E_cd sits at row (a, c), column (b, d).
            let (c_at, d1_at, d2_at) = match form {
                RForm::UnitResidue => (slot(j, i, i, j), slot(i, i, j, i), slot(j, j, j, i)),
                RForm::SqrtCoupling => (slot(i, j, j, i), slot(i, i, i, j), slot(j, j, i, j)),
            };
            value[c_at] += cij;
            value[d1_at] += dij;
            value[d2_at] += dij;
            for (m, sign) in [(i, 1.0), (j, -1.0)] {
                dq[m][c_at] += dc * sign;
                dq[m][d1_at] += dd * sign;
                dq[m][d2_at] += dd * sign;
            }
        }
    }
    Ok(FieldJet::q_only(value, dq))
}

/// How the phase-space bracket is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BracketEngine {
    Analytic,
    FiniteDifference(f64),
}

pub fn bracket(f: &dyn MatrixField, g: &dyn MatrixField, x: &PhasePoint, engine: BracketEngine) -> Result<CMatrix> {
    match engine {
        BracketEngine::Analytic => Ok(bracket_of_jets(&f.jet(x)?, &g.jet(x)?)),
        BracketEngine::FiniteDifference(h) => fd_bracket_oracle(f, g, x, h),
    }
}

/// `{L1(u), L2(v)}` under the chosen engine.
pub fn lax_bracket(
    u: Complex64,
    v: Complex64,
    x: &PhasePoint,
    params: &ModelParams,
    engine: BracketEngine,
) -> Result<CMatrix> {
    bracket(&KricheverL::new(u, params), &KricheverL::new(v, params), x, engine)
}

/// `[r12(u,v), L1(u)] − [r21(v,u), L2(v)]` with `r21(v,u) = P r12(v,u) P`.
fn dynamical_rhs(u: Complex64, v: Complex64, x: &PhasePoint, params: &ModelParams, form: RForm) -> Result<CMatrix> {
    let n = params.n();
    let id = CMatrix::identity(n);
    let l1 = kron(&KricheverL::new(u, params).eval(x)?, &id);
    let l2 = kron(&id, &KricheverL::new(v, params).eval(x)?);
    let r12 = dynamical_r(u, v, &x.q, params, form)?.value;
    let r21 = swap_legs(&dynamical_r(v, u, &x.q, params, form)?.value, n);
    Ok(commutator(&r12, &l1) - commutator(&r21, &l2))
}

/// `max |{L1(u), L2(v)} − [r12(u,v), L1] + [r21(v,u), L2]|`.
pub fn dynamical_bracket_residual(
    u: Complex64,
    v: Complex64,
    x: &PhasePoint,
    params: &ModelParams,
    engine: BracketEngine,
) -> Result<f64> {
    x.validate(params.elliptic.lattice())?;
    let lhs = lax_bracket(u, v, x, params, engine)?;
    Ok(max_norm(&(lhs - dynamical_rhs(u, v, x, params, RForm::UnitResidue)?)))
}

/// One sign combination of the convention probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConventionVariant {
    pub bracket_sign: i8,
    pub r_sign: i8,
    pub residual: f64,
}

/// Bracket residual of the given r form under all four (bracket sign × r sign) choices.
pub fn convention_probe(
    u: Complex64,
    v: Complex64,
    x: &PhasePoint,
    params: &ModelParams,
    form: RForm,
) -> Result<Vec<ConventionVariant>> {
    let lhs = lax_bracket(u, v, x, params, BracketEngine::Analytic)?;
    let rhs = dynamical_rhs(u, v, x, params, form)?;
    let mut out = Vec::new();
    for bracket_sign in [1i8, -1] {
        for r_sign in [1i8, -1] {
            let diff = lhs.scale(c(f64::from(bracket_sign))) - rhs.scale(c(f64::from(r_sign)));
            out.push(ConventionVariant { bracket_sign, r_sign, residual: max_norm(&diff) });
        }
    }
    Ok(out)
}

/// Dynamical Yang-Baxter residual, term by term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DybeReport {
    /// `max |Σ_cyc [R^(abc), L_a]|`.
    pub residual: f64,
    /// `max |[R^(abc), L_a]|` for `(abc) = (123), (231), (312)`.
    pub term_norms: [f64; 3],
    /// The sum with the third term taken as the literal `(321)` relabelling.
    pub literal_321_residual: f64,
}

fn dybe_term(
    abc: [usize; 3],
    us: &[Complex64; 3],
    x: &PhasePoint,
    params: &ModelParams,
    l_jets: &[FieldJet],
) -> Result<CMatrix> {
    let n = params.n();
    let [a, b, cc] = abc;
    let r = |i: usize, j: usize| dynamical_r(us[i], us[j], &x.q, params, RForm::UnitResidue);
    let lift = |m: &CMatrix, legs: &[usize]| embed(m, n, legs, 3);
    let (r_ab, r_ac, r_bc, r_cb) = (r(a, b)?, r(a, cc)?, r(b, cc)?, r(cc, b)?);
    let (m_ab, m_ac) = (lift(&r_ab.value, &[a, b]), lift(&r_ac.value, &[a, cc]));
    let m_bc = lift(&r_bc.value, &[b, cc]);
    let m_cb = lift(&r_cb.value, &[cc, b]);
    let big_r = commutator(&m_ab, &m_ac) + commutator(&m_ab, &m_bc)
        - commutator(&m_ac, &m_cb)
        - lifted_bracket(&r_ac, &[a, cc], &l_jets[b], &[b], n, 3)
        + lifted_bracket(&r_ab, &[a, b], &l_jets[cc], &[cc], n, 3);
    Ok(commutator(&big_r, &lift(&l_jets[a].value, &[a])))
}

/// `Σ_cyc [R^(abc), L_a]` with
/// `R^(abc) = [r_ab, r_ac] + [r_ab, r_bc] − [r_ac, r_cb] − {r_ac, L_b} + {r_ab, L_c}`,
/// `r_ab = r(u_a, u_b)` on legs `a, b`.
pub fn dynamical_ybe_residual(us: [Complex64; 3], x: &PhasePoint, params: &ModelParams) -> Result<DybeReport> {
    x.validate(params.elliptic.lattice())?;
    let l_jets: Vec<FieldJet> = us.iter().map(|&u| KricheverL::new(u, params).jet(x)).collect::<Result<_>>()?;
    let t123 = dybe_term([0, 1, 2], &us, x, params, &l_jets)?;
    let t231 = dybe_term([1, 2, 0], &us, x, params, &l_jets)?;
    let t312 = dybe_term([2, 0, 1], &us, x, params, &l_jets)?;
    let t321 = dybe_term([2, 1, 0], &us, x, params, &l_jets)?;
    Ok(DybeReport {
        residual: max_norm(&(t123.clone() + t231.clone() + t312.clone())),
        term_norms: [max_norm(&t123), max_norm(&t231), max_norm(&t312)],
        literal_321_residual: max_norm(&(t123 + t231 + t321)),
    })
}

/// `[tr L(u)^k for k = 1..=kmax]`.
pub fn trace_invariants(u: Complex64, x: &PhasePoint, params: &ModelParams, kmax: u32) -> Result<Vec<Complex64>> {
    let l = KricheverL::new(u, params).eval(x)?;
    Ok((1..=kmax).map(|k| trace_pow(&l, k)).collect())
}

/// `max |(H − Re tr L²(u)) − mean|` over seeded points.
pub fn hamiltonian_consistency(u: Complex64, params: &ModelParams, sample_count: usize, seed: u64) -> Result<f64> {
    let mut rng = sampling::stream(seed, "hamiltonian_consistency");
    let mut gaps = Vec::with_capacity(sample_count);
    for _ in 0..sample_count {
        let x = sampling::valid_phase_point(params.n(), &mut rng, params.elliptic.lattice())?;
        let t2 = trace_invariants(u, &x, params, 2)?[1];
        gaps.push(hamiltonian(&x, params)? - t2.re);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len().max(1) as f64;
    Ok(gaps.iter().map(|g| (g - mean).abs()).fold(0.0, f64::max))
}

/// Gradient of `tr L(u)^k`: `∂ tr L^k = k tr(L^{k−1} ∂L)`.
fn trace_power_gradient(jet: &FieldJet, k: u32) -> (Vec<Complex64>, Vec<Complex64>) {
    let n = jet.value.rows();
    let mut pow = CMatrix::identity(n);
    for _ in 1..k {
        pow = pow.matmul(&jet.value);
    }
    let kk = c(f64::from(k));
    let grad = |ds: &[CMatrix]| ds.iter().map(|d| pow.matmul(d).trace() * kk).collect::<Vec<_>>();
    (grad(&jet.dp), grad(&jet.dq))
}

/// `|{tr L^k(u), tr L^m(v)}(x)|` relative to `max(Σ_i |f_p g_q| + |f_q g_p|, 1)`,
/// the size of the terms that cancel.
pub fn invariants_commute_residual(
    u: Complex64,
    v: Complex64,
    k: u32,
    m: u32,
    x: &PhasePoint,
    params: &ModelParams,
) -> Result<f64> {
    let (fp, fq) = trace_power_gradient(&KricheverL::new(u, params).jet(x)?, k);
    let (gp, gq) = trace_power_gradient(&KricheverL::new(v, params).jet(x)?, m);
    let mut acc = ZERO;
    let mut scale = 0.0f64;
    for i in 0..x.n() {
        acc += fp[i] * gq[i] - fq[i] * gp[i];
        scale += (fp[i] * gq[i]).norm() + (fq[i] * gp[i]).norm();
    }
    Ok(acc.norm() / scale.max(1.0))
}

/// Radius around a lattice translate at which integration stops.
pub const COLLISION_RADIUS: f64 = 1e-3;

/// Per-sample diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub point: PhasePoint,
    pub energy: f64,
    pub momentum: f64,
    pub traces: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub u_ref: f64,
    pub samples: Vec<Sample>,
    /// Set when integration stopped early; the samples up to that point are kept.
    pub abort: Option<String>,
}

/// Maximum drifts of the conserved quantities along a trajectory.
///
/// Relative drifts are `|f(t) − f(0)| / max(|f(0)|, 1)` so that quantities
/// starting at zero are measured absolutely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    pub samples: usize,
    pub t_final: f64,
    pub aborted: bool,
    pub abort_reason: Option<String>,
    pub energy_rel_drift: f64,
    pub momentum_drift: f64,
    pub trace_rel_drift: Vec<f64>,
    pub center_of_mass_max: f64,
}

fn drift(values: impl Iterator<Item = f64>, v0: f64) -> f64 {
    values.map(|v| (v - v0).abs()).fold(0.0, f64::max) / v0.abs().max(1.0)
}

impl Trajectory {
    pub fn summary(&self) -> DriftSummary {
        let first = &self.samples[0];
        let k = first.traces.len();
        let n = first.point.n() as f64;
        DriftSummary {
            samples: self.samples.len(),
            t_final: self.samples.last().map_or(0.0, |s| s.t),
            aborted: self.abort.is_some(),
            abort_reason: self.abort.clone(),
            energy_rel_drift: drift(self.samples.iter().map(|s| s.energy), first.energy),
            momentum_drift: self.samples.iter().map(|s| (s.momentum - first.momentum).abs()).fold(0.0, f64::max),
            trace_rel_drift: (0..k).map(|i| drift(self.samples.iter().map(|s| s.traces[i]), first.traces[i])).collect(),
            center_of_mass_max: self
                .samples
                .iter()
                .map(|s| (s.point.q.iter().sum::<f64>() / n).abs())
                .fold(0.0, f64::max),
        }
    }

    pub fn csv_header(n: usize) -> String {
        let mut h = String::from("t");
        for i in 0..n {
            write!(h, ",q_{i}").unwrap();
        }
        for i in 0..n {
            write!(h, ",p_{i}").unwrap();
        }
        h.push_str(",H,P_total");
        for k in 1..=n {
            write!(h, ",ReTrL{k}").unwrap();
        }
        h
    }

    /// Writes the CSV with 17 significant digits per value.
    pub fn write_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        let n = self.samples.first().map_or(0, |s| s.point.n());
        writeln!(out, "{}", Self::csv_header(n))?;
        for s in &self.samples {
            let mut row = format!("{:.16e}", s.t);
            for v in s.point.q.iter().chain(&s.point.p).chain([&s.energy, &s.momentum]).chain(&s.traces) {
                write!(row, ",{v:.16e}").unwrap();
            }
            writeln!(out, "{row}")?;
        }
        Ok(())
    }
}

/// `F_i = −∂U/∂q_i = −2 Σ_{j≠i} V'(q_i − q_j)`.
fn forces(q: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    let n = q.len();
    let mut f = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = 2.0 * potential_deriv(q[i] - q[j], params)?;
            f[i] -= d;
            f[j] += d;
        }
    }
    Ok(f)
}

/// First pair whose separation crossed, or came within [`COLLISION_RADIUS`] of,
/// a lattice translate on the real line.
fn collision(old: &[f64], new: &[f64]) -> Option<(usize, usize)> {
    let n = new.len();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (old[i] - old[j], new[i] - new[j]);
            let near = (b - b.round()).abs() < COLLISION_RADIUS;
            if near || a.floor() != b.floor() {
                return Some((i, j));
            }
        }
    }
    None
}

fn record(t: f64, x: &PhasePoint, u_ref: Complex64, params: &ModelParams) -> Result<Sample> {
    let traces = trace_invariants(u_ref, x, params, params.n() as u32)?.iter().map(|z| z.re).collect();
    Ok(Sample { t, point: x.clone(), energy: hamiltonian(x, params)?, momentum: x.p.iter().sum(), traces })
}

/// Störmer-Verlet (kick-drift-kick) for `H = Σ p² + U(q)`, so `dq/dt = 2p`,
/// `dp/dt = −∂U/∂q`. Diagnostics are recorded every `sample_every` steps at
/// spectral parameter `u_ref`. A near-collision or a non-finite state ends the
/// run and is reported in [`Trajectory::abort`].
pub fn integrate(
    x0: &PhasePoint,
    dt: f64,
    steps: usize,
    params: &ModelParams,
    sample_every: usize,
    u_ref: f64,
) -> Result<Trajectory> {
    check_dim(x0, params.n())?;
    if params.tau().re != 0.0 {
        return Err(LaxError::InvalidParameter("integration needs a purely imaginary modulus".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) || sample_every == 0 {
        return Err(LaxError::InvalidParameter(format!("dt = {dt}, sample_every = {sample_every}")));
    }
    x0.validate(params.elliptic.lattice())?;
    if let Some((i, j)) = collision(&x0.q, &x0.q) {
        return Err(LaxError::Collision { t: 0.0, i, j });
    }
    let u = c(u_ref);
    let mut x = x0.clone();
    let mut samples = vec![record(0.0, &x, u, params)?];
    let mut f = forces(&x.q, params)?;
    let mut abort = None;
    for step in 1..=steps {
        let t = step as f64 * dt;
        let old_q = x.q.clone();
        for i in 0..x.n() {
            x.p[i] += 0.5 * dt * f[i];
            x.q[i] += 2.0 * dt * x.p[i];
        }
        if x.q.iter().chain(&x.p).any(|v| !v.is_finite()) {
            abort = Some(LaxError::Unstable(t).to_string());
            break;
        }
        if let Some((i, j)) = collision(&old_q, &x.q) {
            abort = Some(LaxError::Collision { t, i, j }.to_string());
            break;
        }
        f = match forces(&x.q, params) {
            Ok(f) => f,
            Err(e) => {
                abort = Some(e.to_string());
                break;
            }
        };
        for i in 0..x.n() {
            x.p[i] += 0.5 * dt * f[i];
        }
        if x.p.iter().any(|v| !v.is_finite()) {
            abort = Some(LaxError::Unstable(t).to_string());
            break;
        }
        if step % sample_every == 0 {
            samples.push(record(t, &x, u, params)?);
        }
    }
    Ok(Trajectory { u_ref, samples, abort })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phasespace::{fd_jet, jet_fd_residual, FD_STEP};

    fn ci(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn model(n: usize, gamma: f64) -> ModelParams {
        ModelParams::new(ci(0.0, 1.0), n, gamma).unwrap()
    }

    fn point(n: usize, seed: u64) -> PhasePoint {
        sampling::phase_point(n, &mut sampling::stream(seed, "cmmodel-tests"))
    }

    #[test]
    fn potential_shape() {
        let m = model(2, 1.0);
        for u in [0.1, 0.27, 0.4] {
            assert!((potential(u, &m).unwrap() - potential(-u, &m).unwrap()).abs() < 1e-12);
        }
        let sp0 = m.elliptic.sigma_prime_zero().re;
        let u = 1e-3;
        assert!((u * u * potential(u, &m).unwrap() * sp0 * sp0 + 1.0).abs() < 1e-4);
        assert_eq!(potential(0.3, &model(2, 0.0)).unwrap(), 0.0);
        assert!(matches!(potential(0.0, &m), Err(LaxError::Pole(_))));
        // Frozen from an independent direct theta-series evaluation.
        assert!((potential(0.21, &m).unwrap() - -3.233099220019936).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_examples() {
        let m = model(2, 1.0);
        let x = PhasePoint::new(vec![0.0, 0.0], vec![-0.15, 0.15]).unwrap();
        assert!((hamiltonian(&x, &m).unwrap() - 2.0 * potential(-0.3, &m).unwrap()).abs() < 1e-14);
        let m3 = model(3, 0.7);
        let x = point(3, 1);
        let shifted = PhasePoint::new(x.p.clone(), x.q.iter().map(|q| q + 0.123).collect()).unwrap();
        assert!((hamiltonian(&x, &m3).unwrap() - hamiltonian(&shifted, &m3).unwrap()).abs() < 1e-12);
        let mut oracle: f64 = x.p.iter().map(|p| p * p).sum();
        for (i, qi) in x.q.iter().enumerate() {
            for (j, qj) in x.q.iter().enumerate() {
                if i != j {
                    let xi1 = m3.elliptic.lattice().xi_deriv(ci(qi - qj, 0.0)).unwrap();
                    oracle += 0.7 * (xi1 / (m3.elliptic.sigma_prime_zero().powi(2))).re;
                }
            }
        }
        assert!((hamiltonian(&x, &m3).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn lax_operator_entries_and_partials() {
        let x = point(3, 2);
        let l = KricheverL::new(ci(0.37, 0.1), &model(3, 0.0)).eval(&x).unwrap();
        let diag = CMatrix::diag(&x.p.iter().map(|&p| c(p)).collect::<Vec<_>>());
        assert_eq!(l, diag);
        let field = KricheverL::new(ci(0.37, 0.1), &model(3, 1.0));
        let l = field.eval(&x).unwrap();
        for i in 0..3 {
            assert_eq!(l[(i, i)], c(x.p[i]));
        }
        assert!(jet_fd_residual(&field, &x, FD_STEP).unwrap() < 1e-6);
        let fd = fd_jet(&field, &x, FD_STEP).unwrap();
        assert!(max_norm(&(fd.value - l)) == 0.0);
    }

    #[test]
    fn dynamical_r_layout() {
        let m = model(3, 1.0);
        let x = point(3, 3);
        let (u, v) = (ci(0.41, 0.0), ci(0.87, 0.0));
        let r = dynamical_r(u, v, &x.q, &m, RForm::SqrtCoupling).unwrap().value;
        // c_12 under E^l_i ⊗ E^k_j = E^1_2 ⊗ E^2_1: row pair (1,2), column pair (2,1).
        let c12 = c(-1.0).sqrt() * m.elliptic.e_fn(u - v, c(x.q[0] - x.q[1])).unwrap();
        assert!((r[(1, 3)] - c12).norm() < 1e-14);
        let a = -m.elliptic.xi(u - v).unwrap() - m.elliptic.xi(v).unwrap();
        for i in 0..3 {
            assert!((r[(4 * i, 4 * i)] - a).norm() < 1e-14);
        }
        let corrected = dynamical_r(u, v, &x.q, &m, RForm::UnitResidue).unwrap().value;
        assert!((corrected[(3, 1)] - m.elliptic.sigma_prime_zero() * c12 / c(-1.0).sqrt()).norm() < 1e-13);
        let r0 = dynamical_r(u, v, &x.q, &model(3, 0.0), RForm::SqrtCoupling).unwrap().value;
        let off_diag = (0..9).flat_map(|i| (0..9).map(move |j| (i, j))).filter(|(i, j)| i != j);
        assert!(off_diag.into_iter().all(|ij| r0[ij] == ZERO));
        assert!(matches!(dynamical_r(u, u, &x.q, &m, RForm::UnitResidue), Err(LaxError::Pole(_))));
    }

    #[test]
    fn dynamical_r_partials_match_fd() {
        let m = model(3, 1.0);
        let x = point(3, 4);
        let (u, v) = (ci(0.3, 0.1), ci(0.75, 0.05));
        let jet = dynamical_r(u, v, &x.q, &m, RForm::UnitResidue).unwrap();
        for k in 0..3 {
            let (mut qp, mut qm) = (x.q.clone(), x.q.clone());
            qp[k] += 1e-6;
            qm[k] -= 1e-6;
            let fd = (dynamical_r(u, v, &qp, &m, RForm::UnitResidue).unwrap().value
                - dynamical_r(u, v, &qm, &m, RForm::UnitResidue).unwrap().value)
                .scale(c(0.5e6));
            assert!(max_norm(&(fd - jet.dq[k].clone())) < 1e-6);
        }
    }

    #[test]
    fn dynamical_bracket() {
        for n in [2, 3] {
            let m = model(n, 1.0);
            let x = point(n, 5);
            let (u, v) = (ci(0.41, 0.0), ci(0.87, 0.0));
            let res = dynamical_bracket_residual(u, v, &x, &m, BracketEngine::Analytic).unwrap();
            assert!(res < 1e-10, "n={n} {res}");
            let fd = dynamical_bracket_residual(u, v, &x, &m, BracketEngine::FiniteDifference(FD_STEP)).unwrap();
            assert!(fd < 1e-5, "n={n} {fd}");
        }
        let m = model(2, 1.0);
        let x = point(2, 6);
        let u = ci(0.41, 0.0);
        assert!(matches!(dynamical_bracket_residual(u, u, &x, &m, BracketEngine::Analytic), Err(LaxError::Pole(_))));
    }

    #[test]
    fn sqrt_coupling_r_fails_every_sign_choice() {
        let m = model(2, 1.0);
        let x = point(2, 7);
        let probe = convention_probe(ci(0.41, 0.0), ci(0.87, 0.0), &x, &m, RForm::SqrtCoupling).unwrap();
        assert_eq!(probe.len(), 4);
        assert!(probe.iter().all(|v| v.residual > 1e-2), "{probe:?}");
        let fixed = convention_probe(ci(0.41, 0.0), ci(0.87, 0.0), &x, &m, RForm::UnitResidue).unwrap();
        assert!(fixed[0].residual < 1e-10 && fixed[3].residual < 1e-10);
        assert!(fixed[1].residual > 1e-2 && fixed[2].residual > 1e-2);
    }

    #[test]
    fn dynamical_ybe() {
        for n in [2, 3] {
            let m = model(n, 1.0);
            let x = point(n, 8);
            let us = [ci(0.41, 0.0), ci(0.87, 0.0), ci(0.23, 0.1)];
            let rep = dynamical_ybe_residual(us, &x, &m).unwrap();
            assert!(rep.residual < 1e-9, "n={n} {rep:?}");
            assert!(rep.term_norms.iter().any(|t| *t > 1e-3));
            assert!(rep.literal_321_residual > 1e-3);
        }
        let rep = dynamical_ybe_residual([ci(0.41, 0.0), ci(0.87, 0.0), ci(0.23, 0.1)], &point(2, 9), &model(2, 0.0));
        assert!(rep.unwrap().residual < 1e-10);
    }

    #[test]
    fn invariants() {
        let m = model(3, 1.0);
        let x = point(3, 10);
        let u = ci(0.37, 0.0);
        let tr = trace_invariants(u, &x, &m, 3).unwrap();
        assert!((tr[0] - c(x.p.iter().sum())).norm() < 1e-14);
        assert!(hamiltonian_consistency(ci(0.33, 0.0), &model(2, 1.0), 20, 1).unwrap() < 1e-9);
        assert!(hamiltonian_consistency(ci(0.33, 0.0), &m, 20, 1).unwrap() < 1e-9);
        assert!(hamiltonian_consistency(ci(0.33, 0.0), &model(3, 0.0), 20, 1).unwrap() < 1e-13);
        let v = ci(0.61, 0.05);
        assert!(invariants_commute_residual(u, v, 1, 2, &point(2, 11), &model(2, 1.0)).unwrap() < 1e-9);
        assert!(invariants_commute_residual(u, v, 2, 2, &x, &m).unwrap() < 1e-8);
        assert!(invariants_commute_residual(u, v, 3, 2, &x, &m).unwrap() < 1e-8);
        assert!(invariants_commute_residual(u, u, 3, 3, &x, &m).unwrap() == 0.0);
    }

    #[test]
    fn twist_parameter_linkage() {
        let e = EllipticParams::new(ci(0.0, 1.0), 3).unwrap();
        let from_s = ModelParams::from_s(e, c(0.7)).unwrap();
        let amp = -0.7 * e.sigma_prime_zero().re / 3.0;
        assert!((from_s.gamma - amp * amp).abs() < 1e-15);
        assert!(ModelParams::with_twist(e, from_s.gamma, c(0.7)).is_ok());
        assert!(ModelParams::with_twist(e, 1.0, c(0.7)).is_err());
        let imaginary = ModelParams::from_s(e, ci(0.0, 0.7)).unwrap();
        assert!(imaginary.gamma < 0.0);
        assert!(ModelParams::from_s(e, ci(0.5, 0.5)).is_err());
    }

    #[test]
    fn verlet_conserves_momentum_and_is_second_order() {
        let m = model(3, -1.0);
        let x0 = PhasePoint::new(vec![0.3, -0.1, -0.2], vec![-0.3, 0.02, 0.31]).unwrap();
        let a = integrate(&x0, 1e-3, 2000, &m, 10, 0.37).unwrap();
        assert!(a.abort.is_none());
        let s = a.summary();
        assert!(s.momentum_drift < 1e-13, "{}", s.momentum_drift);
        assert!(s.energy_rel_drift < 1e-5);
        let b = integrate(&x0, 5e-4, 4000, &m, 20, 0.37).unwrap().summary();
        let ratio = s.energy_rel_drift / b.energy_rel_drift;
        assert!((3.0..5.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn attractive_pair_collides() {
        let m = model(2, 1.0);
        let x0 = PhasePoint::new(vec![0.0, 0.0], vec![-0.1, 0.1]).unwrap();
        let t = integrate(&x0, 1e-3, 100_000, &m, 100, 0.37).unwrap();
        assert!(t.abort.as_deref().is_some_and(|r| r.contains("collision")), "{:?}", t.abort);
        let x0 = PhasePoint::new(vec![0.4, -0.4], vec![-0.3, 0.3]).unwrap();
        let huge = integrate(&x0, 0.5, 100, &model(2, -1.0), 1, 0.37).unwrap();
        assert!(huge.abort.is_some());
    }

    #[test]
    fn csv_layout() {
        let m = model(2, -1.0);
        let x0 = PhasePoint::new(vec![0.4, -0.4], vec![-0.3, 0.3]).unwrap();
        let t = integrate(&x0, 1e-3, 10, &m, 5, 0.37).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,q_0,q_1,p_0,p_1,H,P_total,ReTrL1,ReTrL2");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1].split(',').count(), 9);
        let q0: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(q0, -0.3);
        assert!(t.summary().center_of_mass_max < 1e-13);
    }
}
