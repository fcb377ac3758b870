//! Seeded verification suites and the JSON report.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmmodel::{
    bracket, convention_probe, dynamical_bracket_residual, dynamical_ybe_residual, hamiltonian_consistency,
    invariants_commute_residual, lax_bracket, BracketEngine, KricheverL, ModelParams, RForm,
};
use crate::elliptic::{parity_residual, q_difference_residual, quasi_periodicity_residual, EllipticParams, Lattice};
use crate::error::{LaxError, Result};
use crate::phasespace::{
    fd_bracket_oracle, jet_fd_residual, momentum_shift_map, symplecticity_residual, FnField, MatrixField, FD_STEP,
};
use crate::sampling::{self, stream, valid_phase_point};
use crate::tensorops::{max_norm, trace_pow, CMatrix};
use crate::twist::{
    appendix_bracket_residual, appendix_chain_residual, factorization_residual, inverse_shift_product_residual,
    nondynamical_bracket_defect, nondynamical_bracket_residual, twist_consistency_residual, twist_g, vandermonde_ratio,
    AppendixT, TwistedL,
};
use crate::znalgebra::{
    antisymmetry_residual, belavin_r_quantum, classical_limit_residual, classical_limit_residual_rescaled, classical_r,
    crossing_ladder, cybe_residual, log_log_slope, qybe_residual, zn_symmetry_residual, Generator,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Minimum distance between sampled spectral parameters.
const SPECTRAL_GAP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Elliptic,
    Rmatrix,
    Dynamical,
    Twist,
    Appendix,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Elliptic, Suite::Rmatrix, Suite::Dynamical, Suite::Twist, Suite::Appendix];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Suite::Elliptic => "elliptic",
            Suite::Rmatrix => "rmatrix",
            Suite::Dynamical => "dynamical",
            Suite::Twist => "twist",
            Suite::Appendix => "appendix",
        };
        f.write_str(s)
    }
}

/// Parses one suite name; `all` expands to every suite.
pub fn parse_suites(s: &str) -> Result<Vec<Suite>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "all" => out.extend(Suite::ALL),
            "elliptic" => out.push(Suite::Elliptic),
            "rmatrix" => out.push(Suite::Rmatrix),
            "dynamical" => out.push(Suite::Dynamical),
            "twist" => out.push(Suite::Twist),
            "appendix" => out.push(Suite::Appendix),
            other => return Err(LaxError::InvalidParameter(format!("unknown suite `{other}`"))),
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Parses `a+bi`, `a-bi`, `a`, `bi`, `i`, `-i`.
pub fn parse_complex(s: &str) -> Result<Complex64> {
    let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let bad = || LaxError::InvalidParameter(format!("cannot parse `{s}` as a complex number"));
    let num = |x: &str| x.parse::<f64>().map_err(|_| bad());
    if t.is_empty() {
        return Err(bad());
    }
    let Some(body) = t.strip_suffix('i') else {
        return Ok(Complex64::new(num(&t)?, 0.0));
    };
    let bytes = body.as_bytes();
    let split = (1..bytes.len())
        .rev()
        .find(|&k| (bytes[k] == b'+' || bytes[k] == b'-') && !matches!(bytes[k - 1], b'e' | b'E'));
    let imag = |x: &str| match x {
        "" | "+" => Ok(1.0),
        "-" => Ok(-1.0),
        _ => num(x),
    };
    match split {
        Some(k) => Ok(Complex64::new(num(&body[..k])?, imag(&body[k..])?)),
        None => Ok(Complex64::new(0.0, imag(body)?)),
    }
}

pub fn format_complex(z: Complex64) -> String {
    format!("{}{}{}i", z.re, if z.im < 0.0 || (z.im == 0.0 && z.im.is_sign_negative()) { "-" } else { "+" }, z.im.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub suites: Vec<Suite>,
    pub n_list: Vec<usize>,
    #[serde(serialize_with = "ser_complex", deserialize_with = "de_complex")]
    pub tau: Complex64,
    pub gamma: f64,
    /// Twist parameter for the appendix suite.
    pub s: f64,
    pub trials: usize,
    pub seed: u64,
    pub tol: BTreeMap<String, f64>,
}

fn ser_complex<S: serde::Serializer>(z: &Complex64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format_complex(*z))
}

fn de_complex<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Complex64, D::Error> {
    let s = String::deserialize(d)?;
    parse_complex(&s).map_err(serde::de::Error::custom)
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            suites: Suite::ALL.to_vec(),
            n_list: vec![2, 3],
            tau: Complex64::new(0.0, 1.0),
            gamma: 1.0,
            s: 0.7,
            trials: 5,
            seed: 42,
            tol: BTreeMap::new(),
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(LaxError::InvalidParameter("trials must be at least 1".into()));
        }
        if self.suites.is_empty() {
            return Err(LaxError::InvalidParameter("no suite selected".into()));
        }
        if self.n_list.is_empty() || self.n_list.iter().any(|n| !(2..=6).contains(n)) {
            return Err(LaxError::InvalidParameter(format!("n list {:?} must be non-empty within 2..=6", self.n_list)));
        }
        if !(self.tau.im > 0.0) {
            return Err(LaxError::InvalidModulus(self.tau.im));
        }
        if !self.gamma.is_finite() || !self.s.is_finite() {
            return Err(LaxError::InvalidParameter("gamma and s must be finite".into()));
        }
        for (id, tol) in &self.tol {
            if check_def(id).is_none() {
                return Err(LaxError::InvalidParameter(format!("unknown check id `{id}` in tolerance override")));
            }
            if !(*tol > 0.0) {
                return Err(LaxError::InvalidParameter(format!("tolerance for `{id}` must be positive")));
            }
        }
        Ok(())
    }

    /// Applies one `key = value` setting, as used by the config file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| LaxError::InvalidParameter(format!("invalid {what} `{value}`"));
        match key {
            "suite" | "suites" => self.suites = parse_suites(value)?,
            "n" | "n_list" => {
                self.n_list =
                    value.split(',').map(|x| x.trim().parse().map_err(|_| bad("n list"))).collect::<Result<_>>()?
            }
            "tau" => self.tau = parse_complex(value)?,
            "gamma" => self.gamma = value.parse().map_err(|_| bad("gamma"))?,
            "s" => self.s = value.parse().map_err(|_| bad("s"))?,
            "trials" => self.trials = value.parse().map_err(|_| bad("trials"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            _ => match key.strip_prefix("tol.") {
                Some(id) => {
                    self.tol.insert(id.to_string(), value.parse().map_err(|_| bad("tolerance"))?);
                }
                None => return Err(LaxError::InvalidParameter(format!("unknown config key `{key}`"))),
            },
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                LaxError::InvalidParameter(format!("config line {}: expected key = value", lineno + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn tolerance(&self, id: &str) -> f64 {
        self.tol.get(id).copied().unwrap_or_else(|| check_def(id).map_or(0.0, |c| c.tol))
    }
}

/// Parses `id=value`.
pub fn parse_tol_override(s: &str) -> Result<(String, f64)> {
    let (id, v) = s
        .split_once('=')
        .ok_or_else(|| LaxError::InvalidParameter(format!("tolerance override `{s}` must be id=value")))?;
    let v: f64 = v.trim().parse().map_err(|_| LaxError::InvalidParameter(format!("invalid tolerance `{v}`")))?;
    Ok((id.trim().to_string(), v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check_id: String,
    pub params: BTreeMap<String, String>,
    /// `None` when the check could not be evaluated; the reason is in `variant_notes`.
    pub residual: Option<f64>,
    pub tol: f64,
    pub pass: bool,
    pub variant_notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub version: String,
    pub seed: u64,
    pub config: VerifyConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub pass_count: usize,
    pub fail_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub meta: Meta,
    pub checks: Vec<CheckResult>,
    pub summary: Summary,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.summary.fail_count == 0
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

/// A registered check: id, suite, whether it is run once per rank, default tolerance.
#[derive(Debug, Clone, Copy)]
pub struct CheckDef {
    pub id: &'static str,
    pub suite: Suite,
    pub per_rank: bool,
    pub tol: f64,
}

const fn def(id: &'static str, suite: Suite, per_rank: bool, tol: f64) -> CheckDef {
    CheckDef { id, suite, per_rank, tol }
}

pub const CHECKS: &[CheckDef] = &[
    def("elliptic.quasi_periodicity", Suite::Elliptic, false, 1e-11),
    def("elliptic.parity", Suite::Elliptic, false, 1e-11),
    def("elliptic.q_difference", Suite::Elliptic, false, 1e-11),
    def("elliptic.laurent_limit", Suite::Elliptic, false, 1e-4),
    def("elliptic.theta_reflection", Suite::Elliptic, true, 1e-11),
    def("rmatrix.qybe", Suite::Rmatrix, true, 1e-9),
    def("rmatrix.quantum_symmetry_g", Suite::Rmatrix, true, 1e-11),
    def("rmatrix.quantum_symmetry_h", Suite::Rmatrix, true, 1e-11),
    def("rmatrix.classical_limit", Suite::Rmatrix, true, 0.1),
    def("rmatrix.cybe", Suite::Rmatrix, true, 1e-9),
    def("rmatrix.antisymmetry", Suite::Rmatrix, true, 1e-10),
    def("rmatrix.classical_symmetry_g", Suite::Rmatrix, true, 1e-11),
    def("rmatrix.classical_symmetry_h", Suite::Rmatrix, true, 1e-11),
    def("dynamical.lax_partials", Suite::Dynamical, true, 1e-6),
    def("dynamical.bracket", Suite::Dynamical, true, 1e-8),
    def("dynamical.bracket_fd", Suite::Dynamical, true, 1e-5),
    def("dynamical.engines_agree", Suite::Dynamical, true, 1e-5),
    def("dynamical.convention_probe", Suite::Dynamical, true, 1e-8),
    def("dynamical.ybe", Suite::Dynamical, true, 1e-7),
    def("dynamical.hamiltonian_consistency", Suite::Dynamical, true, 1e-9),
    def("dynamical.invariants_commute", Suite::Dynamical, true, 1e-8),
    def("eq32", Suite::Twist, true, 1e-7),
    def("twist.bracket_fd", Suite::Twist, true, 1e-4),
    def("twist.engines_agree", Suite::Twist, true, 1e-5),
    def("twist.consistency", Suite::Twist, true, 1e-7),
    def("twist.frame_inverse", Suite::Twist, true, 1e-10),
    def("twist.frame_partials", Suite::Twist, true, 1e-6),
    def("twist.ltilde_partials", Suite::Twist, true, 1e-6),
    def("twist.ltilde_spectrum", Suite::Twist, true, 1e-9),
    def("appendix.t_partials", Suite::Appendix, true, 1e-6),
    def("appendix.t_bracket", Suite::Appendix, true, 1e-7),
    def("appendix.shift_chain", Suite::Appendix, true, 1e-8),
    def("appendix.factorization", Suite::Appendix, true, 1e-8),
    def("appendix.vandermonde", Suite::Appendix, true, 1e-9),
    def("appendix.inverse_shift", Suite::Appendix, true, 1e-9),
    def("appendix.shift_symplectic", Suite::Appendix, true, 1e-6),
    def("appendix.shift_gradient", Suite::Appendix, true, 1e-8),
];

pub fn check_def(id: &str) -> Option<&'static CheckDef> {
    CHECKS.iter().find(|c| c.id == id)
}

/// Outcome of one check evaluation before packaging.
struct Outcome {
    residual: f64,
    notes: String,
    /// Extra structural condition beyond `residual < tol`.
    structural_ok: bool,
}

impl Outcome {
    fn plain(residual: f64) -> Self {
        Self { residual, notes: String::new(), structural_ok: true }
    }

    fn noted(residual: f64, notes: String) -> Self {
        Self { residual, notes, structural_ok: true }
    }
}

fn fmax(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

/// Evaluation context of one `(check, rank)` pair.
struct Ctx<'a> {
    cfg: &'a VerifyConfig,
    n: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl Ctx<'_> {
    fn ell(&self) -> Result<EllipticParams> {
        EllipticParams::new(self.cfg.tau, self.n)
    }

    fn model(&self) -> Result<ModelParams> {
        ModelParams::new(self.cfg.tau, self.n, self.cfg.gamma)
    }

    fn point(&mut self) -> Result<crate::phasespace::PhasePoint> {
        let lat = Lattice::new(self.cfg.tau)?;
        valid_phase_point(self.n, &mut self.rng, &lat)
    }

    fn spectral(&mut self, k: usize) -> Vec<Complex64> {
        sampling::spectral_tuple(k, SPECTRAL_GAP, &mut self.rng)
    }

    /// Max over trials of a residual.
    fn over_trials(&mut self, mut f: impl FnMut(&mut Self) -> Result<f64>) -> Result<Outcome> {
        let mut worst: f64 = 0.0;
        for _ in 0..self.cfg.trials {
            worst = fmax(worst, f(self)?);
        }
        Ok(Outcome::plain(worst))
    }
}

fn relative(diff: &CMatrix, reference: &CMatrix) -> f64 {
    max_norm(diff) / max_norm(reference).max(1.0)
}

fn run_one(id: &str, ctx: &mut Ctx) -> Result<Outcome> {
    let tau = ctx.cfg.tau;
    let s = Complex64::new(ctx.cfg.s, 0.0);
    match id {
        "elliptic.quasi_periodicity" => {
            let lat = Lattice::new(tau)?;
            ctx.over_trials(|c| quasi_periodicity_residual(c.spectral(1)[0], &lat))
        }
        "elliptic.parity" => {
            let lat = Lattice::new(tau)?;
            ctx.over_trials(|c| parity_residual(c.spectral(1)[0], &lat))
        }
        "elliptic.q_difference" => {
            let lat = Lattice::new(tau)?;
            ctx.over_trials(|c| {
                let us = c.spectral(2);
                q_difference_residual(us[0], us[1], &lat)
            })
        }
        "elliptic.laurent_limit" => {
            let lat = Lattice::new(tau)?;
            let u = Complex64::new(1e-3, 0.0);
            let sp = lat.sigma_prime_zero();
            let lead = u * u * lat.q_fn(u)? * sp * sp;
            Ok(Outcome::noted(
                (lead + 1.0).norm(),
                format!("u^2 Q(u) sigma'(0)^2 = {} at u = 1e-3", format_complex(lead)),
            ))
        }
        "elliptic.theta_reflection" => {
            let e = ctx.ell()?;
            let n = ctx.n;
            ctx.over_trials(|c| {
                let v = c.spectral(1)[0];
                let mut worst: f64 = 0.0;
                for a in 0..n as i64 {
                    let lhs = e.theta_j(a, v)?;
                    let phase = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * a as f64 / n as f64);
                    let rhs = -phase * e.theta_j(-a, -v)?;
                    worst = worst.max((lhs - rhs).norm() / lhs.norm().max(f64::MIN_POSITIVE));
                }
                Ok(worst)
            })
        }
        "rmatrix.qybe" => {
            let e = ctx.ell()?;
            ctx.over_trials(|c| {
                let vs = c.spectral(4);
                qybe_residual(vs[0], vs[1], vs[2], vs[3] * 0.25, &e)
            })
        }
        "rmatrix.quantum_symmetry_g" | "rmatrix.quantum_symmetry_h" => {
            let e = ctx.ell()?;
            let which = if id.ends_with('g') { Generator::G } else { Generator::H };
            ctx.over_trials(|c| {
                let vs = c.spectral(2);
                zn_symmetry_residual(&belavin_r_quantum(vs[0], vs[1] * 0.25, &e)?, which)
            })
        }
        "rmatrix.classical_symmetry_g" | "rmatrix.classical_symmetry_h" => {
            let e = ctx.ell()?;
            let which = if id.ends_with('g') { Generator::G } else { Generator::H };
            ctx.over_trials(|c| zn_symmetry_residual(&classical_r(c.spectral(1)[0], &e)?, which))
        }
        "rmatrix.classical_limit" => {
            let e = ctx.ell()?;
            let ws = crossing_ladder();
            let mut worst: f64 = 0.0;
            let mut rescaled_slope = f64::NAN;
            let mut last = (0.0, 0.0);
            for _ in 0..ctx.cfg.trials {
                let v = ctx.spectral(1)[0];
                let plain: Vec<f64> = ws
                    .iter()
                    .map(|&w| classical_limit_residual(v, Complex64::new(w, 0.0), &e))
                    .collect::<Result<_>>()?;
                let rescaled: Vec<f64> = ws
                    .iter()
                    .map(|&w| classical_limit_residual_rescaled(v, Complex64::new(w, 0.0), &e))
                    .collect::<Result<_>>()?;
                worst = fmax(worst, (log_log_slope(&ws, &plain) - 1.0).abs());
                rescaled_slope = log_log_slope(&ws, &rescaled);
                last = (plain[plain.len() - 1], rescaled[rescaled.len() - 1]);
            }
            let rescaled_ok = (rescaled_slope - 1.0).abs() < 0.1;
            let notes = format!(
                "normalization passing: {}; plain residual at w=1e-5: {:.3e}; rescaled slope {:.3}, residual at w=1e-5: {:.3e}",
                match (worst < 0.1, rescaled_ok) {
                    (true, false) => "plain",
                    (false, true) => "rescaled",
                    (true, true) => "both",
                    (false, false) => "neither",
                },
                last.0,
                rescaled_slope,
                last.1
            );
            Ok(Outcome::noted(worst, notes))
        }
        "rmatrix.cybe" => {
            let e = ctx.ell()?;
            ctx.over_trials(|c| {
                let vs = c.spectral(3);
                cybe_residual(vs[0], vs[1], vs[2], &e)
            })
        }
        "rmatrix.antisymmetry" => {
            let e = ctx.ell()?;
            ctx.over_trials(|c| antisymmetry_residual(c.spectral(1)[0], &e))
        }
        "dynamical.lax_partials" => {
            let m = ctx.model()?;
            ctx.over_trials(|c| {
                let u = c.spectral(1)[0];
                let x = c.point()?;
                jet_fd_residual(&KricheverL::new(u, &m), &x, FD_STEP)
            })
        }
        "dynamical.bracket" | "dynamical.bracket_fd" => {
            let m = ctx.model()?;
            let engine =
                if id.ends_with("fd") { BracketEngine::FiniteDifference(FD_STEP) } else { BracketEngine::Analytic };
            ctx.over_trials(|c| {
                let us = c.spectral(2);
                let x = c.point()?;
                dynamical_bracket_residual(us[0], us[1], &x, &m, engine)
            })
        }
        "dynamical.engines_agree" => {
            let m = ctx.model()?;
            ctx.over_trials(|c| {
                let us = c.spectral(2);
                let x = c.point()?;
                let a = lax_bracket(us[0], us[1], &x, &m, BracketEngine::Analytic)?;
                let b = lax_bracket(us[0], us[1], &x, &m, BracketEngine::FiniteDifference(FD_STEP))?;
                Ok(relative(&(a.clone() - b), &a))
            })
        }
        "dynamical.convention_probe" => {
            let m = ctx.model()?;
            let mut worst: f64 = 0.0;
            let mut alt_best = f64::INFINITY;
            let mut summary = String::new();
            for t in 0..ctx.cfg.trials {
                let us = ctx.spectral(2);
                let x = ctx.point()?;
                let fixed = convention_probe(us[0], us[1], &x, &m, RForm::UnitResidue)?;
                worst = fmax(worst, fixed[0].residual);
                let alt = convention_probe(us[0], us[1], &x, &m, RForm::SqrtCoupling)?;
                alt_best = alt_best.min(alt.iter().map(|v| v.residual).fold(f64::INFINITY, f64::min));
                if t == 0 {
                    let parts: Vec<String> = alt
                        .iter()
                        .map(|v| format!("({:+},{:+})={:.2e}", v.bracket_sign, v.r_sign, v.residual))
                        .collect();
                    summary = parts.join(" ");
                }
            }
            let notes = format!(
                "unit-residue r passes with (bracket,r)=(+1,+1); sqrt-coupling r variants (bracket,r): {summary}; best over trials {alt_best:.2e}"
            );
            Ok(Outcome::noted(worst, notes))
        }
        "dynamical.ybe" => {
            let m = ctx.model()?;
            let mut worst: f64 = 0.0;
            let mut literal: f64 = 0.0;
            let mut terms = [0.0f64; 3];
            for _ in 0..ctx.cfg.trials {
                let us = ctx.spectral(3);
                let x = ctx.point()?;
                let rep = dynamical_ybe_residual([us[0], us[1], us[2]], &x, &m)?;
                worst = fmax(worst, rep.residual);
                literal = literal.max(rep.literal_321_residual);
                for (a, b) in terms.iter_mut().zip(rep.term_norms) {
                    *a = a.max(b);
                }
            }
            let notes = format!(
                "cyclic convention (123)+(231)+(312); term norms {:.2e} {:.2e} {:.2e}; literal (321) relabelling gives {:.2e}",
                terms[0], terms[1], terms[2], literal
            );
            Ok(Outcome::noted(worst, notes))
        }
        "dynamical.hamiltonian_consistency" => {
            let m = ctx.model()?;
            let u = ctx.spectral(1)[0];
            let seed = ctx.cfg.seed ^ sampling::fnv1a(&format!("{id}/{}", ctx.n));
            Ok(Outcome::plain(hamiltonian_consistency(u, &m, ctx.cfg.trials.max(2), seed)?))
        }
        "dynamical.invariants_commute" => {
            let m = ctx.model()?;
            let n = ctx.n as u32;
            ctx.over_trials(|c| {
                let us = c.spectral(2);
                let x = c.point()?;
                let mut worst: f64 = 0.0;
                for k in 1..=n {
                    for j in 1..=n {
                        worst = worst.max(invariants_commute_residual(us[0], us[1], k, j, &x, &m)?);
                    }
                }
                Ok(worst)
            })
        }
        "eq32" => {
            let m = ctx.model()?;
            ctx.over_trials(|c| {
                let us = c.spectral(2);
                let x = c.point()?;
                nondynamical_bracket_residual(us[0], us[1], &x, &m, BracketEngine::Analytic)
            })
        }
        "twist.bracket_fd" => {
            let m = ctx.model()?;
            let engine = BracketEngine::FiniteDifference(FD_STEP);
            let mut worst: f64 = 0.0;
            for _ in 0..ctx.cfg.trials {
                let us = ctx.spectral(2);
                let x = ctx.point()?;
                let defect = nondynamical_bracket_defect(us[0], us[1], &x, &m, engine)?;
                let lhs = bracket(&TwistedL::new(us[0], &m), &TwistedL::new(us[1], &m), &x, engine)?;
                worst = fmax(worst, max_norm(&defect) / max_norm(&lhs).max(1.0));
            }
            Ok(Outcome::noted(worst, "relative to max |{L1, L2}|".into()))
        }
        "twist.engines_agree" => {
            let m = ctx.model()?;
            ctx.over_trials(|c| {
                let us = c.spectral(2);
                let x = c.point()?;
                let (f, g) = (TwistedL::new(us[0], &m), TwistedL::new(us[1], &m));
                let a = crate::phasespace::poisson_bracket(&f, &g, &x)?;
                let b = fd_bracket_oracle(&f, &g, &x, FD_STEP)?;
                Ok(relative(&(a.clone() - b), &a))
            })
        }
        "twist.consistency" => {
            let m = ctx.model()?;
            let mut worst: f64 = 0.0;
            let mut one_sided: f64 = 0.0;
            for _ in 0..ctx.cfg.trials {
                let us = ctx.spectral(2);
                let x = ctx.point()?;
                let rep = twist_consistency_residual(us[0], us[1], &x, &m)?;
                worst = fmax(worst, rep.residual);
                one_sided = one_sided.max(rep.one_sided);
            }
            let notes =
                format!("two-sided form [rho12 - r12, L1] - [rho21 - r21, L2]; one-sided [r - rho, L1 + L2] gives {one_sided:.2e}");
            Ok(Outcome::noted(worst, notes))
        }
        "twist.frame_inverse" => {
            let e = ctx.ell()?;
            let n = ctx.n;
            ctx.over_trials(|c| {
                let u = c.spectral(1)[0];
                let x = c.point()?;
                let f = twist_g(u, &x.q, &e)?;
                Ok(max_norm(&(f.g.matmul(&f.g_inv) - CMatrix::identity(n))))
            })
        }
        "twist.frame_partials" => {
            let e = ctx.ell()?;
            ctx.over_trials(|c| {
                let u = c.spectral(1)[0];
                let x = c.point()?;
                let field = FnField::new("g", move |z| Ok(twist_g(u, &z.q, &e)?.jet()));
                jet_fd_residual(&field, &x, FD_STEP)
            })
        }
        "twist.ltilde_partials" => {
            let m = ctx.model()?;
            ctx.over_trials(|c| {
                let u = c.spectral(1)[0];
                let x = c.point()?;
                jet_fd_residual(&TwistedL::new(u, &m), &x, FD_STEP)
            })
        }
        "twist.ltilde_spectrum" => {
            let m = ctx.model()?;
            let n = ctx.n as u32;
            ctx.over_trials(|c| {
                let u = c.spectral(1)[0];
                let x = c.point()?;
                let lt = TwistedL::new(u, &m).eval(&x)?;
                let l = KricheverL::new(u, &m).eval(&x)?;
                let mut worst: f64 = 0.0;
                for k in 1..=n {
                    let (a, b) = (trace_pow(&lt, k), trace_pow(&l, k));
                    worst = worst.max((a - b).norm() / b.norm().max(1.0));
                }
                Ok(worst)
            })
        }
        "appendix.t_partials" => {
            let e = ctx.ell()?;
            ctx.over_trials(|c| {
                let u = c.spectral(1)[0];
                let x = c.point()?;
                jet_fd_residual(&AppendixT::new(u, s, &e), &x, FD_STEP)
            })
        }
        "appendix.t_bracket" => {
            let e = ctx.ell()?;
            ctx.over_trials(|c| {
                let us = c.spectral(2);
                let x = c.point()?;
                appendix_bracket_residual(us[0], us[1], &x, s, &e, BracketEngine::Analytic)
            })
        }
        "appendix.shift_chain" => {
            let e = ctx.ell()?;
            ctx.over_trials(|c| {
                let us = c.spectral(2);
                let x = c.point()?;
                appendix_chain_residual(us[0], us[1], &x, s, &e)
            })
        }
        "appendix.factorization" => {
            let e = ctx.ell()?;
            let mut worst: f64 = 0.0;
            let mut winners = Vec::new();
            let mut runner_up = f64::INFINITY;
            for _ in 0..ctx.cfg.trials {
                let u = ctx.spectral(1)[0];
                let x = ctx.point()?;
                let rep = factorization_residual(u, &x, s, &e)?;
                worst = fmax(worst, rep.residual);
                winners.push((rep.best.sign_variant, rep.best.include_scalar));
                for (app, r) in &rep.variants {
                    if (app.sign_variant, app.include_scalar) != (rep.best.sign_variant, rep.best.include_scalar) {
                        runner_up = runner_up.min(*r);
                    }
                }
            }
            winners.dedup();
            let consistent = winners.len() == 1;
            let (sign, scalar) = winners[0];
            let notes = format!(
                "winning variant sign_variant={sign:+} include_scalar={scalar}{}; best other variant {runner_up:.2e}",
                if consistent { " (identical across trials)" } else { " (NOT identical across trials)" }
            );
            Ok(Outcome { residual: worst, notes, structural_ok: consistent })
        }
        "appendix.vandermonde" => {
            let e = ctx.ell()?;
            let n = ctx.n;
            let mut ratios = Vec::new();
            for _ in 0..ctx.cfg.trials.max(2) {
                let us = ctx.spectral(n);
                ratios.push(vandermonde_ratio(&us, &e)?);
            }
            let r0 = ratios[0];
            let spread = ratios.iter().map(|r| (r - r0).norm() / r0.norm()).fold(0.0, f64::max);
            Ok(Outcome::noted(spread, format!("constant = {}", format_complex(r0))))
        }
        "appendix.inverse_shift" => {
            let e = ctx.ell()?;
            ctx.over_trials(|c| {
                let us = c.spectral(2);
                let x = c.point()?;
                inverse_shift_product_residual(us[0], us[1] * 0.5, &x.q, &e)
            })
        }
        "appendix.shift_symplectic" => {
            let e = ctx.ell()?;
            ctx.over_trials(|c| {
                let x = c.point()?;
                let map = |z: &crate::phasespace::PhasePoint| momentum_shift_map(z, s, 1.0, &e);
                symplecticity_residual(&map, &x, FD_STEP)
            })
        }
        "appendix.shift_gradient" => {
            let e = ctx.ell()?;
            let n = ctx.n;
            ctx.over_trials(|c| {
                let x = c.point()?;
                let y = momentum_shift_map(&x, s, 1.0, &e)?;
                let log_delta = |q: &[f64]| -> Result<Complex64> {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for i in 0..n {
                        for j in i + 1..n {
                            acc += e.sigma(Complex64::new(q[i] - q[j], 0.0))?.ln();
                        }
                    }
                    Ok(acc * s / n as f64)
                };
                let h = 1e-4;
                let at = |i: usize, k: f64| -> Result<Complex64> {
                    let mut q = x.q.clone();
                    q[i] += k * h;
                    log_delta(&q)
                };
                let mut worst: f64 = 0.0;
                for i in 0..n {
                    // five-point stencil
                    let grad = (at(i, -2.0)? - at(i, 2.0)? + 8.0 * (at(i, 1.0)? - at(i, -1.0)?)) / (12.0 * h);
                    worst = worst.max((y.p[i] - (x.p[i] - grad.re)).abs() / grad.re.abs().max(1.0));
                }
                Ok(worst)
            })
        }
        other => Err(LaxError::InvalidParameter(format!("unknown check `{other}`"))),
    }
}

fn params_for(def: &CheckDef, n: Option<usize>, cfg: &VerifyConfig) -> BTreeMap<String, String> {
    let mut p = BTreeMap::new();
    if let Some(n) = n {
        p.insert("n".into(), n.to_string());
    }
    p.insert("tau".into(), format_complex(cfg.tau));
    p.insert("trials".into(), cfg.trials.to_string());
    if matches!(def.suite, Suite::Dynamical | Suite::Twist) {
        p.insert("gamma".into(), cfg.gamma.to_string());
    }
    if def.suite == Suite::Appendix {
        p.insert("s".into(), cfg.s.to_string());
    }
    p
}

/// Runs one check for one rank (or once, for rank-independent checks).
pub fn run_check(def: &CheckDef, n: Option<usize>, cfg: &VerifyConfig) -> CheckResult {
    let rank = n.unwrap_or(cfg.n_list[0]);
    let label = format!("{}/{}", def.id, n.map_or("-".to_string(), |n| n.to_string()));
    let mut ctx = Ctx { cfg, n: rank, rng: stream(cfg.seed, &label) };
    let tol = cfg.tolerance(def.id);
    let params = params_for(def, n, cfg);
    match run_one(def.id, &mut ctx) {
        Ok(o) => CheckResult {
            check_id: def.id.to_string(),
            params,
            pass: o.residual < tol && o.structural_ok,
            residual: Some(o.residual).filter(|r| r.is_finite()),
            tol,
            variant_notes: o.notes,
        },
        Err(e) => CheckResult {
            check_id: def.id.to_string(),
            params,
            residual: None,
            tol,
            pass: false,
            variant_notes: format!("error: {e}"),
        },
    }
}

fn param_key(p: &BTreeMap<String, String>) -> Vec<(String, String)> {
    // numeric-aware ordering for `n` keeps n=10 after n=9
    p.iter()
        .map(|(k, v)| match v.parse::<f64>() {
            Ok(x) if k == "n" => (k.clone(), format!("{:020.6}", x)),
            _ => (k.clone(), v.clone()),
        })
        .collect()
}

/// Runs every selected suite. Checks run in parallel; the report is sorted by
/// check id, then parameters, so its bytes do not depend on scheduling.
pub fn run_verify(cfg: &VerifyConfig) -> Result<Report> {
    cfg.validate()?;
    let mut tasks: Vec<(&CheckDef, Option<usize>)> = Vec::new();
    for def in CHECKS.iter().filter(|c| cfg.suites.contains(&c.suite)) {
        if def.per_rank {
            tasks.extend(cfg.n_list.iter().map(|&n| (def, Some(n))));
        } else {
            tasks.push((def, None));
        }
    }
    let mut checks: Vec<CheckResult> = tasks.par_iter().map(|(def, n)| run_check(def, *n, cfg)).collect();
    checks.sort_by(|a, b| a.check_id.cmp(&b.check_id).then_with(|| param_key(&a.params).cmp(&param_key(&b.params))));
    let pass_count = checks.iter().filter(|c| c.pass).count();
    let summary = Summary { pass_count, fail_count: checks.len() - pass_count };
    Ok(Report { meta: Meta { version: VERSION.to_string(), seed: cfg.seed, config: cfg.clone() }, checks, summary })
}

impl FromStr for Suite {
    type Err = LaxError;
    fn from_str(s: &str) -> Result<Self> {
        match parse_suites(s)?.as_slice() {
            [one] => Ok(*one),
            _ => Err(LaxError::InvalidParameter(format!("`{s}` is not a single suite"))),
        }
    }
}
