//! Command-line front end: `laxlab verify | simulate | dump`.
//!
//! Exit codes: 0 success, 1 a check failed or a simulation aborted, 2 bad input.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde::Serialize;

use crate::cmmodel::{integrate, DriftSummary, KricheverL, ModelParams};
use crate::elliptic::EllipticParams;
use crate::error::{LaxError, Result};
use crate::phasespace::{MatrixField, PhasePoint};
use crate::tensorops::CMatrix;
use crate::twist::{intertwiner_a, TwistedL};
use crate::verify::{self, format_complex, parse_complex, parse_suites, parse_tol_override, VerifyConfig};
use crate::znalgebra::{belavin_r_quantum, classical_r, RTensor, TensorEntry};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "laxlab", version, about = "Elliptic Calogero-Moser Lax matrices and r-matrix identity checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run seeded verification suites and write a JSON report.
    Verify(VerifyArgs),
    /// Integrate the model with Störmer-Verlet and write a trajectory CSV.
    Simulate(SimulateArgs),
    /// Write one matrix or tensor as JSON.
    Dump(DumpArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Suites, comma separated or repeated: elliptic, rmatrix, dynamical, twist, appendix, all.
    #[arg(long = "suite")]
    pub suite: Vec<String>,
    /// Ranks, e.g. `2,3`.
    #[arg(long = "n")]
    pub n: Option<String>,
    /// Modulus as `a+bi`.
    #[arg(long, allow_hyphen_values = true)]
    pub tau: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub gamma: Option<f64>,
    /// Twist parameter of the appendix suite.
    #[arg(long, allow_hyphen_values = true)]
    pub s: Option<f64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Tolerance override `check_id=value`; repeatable.
    #[arg(long = "tol")]
    pub tol: Vec<String>,
    /// Plain `key = value` file; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    pub gamma: f64,
    /// Imaginary part of the (purely imaginary) modulus.
    #[arg(long = "tau-im", default_value_t = 1.0)]
    pub tau_im: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    #[arg(long, default_value_t = 100_000)]
    pub steps: usize,
    /// Initial positions, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub q0: Option<String>,
    /// Initial momenta, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub p0: Option<String>,
    #[arg(long = "sample-every", default_value_t = 100)]
    pub sample_every: usize,
    /// Spectral parameter of the recorded trace invariants.
    #[arg(long = "u-ref", default_value_t = 0.37, allow_hyphen_values = true)]
    pub u_ref: f64,
    /// Trajectory CSV; the summary goes to `<out>.summary.json` and stdout.
    #[arg(long, default_value = "trajectory.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum DumpObject {
    /// Classical r(v).
    #[value(name = "r")]
    #[serde(rename = "r")]
    SmallR,
    /// Quantum R(v, w).
    #[value(name = "R")]
    #[serde(rename = "R")]
    BigR,
    /// Lax matrix L(u) at (p, q).
    #[value(name = "L")]
    #[serde(rename = "L")]
    Lax,
    /// Twisted Lax matrix at (p, q).
    #[value(name = "Ltilde")]
    #[serde(rename = "Ltilde")]
    Ltilde,
    /// Intertwiner A(u; q).
    #[value(name = "A")]
    #[serde(rename = "A")]
    Intertwiner,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    pub object: DumpObject,
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    #[arg(long, default_value = "0+1i", allow_hyphen_values = true)]
    pub tau: String,
    /// Spectral parameter of r and R.
    #[arg(long, default_value = "0.3", allow_hyphen_values = true)]
    pub v: String,
    /// Quantum parameter of R.
    #[arg(long, default_value = "0.1", allow_hyphen_values = true)]
    pub w: String,
    /// Spectral parameter of L, Ltilde and A.
    #[arg(long, default_value = "0.37", allow_hyphen_values = true)]
    pub u: String,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub gamma: f64,
    /// Positions; equispaced when absent.
    #[arg(long, allow_hyphen_values = true)]
    pub q: Option<String>,
    /// Momenta; zero when absent.
    #[arg(long, allow_hyphen_values = true)]
    pub p: Option<String>,
    /// Output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    run(cli)
}

pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Verify(a) => run_verify_cmd(&a),
        Command::Simulate(a) => run_simulate_cmd(&a),
        Command::Dump(a) => run_dump_cmd(&a),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("laxlab: error: {e}");
        EXIT_INPUT
    })
}

fn io_err(path: &Path, e: std::io::Error) -> LaxError {
    LaxError::InvalidParameter(format!("{}: {e}", path.display()))
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| io_err(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(|e| io_err(Path::new("<stdout>"), e))
        }
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            let x = x.trim();
            x.parse::<f64>().map_err(|_| LaxError::InvalidParameter(format!("invalid number `{x}` in list")))
        })
        .collect()
}

/// Builds the configuration: defaults, then the config file, then flags.
pub fn verify_config(a: &VerifyArgs) -> Result<VerifyConfig> {
    let mut cfg = VerifyConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        cfg.apply_file_text(&text)?;
    }
    if !a.suite.is_empty() {
        cfg.suites = parse_suites(&a.suite.join(","))?;
    }
    if let Some(n) = &a.n {
        cfg.set("n", n)?;
    }
    if let Some(t) = &a.tau {
        cfg.tau = parse_complex(t)?;
    }
    if let Some(g) = a.gamma {
        cfg.gamma = g;
    }
    if let Some(s) = a.s {
        cfg.s = s;
    }
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    for t in &a.tol {
        let (id, v) = parse_tol_override(t)?;
        cfg.tol.insert(id, v);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_verify_cmd(a: &VerifyArgs) -> Result<i32> {
    let cfg = verify_config(a)?;
    let report = verify::run_verify(&cfg)?;
    write_text(a.out.as_deref(), &report.to_json())?;
    for c in report.checks.iter().filter(|c| !c.pass) {
        let n = c.params.get("n").map_or(String::new(), |n| format!(" n={n}"));
        let r = c.residual.map_or("error".to_string(), |r| format!("{r:.3e}"));
        eprintln!("FAIL {}{n}: residual {r} tol {:.1e} {}", c.check_id, c.tol, c.variant_notes);
    }
    eprintln!("{} passed, {} failed", report.summary.pass_count, report.summary.fail_count);
    Ok(if report.all_pass() { EXIT_OK } else { EXIT_FAIL })
}

/// Equispaced positions with a small offset on one particle, so the run is not
/// on a symmetric orbit.
pub fn default_q0(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 - (n as f64 - 1.0) / 2.0) / n as f64 + if i == n / 2 { 0.01 } else { 0.0 }).collect()
}

/// `p_i = 0.1 cos(2πi/n)`; the total momentum vanishes.
pub fn default_p0(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.1 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

#[derive(Debug, Serialize)]
struct SimulationReport<'a> {
    n: usize,
    gamma: f64,
    tau_im: f64,
    dt: f64,
    steps: usize,
    sample_every: usize,
    u_ref: f64,
    q0: &'a [f64],
    p0: &'a [f64],
    csv: String,
    summary: DriftSummary,
}

pub fn summary_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".summary.json");
    PathBuf::from(s)
}

fn run_simulate_cmd(a: &SimulateArgs) -> Result<i32> {
    if !(2..=6).contains(&a.n) {
        return Err(LaxError::InvalidParameter(format!("n = {} must lie in 2..=6", a.n)));
    }
    if a.steps == 0 {
        return Err(LaxError::InvalidParameter("steps must be at least 1".into()));
    }
    let q0 = a.q0.as_deref().map(parse_list).transpose()?.unwrap_or_else(|| default_q0(a.n));
    let p0 = a.p0.as_deref().map(parse_list).transpose()?.unwrap_or_else(|| default_p0(a.n));
    if q0.len() != a.n || p0.len() != a.n {
        return Err(LaxError::Dimension(format!("n = {} but {} positions and {} momenta", a.n, q0.len(), p0.len())));
    }
    let params = ModelParams::new(Complex64::new(0.0, a.tau_im), a.n, a.gamma)?;
    let x0 = PhasePoint::new(p0.clone(), q0.clone())?;
    let traj = integrate(&x0, a.dt, a.steps, &params, a.sample_every, a.u_ref)?;

    let mut csv = Vec::new();
    traj.write_csv(&mut csv).map_err(|e| io_err(&a.out, e))?;
    fs::write(&a.out, csv).map_err(|e| io_err(&a.out, e))?;

    let report = SimulationReport {
        n: a.n,
        gamma: a.gamma,
        tau_im: a.tau_im,
        dt: a.dt,
        steps: a.steps,
        sample_every: a.sample_every,
        u_ref: a.u_ref,
        q0: &q0,
        p0: &p0,
        csv: a.out.display().to_string(),
        summary: traj.summary(),
    };
    let mut json = serde_json::to_string_pretty(&report).expect("summary serialises");
    json.push('\n');
    let side = summary_path(&a.out);
    fs::write(&side, &json).map_err(|e| io_err(&side, e))?;
    write_text(None, &json)?;
    match &traj.abort {
        Some(reason) => {
            eprintln!("laxlab: simulation aborted, partial trajectory written: {reason}");
            Ok(EXIT_FAIL)
        }
        None => Ok(EXIT_OK),
    }
}

#[derive(Debug, Serialize)]
struct MatrixEntry {
    i: usize,
    j: usize,
    re: f64,
    im: f64,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum Entries {
    Tensor(Vec<TensorEntry>),
    Matrix(Vec<MatrixEntry>),
}

#[derive(Debug, Serialize)]
struct DumpOutput {
    object: DumpObject,
    kind: &'static str,
    n: usize,
    tau: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    v: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    w: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    u: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    q: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p: Option<Vec<f64>>,
    entries: Entries,
}

/// Every component `t^{lk}_{ij}`, zeros included, in `(l, k, i, j)` order.
pub fn tensor_entries(t: &RTensor) -> Vec<TensorEntry> {
    let n = t.n;
    let mut out = Vec::with_capacity(n.pow(4));
    for l in 0..n {
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let z = t.component(l, k, i, j);
                    out.push(TensorEntry { l, k, i, j, re: z.re, im: z.im });
                }
            }
        }
    }
    out
}

fn matrix_entries(m: &CMatrix) -> Vec<MatrixEntry> {
    let mut out = Vec::with_capacity(m.rows() * m.cols());
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out.push(MatrixEntry { i, j, re: m[(i, j)].re, im: m[(i, j)].im });
        }
    }
    out
}

fn dump_json(a: &DumpArgs) -> Result<String> {
    if !(2..=6).contains(&a.n) {
        return Err(LaxError::InvalidParameter(format!("n = {} must lie in 2..=6", a.n)));
    }
    let tau = parse_complex(&a.tau)?;
    let e = EllipticParams::new(tau, a.n)?;
    let mut out = DumpOutput {
        object: a.object,
        kind: "",
        n: a.n,
        tau: format_complex(tau),
        v: None,
        w: None,
        u: None,
        gamma: None,
        q: None,
        p: None,
        entries: Entries::Matrix(Vec::new()),
    };
    match a.object {
        DumpObject::SmallR | DumpObject::BigR => {
            let v = parse_complex(&a.v)?;
            out.v = Some(format_complex(v));
            let t = if a.object == DumpObject::SmallR {
                out.kind = "classical";
                classical_r(v, &e)?
            } else {
                let w = parse_complex(&a.w)?;
                out.w = Some(format_complex(w));
                out.kind = "quantum";
                belavin_r_quantum(v, w, &e)?
            };
            out.entries = Entries::Tensor(tensor_entries(&t));
        }
        DumpObject::Lax | DumpObject::Ltilde | DumpObject::Intertwiner => {
            let u = parse_complex(&a.u)?;
            let q = a.q.as_deref().map(parse_list).transpose()?.unwrap_or_else(|| default_q0(a.n));
            let p = a.p.as_deref().map(parse_list).transpose()?.unwrap_or_else(|| vec![0.0; a.n]);
            if q.len() != a.n || p.len() != a.n {
                return Err(LaxError::Dimension(format!(
                    "n = {} but {} positions and {} momenta",
                    a.n,
                    q.len(),
                    p.len()
                )));
            }
            let x = PhasePoint::new(p.clone(), q.clone())?;
            x.validate(e.lattice())?;
            out.u = Some(format_complex(u));
            out.q = Some(q);
            let m = match a.object {
                DumpObject::Intertwiner => {
                    out.kind = "intertwiner";
                    intertwiner_a(u, &x.q, &e)?
                }
                obj => {
                    let model = ModelParams::from_elliptic(e, a.gamma)?;
                    out.gamma = Some(a.gamma);
                    out.p = Some(p);
                    if obj == DumpObject::Lax {
                        out.kind = "lax";
                        KricheverL::new(u, &model).eval(&x)?
                    } else {
                        out.kind = "twisted_lax";
                        TwistedL::new(u, &model).eval(&x)?
                    }
                }
            };
            if !m.is_finite() {
                return Err(LaxError::Pole(format!("non-finite entries in {:?}", a.object)));
            }
            out.entries = Entries::Matrix(matrix_entries(&m));
        }
    }
    let mut s = serde_json::to_string_pretty(&out).expect("dump serialises");
    s.push('\n');
    Ok(s)
}

fn run_dump_cmd(a: &DumpArgs) -> Result<i32> {
    let json = dump_json(a)?;
    write_text(a.out.as_deref(), &json)?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_initial_data() {
        let q = default_q0(3);
        assert!((q[0] + 1.0 / 3.0).abs() < 1e-15 && (q[1] - 0.01).abs() < 1e-15);
        let p = default_p0(3);
        assert!(p.iter().sum::<f64>().abs() < 1e-15);
        assert_eq!(summary_path(Path::new("a/t.csv")), PathBuf::from("a/t.csv.summary.json"));
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        fs::write(&path, "seed = 9\ntrials = 3\nn = 2,3,4\n").unwrap();
        let cli =
            Cli::try_parse_from(["laxlab", "verify", "--config", path.to_str().unwrap(), "--trials", "2"]).unwrap();
        let Command::Verify(a) = cli.command else { panic!() };
        let cfg = verify_config(&a).unwrap();
        assert_eq!((cfg.seed, cfg.trials, cfg.n_list.clone()), (9, 2, vec![2, 3, 4]));
    }

    #[test]
    fn input_errors_exit_two() {
        assert_eq!(main_with_args(["laxlab", "verify", "--trials", "0"]), EXIT_INPUT);
        assert_eq!(main_with_args(["laxlab", "verify", "--n", "9"]), EXIT_INPUT);
        assert_eq!(main_with_args(["laxlab", "verify", "--tol", "nope=1"]), EXIT_INPUT);
        assert_eq!(main_with_args(["laxlab", "verify", "--tau", "0-1i"]), EXIT_INPUT);
        assert_eq!(main_with_args(["laxlab", "frobnicate"]), EXIT_INPUT);
        assert_eq!(main_with_args(["laxlab", "dump", "R", "--v", "0"]), EXIT_INPUT);
    }
}
