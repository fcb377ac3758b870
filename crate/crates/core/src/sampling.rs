//! Seeded sampling of phase points and spectral parameters.
//!
//! Every check draws from its own ChaCha8 stream: the generator is seeded with
//! the run seed and the stream number is the 64-bit FNV-1a hash of a label
//! (offset basis `0xcbf29ce484222325`, prime `0x100000001b3`). Streams are
//! therefore independent of execution order and thread count.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::elliptic::Lattice;
use crate::error::Result;
use crate::phasespace::PhasePoint;

pub const Q_RANGE: f64 = 0.45;
pub const MIN_SEPARATION: f64 = 0.05;
pub const SPECTRAL_RE: (f64, f64) = (0.1, 0.9);
pub const SPECTRAL_IM: (f64, f64) = (0.0, 0.2);

pub fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label));
    rng
}

/// `q` uniform in `[-0.45, 0.45]^n` with all gaps above 0.05, `p` uniform in `[-1, 1]^n`.
pub fn phase_point(n: usize, rng: &mut ChaCha8Rng) -> PhasePoint {
    let q = loop {
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-Q_RANGE..=Q_RANGE)).collect();
        let separated = (0..n).all(|i| (i + 1..n).all(|j| (q[i] - q[j]).abs() > MIN_SEPARATION));
        if separated {
            break q;
        }
    };
    let p = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    PhasePoint { p, q }
}

/// As [`phase_point`], additionally checked against the lattice pole guard.
pub fn valid_phase_point(n: usize, rng: &mut ChaCha8Rng, lattice: &Lattice) -> Result<PhasePoint> {
    let x = phase_point(n, rng);
    x.validate(lattice)?;
    Ok(x)
}

/// Uniform in `[0.1, 0.9] + i[0, 0.2]`.
pub fn spectral(rng: &mut ChaCha8Rng) -> Complex64 {
    Complex64::new(rng.gen_range(SPECTRAL_RE.0..=SPECTRAL_RE.1), rng.gen_range(SPECTRAL_IM.0..=SPECTRAL_IM.1))
}

/// `k` spectral parameters with pairwise distances above `min_gap`.
pub fn spectral_tuple(k: usize, min_gap: f64, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    loop {
        let us: Vec<Complex64> = (0..k).map(|_| spectral(rng)).collect();
        if (0..k).all(|i| (i + 1..k).all(|j| (us[i] - us[j]).norm() > min_gap)) {
            return us;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let a: Vec<u32> = (0..4).map(|_| stream(42, "eq32").gen()).collect();
        let b: Vec<u32> = (0..4).map(|_| stream(42, "eq32").gen()).collect();
        assert_eq!(a, b);
        let x: u64 = stream(42, "eq32").gen();
        let y: u64 = stream(42, "eq25").gen();
        assert_ne!(x, y);
        assert_eq!(fnv1a(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn samples_respect_domains() {
        let mut rng = stream(7, "domains");
        for _ in 0..200 {
            let x = phase_point(4, &mut rng);
            for i in 0..4 {
                assert!(x.q[i].abs() <= Q_RANGE && x.p[i].abs() <= 1.0);
                for j in i + 1..4 {
                    assert!((x.q[i] - x.q[j]).abs() > MIN_SEPARATION);
                }
            }
            let us = spectral_tuple(3, 0.05, &mut rng);
            assert!(us.iter().all(|u| (0.1..=0.9).contains(&u.re) && (0.0..=0.2).contains(&u.im)));
        }
    }
}
