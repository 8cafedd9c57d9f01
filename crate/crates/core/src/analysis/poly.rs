//! Small dense real polynomials and the two independent minimum searches
//! used by the characteristic-polynomial criterion.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Real polynomial, coefficients in descending powers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    /// Leading zeros are stripped; the zero polynomial keeps one coefficient.
    pub fn new(coeffs: Vec<f64>) -> Self {
        let first = coeffs.iter().position(|&c| c != 0.0);
        let coeffs = match first {
            Some(i) => coeffs[i..].to_vec(),
            None => alloc::vec![0.0],
        };
        Self { coeffs }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Horner evaluation.
    pub fn eval(&self, z: f64) -> f64 {
        self.coeffs.iter().fold(0.0, |acc, &c| acc * z + c)
    }

    pub fn derivative(&self) -> Polynomial {
        let d = self.degree();
        if d == 0 {
            return Polynomial::new(alloc::vec![0.0]);
        }
        let coeffs = self.coeffs[..d]
            .iter()
            .enumerate()
            .map(|(i, &c)| c * (d - i) as f64)
            .collect();
        Polynomial::new(coeffs)
    }

    /// Real roots in the open interval `(lo, hi)`, ascending.
    ///
    /// Roots of the derivative split the interval into monotone pieces;
    /// each piece with a sign change holds exactly one root, found by
    /// bisection. Roots without a sign change (even multiplicity) are
    /// reported only when they coincide with a critical point.
    pub fn real_roots_in(&self, lo: f64, hi: f64) -> Vec<f64> {
        let d = self.degree();
        if d == 0 || lo >= hi {
            return Vec::new();
        }
        if d == 1 {
            let root = -self.coeffs[1] / self.coeffs[0];
            return if root > lo && root < hi {
                alloc::vec![root]
            } else {
                Vec::new()
            };
        }
        let mut breaks = alloc::vec![lo];
        breaks.extend(self.derivative().real_roots_in(lo, hi));
        breaks.push(hi);
        let mut roots = Vec::new();
        for w in breaks.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (fa, fb) = (self.eval(a), self.eval(b));
            if fb == 0.0 && b < hi {
                if roots.last() != Some(&b) {
                    roots.push(b);
                }
                continue;
            }
            if fa == 0.0 && a > lo {
                continue;
            }
            if fa.signum() != fb.signum() {
                roots.push(bisect(|z| self.eval(z), a, b));
            }
        }
        roots
    }
}

/// Bisection on a bracket with a sign change, run to floating-point
/// resolution.
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> f64 {
    let mut fa = f(a);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Golden-section search for a minimum of a unimodal function on `[a, b]`.
pub fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> f64 {
    let inv_phi = 0.5 * (libm::sqrt(5.0) - 1.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-15 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Number of interior grid points used by [`grid_minimum`].
pub const GRID_POINTS: usize = 4096;

/// Minimum of `p` over the open interval by a dense grid followed by
/// golden-section refinement on the best bracket. Returns `(z, p(z))`.
pub fn grid_minimum(p: &Polynomial, lo: f64, hi: f64) -> (f64, f64) {
    let step = (hi - lo) / (GRID_POINTS + 1) as f64;
    let point = |k: usize| lo + step * k as f64;
    let (mut best_k, mut best) = (1, p.eval(point(1)));
    for k in 2..=GRID_POINTS {
        let v = p.eval(point(k));
        if v < best {
            best = v;
            best_k = k;
        }
    }
    let z = golden_section(|z| p.eval(z), point(best_k - 1), point(best_k + 1));
    let v = p.eval(z);
    if v < best {
        (z, v)
    } else {
        (point(best_k), best)
    }
}

/// Minimum of `p` over the closed interval from its critical points (roots
/// of `p'` isolated by sign-change bisection) and the endpoints.
pub fn critical_minimum(p: &Polynomial, lo: f64, hi: f64) -> (f64, f64) {
    let mut best = (lo, p.eval(lo));
    for z in p.derivative().real_roots_in(lo, hi).into_iter().chain([hi]) {
        let v = p.eval(z);
        if v < best.1 {
            best = (z, v);
        }
    }
    best
}
