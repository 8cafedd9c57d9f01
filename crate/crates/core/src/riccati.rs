//! Coupled Riccati-like equations for Markov jump linear systems, solved by
//! value iteration on the fixed-point map `M_i = T_i(M)`.

use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::models::MjlsSpec;
use crate::{Error, Result};

/// Singular values below `PINV_RTOL · σ_max` are treated as zero.
pub const PINV_RTOL: f64 = 1e-10;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Iterates whose ∞-norm exceeds this are taken as divergence.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Window over which monotone norm growth certifies divergence at `max_iter`.
pub const GROWTH_WINDOW: usize = 100;

/// Moore-Penrose pseudoinverse by SVD.
pub fn pseudoinverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    if rows < cols {
        return pseudoinverse(&a.transpose()).transpose();
    }
    let (w, v) = jacobi_svd(a);
    let norms: Vec<f64> = w.column_iter().map(|c| c.norm()).collect();
    let sigma_max = norms.iter().copied().fold(0.0, f64::max);
    let mut out = DMatrix::zeros(cols, rows);
    if !(sigma_max > 0.0) {
        return out;
    }
    let cutoff = PINV_RTOL * sigma_max;
    for (k, &s) in norms.iter().enumerate() {
        if s > cutoff {
            // column k of w is σ_k u_k, so v_k u_k' / σ_k = v_k w_k' / σ_k²
            out += (v.column(k) / (s * s)) * w.column(k).transpose();
        }
    }
    out
}

/// One-sided Jacobi SVD of a tall matrix: returns `(A V, V)` with the
/// columns of `A V` mutually orthogonal.
///
/// nalgebra's Golub-Kahan SVD loses accuracy on some inputs with tiny
/// entries; the Jacobi sweep is slower but accurate to working precision.
fn jacobi_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.ncols();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    (w, v)
}

fn rotate(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for r in 0..m.nrows() {
        let (x, y) = (m[(r, p)], m[(r, q)]);
        m[(r, p)] = c * x - s * y;
        m[(r, q)] = s * x + c * y;
    }
}

/// ∞-norm (largest absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn symmetrize(x: DMatrix<f64>) -> DMatrix<f64> {
    let t = x.transpose();
    (x + t) * 0.5
}

/// The three weighted sums `Σ A'pMA`, `Σ B'pMA`, `Σ B'pMB` for mode `i`.
fn weighted_sums(
    ms: &[DMatrix<f64>],
    spec: &MjlsSpec,
    i: usize,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (spec.state_dim(), spec.input_dim());
    let mut aa = DMatrix::zeros(n, n);
    let mut ba = DMatrix::zeros(m, n);
    let mut bb = DMatrix::zeros(m, m);
    for (j, mj) in ms.iter().enumerate() {
        let p = spec.chain().prob(i, j);
        if p == 0.0 {
            continue;
        }
        let (aj, bj) = (spec.a(j), spec.b(j));
        let pm = mj * p;
        let pma = &pm * aj;
        aa += aj.transpose() * &pma;
        ba += bj.transpose() * &pma;
        bb += bj.transpose() * &pm * bj;
    }
    (aa, ba, bb)
}

fn check_shapes(ms: &[DMatrix<f64>], spec: &MjlsSpec) -> Result<()> {
    let n = spec.state_dim();
    if ms.len() != spec.modes() || ms.iter().any(|m| m.shape() != (n, n)) {
        return Err(Error::Config(alloc::format!(
            "expected {} matrices of shape ({n}, {n})",
            spec.modes()
        )));
    }
    Ok(())
}

/// `T_i(M) = Σ A'pMA − (Σ A'pMB)(Σ B'pMB)^+(Σ B'pMA) + I`, symmetrized.
pub fn riccati_rhs(ms: &[DMatrix<f64>], spec: &MjlsSpec, i: usize) -> Result<DMatrix<f64>> {
    check_shapes(ms, spec)?;
    if i >= spec.modes() {
        return Err(Error::Config(alloc::format!("mode {i} out of range")));
    }
    Ok(rhs_unchecked(ms, spec, i))
}

fn rhs_unchecked(ms: &[DMatrix<f64>], spec: &MjlsSpec, i: usize) -> DMatrix<f64> {
    let (aa, ba, bb) = weighted_sums(ms, spec, i);
    let n = spec.state_dim();
    let correction = ba.transpose() * pseudoinverse(&bb) * &ba;
    symmetrize(aa - correction + DMatrix::identity(n, n))
}

/// One application of the map to every mode.
pub fn riccati_step(ms: &[DMatrix<f64>], spec: &MjlsSpec) -> Result<Vec<DMatrix<f64>>> {
    check_shapes(ms, spec)?;
    Ok((0..spec.modes()).map(|i| rhs_unchecked(ms, spec, i)).collect())
}

/// `K_i = (Σ B'pMB)^+ (Σ B'pMA)`; the feedback is `u = −K x`.
///
/// `K_i` averages over the successor modes of `i`, so it is the gain to use
/// when the mode at the previous step was `i`.
pub fn gains(ms: &[DMatrix<f64>], spec: &MjlsSpec) -> Result<Vec<DMatrix<f64>>> {
    check_shapes(ms, spec)?;
    Ok((0..spec.modes())
        .map(|i| {
            let (_, ba, bb) = weighted_sums(ms, spec, i);
            pseudoinverse(&bb) * ba
        })
        .collect())
}

/// `max_i ‖T_i(M) − M_i‖_∞`.
pub fn riccati_residual(ms: &[DMatrix<f64>], spec: &MjlsSpec) -> Result<f64> {
    let next = riccati_step(ms, spec)?;
    Ok(next
        .iter()
        .zip(ms)
        .map(|(t, m)| inf_norm(&(t - m)))
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiSolution {
    pub m: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub iterations: usize,
    pub residual: f64,
}

impl RiccatiSolution {
    /// Smallest eigenvalue over all `M_i`.
    pub fn min_eigenvalue(&self) -> f64 {
        self.m
            .iter()
            .map(min_eigenvalue)
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, PartialEq)]
pub enum RiccatiOutcome {
    Solved(RiccatiSolution),
    /// The iterates diverged: `norm` is the largest ∞-norm reached.
    NoSolution { iterations: usize, norm: f64 },
    /// Neither converged nor clearly diverging after `iterations` steps.
    Indeterminate { iterations: usize, last_delta: f64 },
}

impl RiccatiOutcome {
    pub fn solution(&self) -> Option<&RiccatiSolution> {
        match self {
            RiccatiOutcome::Solved(s) => Some(s),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            RiccatiOutcome::Solved(_) => "solved",
            RiccatiOutcome::NoSolution { .. } => "no-solution",
            RiccatiOutcome::Indeterminate { .. } => "indeterminate",
        }
    }
}

/// Value iteration from `M_i = I`.
pub fn solve_coupled_riccati(spec: &MjlsSpec, tol: f64, max_iter: usize) -> Result<RiccatiOutcome> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::Domain(alloc::format!(
            "need tol > 0 and max_iter >= 1, got {tol} and {max_iter}"
        )));
    }
    let n = spec.state_dim();
    let mut ms: Vec<DMatrix<f64>> = (0..spec.modes()).map(|_| DMatrix::identity(n, n)).collect();
    // norms of the last GROWTH_WINDOW + 1 iterates
    let mut norms: Vec<f64> = Vec::with_capacity(GROWTH_WINDOW + 1);
    let mut last_delta = f64::INFINITY;
    for k in 1..=max_iter {
        let next = riccati_step(&ms, spec)?;
        let delta = next
            .iter()
            .zip(&ms)
            .map(|(a, b)| inf_norm(&(a - b)))
            .fold(0.0, f64::max);
        let norm = next.iter().map(inf_norm).fold(0.0, f64::max);
        ms = next;
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Ok(RiccatiOutcome::NoSolution { iterations: k, norm });
        }
        if delta < tol {
            let gains = gains(&ms, spec)?;
            let residual = riccati_residual(&ms, spec)?;
            return Ok(RiccatiOutcome::Solved(RiccatiSolution {
                m: ms,
                gains,
                iterations: k,
                residual,
            }));
        }
        last_delta = delta;
        if norms.len() == GROWTH_WINDOW + 1 {
            norms.remove(0);
        }
        norms.push(norm);
    }
    let growing = norms.len() == GROWTH_WINDOW + 1 && norms.windows(2).all(|w| w[1] > w[0]);
    if growing {
        let norm = norms.last().copied().unwrap_or(0.0);
        Ok(RiccatiOutcome::NoSolution { iterations: max_iter, norm })
    } else {
        Ok(RiccatiOutcome::Indeterminate { iterations: max_iter, last_delta })
    }
}
