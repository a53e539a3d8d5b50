//! Spectral norms.
//!
//! `‖A‖₂` is the square root of the top eigenvalue of the smaller of the two
//! Gram operators `AᵀA` and `AAᵀ`. Small Gram matrices are formed and solved
//! directly; larger ones go through Lanczos with full reorthogonalization.
//! Plain power iteration is kept as a cross-check: on wide random matrices
//! the relative gap at the top of the spectrum is tiny and power iteration
//! needs thousands of steps to reach `1e-8`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rng;

/// Relative accuracy of the top eigenvalue of the Gram operator.
pub const SPECTRAL_TOL: f64 = 1e-8;

pub const MAX_ITER: usize = 1000;

/// Gram operators up to this size are formed explicitly.
const DIRECT_LIMIT: usize = 160;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("spectral norm did not converge in {iterations} iterations (estimate {estimate})")]
    NotConverged { iterations: usize, estimate: f64 },
}

/// Batches up to this many columns use the streaming products below instead
/// of a packed gemm, whose packing of `A` dominates when `B` is narrow.
pub const NARROW: usize = 32;

/// Rows per block in the narrow kernels; a block of the narrow operand
/// stays in L1 while `A` streams past it.
const ROW_BLOCK: usize = 128;

fn mul_add_narrow(o: &mut [f64], a: &[f64], r: usize, n: usize, b: &DMatrix<f64>) {
    let m = b.ncols();
    for lo in (0..r).step_by(ROW_BLOCK) {
        let hi = (lo + ROW_BLOCK).min(r);
        let mut k = 0;
        // Four columns of A per pass over the output block.
        while k + 4 <= n {
            let seg = |c: usize| &a[c * r + lo..c * r + hi];
            let (a0, a1, a2, a3) = (seg(k), seg(k + 1), seg(k + 2), seg(k + 3));
            for j in 0..m {
                let (s0, s1, s2, s3) = (b[(k, j)], b[(k + 1, j)], b[(k + 2, j)], b[(k + 3, j)]);
                let oj = &mut o[j * r + lo..j * r + hi];
                for ((((o, x0), x1), x2), x3) in oj.iter_mut().zip(a0).zip(a1).zip(a2).zip(a3) {
                    *o += s0 * x0 + s1 * x1 + s2 * x2 + s3 * x3;
                }
            }
            k += 4;
        }
        for k in k..n {
            let ak = &a[k * r + lo..k * r + hi];
            for j in 0..m {
                let s = b[(k, j)];
                o[j * r + lo..j * r + hi].iter_mut().zip(ak).for_each(|(o, x)| *o += s * x);
            }
        }
    }
}

fn tr_mul_add_narrow(out: &mut DMatrix<f64>, a: &[f64], r: usize, n: usize, b: &DMatrix<f64>) {
    let m = b.ncols();
    let bs = b.as_slice();
    for lo in (0..r).step_by(ROW_BLOCK) {
        let hi = (lo + ROW_BLOCK).min(r);
        for k in 0..n {
            let ak = &a[k * r + lo..k * r + hi];
            for j in 0..m {
                let bj = &bs[j * r + lo..j * r + hi];
                // Eight independent partial sums.
                let mut acc = [0.0; 8];
                let (xc, yc) = (ak.chunks_exact(8), bj.chunks_exact(8));
                let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(x, y)| x * y).sum();
                for (xs, ys) in xc.zip(yc) {
                    for l in 0..8 {
                        acc[l] += xs[l] * ys[l];
                    }
                }
                out[(k, j)] += acc.iter().sum::<f64>() + tail;
            }
        }
    }
}

/// `out += A[:, off..off+n] · b`, reading each column of `A` once.
pub fn mul_add_cols(out: &mut DMatrix<f64>, a: &DMatrix<f64>, off: usize, n: usize, b: &DMatrix<f64>) {
    assert_eq!((out.nrows(), out.ncols()), (a.nrows(), b.ncols()));
    assert_eq!(b.nrows(), n);
    if b.ncols() > NARROW {
        out.gemm(1.0, &a.columns(off, n), b, 1.0);
        return;
    }
    let r = a.nrows();
    mul_add_narrow(out.as_mut_slice(), &a.as_slice()[off * r..(off + n) * r], r, n, b);
}

/// `out += A[:, off..off+n]ᵀ · b`, reading each column of `A` once.
pub fn tr_mul_add_cols(out: &mut DMatrix<f64>, a: &DMatrix<f64>, off: usize, n: usize, b: &DMatrix<f64>) {
    assert_eq!((out.nrows(), out.ncols()), (n, b.ncols()));
    assert_eq!(b.nrows(), a.nrows());
    if b.ncols() > NARROW {
        out.gemm(1.0, &a.columns(off, n).transpose(), b, 1.0);
        return;
    }
    let r = a.nrows();
    tr_mul_add_narrow(out, &a.as_slice()[off * r..(off + n) * r], r, n, b);
}

/// `‖A‖₂`.
pub fn spectral_norm(a: &DMatrix<f64>) -> Result<f64, LinalgError> {
    let nb = a.nrows().min(a.ncols());
    if nb == 0 || a.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    if nb <= DIRECT_LIMIT {
        let gram = if a.ncols() <= a.nrows() {
            a.tr_mul(a)
        } else {
            a * a.transpose()
        };
        let top = SymmetricEigen::new(gram)
            .eigenvalues
            .iter()
            .copied()
            .fold(0.0, f64::max);
        return Ok(top.max(0.0).sqrt());
    }
    lanczos_top(a, SPECTRAL_TOL, MAX_ITER).map(|l| l.max(0.0).sqrt())
}

fn gram_apply(a: &DMatrix<f64>, v: &DVector<f64>, tmp: &mut DVector<f64>, out: &mut DVector<f64>) {
    if a.ncols() <= a.nrows() {
        tmp.gemv(1.0, a, v, 0.0);
        out.gemv_tr(1.0, a, tmp, 0.0);
    } else {
        tmp.gemv_tr(1.0, a, v, 0.0);
        out.gemv(1.0, a, tmp, 0.0);
    }
}

/// Top eigenvalue of the smaller Gram operator of `a` by Lanczos.
///
/// Stops when the Ritz value is certified to relative accuracy `tol`, using
/// the residual bound or, once the top Ritz value is separated, the sharper
/// residual²/gap bound.
pub fn lanczos_top(a: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<f64, LinalgError> {
    let nb = a.nrows().min(a.ncols());
    let other = a.nrows().max(a.ncols());
    let mut g = rng::stream(0x5eed, nb as u64);
    let mut q = DVector::from_fn(nb, |_, _| g.sample::<f64, _>(StandardNormal));
    q /= q.norm();
    let mut basis: Vec<DVector<f64>> = vec![q];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut tmp = DVector::zeros(other);
    let mut w = DVector::zeros(nb);
    let mut estimate = 0.0;
    let limit = max_iter.min(nb);
    for j in 0..limit {
        gram_apply(a, &basis[j], &mut tmp, &mut w);
        let alpha = basis[j].dot(&w);
        alphas.push(alpha);
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&w);
                w.axpy(-c, q, 1.0);
            }
        }
        let beta = w.norm();

        let m = alphas.len();
        let mut t = DMatrix::zeros(m, m);
        for i in 0..m {
            t[(i, i)] = alphas[i];
            if i + 1 < m {
                t[(i, i + 1)] = betas[i];
                t[(i + 1, i)] = betas[i];
            }
        }
        let eig = SymmetricEigen::new(t);
        let (top_idx, top) = eig
            .eigenvalues
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        estimate = top;
        let residual = beta * eig.eigenvectors[(m - 1, top_idx)].abs();
        let gap = eig
            .eigenvalues
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != top_idx)
            .map(|(_, v)| top - v)
            .fold(f64::INFINITY, f64::min);
        // The gap bound is only trusted once the residual is already small,
        // since early Ritz values misjudge the gap.
        let err = if m > 1 && residual <= 1e-3 * top.abs() {
            residual.min(residual * residual / gap)
        } else {
            residual
        };
        if err <= tol * top.abs() || beta <= 1e-14 * top.abs() || m == nb {
            return Ok(top);
        }
        betas.push(beta);
        basis.push(w.clone() / beta);
    }
    Err(LinalgError::NotConverged {
        iterations: limit,
        estimate,
    })
}

/// `‖A‖₂` by power iteration on the Gram operator; converged when the
/// relative change of the eigenvalue estimate drops below `tol`.
pub fn power_iteration(a: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<f64, LinalgError> {
    let nb = a.nrows().min(a.ncols());
    if nb == 0 || a.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let other = a.nrows().max(a.ncols());
    let mut g = rng::stream(0x5eed, nb as u64);
    let mut v = DVector::from_fn(nb, |_, _| g.sample::<f64, _>(StandardNormal));
    v /= v.norm();
    let mut tmp = DVector::zeros(other);
    let mut w = DVector::zeros(nb);
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        gram_apply(a, &v, &mut tmp, &mut w);
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = &w / norm;
        if (next - lambda).abs() <= tol * next.abs() {
            return Ok(next.max(0.0).sqrt());
        }
        lambda = next;
    }
    Err(LinalgError::NotConverged {
        iterations: max_iter,
        estimate: lambda.max(0.0).sqrt(),
    })
}
