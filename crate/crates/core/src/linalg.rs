//! Small dense linear-algebra helpers: symmetric eigenvalues, rank with a
//! relative tolerance, and orthogonal-complement construction.
//!
//! Everything here targets tiny matrices (state dimensions in the tens), so
//! plain Jacobi sweeps and modified Gram-Schmidt are both adequate and easy
//! to audit.

use ndarray::{Array1, Array2, ArrayView1};

/// Eigenvalues of a symmetric matrix via cyclic Jacobi sweeps, ascending.
///
/// Panics if `a` is not square. Symmetry is assumed, not checked; callers
/// pass Householder-type matrices which are symmetric by construction.
pub fn symmetric_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "symmetric_eigenvalues: matrix must be square");
    let mut m = a.clone();
    // Off-diagonal Frobenius norm drives convergence.
    let off = |m: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in 0..n {
                if p != q {
                    s += m[[p, q]] * m[[p, q]];
                }
            }
        }
        s.sqrt()
    };
    let scale: f64 = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-300);
    for _sweep in 0..100 {
        if off(&m) <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Apply the rotation on the left and the right.
                for r in 0..n {
                    let mrp = m[[r, p]];
                    let mrq = m[[r, q]];
                    m[[r, p]] = c * mrp - s * mrq;
                    m[[r, q]] = s * mrp + c * mrq;
                }
                for r in 0..n {
                    let mpr = m[[p, r]];
                    let mqr = m[[q, r]];
                    m[[p, r]] = c * mpr - s * mqr;
                    m[[q, r]] = s * mpr + c * mqr;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|r| m[[r, r]]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eig
}

/// Orthonormal basis of the span of `vectors` by modified Gram-Schmidt.
///
/// A vector contributes a new direction when its residual norm exceeds
/// `rel_tol` times the largest input norm (rank decisions are relative, so
/// uniformly rescaling the input does not change the result).
pub fn orthonormal_basis(vectors: &[ArrayView1<f64>], rel_tol: f64) -> Vec<Array1<f64>> {
    let max_norm = vectors
        .iter()
        .map(|v| v.dot(v).sqrt())
        .fold(0.0f64, f64::max);
    let mut basis: Vec<Array1<f64>> = Vec::new();
    if max_norm == 0.0 {
        return basis;
    }
    let threshold = rel_tol * max_norm;
    for v in vectors {
        let mut r = v.to_owned();
        for b in &basis {
            let c = b.dot(&r);
            r.scaled_add(-c, b);
        }
        // Re-orthogonalize once; classical fix for cancellation.
        for b in &basis {
            let c = b.dot(&r);
            r.scaled_add(-c, b);
        }
        let norm = r.dot(&r).sqrt();
        if norm > threshold {
            basis.push(r / norm);
        }
    }
    basis
}

/// Numerical rank of the set of vectors, relative tolerance as in
/// [`orthonormal_basis`].
pub fn rank(vectors: &[ArrayView1<f64>], rel_tol: f64) -> usize {
    orthonormal_basis(vectors, rel_tol).len()
}

/// Rank by Gaussian elimination with partial pivoting on the stacked matrix.
///
/// Independent of the Gram-Schmidt route; used as the cross-check oracle for
/// rank decisions.
pub fn rank_by_elimination(vectors: &[ArrayView1<f64>], rel_tol: f64) -> usize {
    if vectors.is_empty() {
        return 0;
    }
    let rows = vectors.len();
    let cols = vectors[0].len();
    let mut m = Array2::<f64>::zeros((rows, cols));
    for (r, v) in vectors.iter().enumerate() {
        m.row_mut(r).assign(v);
    }
    let scale: f64 = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let tol = rel_tol * scale;
    let mut rank = 0;
    let mut row = 0;
    for col in 0..cols {
        // Find pivot.
        let mut pivot = row;
        for r in row..rows {
            if m[[r, col]].abs() > m[[pivot, col]].abs() {
                pivot = r;
            }
        }
        if m[[pivot, col]].abs() <= tol {
            continue;
        }
        if pivot != row {
            for c in 0..cols {
                m.swap([row, c], [pivot, c]);
            }
        }
        for r in (row + 1)..rows {
            let f = m[[r, col]] / m[[row, col]];
            for c in col..cols {
                m[[r, c]] -= f * m[[row, c]];
            }
        }
        rank += 1;
        row += 1;
        if row == rows {
            break;
        }
    }
    rank
}

/// A unit vector orthogonal to every basis vector, or `None` if the basis
/// already spans the full space. Tries the coordinate directions and keeps
/// the one with the largest residual, which makes the choice deterministic.
pub fn orthogonal_complement_direction(basis: &[Array1<f64>], dim: usize) -> Option<Array1<f64>> {
    if basis.len() >= dim {
        return None;
    }
    let mut best: Option<(f64, Array1<f64>)> = None;
    for r in 0..dim {
        let mut v = Array1::<f64>::zeros(dim);
        v[r] = 1.0;
        for b in basis {
            let c = b.dot(&v);
            v.scaled_add(-c, b);
        }
        for b in basis {
            let c = b.dot(&v);
            v.scaled_add(-c, b);
        }
        let norm = v.dot(&v).sqrt();
        if best.as_ref().map_or(true, |(n, _)| norm > *n) {
            best = Some((norm, v));
        }
    }
    best.and_then(|(norm, v)| if norm > 0.0 { Some(v / norm) } else { None })
}
