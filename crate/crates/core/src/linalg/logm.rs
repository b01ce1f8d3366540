use std::f64::consts::PI;

use super::{symmetric_eigen, DenseMatrix, LinalgError, SkewMatrix, SpecialOrthogonal};

/// Eigenvalues of (Q+Qᵀ)/2 closer than this share an invariant subspace.
const CLUSTER_TOL: f64 = 1e-8;
/// Rotation planes whose sines differ by less than this are treated as one angle.
const SINE_CLUSTER_TOL: f64 = 1e-10;
/// Below this the skew part carries no usable orientation information.
const SINE_NOISE: f64 = 1e-12;

/// Principal logarithm on SO(n).
///
/// Q is normal, so its symmetric part S = (Q+Qᵀ)/2 and skew part
/// K = (Q−Qᵀ)/2 commute. On every eigenspace of S with eigenvalue cos θ,
/// Q acts as cos θ·I + sin θ·J with J² = −I, and the logarithm there is θ·J.
/// θ is recovered from (cos θ, sin θ) with `atan2`, sin θ from the norm of K
/// restricted to the subspace. Planes at θ = π carry no orientation in K;
/// their eigenvectors are paired in the order the eigensolver returns them.
pub fn so_log(q: &SpecialOrthogonal) -> Result<SkewMatrix, LinalgError> {
    let m = q.matrix();
    let defect = m.orthogonality_defect();
    if defect > super::ORTHOGONALITY_TOL {
        return Err(LinalgError::NotOrthogonal { defect });
    }
    let det = super::determinant(m);
    if det < 0.0 {
        return Err(LinalgError::NegativeDeterminant { det });
    }

    let n = m.rows();
    let sym = m.symmetric_part();
    let skew = m.skew_part();
    let (vals, vecs) = symmetric_eigen(&sym)?;

    let mut log = DenseMatrix::zeros(n, n);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && vals[end] - vals[end - 1] <= CLUSTER_TOL {
            end += 1;
        }
        let basis = column_range(&vecs, start, end);
        let block = log_on_invariant_subspace(&basis, &sym, &skew)?;
        // log += V_c · block · V_cᵀ
        log.axpy(1.0, &basis.matmul(&block).matmul(&basis.transpose()));
        start = end;
    }
    Ok(SkewMatrix::new(&log)?)
}

/// Logarithm of Q restricted to the span of `basis` (which must be
/// Q-invariant), expressed in that basis.
fn log_on_invariant_subspace(
    basis: &DenseMatrix,
    sym: &DenseMatrix,
    skew: &DenseMatrix,
) -> Result<DenseMatrix, LinalgError> {
    let dim = basis.cols();
    let k_local = basis.tr_matmul(&skew.matmul(basis)).skew_part();
    let s_local = basis.tr_matmul(&sym.matmul(basis)).symmetric_part();
    let cos_mean = s_local.trace() / dim as f64;

    if dim == 1 {
        // Fixed direction (cos θ = 1); a lone −1 cannot occur in SO(n).
        return Ok(DenseMatrix::zeros(1, 1));
    }

    if k_local.frobenius_norm() <= SINE_NOISE {
        return Ok(degenerate_block(dim, cos_mean, &DenseMatrix::identity(dim)));
    }

    if dim == 2 {
        let sine = k_local.frobenius_norm() / 2f64.sqrt();
        let theta = sine.atan2(cos_mean);
        return Ok(k_local.scale(theta / sine));
    }

    // Several planes share (nearly) the same cosine. Separate them by sine:
    // −K² restricted to the subspace has eigenvalues sin²θ, once per dimension.
    let neg_k2 = k_local.tr_matmul(&k_local).symmetric_part();
    let (sq_sines, frames) = symmetric_eigen(&neg_k2)?;
    let sines: Vec<f64> = sq_sines.iter().map(|v| v.max(0.0).sqrt()).collect();

    let mut out = DenseMatrix::zeros(dim, dim);
    let mut start = 0;
    while start < dim {
        let mut end = start + 1;
        while end < dim && sines[end] - sines[end - 1] <= SINE_CLUSTER_TOL {
            end += 1;
        }
        let sub = column_range(&frames, start, end);
        let sub_dim = end - start;
        let k_sub = sub.tr_matmul(&k_local.matmul(&sub)).skew_part();
        let cos_sub = sub.tr_matmul(&s_local.matmul(&sub)).trace() / sub_dim as f64;
        let sine = k_sub.frobenius_norm() / (sub_dim as f64).sqrt();
        let block = if sine <= SINE_NOISE || sub_dim == 1 {
            degenerate_block(sub_dim, cos_sub, &DenseMatrix::identity(sub_dim))
        } else {
            let theta = sine.atan2(cos_sub);
            k_sub.scale(theta / sine)
        };
        out.axpy(1.0, &sub.matmul(&block).matmul(&sub.transpose()));
        start = end;
    }
    Ok(out)
}

/// Logarithm of ±I on a subspace: zero for +I; for −I, consecutive
/// basis vectors are paired into planes rotated by π.
fn degenerate_block(dim: usize, cos: f64, frame: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(dim, dim);
    if cos >= 0.0 {
        return out;
    }
    for pair in 0..dim / 2 {
        let (i, j) = (2 * pair, 2 * pair + 1);
        let vi = frame.column(i);
        let vj = frame.column(j);
        for r in 0..dim {
            for c in 0..dim {
                out[(r, c)] += PI * (vj[r] * vi[c] - vi[r] * vj[c]);
            }
        }
    }
    out
}

fn column_range(m: &DenseMatrix, start: usize, end: usize) -> DenseMatrix {
    DenseMatrix::from_fn(m.rows(), end - start, |r, c| m[(r, start + c)])
}
