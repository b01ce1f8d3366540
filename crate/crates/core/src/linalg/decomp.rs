use super::{DenseMatrix, LinalgError};

/// Relative tolerance on |R_ii| below which a QR input is treated as rank deficient.
pub const QR_RANK_TOL: f64 = 1e-10;

const JACOBI_REL_TOL: f64 = 1e-13;
const JACOBI_MAX_SWEEPS: usize = 50;

/// Householder QR of an `n × k` matrix with `k ≤ n`.
///
/// Returns the full `n × n` orthogonal factor and the `n × k` upper-triangular
/// factor. The diagonal of `R` is made non-negative by flipping the matching
/// column of `Q`, so the leading `k` columns of `Q` are uniquely determined by `X`.
pub fn qr_decompose(x: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix), LinalgError> {
    let (n, k) = x.shape();
    if k > n {
        return Err(LinalgError::SizeMismatch {
            expected: (n, n),
            found: (n, k),
        });
    }
    if !x.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let scale = x.frobenius_norm();
    let mut r = x.clone();
    let mut q = DenseMatrix::identity(n);
    let mut v = vec![0.0; n];

    for j in 0..k {
        let len = n - j;
        let norm = (j..n).map(|i| r[(i, j)] * r[(i, j)]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = r[(j, j)];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        for (t, i) in (j..n).enumerate() {
            v[t] = r[(i, j)];
        }
        v[0] -= alpha;
        let vnorm = v[..len].iter().map(|a| a * a).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        for a in &mut v[..len] {
            *a /= vnorm;
        }

        // R[j.., j..] ← (I − 2vvᵀ) R[j.., j..]
        for c in j..k {
            let dot: f64 = (0..len).map(|t| v[t] * r[(j + t, c)]).sum();
            for t in 0..len {
                r[(j + t, c)] -= 2.0 * dot * v[t];
            }
        }
        // Q[:, j..] ← Q[:, j..] (I − 2vvᵀ)
        for row in 0..n {
            let dot: f64 = (0..len).map(|t| q[(row, j + t)] * v[t]).sum();
            for t in 0..len {
                q[(row, j + t)] -= 2.0 * dot * v[t];
            }
        }
        for i in (j + 1)..n {
            r[(i, j)] = 0.0;
        }
    }

    for i in 0..k {
        if r[(i, i)] < 0.0 {
            for c in 0..k {
                r[(i, c)] = -r[(i, c)];
            }
            for row in 0..n {
                q[(row, i)] = -q[(row, i)];
            }
        }
    }

    for i in 0..k {
        if r[(i, i)].abs() <= QR_RANK_TOL * scale || scale == 0.0 {
            return Err(LinalgError::RankDeficient {
                index: i,
                value: r[(i, i)].abs(),
            });
        }
    }
    Ok((q, r))
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Eigenvalues are returned in ascending order; column `i` of the second
/// result is the eigenvector for eigenvalue `i`.
pub fn symmetric_eigen(s: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix), LinalgError> {
    let n = s.rows();
    if !s.is_square() {
        return Err(LinalgError::SizeMismatch {
            expected: (n, n),
            found: s.shape(),
        });
    }
    if !s.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let norm = s.frobenius_norm();
    let asym = s.sub(&s.transpose()).frobenius_norm();
    if asym > 1e-10 * norm {
        return Err(LinalgError::NotSymmetric { defect: asym });
    }

    let mut a = s.symmetric_part();
    let mut v = DenseMatrix::identity(n);
    let target = JACOBI_REL_TOL * norm;

    let off_norm = |a: &DenseMatrix| -> f64 {
        let mut acc = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                acc += 2.0 * a[(p, q)] * a[(p, q)];
            }
        }
        acc.sqrt()
    };

    let mut sweeps = 0;
    while off_norm(&a) > target {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence {
                sweeps,
                off_diagonal: off_norm(&a),
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // Stable rotation angle (Golub & Van Loan, symmetric Schur 2x2).
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;

                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}

/// LU factorization with partial pivoting, stored compactly.
pub(crate) struct Lu {
    lu: DenseMatrix,
    perm: Vec<usize>,
    parity: f64,
    singular: bool,
}

impl Lu {
    pub(crate) fn new(a: &DenseMatrix) -> Self {
        assert!(a.is_square());
        let n = a.rows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut parity = 1.0;
        let mut singular = false;
        for k in 0..n {
            let (pivot_row, pivot_abs) = (k..n)
                .map(|r| (r, lu[(r, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot_abs == 0.0 {
                singular = true;
                continue;
            }
            if pivot_row != k {
                for c in 0..n {
                    let tmp = lu[(k, c)];
                    lu[(k, c)] = lu[(pivot_row, c)];
                    lu[(pivot_row, c)] = tmp;
                }
                perm.swap(k, pivot_row);
                parity = -parity;
            }
            let pivot = lu[(k, k)];
            for r in (k + 1)..n {
                let factor = lu[(r, k)] / pivot;
                lu[(r, k)] = factor;
                if factor != 0.0 {
                    for c in (k + 1)..n {
                        let u = lu[(k, c)];
                        lu[(r, c)] -= factor * u;
                    }
                }
            }
        }
        Self {
            lu,
            perm,
            parity,
            singular,
        }
    }

    pub(crate) fn determinant(&self) -> f64 {
        if self.singular {
            return 0.0;
        }
        let n = self.lu.rows();
        (0..n).map(|i| self.lu[(i, i)]).product::<f64>() * self.parity
    }

    /// Solves `A X = B` column by column.
    pub(crate) fn solve(&self, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if self.singular {
            return Err(LinalgError::Singular);
        }
        let n = self.lu.rows();
        assert_eq!(b.rows(), n);
        let mut x = DenseMatrix::from_fn(n, b.cols(), |r, c| b[(self.perm[r], c)]);
        for c in 0..b.cols() {
            for r in 0..n {
                let mut acc = x[(r, c)];
                for k in 0..r {
                    acc -= self.lu[(r, k)] * x[(k, c)];
                }
                x[(r, c)] = acc;
            }
            for r in (0..n).rev() {
                let mut acc = x[(r, c)];
                for k in (r + 1)..n {
                    acc -= self.lu[(r, k)] * x[(k, c)];
                }
                x[(r, c)] = acc / self.lu[(r, r)];
            }
        }
        Ok(x)
    }
}

pub fn determinant(a: &DenseMatrix) -> f64 {
    Lu::new(a).determinant()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn qr_identity_and_unit_column() {
        let (q, r) = qr_decompose(&DenseMatrix::identity(2)).unwrap();
        assert_eq!(q, DenseMatrix::identity(2));
        assert_eq!(r, DenseMatrix::identity(2));

        let x = DenseMatrix::new(2, 1, vec![1.0, 0.0]).unwrap();
        let (q, r) = qr_decompose(&x).unwrap();
        assert_eq!(q, DenseMatrix::identity(2));
        assert_eq!(r, x);
    }

    #[test]
    fn qr_random_residuals() {
        let x = random_matrix(5, 3, 0);
        let (q, r) = qr_decompose(&x).unwrap();
        assert!(x.sub(&q.matmul(&r)).frobenius_norm() / x.frobenius_norm() < 1e-12);
        assert!(q.orthogonality_defect() < 1e-12);
        for c in 0..3 {
            assert!(r[(c, c)] >= 0.0);
            for row in (c + 1)..5 {
                assert_eq!(r[(row, c)], 0.0);
            }
        }
    }

    #[test]
    fn qr_rank_deficient() {
        let x = DenseMatrix::new(3, 2, vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0]).unwrap();
        assert!(matches!(
            qr_decompose(&x),
            Err(LinalgError::RankDeficient { index: 1, .. })
        ));
        assert!(qr_decompose(&DenseMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn eigen_small_cases() {
        let (vals, vecs) = symmetric_eigen(&DenseMatrix::from_diagonal(&[3.0, 1.0, 2.0])).unwrap();
        assert_eq!(vals, vec![1.0, 2.0, 3.0]);
        for c in 0..3 {
            let col = vecs.column(c);
            assert_eq!(col.iter().filter(|v| v.abs() == 1.0).count(), 1);
        }

        let s = DenseMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (vals, vecs) = symmetric_eigen(&s).unwrap();
        assert!((vals[0] + 1.0).abs() < 1e-15 && (vals[1] - 1.0).abs() < 1e-15);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = vecs.column(0);
        let v1 = vecs.column(1);
        assert!((v0[0].abs() - h).abs() < 1e-15 && (v0[0] + v0[1]).abs() < 1e-15);
        assert!((v1[0].abs() - h).abs() < 1e-15 && (v1[0] - v1[1]).abs() < 1e-15);
    }

    #[test]
    fn eigen_random_reconstruction() {
        let a = random_matrix(8, 8, 1);
        let s = a.symmetric_part();
        let (vals, v) = symmetric_eigen(&s).unwrap();
        let sv = s.matmul(&v);
        let vl = v.matmul(&DenseMatrix::from_diagonal(&vals));
        assert!(sv.sub(&vl).frobenius_norm() < 1e-10 * s.frobenius_norm());
        assert!(v.orthogonality_defect() < 1e-12);
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn eigen_rejects_asymmetric() {
        let s = DenseMatrix::new(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            symmetric_eigen(&s),
            Err(LinalgError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn lu_solve_and_det() {
        let a = random_matrix(6, 6, 9);
        let b = random_matrix(6, 2, 10);
        let lu = Lu::new(&a);
        let x = lu.solve(&b).unwrap();
        assert!(a.matmul(&x).sub(&b).frobenius_norm() < 1e-12);
        let rot = DenseMatrix::new(2, 2, vec![0.0, -1.0, 1.0, 0.0]).unwrap();
        assert!((determinant(&rot) - 1.0).abs() < 1e-15);
        assert_eq!(determinant(&DenseMatrix::zeros(3, 3)), 0.0);
    }
}
