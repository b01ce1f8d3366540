use super::{symmetric_eigen, DenseMatrix, Lu, SkewMatrix, SpecialOrthogonal};

/// Coefficients of the [13/13] Padé approximant to exp (Higham 2005).
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Largest 1-norm for which the degree-13 approximant meets unit roundoff.
const THETA13: f64 = 5.371_920_351_148_152;

const REORTHONORMALIZE_ABOVE: f64 = 1e-12;

/// Matrix exponential of a skew matrix by scaling and squaring with the
/// degree-13 Padé approximant.
pub fn skew_exp(a: &SkewMatrix) -> SpecialOrthogonal {
    let n = a.n();
    let m = a.matrix();
    let norm = m.norm_1();
    if norm == 0.0 {
        return SpecialOrthogonal::identity(n);
    }

    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = m.scale(0.5f64.powi(squarings));

    let b = &PADE13;
    let ident = DenseMatrix::identity(n);
    let a2 = scaled.matmul(&scaled);
    let a4 = a2.matmul(&a2);
    let a6 = a4.matmul(&a2);

    let mut u_inner = a6.scale(b[13]);
    u_inner.axpy(b[11], &a4);
    u_inner.axpy(b[9], &a2);
    let mut u_outer = a6.matmul(&u_inner);
    u_outer.axpy(b[7], &a6);
    u_outer.axpy(b[5], &a4);
    u_outer.axpy(b[3], &a2);
    u_outer.axpy(b[1], &ident);
    let u = scaled.matmul(&u_outer);

    let mut v_inner = a6.scale(b[12]);
    v_inner.axpy(b[10], &a4);
    v_inner.axpy(b[8], &a2);
    let mut v = a6.matmul(&v_inner);
    v.axpy(b[6], &a6);
    v.axpy(b[4], &a4);
    v.axpy(b[2], &a2);
    v.axpy(b[0], &ident);

    // For skew input V − U is the transpose of V + U and is always invertible.
    let numer = v.add(&u);
    let denom = v.sub(&u);
    let mut r = Lu::new(&denom)
        .solve(&numer)
        .expect("Padé denominator of a skew matrix is nonsingular");

    for _ in 0..squarings {
        r = r.matmul(&r);
    }

    if r.orthogonality_defect() > REORTHONORMALIZE_ABOVE {
        r = polar_orthonormalize(&r);
    }
    SpecialOrthogonal::from_matrix_unchecked(r)
}

/// Nearest orthogonal matrix Q (QᵀQ)^{-1/2}.
fn polar_orthonormalize(q: &DenseMatrix) -> DenseMatrix {
    let gram = q.tr_matmul(q);
    let (vals, vecs) = symmetric_eigen(&gram).expect("Gram matrix is symmetric");
    let inv_sqrt: Vec<f64> = vals.iter().map(|l| 1.0 / l.max(f64::MIN_POSITIVE).sqrt()).collect();
    let scaled = DenseMatrix::from_fn(vecs.rows(), vecs.cols(), |r, c| vecs[(r, c)] * inv_sqrt[c]);
    q.matmul(&scaled.matmul(&vecs.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::determinant;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    /// Truncated Taylor series with Kahan-compensated accumulation.
    fn taylor_exp(a: &DenseMatrix, terms: usize) -> DenseMatrix {
        let n = a.rows();
        let mut sum = DenseMatrix::identity(n);
        let mut comp = DenseMatrix::zeros(n, n);
        let mut term = DenseMatrix::identity(n);
        for k in 1..terms {
            term = term.matmul(a).scale(1.0 / k as f64);
            for r in 0..n {
                for c in 0..n {
                    let y = term[(r, c)] - comp[(r, c)];
                    let t = sum[(r, c)] + y;
                    comp[(r, c)] = (t - sum[(r, c)]) - y;
                    sum[(r, c)] = t;
                }
            }
        }
        sum
    }

    fn random_skew(n: usize, rng: &mut ChaCha8Rng) -> SkewMatrix {
        let m = DenseMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        SkewMatrix::new(&m).unwrap()
    }

    #[test]
    fn zero_and_quarter_turn() {
        assert_eq!(skew_exp(&SkewMatrix::zeros(3)).matrix(), &DenseMatrix::identity(3));
        let a = SkewMatrix::new(
            &DenseMatrix::new(2, 2, vec![0.0, -FRAC_PI_2, FRAC_PI_2, 0.0]).unwrap(),
        )
        .unwrap();
        let expected = DenseMatrix::new(2, 2, vec![0.0, -1.0, 1.0, 0.0]).unwrap();
        assert!(skew_exp(&a).matrix().sub(&expected).frobenius_norm() < 1e-15);
    }

    #[test]
    fn matches_taylor_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_skew(6, &mut rng);
        let a = a.scale(1.0 / a.matrix().frobenius_norm());
        let pade = skew_exp(&a);
        let taylor = taylor_exp(a.matrix(), 60);
        assert!(pade.matrix().sub(&taylor).frobenius_norm() < 1e-12);
    }

    #[test]
    fn large_norm_stays_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [3, 5, 8] {
            let a = random_skew(n, &mut rng);
            let a = a.scale(50.0 / a.matrix().frobenius_norm());
            let q = skew_exp(&a);
            assert!(q.matrix().orthogonality_defect() < 1e-10);
            assert!((determinant(q.matrix()) - 1.0).abs() < 1e-10);
        }
    }
}
