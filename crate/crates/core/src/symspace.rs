//! Symmetric spaces G/K realized inside SO(N), the Cartan split 𝔰𝔬(N) = 𝔨 ⊕ 𝔭,
//! and the maps between 𝔭-coordinates, the group, and the manifold.
//!
//! Two spaces are supported:
//!
//! * `Sphere(n)` = SO(n+1)/SO(n) with basepoint the north pole e_{n+1}.
//!   𝔭 consists of matrices whose only nonzero entries are the last column
//!   `b` (first n rows) and the last row `−bᵀ`; coordinates are `b`.
//! * `Grassmann(k, n)` = SO(n)/(SO(k)×SO(n−k)) with basepoint span(e₁..e_k).
//!   𝔭 is `( 0 X ; −Xᵀ 0 )` with X a k×(n−k) block; coordinates are X
//!   read row-major.
//!
//! In both cases the Cartan involution negates the off-diagonal blocks.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    determinant, qr_decompose, skew_exp, so_log, DenseMatrix, LinalgError, SkewMatrix,
    SpecialOrthogonal,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid space: {0}")]
    InvalidSpace(String),
    #[error("size mismatch: expected {expected}, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("point is not on the manifold (defect {defect:e})")]
    NotOnManifold { defect: f64 },
    #[error("point is at the projection pole")]
    AtPole,
    #[error("operation requires a {0} space")]
    WrongSpace(&'static str),
}

/// Which symmetric space the 𝔭-coordinates refer to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpaceDescriptor {
    Sphere { n: usize },
    Grassmann { k: usize, n: usize },
}

impl SpaceDescriptor {
    pub fn sphere(n: usize) -> Result<Self, SpaceError> {
        let s = Self::Sphere { n };
        s.validate()?;
        Ok(s)
    }

    pub fn grassmann(k: usize, n: usize) -> Result<Self, SpaceError> {
        let s = Self::Grassmann { k, n };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        match *self {
            Self::Sphere { n } if n >= 1 => Ok(()),
            Self::Sphere { n } => Err(SpaceError::InvalidSpace(format!("Sphere({n}) needs n >= 1"))),
            Self::Grassmann { k, n } if k >= 1 && k < n => Ok(()),
            Self::Grassmann { k, n } => Err(SpaceError::InvalidSpace(format!(
                "Grassmann({k},{n}) needs 1 <= k < n"
            ))),
        }
    }

    /// Size N of the SO(N) that acts on the space.
    pub fn group_n(&self) -> usize {
        match *self {
            Self::Sphere { n } => n + 1,
            Self::Grassmann { n, .. } => n,
        }
    }

    /// dim 𝔰𝔬(N)
    pub fn group_dim(&self) -> usize {
        let n = self.group_n();
        n * (n - 1) / 2
    }

    /// dim 𝔭, equal to the manifold dimension.
    pub fn p_dim(&self) -> usize {
        match *self {
            Self::Sphere { n } => n,
            Self::Grassmann { k, n } => k * (n - k),
        }
    }

    /// Size of the leading diagonal block of the Cartan split.
    fn split(&self) -> usize {
        match *self {
            Self::Sphere { n } => n,
            Self::Grassmann { k, .. } => k,
        }
    }

    /// Human-readable description of the coordinate layout, stored in dataset manifests.
    pub fn layout(&self) -> String {
        match *self {
            Self::Sphere { n } => format!(
                "sphere S^{n} = SO({})/SO({n}); basepoint e_{}; coords b = A[0..{n}, {n}]",
                n + 1,
                n + 1
            ),
            Self::Grassmann { k, n } => format!(
                "grassmann Gr({k},{n}) = SO({n})/(SO({k})xSO({})); basepoint span(e_1..e_{k}); \
                 coords = upper-right {k}x{} block of A, row-major",
                n - k,
                n - k
            ),
        }
    }
}

impl std::fmt::Display for SpaceDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Sphere { n } => write!(f, "Sphere({n})"),
            Self::Grassmann { k, n } => write!(f, "Grassmann({k},{n})"),
        }
    }
}

/// Flat coordinates of an element of 𝔭.
#[derive(Clone, Debug, PartialEq)]
pub struct PCoord {
    space: SpaceDescriptor,
    coords: Vec<f64>,
}

impl PCoord {
    pub fn new(space: SpaceDescriptor, coords: Vec<f64>) -> Result<Self, SpaceError> {
        space.validate()?;
        if coords.len() != space.p_dim() {
            return Err(SpaceError::SizeMismatch {
                expected: space.p_dim(),
                found: coords.len(),
            });
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite.into());
        }
        Ok(Self { space, coords })
    }

    pub fn zeros(space: SpaceDescriptor) -> Self {
        Self {
            space,
            coords: vec![0.0; space.p_dim()],
        }
    }

    pub fn space(&self) -> SpaceDescriptor {
        self.space
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }
}

/// A point of the manifold.
#[derive(Clone, Debug, PartialEq)]
pub enum ManifoldPoint {
    /// Unit vector in ℝⁿ⁺¹.
    Sphere(Vec<f64>),
    /// n×k matrix with orthonormal columns; compare through [`ManifoldPoint::projector`].
    Grassmann(DenseMatrix),
}

impl ManifoldPoint {
    pub fn basepoint(space: SpaceDescriptor) -> Self {
        group_to_manifold(&SpecialOrthogonal::identity(space.group_n()), space)
            .expect("identity has the group size")
    }

    /// Canonical representative: the orthogonal projector onto the subspace.
    /// For sphere points this is the vector itself as an (n+1)×1 matrix.
    pub fn projector(&self) -> DenseMatrix {
        match self {
            Self::Sphere(x) => DenseMatrix::from_vec_unchecked(x.len(), 1, x.clone()),
            Self::Grassmann(frame) => frame.matmul(&frame.transpose()),
        }
    }

    /// Frobenius distance between canonical representatives.
    pub fn distance(&self, other: &Self) -> f64 {
        let a = self.projector();
        let b = other.projector();
        if a.shape() != b.shape() {
            return f64::INFINITY;
        }
        a.sub(&b).frobenius_norm()
    }

    /// Checks membership in `space` and returns the defect.
    pub fn check(&self, space: SpaceDescriptor) -> Result<(), SpaceError> {
        match (self, space) {
            (Self::Sphere(x), SpaceDescriptor::Sphere { n }) => {
                if x.len() != n + 1 {
                    return Err(SpaceError::SizeMismatch {
                        expected: n + 1,
                        found: x.len(),
                    });
                }
                let defect = (x.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs();
                if defect > 1e-10 || !defect.is_finite() {
                    return Err(SpaceError::NotOnManifold { defect });
                }
                Ok(())
            }
            (Self::Grassmann(f), SpaceDescriptor::Grassmann { k, n }) => {
                if f.shape() != (n, k) {
                    return Err(SpaceError::SizeMismatch {
                        expected: n * k,
                        found: f.rows() * f.cols(),
                    });
                }
                let defect = f.orthogonality_defect();
                if defect > 1e-10 || !defect.is_finite() {
                    return Err(SpaceError::NotOnManifold { defect });
                }
                Ok(())
            }
            (Self::Sphere(_), _) => Err(SpaceError::WrongSpace("sphere")),
            (Self::Grassmann(_), _) => Err(SpaceError::WrongSpace("Grassmann")),
        }
    }
}

fn check_group_size(a: &DenseMatrix, space: SpaceDescriptor) -> Result<(), SpaceError> {
    let n = space.group_n();
    if a.shape() != (n, n) {
        return Err(SpaceError::SizeMismatch {
            expected: n,
            found: a.rows(),
        });
    }
    Ok(())
}

/// Places 𝔭-coordinates into the off-diagonal blocks of a skew matrix.
pub fn p_embed(x: &PCoord) -> SkewMatrix {
    let space = x.space;
    let n = space.group_n();
    let split = space.split();
    let block_cols = n - split;
    let mut a = DenseMatrix::zeros(n, n);
    for (idx, v) in x.coords.iter().enumerate() {
        let r = idx / block_cols;
        let c = split + idx % block_cols;
        a[(r, c)] = *v;
        a[(c, r)] = -*v;
    }
    SkewMatrix::from_skew_unchecked(a)
}

/// Reads the 𝔭-block of a skew matrix, ignoring the 𝔨-blocks.
pub fn p_extract(a: &SkewMatrix, space: SpaceDescriptor) -> Result<PCoord, SpaceError> {
    space.validate()?;
    check_group_size(a.matrix(), space)?;
    let n = space.group_n();
    let split = space.split();
    let mut coords = Vec::with_capacity(space.p_dim());
    for r in 0..split {
        for c in split..n {
            coords.push(a.matrix()[(r, c)]);
        }
    }
    Ok(PCoord { space, coords })
}

/// Component of `a` in the −1 eigenspace of the Cartan involution.
pub fn cartan_project(a: &SkewMatrix, space: SpaceDescriptor) -> Result<SkewMatrix, SpaceError> {
    Ok(p_embed(&p_extract(a, space)?))
}

/// The Cartan involution θ = d_eσ: negates the off-diagonal blocks.
pub fn cartan_involution(a: &SkewMatrix, space: SpaceDescriptor) -> Result<SkewMatrix, SpaceError> {
    check_group_size(a.matrix(), space)?;
    let split = space.split();
    let m = a.matrix();
    let out = DenseMatrix::from_fn(m.rows(), m.cols(), |r, c| {
        if (r < split) == (c < split) {
            m[(r, c)]
        } else {
            -m[(r, c)]
        }
    });
    Ok(SkewMatrix::from_skew_unchecked(out))
}

/// The projection π: G → G/K, g ↦ g·p₀.
pub fn group_to_manifold(
    q: &SpecialOrthogonal,
    space: SpaceDescriptor,
) -> Result<ManifoldPoint, SpaceError> {
    check_group_size(q.matrix(), space)?;
    Ok(match space {
        SpaceDescriptor::Sphere { n } => ManifoldPoint::Sphere(q.matrix().column(n)),
        SpaceDescriptor::Grassmann { k, .. } => ManifoldPoint::Grassmann(q.matrix().leading_columns(k)),
    })
}

/// t ↦ π(exp(t·x)), the geodesic through the basepoint with initial velocity x.
pub fn geodesic(x: &PCoord, t: f64) -> ManifoldPoint {
    let g = skew_exp(&p_embed(x).scale(t));
    group_to_manifold(&g, x.space).expect("embedding has the group size")
}

/// Geodesic symmetry s_{p₀} at the basepoint, computed as π(σ(g)) for a
/// group element g with π(g) = `pt`.
pub fn geodesic_symmetry(pt: &ManifoldPoint, space: SpaceDescriptor) -> Result<ManifoldPoint, SpaceError> {
    pt.check(space)?;
    let frame = match pt {
        ManifoldPoint::Sphere(x) => DenseMatrix::from_vec_unchecked(x.len(), 1, x.clone()),
        ManifoldPoint::Grassmann(f) => f.clone(),
    };
    let g = complete_to_special_orthogonal(&frame, space)?;
    let split = space.split();
    let m = g.matrix();
    let reflected = DenseMatrix::from_fn(m.rows(), m.cols(), |r, c| {
        if (r < split) == (c < split) {
            m[(r, c)]
        } else {
            -m[(r, c)]
        }
    });
    group_to_manifold(&SpecialOrthogonal::from_matrix_unchecked(reflected), space)
}

/// Extends an orthonormal frame to an element g of SO(N) with π(g) equal to
/// the frame's point. Sphere points become the last column; Grassmann frames
/// the leading columns. The remaining columns come from Gram–Schmidt against
/// the standard basis, taken in index order and skipping near-dependent vectors.
fn complete_to_special_orthogonal(
    frame: &DenseMatrix,
    space: SpaceDescriptor,
) -> Result<SpecialOrthogonal, SpaceError> {
    let n = space.group_n();
    let fixed = frame.cols();
    let mut basis: Vec<Vec<f64>> = (0..fixed).map(|c| frame.column(c)).collect();
    for e in 0..n {
        if basis.len() == n {
            break;
        }
        let mut v = vec![0.0; n];
        v[e] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = b.iter().zip(&v).map(|(x, y)| x * y).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= dot * bi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    if basis.len() != n {
        return Err(SpaceError::NotOnManifold { defect: f64::NAN });
    }

    // Column order: Grassmann frame first; sphere point last.
    let order: Vec<usize> = match space {
        SpaceDescriptor::Grassmann { .. } => (0..n).collect(),
        SpaceDescriptor::Sphere { .. } => (1..n).chain(std::iter::once(0)).collect(),
    };
    let mut g = DenseMatrix::from_fn(n, n, |r, c| basis[order[c]][r]);
    if determinant(&g) < 0.0 {
        // Flip a completion column, never one that carries the point.
        let flip = match space {
            SpaceDescriptor::Grassmann { .. } => n - 1,
            SpaceDescriptor::Sphere { .. } => 0,
        };
        for r in 0..n {
            g[(r, flip)] = -g[(r, flip)];
        }
    }
    Ok(SpecialOrthogonal::from_matrix_unchecked(g))
}

/// Diagnostics of one run of the preprocessing pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessOutcome {
    pub coords: PCoord,
    /// Whether the last column of Q was negated to land in SO(n).
    pub sign_flipped: bool,
    /// ‖P(geodesic(coords, 1)) − P(span X)‖_F. Nonzero values measure what
    /// dropping the 𝔨-component of log Q does to the subspace.
    pub span_discrepancy: f64,
}

/// Maps an n×k data matrix to 𝔭-coordinates of Gr(k, n):
/// QR, sign fix into SO(n), principal logarithm, projection onto 𝔭.
pub fn preprocess_point(x: &DenseMatrix, space: SpaceDescriptor) -> Result<PCoord, SpaceError> {
    preprocess_point_with_diagnostics(x, space).map(|o| o.coords)
}

pub fn preprocess_point_with_diagnostics(
    x: &DenseMatrix,
    space: SpaceDescriptor,
) -> Result<PreprocessOutcome, SpaceError> {
    let SpaceDescriptor::Grassmann { k, n } = space else {
        return Err(SpaceError::WrongSpace("Grassmann"));
    };
    space.validate()?;
    if x.shape() != (n, k) {
        return Err(SpaceError::SizeMismatch {
            expected: n * k,
            found: x.rows() * x.cols(),
        });
    }
    let (mut q, _r) = qr_decompose(x)?;
    let sign_flipped = determinant(&q) < 0.0;
    if sign_flipped {
        for r in 0..n {
            q[(r, n - 1)] = -q[(r, n - 1)];
        }
    }
    let q = SpecialOrthogonal::new(q)?;
    let a = so_log(&q)?;
    let coords = p_extract(&a, space)?;

    let data_frame = q.matrix().leading_columns(k);
    let span_discrepancy = ManifoldPoint::Grassmann(data_frame).distance(&geodesic(&coords, 1.0));
    Ok(PreprocessOutcome {
        coords,
        sign_flipped,
        span_discrepancy,
    })
}

/// Samples the planar checkerboard: 4×4 cells of side 2 on [−4, 4]²,
/// uniform on the 8 cells whose integer indices (⌊x/2⌋ + ⌊y/2⌋) are even.
pub fn sample_checkerboard<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<[f64; 2]> {
    (0..count)
        .map(|_| {
            let x1: f64 = rng.gen::<f64>() * 4.0 - 2.0;
            let lower: f64 = rng.gen::<f64>() - 2.0 * f64::from(rng.gen_range(0u8..2));
            let x2 = lower + (x1.floor().rem_euclid(2.0));
            [2.0 * x1, 2.0 * x2]
        })
        .collect()
}

/// Whether a planar point lies in an occupied checkerboard cell.
pub fn checkerboard_cell_is_dark(p: [f64; 2]) -> bool {
    let i = (p[0] / 2.0).floor() as i64;
    let j = (p[1] / 2.0).floor() as i64;
    (i + j).rem_euclid(2) == 0
}

/// Scale mapping the farthest sample to radius π/2 in 𝔭.
pub fn default_checkerboard_scale(samples: &[[f64; 2]]) -> f64 {
    let max = samples
        .iter()
        .map(|p| p[0].hypot(p[1]))
        .fold(0.0, f64::max);
    if max == 0.0 {
        1.0
    } else {
        PI / (2.0 * max)
    }
}

/// Identifies ℝ² with 𝔭 of Sphere(2): coords = scale · sample.
pub fn wrap_checkerboard(samples: &[[f64; 2]], scale: f64) -> Vec<PCoord> {
    let space = SpaceDescriptor::Sphere { n: 2 };
    samples
        .iter()
        .map(|p| PCoord {
            space,
            coords: vec![scale * p[0], scale * p[1]],
        })
        .collect()
}

/// Stereographic projection of S² from the south pole: (x,y,z) ↦ (x,y)/(1+z).
pub fn stereographic_project(pt: &ManifoldPoint) -> Result<[f64; 2], SpaceError> {
    let ManifoldPoint::Sphere(v) = pt else {
        return Err(SpaceError::WrongSpace("sphere"));
    };
    if v.len() != 3 {
        return Err(SpaceError::SizeMismatch {
            expected: 3,
            found: v.len(),
        });
    }
    let denom = 1.0 + v[2];
    if denom.abs() < 1e-12 {
        return Err(SpaceError::AtPole);
    }
    Ok([v[0] / denom, v[1] / denom])
}

/// Inverse of [`stereographic_project`].
pub fn inverse_stereographic(p: [f64; 2]) -> ManifoldPoint {
    let r2 = p[0] * p[0] + p[1] * p[1];
    let d = 1.0 + r2;
    ManifoldPoint::Sphere(vec![2.0 * p[0] / d, 2.0 * p[1] / d, (1.0 - r2) / d])
}

/// Riemannian logarithm at the north pole of S², returned as 𝔭-coordinates.
/// Inverts `geodesic(·, 1)` on the open ball of radius π.
pub fn sphere_log_at_basepoint(pt: &ManifoldPoint) -> Result<PCoord, SpaceError> {
    let ManifoldPoint::Sphere(v) = pt else {
        return Err(SpaceError::WrongSpace("sphere"));
    };
    let n = v.len() - 1;
    let space = SpaceDescriptor::sphere(n)?;
    let tangent = &v[..n];
    let sin = tangent.iter().map(|x| x * x).sum::<f64>().sqrt();
    let angle = sin.atan2(v[n]);
    let coords = if sin == 0.0 {
        vec![0.0; n]
    } else {
        tangent.iter().map(|x| x * angle / sin).collect()
    };
    PCoord::new(space, coords)
}
