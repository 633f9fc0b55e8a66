use nalgebra::{Matrix3, Vector2, Vector3, SVD};

use super::{
    CameraModel, Correspondence, GeometryError, Result, MIN_BASELINE, SAMPSON_DENOMINATOR_FLOOR,
};

/// Cross-product matrix: `skew(t) * v == t × v`.
pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

fn sorted_singular_values(m: &Matrix3<f64>) -> [f64; 3] {
    let svd = SVD::new(*m, false, false);
    let s = svd.singular_values;
    [s[0], s[1], s[2]]
}

/// Unit Frobenius norm, sign fixed so the largest-magnitude entry (first in
/// row-major order on ties) is positive.
fn canonicalize(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let norm = m.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(GeometryError::ZeroMatrix);
    }
    let mut pivot = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            if m[(i, j)].abs() > pivot.abs() {
                pivot = m[(i, j)];
            }
        }
    }
    let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
    Ok(m * (sign / norm))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix {
    e: Matrix3<f64>,
}

impl EssentialMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.e
    }

    pub fn singular_values(&self) -> [f64; 3] {
        sorted_singular_values(&self.e)
    }
}

/// `E = [t]ₓ R` for the relative pose taking view-1 camera coordinates to
/// view-2 camera coordinates.
pub fn compose_essential(r: &Matrix3<f64>, t: &Vector3<f64>) -> Result<EssentialMatrix> {
    let baseline = t.norm();
    if baseline < MIN_BASELINE {
        return Err(GeometryError::DegeneratePose { baseline });
    }
    Ok(EssentialMatrix { e: skew(t) * r })
}

/// A 3×3 fundamental matrix in canonical scale together with its singular
/// values (descending).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix {
    f: Matrix3<f64>,
    singular_values: [f64; 3],
}

impl FundamentalMatrix {
    /// Canonicalizes an arbitrary nonzero matrix. No rank constraint is
    /// imposed.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        let f = canonicalize(m)?;
        Ok(Self {
            f,
            singular_values: sorted_singular_values(&f),
        })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.f
    }

    pub fn singular_values(&self) -> [f64; 3] {
        self.singular_values
    }

    /// The matrix relating view 2 to view 1.
    pub fn transpose(&self) -> Self {
        Self {
            f: self.f.transpose(),
            singular_values: self.singular_values,
        }
    }

    /// Frobenius distance to `other`, minimized over the sign ambiguity.
    /// Both matrices have unit norm, so this is a relative distance.
    pub fn distance(&self, other: &FundamentalMatrix) -> f64 {
        (self.f - other.f).norm().min((self.f + other.f).norm())
    }

    /// Right and left null vectors `(e1, e2)` with `F e1 = 0`, `Fᵀ e2 = 0`,
    /// each normalized to unit length.
    pub fn epipoles(&self) -> (Vector3<f64>, Vector3<f64>) {
        let svd = SVD::new(self.f, true, true);
        let u = svd.u.expect("requested U");
        let v_t = svd.v_t.expect("requested Vᵀ");
        (v_t.row(2).transpose(), u.column(2).into_owned())
    }

    pub fn algebraic_error(&self, c: &Correspondence) -> f64 {
        algebraic_error_raw(&self.f, c)
    }

    pub fn sampson_error(&self, c: &Correspondence) -> Result<f64> {
        sampson_error_raw(&self.f, c)
    }

    pub fn root_sampson_error(&self, c: &Correspondence) -> Result<f64> {
        self.sampson_error(c).map(f64::sqrt)
    }
}

/// Pose `(R, t)` of camera 2 relative to camera 1: `R = R2 R1ᵀ`,
/// `t = t2 − R t1`.
pub fn relative_pose(cam1: &CameraModel, cam2: &CameraModel) -> (Matrix3<f64>, Vector3<f64>) {
    let r = cam2.rotation() * cam1.rotation().transpose();
    let t = cam2.translation() - r * cam1.translation();
    (r, t)
}

/// Fundamental matrix between two cameras: `F = K2⁻ᵀ [t]ₓ R K1⁻¹` with
/// `(R, t)` the pose of camera 2 relative to camera 1.
pub fn compose_fundamental(cam1: &CameraModel, cam2: &CameraModel) -> Result<FundamentalMatrix> {
    let (r, t) = relative_pose(cam1, cam2);
    let e = compose_essential(&r, &t)?;
    let k1_inv = cam1
        .intrinsics()
        .try_inverse()
        .ok_or_else(|| GeometryError::InvalidCamera("singular K".into()))?;
    let k2_inv = cam2
        .intrinsics()
        .try_inverse()
        .ok_or_else(|| GeometryError::InvalidCamera("singular K".into()))?;
    FundamentalMatrix::from_matrix(&(k2_inv.transpose() * e.matrix() * k1_inv))
}

/// Closest rank-2 matrix in Frobenius norm, before canonical scaling.
pub(crate) fn rank2_approximation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let s = svd.singular_values;
    u * Matrix3::from_diagonal(&Vector3::new(s[0], s[1], 0.0)) * v_t
}

/// `U diag(σ1, σ2, 0) Vᵀ` in canonical scale.
pub fn rank2_project(m: &Matrix3<f64>) -> Result<FundamentalMatrix> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    if m.norm() == 0.0 {
        return Err(GeometryError::ZeroMatrix);
    }
    FundamentalMatrix::from_matrix(&rank2_approximation(m))
}

/// `x2ᵀ F x1` for an arbitrary (unnormalized) matrix.
pub fn algebraic_error_raw(f: &Matrix3<f64>, c: &Correspondence) -> f64 {
    c.x2.dot(&(f * c.x1))
}

pub fn algebraic_error(f: &FundamentalMatrix, c: &Correspondence) -> f64 {
    f.algebraic_error(c)
}

/// Intermediate quantities of the Sampson error, shared with gradient code.
#[derive(Debug, Clone, Copy)]
pub struct SampsonTerms {
    /// Algebraic residual `x2ᵀ F x1`.
    pub residual: f64,
    /// `(F x1)` restricted to its first two components.
    pub line2: Vector2<f64>,
    /// `(Fᵀ x2)` restricted to its first two components.
    pub line1: Vector2<f64>,
    pub denominator: f64,
}

impl SampsonTerms {
    pub fn new(f: &Matrix3<f64>, c: &Correspondence) -> Self {
        let fx1 = f * c.x1;
        let ftx2 = f.transpose() * c.x2;
        let line2 = fx1.xy();
        let line1 = ftx2.xy();
        Self {
            residual: c.x2.dot(&fx1),
            line2,
            line1,
            denominator: line2.norm_squared() + line1.norm_squared(),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.denominator >= SAMPSON_DENOMINATOR_FLOOR)
    }

    pub fn value(&self) -> Result<f64> {
        if self.is_degenerate() {
            return Err(GeometryError::DegenerateDenominator {
                denominator: self.denominator,
            });
        }
        Ok(self.residual * self.residual / self.denominator)
    }
}

/// Squared Sampson distance (px²) for an arbitrary matrix; invariant to the
/// scale of `f`.
pub fn sampson_error_raw(f: &Matrix3<f64>, c: &Correspondence) -> Result<f64> {
    SampsonTerms::new(f, c).value()
}

pub fn sampson_error(f: &FundamentalMatrix, c: &Correspondence) -> Result<f64> {
    f.sampson_error(c)
}

/// Square root of the Sampson distance, in pixels.
pub fn root_sampson_error(f: &FundamentalMatrix, c: &Correspondence) -> Result<f64> {
    f.root_sampson_error(c)
}

/// A line `a x + b y + c = 0` in the pixel frame of one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    l: Vector3<f64>,
}

impl EpipolarLine {
    pub fn new(l: Vector3<f64>) -> Result<Self> {
        if l == Vector3::zeros() {
            return Err(GeometryError::ZeroMatrix);
        }
        Ok(Self { l })
    }

    pub fn coefficients(&self) -> &Vector3<f64> {
        &self.l
    }

    /// Perpendicular pixel distance from `p` to the line.
    pub fn distance(&self, p: &Vector2<f64>) -> f64 {
        (self.l.x * p.x + self.l.y * p.y + self.l.z).abs() / self.l.xy().norm()
    }

    /// `|dy/dx|`, zero for horizontal lines.
    pub fn slope(&self) -> f64 {
        (self.l.x / self.l.y).abs()
    }

    /// Intersection point, `None` for parallel lines.
    pub fn intersect(&self, other: &EpipolarLine) -> Option<Vector2<f64>> {
        let p = self.l.cross(&other.l);
        if p.z == 0.0 {
            return None;
        }
        Some(Vector2::new(p.x / p.z, p.y / p.z))
    }
}

/// `ℓ2 = F x1`, the line in view 2 on which the match of `x1` lies.
pub fn epipolar_line(f: &FundamentalMatrix, x1: &Vector3<f64>) -> Result<EpipolarLine> {
    EpipolarLine::new(f.matrix() * x1)
}

/// `σ3 / σ1`.
pub fn singular_ratio(f: &FundamentalMatrix) -> f64 {
    let [s1, _, s3] = f.singular_values();
    if s1 == 0.0 {
        return 0.0;
    }
    (s3 / s1).clamp(0.0, 1.0)
}
