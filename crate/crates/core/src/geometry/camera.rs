use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{GeometryError, Result};

const ROTATION_TOLERANCE: f64 = 1e-9;

/// A pinhole camera: intrinsics `K`, world-to-camera pose `(R, t)` and the
/// sensor description the intrinsics were derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct CameraModel {
    k: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    focal_length_mm: f64,
    sensor_width_mm: f64,
    image_size: (u32, u32),
}

impl CameraModel {
    /// Builds a camera with square pixels and the principal point at the
    /// image center, `fx = fy = focal / sensor_width * width`.
    pub fn new(
        focal_length_mm: f64,
        sensor_width_mm: f64,
        image_size: (u32, u32),
        r: Matrix3<f64>,
        t: Vector3<f64>,
    ) -> Result<Self> {
        if !(focal_length_mm > 0.0 && sensor_width_mm > 0.0) {
            return Err(GeometryError::InvalidCamera(
                "focal length and sensor width must be positive".into(),
            ));
        }
        let (w, h) = image_size;
        let fx = focal_length_mm / sensor_width_mm * f64::from(w);
        let k = Matrix3::new(
            fx,
            0.0,
            (f64::from(w) - 1.0) / 2.0,
            0.0,
            fx,
            (f64::from(h) - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::from_parts(k, r, t, focal_length_mm, sensor_width_mm, image_size)
    }

    /// Builds a camera from explicit intrinsics; the focal length in
    /// millimetres is derived from `K[0,0]` and the sensor width.
    pub fn from_intrinsics(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        image_size: (u32, u32),
        sensor_width_mm: f64,
    ) -> Result<Self> {
        let focal = k[(0, 0)] * sensor_width_mm / f64::from(image_size.0);
        Self::from_parts(k, r, t, focal, sensor_width_mm, image_size)
    }

    fn from_parts(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        focal_length_mm: f64,
        sensor_width_mm: f64,
        image_size: (u32, u32),
    ) -> Result<Self> {
        if k.iter()
            .chain(r.iter())
            .chain(t.iter())
            .any(|v| !v.is_finite())
        {
            return Err(GeometryError::NonFinite);
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(GeometryError::InvalidCamera(
                "K must be upper-triangular".into(),
            ));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) || k[(2, 2)] != 1.0 {
            return Err(GeometryError::InvalidCamera(
                "K needs a positive diagonal with K[2,2] = 1".into(),
            ));
        }
        let expected_fx = focal_length_mm / sensor_width_mm * f64::from(image_size.0);
        if (k[(0, 0)] - expected_fx).abs() > 1e-9 * expected_fx {
            return Err(GeometryError::InvalidCamera(format!(
                "K[0,0] = {} disagrees with focal/sensor conversion {}",
                k[(0, 0)],
                expected_fx
            )));
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).norm();
        if ortho > ROTATION_TOLERANCE || r.determinant() <= 0.0 {
            return Err(GeometryError::InvalidCamera(format!(
                "R is not a proper rotation (|RᵀR - I| = {ortho:e})"
            )));
        }
        Ok(Self {
            k,
            r,
            t,
            focal_length_mm,
            sensor_width_mm,
            image_size,
        })
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.t
    }

    pub fn focal_length_mm(&self) -> f64 {
        self.focal_length_mm
    }

    pub fn sensor_width_mm(&self) -> f64 {
        self.sensor_width_mm
    }

    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    /// Viewing direction (camera z-axis) in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.r.row(2).transpose()
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x + self.t
    }

    /// Homogeneous image of a world point, or `None` behind the camera.
    pub fn project_homogeneous(&self, x: &Vector3<f64>) -> Option<Vector3<f64>> {
        let xc = self.to_camera(x);
        if xc.z <= 0.0 {
            return None;
        }
        let p = self.k * xc;
        Some(Vector3::new(p.x / p.z, p.y / p.z, 1.0))
    }

    pub fn project(&self, x: &Vector3<f64>) -> Option<Vector2<f64>> {
        self.project_homogeneous(x).map(|p| p.xy())
    }

    /// `0 <= x < width` and `0 <= y < height`.
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        let (w, h) = self.image_size;
        p.x >= 0.0 && p.y >= 0.0 && p.x < f64::from(w) && p.y < f64::from(h)
    }

    /// Strictly inside the span of pixel centers, `0 < x < width - 1`.
    pub fn strictly_contains(&self, p: &Vector2<f64>) -> bool {
        let (w, h) = self.image_size;
        p.x > 0.0 && p.y > 0.0 && p.x < f64::from(w) - 1.0 && p.y < f64::from(h) - 1.0
    }
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    #[serde(rename = "K")]
    k: [[f64; 3]; 3],
    #[serde(rename = "R")]
    r: [[f64; 3]; 3],
    t: [f64; 3],
    focal_length_mm: f64,
    sensor_width_mm: f64,
    image_size: [u32; 2],
}

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

fn from_rows(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[i][j])
}

impl From<CameraModel> for CameraRecord {
    fn from(c: CameraModel) -> Self {
        Self {
            k: rows(&c.k),
            r: rows(&c.r),
            t: [c.t.x, c.t.y, c.t.z],
            focal_length_mm: c.focal_length_mm,
            sensor_width_mm: c.sensor_width_mm,
            image_size: [c.image_size.0, c.image_size.1],
        }
    }
}

impl TryFrom<CameraRecord> for CameraModel {
    type Error = GeometryError;

    fn try_from(r: CameraRecord) -> Result<Self> {
        CameraModel::from_parts(
            from_rows(&r.k),
            from_rows(&r.r),
            Vector3::from(r.t),
            r.focal_length_mm,
            r.sensor_width_mm,
            (r.image_size[0], r.image_size[1]),
        )
    }
}

/// World-to-camera rotation for a camera at `center` looking at `target`,
/// with image y pointing away from `up`.
pub fn look_at_rotation(
    center: &Vector3<f64>,
    target: &Vector3<f64>,
    up: &Vector3<f64>,
) -> Matrix3<f64> {
    let z = (target - center).normalize();
    let x = z.cross(up).normalize();
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PointKind {
    /// Point `member` of object copy `copy`. Copies of a repeated object
    /// share members up to a rotation.
    Object { copy: u32, member: u32 },
    /// Stand-in for a cast shadow: a marker cluster offset from an object
    /// copy along a fixed world direction.
    ShadowProxy { copy: u32, member: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePoint {
    pub id: u64,
    pub position: [f64; 3],
    #[serde(flatten)]
    pub kind: PointKind,
}

impl ScenePoint {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }
}

/// A pixel correspondence between view 1 and view 2, stored homogeneously.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub x1: Vector3<f64>,
    pub x2: Vector3<f64>,
    pub point_id: u64,
}

impl Correspondence {
    pub fn new(u1: f64, v1: f64, u2: f64, v2: f64, point_id: u64) -> Self {
        Self {
            x1: Vector3::new(u1, v1, 1.0),
            x2: Vector3::new(u2, v2, 1.0),
            point_id,
        }
    }

    pub fn p1(&self) -> Vector2<f64> {
        self.x1.xy()
    }

    pub fn p2(&self) -> Vector2<f64> {
        self.x2.xy()
    }

    /// The same correspondence seen from view 2 to view 1.
    pub fn swapped(&self) -> Self {
        Self {
            x1: self.x2,
            x2: self.x1,
            point_id: self.point_id,
        }
    }
}
