//! Procedural two-view scenes with exact ground truth.
//!
//! A scene is a set of 3D points inside a unit-scale volume around the
//! origin, viewed by two pinhole cameras that both look at the origin. The
//! point set depends only on the scene seed; the camera pair additionally
//! depends on the camera configuration, focal length and pair index, so the
//! same object can be viewed under every configuration.

mod dataset;
mod patches;
mod synth_corrs;

pub use dataset::{
    pair_rel_dir, scene_id, DatasetManifest, GenerateRequest, SceneGroup, ScenePairEntry, Split,
    SplitPlan, PAIRS_PER_SCENE,
};
pub use patches::{
    build_patch_correspondences, make_occlusion_spec, patch_coords, patch_neighborhood,
    pixel_to_patch, Direction, OcclusionSpec, PatchCorrespondences, IMAGE_SIZE_PX, NUM_PATCHES,
    OCCLUSION_SPEC_VERSION, PATCH_GRID, PATCH_SIZE_PX,
};
pub use synth_corrs::{
    add_gaussian_noise, add_outliers, ambiguous_correspondences, thin_correspondences,
    LabeledCorrespondence,
};

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    compose_essential, compose_fundamental, look_at_rotation, relative_pose, CameraModel,
    Correspondence, EssentialMatrix, FundamentalMatrix, GeometryError, PointKind, ScenePoint,
};
use crate::rng::{derive_seed, seeded};

pub const FOCAL_LENGTHS_MM: [f64; 7] = [24.0, 35.0, 40.0, 50.0, 70.0, 85.0, 100.0];
pub const SENSOR_WIDTH_MM: f64 = 36.0;
pub const DEFAULT_RING_COPIES: u32 = 6;

/// Focal length at which the object is framed to fill 40–80% of the image.
const FRAMING_FOCAL_MM: f64 = 50.0;
const FRAMING_RANGE: (f64, f64) = (0.4, 0.8);
const ELEVATION_RANGE_DEG: (f64, f64) = (15.0, 35.0);
const STEREO_BASELINE_RANGE: (f64, f64) = (0.15, 0.35);
/// Second-camera directions steeper than this (|z| of the unit direction)
/// are resampled so that the world-up look-at stays well conditioned.
const MAX_VIEW_ELEVATION_SIN: f64 = 0.85;

const RING_RADIUS: f64 = 0.36;
const RING_COPY_HALF_SIZE: f64 = 0.1;
const SHADOW_HALF_SIZE: f64 = 0.06;
/// Fixed world offset of every shadow marker cluster from its object copy,
/// as if cast by a single light.
const SHADOW_OFFSET: [f64; 3] = [0.11, 0.07, -0.16];

const STREAM_POINTS: u64 = 1;
const STREAM_CAMERAS: u64 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("only {found} points are visible in both views (need 8)")]
    TooFewVisible { found: usize },
    #[error("pixel ({x}, {y}) lies outside the {size}x{size} image")]
    OutOfBounds { x: f64, y: f64, size: u32 },
    #[error("need {needed} view-2 patches with correspondences, found {found}")]
    InsufficientCorrespondences { needed: usize, found: usize },
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, SceneError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraConfigMode {
    Stereo,
    Small,
    Medium,
    Large,
}

impl CameraConfigMode {
    pub const ALL: [CameraConfigMode; 4] = [Self::Stereo, Self::Small, Self::Medium, Self::Large];

    /// Range of the angle between the two optical axes, in degrees.
    pub fn angle_range_deg(self) -> (f64, f64) {
        match self {
            Self::Stereo => (0.0, 0.0),
            Self::Small => (10.0, 25.0),
            Self::Medium => (45.0, 75.0),
            Self::Large => (90.0, 120.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Stereo => "stereo",
            Self::Small => "small",
            Self::Medium => "medium",
            Self::Large => "large",
        }
    }

    fn code(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for CameraConfigMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CameraConfigMode {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stereo" => Ok(Self::Stereo),
            "small" | "small_angle" => Ok(Self::Small),
            "medium" | "medium_angle" => Ok(Self::Medium),
            "large" | "large_angle" => Ok(Self::Large),
            other => Err(SceneError::InvalidConfig(format!(
                "unknown camera mode {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ambiguity {
    Unique,
    /// Identical object copies on a ring around the vertical axis.
    RepeatedRing,
    /// The ring plus a unique marker cluster per copy standing in for its
    /// shadow.
    RepeatedRingWithShadowProxy,
}

impl FromStr for Ambiguity {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unique" => Ok(Self::Unique),
            "repeated_ring" => Ok(Self::RepeatedRing),
            "repeated_ring_with_shadow_proxy" => Ok(Self::RepeatedRingWithShadowProxy),
            other => Err(SceneError::InvalidConfig(format!(
                "unknown ambiguity {other:?}"
            ))),
        }
    }
}

/// Index of a legal focal length, `None` for any other value.
pub fn focal_index(focal_length_mm: f64) -> Option<usize> {
    FOCAL_LENGTHS_MM.iter().position(|&f| f == focal_length_mm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub mode: CameraConfigMode,
    pub focal_length_mm: f64,
    #[serde(default = "default_sensor")]
    pub sensor_width_mm: f64,
    #[serde(default = "default_image_size")]
    pub image_size: (u32, u32),
    /// Points per object copy.
    pub n_points: usize,
    #[serde(default = "default_ambiguity")]
    pub ambiguity: Ambiguity,
    #[serde(default = "default_ring_copies")]
    pub ring_copies: u32,
    /// Seeds the point set.
    pub seed: u64,
    /// Selects one of several camera pairs viewing the same points.
    #[serde(default)]
    pub pair_index: u32,
    /// Bumped by the caller to redraw cameras after `TooFewVisible`.
    #[serde(default)]
    pub attempt: u32,
}

fn default_sensor() -> f64 {
    SENSOR_WIDTH_MM
}
fn default_image_size() -> (u32, u32) {
    (IMAGE_SIZE_PX, IMAGE_SIZE_PX)
}
fn default_ambiguity() -> Ambiguity {
    Ambiguity::Unique
}
fn default_ring_copies() -> u32 {
    DEFAULT_RING_COPIES
}

impl SceneConfig {
    pub fn new(mode: CameraConfigMode, focal_length_mm: f64, n_points: usize, seed: u64) -> Self {
        Self {
            mode,
            focal_length_mm,
            sensor_width_mm: SENSOR_WIDTH_MM,
            image_size: (IMAGE_SIZE_PX, IMAGE_SIZE_PX),
            n_points,
            ambiguity: Ambiguity::Unique,
            ring_copies: DEFAULT_RING_COPIES,
            seed,
            pair_index: 0,
            attempt: 0,
        }
    }

    pub fn with_ambiguity(mut self, ambiguity: Ambiguity) -> Self {
        self.ambiguity = ambiguity;
        self
    }

    pub fn with_pair_index(mut self, pair_index: u32) -> Self {
        self.pair_index = pair_index;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if focal_index(self.focal_length_mm).is_none() {
            return Err(SceneError::InvalidConfig(format!(
                "focal length {} mm is not one of {:?}",
                self.focal_length_mm, FOCAL_LENGTHS_MM
            )));
        }
        if self.image_size != (IMAGE_SIZE_PX, IMAGE_SIZE_PX) {
            return Err(SceneError::InvalidConfig(format!(
                "image size must be {IMAGE_SIZE_PX}x{IMAGE_SIZE_PX}, got {:?}",
                self.image_size
            )));
        }
        if self.sensor_width_mm != SENSOR_WIDTH_MM {
            return Err(SceneError::InvalidConfig(format!(
                "sensor width must be {SENSOR_WIDTH_MM} mm"
            )));
        }
        if self.n_points < 8 {
            return Err(SceneError::InvalidConfig(format!(
                "n_points must be >= 8, got {}",
                self.n_points
            )));
        }
        if self.ambiguity != Ambiguity::Unique && self.ring_copies < 2 {
            return Err(SceneError::InvalidConfig(
                "a ring needs at least 2 copies".into(),
            ));
        }
        Ok(())
    }

    fn camera_seed(&self) -> u64 {
        let focal = focal_index(self.focal_length_mm).unwrap_or(usize::MAX) as u64;
        derive_seed(
            self.seed,
            &[
                STREAM_CAMERAS,
                self.mode.code(),
                focal,
                u64::from(self.pair_index),
                u64::from(self.attempt),
            ],
        )
    }
}

/// Two cameras viewing a point set, with every ground-truth quantity the
/// analyses consume.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub config: SceneConfig,
    pub cam1: CameraModel,
    pub cam2: CameraModel,
    pub points: Vec<ScenePoint>,
    /// Points visible in both views, in point order.
    pub corrs: Vec<Correspondence>,
    pub f_gt: FundamentalMatrix,
    pub e_gt: EssentialMatrix,
    pub patch_corrs: PatchCorrespondences,
}

impl ScenePair {
    pub fn point(&self, id: u64) -> Option<&ScenePoint> {
        self.points.get(id as usize).filter(|p| p.id == id)
    }
}

/// Angle between the optical axes of two cameras, in degrees.
pub fn viewing_angle_deg(cam1: &CameraModel, cam2: &CameraModel) -> f64 {
    let (a, b) = (cam1.optical_axis(), cam2.optical_axis());
    a.cross(&b).norm().atan2(a.dot(&b)).to_degrees()
}

fn uniform_in(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..=range.1)
    }
}

fn camera_looking_at_origin(center: Vector3<f64>, cfg: &SceneConfig) -> Result<CameraModel> {
    let r = look_at_rotation(&center, &Vector3::zeros(), &Vector3::z());
    Ok(CameraModel::new(
        cfg.focal_length_mm,
        cfg.sensor_width_mm,
        cfg.image_size,
        r,
        -(r * center),
    )?)
}

/// Draws the two cameras of a pair. Both look at the origin from a distance
/// that frames the unit object at 40–80% of the image width at 50 mm.
/// Stereo pairs share one rotation and are offset along the camera x-axis.
pub fn sample_camera_pair(cfg: &SceneConfig) -> Result<(CameraModel, CameraModel)> {
    cfg.validate()?;
    let mut rng = seeded(cfg.camera_seed());
    let framing = uniform_in(&mut rng, FRAMING_RANGE);
    let distance = FRAMING_FOCAL_MM / cfg.sensor_width_mm / framing;
    let azimuth = rng.random_range(0.0..2.0 * PI);
    let elevation = uniform_in(&mut rng, ELEVATION_RANGE_DEG).to_radians();
    let d1 = Vector3::new(
        elevation.cos() * azimuth.cos(),
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
    );
    let cam1 = camera_looking_at_origin(distance * d1, cfg)?;

    if cfg.mode == CameraConfigMode::Stereo {
        let baseline = uniform_in(&mut rng, STEREO_BASELINE_RANGE) * distance;
        let r = *cam1.rotation();
        let x_axis = r.row(0).transpose();
        let c2 = distance * d1 + baseline * x_axis;
        let cam2 = CameraModel::new(
            cfg.focal_length_mm,
            cfg.sensor_width_mm,
            cfg.image_size,
            r,
            -(r * c2),
        )?;
        return Ok((cam1, cam2));
    }

    let angle = uniform_in(&mut rng, cfg.mode.angle_range_deg()).to_radians();
    let e1 = Vector3::z().cross(&d1).normalize();
    let e2 = d1.cross(&e1);
    let d2 = loop {
        let psi: f64 = rng.random_range(0.0..2.0 * PI);
        let axis = Unit::new_normalize(psi.cos() * e1 + psi.sin() * e2);
        let d2 = Rotation3::from_axis_angle(&axis, angle) * d1;
        if d2.z.abs() <= MAX_VIEW_ELEVATION_SIN {
            break d2;
        }
    };
    let cam2 = camera_looking_at_origin(distance * d2, cfg)?;
    Ok((cam1, cam2))
}

fn uniform_cube(rng: &mut ChaCha8Rng, center: Vector3<f64>, half: f64) -> Vector3<f64> {
    center
        + Vector3::new(
            rng.random_range(-half..half),
            rng.random_range(-half..half),
            rng.random_range(-half..half),
        )
}

fn rotation_z(angle: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::z_axis(), angle).matrix()
}

/// The scene's point set. Point ids equal their index.
pub fn generate_points(cfg: &SceneConfig) -> Vec<ScenePoint> {
    let mut rng = seeded(derive_seed(cfg.seed, &[STREAM_POINTS]));
    let mut points = Vec::new();
    let push = |position: Vector3<f64>, kind: PointKind, points: &mut Vec<ScenePoint>| {
        let id = points.len() as u64;
        points.push(ScenePoint {
            id,
            position: position.into(),
            kind,
        });
    };
    match cfg.ambiguity {
        Ambiguity::Unique => {
            for member in 0..cfg.n_points as u32 {
                let p = uniform_cube(&mut rng, Vector3::zeros(), 0.5);
                push(p, PointKind::Object { copy: 0, member }, &mut points);
            }
        }
        Ambiguity::RepeatedRing | Ambiguity::RepeatedRingWithShadowProxy => {
            let anchor = Vector3::new(RING_RADIUS, 0.0, 0.0);
            let base: Vec<_> = (0..cfg.n_points)
                .map(|_| uniform_cube(&mut rng, anchor, RING_COPY_HALF_SIZE))
                .collect();
            let k = cfg.ring_copies;
            for copy in 0..k {
                let rot = rotation_z(2.0 * PI * f64::from(copy) / f64::from(k));
                for (member, p) in base.iter().enumerate() {
                    push(
                        rot * p,
                        PointKind::Object {
                            copy,
                            member: member as u32,
                        },
                        &mut points,
                    );
                }
            }
            if cfg.ambiguity == Ambiguity::RepeatedRingWithShadowProxy {
                let offset = Vector3::from(SHADOW_OFFSET);
                for copy in 0..k {
                    let center =
                        rotation_z(2.0 * PI * f64::from(copy) / f64::from(k)) * anchor + offset;
                    for member in 0..2 * cfg.n_points as u32 {
                        let p = uniform_cube(&mut rng, center, SHADOW_HALF_SIZE);
                        push(p, PointKind::ShadowProxy { copy, member }, &mut points);
                    }
                }
            }
        }
    }
    points
}

/// Exact correspondences for every point projecting strictly inside both
/// images.
pub fn visible_correspondences(
    cam1: &CameraModel,
    cam2: &CameraModel,
    points: &[ScenePoint],
) -> Vec<Correspondence> {
    points
        .iter()
        .filter_map(|p| {
            let x = p.position();
            let p1 = cam1.project(&x)?;
            let p2 = cam2.project(&x)?;
            (cam1.strictly_contains(&p1) && cam2.strictly_contains(&p2))
                .then(|| Correspondence::new(p1.x, p1.y, p2.x, p2.y, p.id))
        })
        .collect()
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<ScenePair> {
    cfg.validate()?;
    let points = generate_points(cfg);
    let (cam1, cam2) = sample_camera_pair(cfg)?;
    let corrs = visible_correspondences(&cam1, &cam2, &points);
    if corrs.len() < 8 {
        return Err(SceneError::TooFewVisible { found: corrs.len() });
    }
    let f_gt = compose_fundamental(&cam1, &cam2)?;
    let (r, t) = relative_pose(&cam1, &cam2);
    let e_gt = compose_essential(&r, &t)?;
    let patch_corrs = build_patch_correspondences(&corrs)?;
    Ok(ScenePair {
        config: cfg.clone(),
        cam1,
        cam2,
        points,
        corrs,
        f_gt,
        e_gt,
        patch_corrs,
    })
}

/// Redraws the camera pair (bumping `attempt`) until enough points are
/// mutually visible.
pub fn generate_scene_retrying(cfg: &SceneConfig, max_attempts: u32) -> Result<ScenePair> {
    let mut last = SceneError::TooFewVisible { found: 0 };
    for attempt in 0..max_attempts.max(1) {
        let cfg = SceneConfig {
            attempt,
            ..cfg.clone()
        };
        match generate_scene(&cfg) {
            Err(e @ SceneError::TooFewVisible { .. }) => last = e,
            other => return other,
        }
    }
    Err(last)
}
