//! Classical fundamental-matrix estimation: the Hartley-normalized
//! eight-point solver, a seeded RANSAC wrapper and the failure rule used to
//! score every method.

use nalgebra::{DMatrix, Matrix3, Vector2};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rank2_project, Correspondence, FundamentalMatrix, GeometryError};
use crate::rng::stream_rng;
use crate::stats::median;

/// A run fails when its median root Sampson error exceeds this many pixels.
pub const FAILURE_THRESHOLD_PX: f64 = 10.0;

pub const MIN_SAMPLE: usize = 8;

/// Relative size of the eighth singular value of the design matrix below
/// which the configuration is treated as rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("design matrix has rank < 8 (σ8/σ1 = {ratio:e})")]
    DegenerateConfiguration { ratio: f64 },
    #[error("need at least 8 correspondences, got {found}")]
    InsufficientCorrespondences { found: usize },
    #[error("invalid RANSAC configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, EstimationError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Root-Sampson inlier threshold in pixels.
    pub inlier_threshold_px: f64,
    pub min_sample: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            inlier_threshold_px: 1.0,
            min_sample: MIN_SAMPLE,
            confidence: 0.999,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_sample != MIN_SAMPLE {
            return Err(EstimationError::InvalidConfig(format!(
                "min_sample must be 8, got {}",
                self.min_sample
            )));
        }
        if !(self.inlier_threshold_px > 0.0) {
            return Err(EstimationError::InvalidConfig(
                "inlier_threshold_px must be > 0".into(),
            ));
        }
        if self.max_iterations < 1 {
            return Err(EstimationError::InvalidConfig(
                "max_iterations must be >= 1".into(),
            ));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(EstimationError::InvalidConfig(
                "confidence must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub fundamental: Option<FundamentalMatrix>,
    /// Indices into the correspondence slice the model was scored on.
    pub inliers: Vec<usize>,
    /// `None` when nothing could be evaluated.
    pub median_root_sampson_px: Option<f64>,
    pub is_failure: bool,
    /// Correspondences skipped because they sit at an epipole.
    pub excluded: usize,
}

/// Isotropic similarity moving the centroid to the origin with mean
/// distance √2.
fn normalizing_transform(points: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    if !(mean_dist > 0.0) || !mean_dist.is_finite() {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(
        s,
        0.0,
        -s * centroid.x,
        0.0,
        s,
        -s * centroid.y,
        0.0,
        0.0,
        1.0,
    ))
}

/// Smallest right singular vector of the `n × 9` epipolar design matrix,
/// reshaped row-major.
fn solve_linear(
    corrs: &[Correspondence],
    t1: &Matrix3<f64>,
    t2: &Matrix3<f64>,
) -> Result<Matrix3<f64>> {
    let n = corrs.len();
    let rows = n.max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, c) in corrs.iter().enumerate() {
        let p1 = t1 * c.x1;
        let p2 = t2 * c.x2;
        let (x1, y1, w1) = (p1.x, p1.y, p1.z);
        let (x2, y2, w2) = (p2.x, p2.y, p2.z);
        let row = [
            x2 * x1,
            x2 * y1,
            x2 * w1,
            y2 * x1,
            y2 * y1,
            y2 * w1,
            w2 * x1,
            w2 * y1,
            w2 * w1,
        ];
        for (j, v) in row.into_iter().enumerate() {
            a[(i, j)] = v;
        }
    }
    let svd = a.svd(false, true);
    let s = &svd.singular_values;
    let ratio = if s[0] > 0.0 { s[7] / s[0] } else { 0.0 };
    if !(ratio > RANK_TOLERANCE) {
        return Err(EstimationError::DegenerateConfiguration { ratio });
    }
    let v_t = svd.v_t.expect("requested Vᵀ");
    let f = v_t.row(8);
    Ok(Matrix3::new(
        f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8],
    ))
}

/// Normalized eight-point algorithm with rank-2 projection, in canonical
/// scale.
pub fn eight_point(corrs: &[Correspondence]) -> Result<FundamentalMatrix> {
    if corrs.len() < MIN_SAMPLE {
        return Err(EstimationError::InsufficientCorrespondences { found: corrs.len() });
    }
    let p1: Vec<_> = corrs.iter().map(Correspondence::p1).collect();
    let p2: Vec<_> = corrs.iter().map(Correspondence::p2).collect();
    let degenerate = EstimationError::DegenerateConfiguration { ratio: 0.0 };
    let t1 = normalizing_transform(&p1).ok_or(degenerate.clone())?;
    let t2 = normalizing_transform(&p2).ok_or(degenerate)?;
    let f_norm = solve_linear(corrs, &t1, &t2)?;
    let f_norm = rank2_project(&f_norm)?;
    Ok(FundamentalMatrix::from_matrix(
        &(t2.transpose() * f_norm.matrix() * t1),
    )?)
}

/// The same linear solve directly on pixel coordinates. Kept as a
/// reference for how much the normalization matters.
pub fn eight_point_unnormalized(corrs: &[Correspondence]) -> Result<FundamentalMatrix> {
    if corrs.len() < MIN_SAMPLE {
        return Err(EstimationError::InsufficientCorrespondences { found: corrs.len() });
    }
    let id = Matrix3::identity();
    let f = solve_linear(corrs, &id, &id)?;
    Ok(rank2_project(&f)?)
}

struct Consensus {
    inliers: Vec<usize>,
    total_error: f64,
}

fn consensus(f: &FundamentalMatrix, corrs: &[Correspondence], threshold_sq: f64) -> Consensus {
    let mut inliers = Vec::new();
    let mut total_error = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        if let Ok(s) = f.sampson_error(c) {
            if s <= threshold_sq {
                inliers.push(i);
                total_error += s;
            }
        }
    }
    Consensus {
        inliers,
        total_error,
    }
}

/// Iterations needed to draw one all-inlier sample with the configured
/// confidence at inlier ratio `w`.
fn required_iterations(w: f64, confidence: f64, cap: usize) -> usize {
    if w >= 1.0 {
        return 1;
    }
    let p_good = w.powi(MIN_SAMPLE as i32);
    if p_good <= 0.0 {
        return cap;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - p_good).ln()).ceil();
    if n.is_finite() && n >= 0.0 {
        (n as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// RANSAC over eight-point minimal samples. The best hypothesis maximizes
/// the inlier count, breaking ties by lower summed Sampson error; the final
/// model is re-estimated on its inliers. Iteration `i` draws its sample from
/// the stream `(seed, i)`.
pub fn ransac_fundamental(
    corrs: &[Correspondence],
    cfg: &RansacConfig,
) -> Result<EstimationResult> {
    cfg.validate()?;
    let n = corrs.len();
    if n < MIN_SAMPLE {
        return Err(EstimationError::InsufficientCorrespondences { found: n });
    }
    let threshold_sq = cfg.inlier_threshold_px * cfg.inlier_threshold_px;
    let mut best: Option<(FundamentalMatrix, Consensus)> = None;
    let mut required = cfg.max_iterations;
    let mut sample = Vec::with_capacity(MIN_SAMPLE);

    let mut iteration = 0;
    while iteration < required {
        let mut rng = stream_rng(cfg.seed, iteration as u64);
        sample.clear();
        sample.extend(
            index::sample(&mut rng, n, MIN_SAMPLE)
                .into_iter()
                .map(|i| corrs[i]),
        );
        iteration += 1;
        let Ok(f) = eight_point(&sample) else {
            continue;
        };
        let c = consensus(&f, corrs, threshold_sq);
        let better = match &best {
            None => true,
            Some((_, b)) => {
                c.inliers.len() > b.inliers.len()
                    || (c.inliers.len() == b.inliers.len() && c.total_error < b.total_error)
            }
        };
        if better {
            let w = c.inliers.len() as f64 / n as f64;
            required = required_iterations(w, cfg.confidence, cfg.max_iterations)
                .max(iteration)
                .min(cfg.max_iterations);
            best = Some((f, c));
        }
    }

    let Some((hypothesis, support)) = best.filter(|(_, c)| c.inliers.len() >= MIN_SAMPLE) else {
        return Ok(EstimationResult {
            fundamental: None,
            inliers: Vec::new(),
            median_root_sampson_px: None,
            is_failure: true,
            excluded: 0,
        });
    };

    let inlier_corrs: Vec<_> = support.inliers.iter().map(|&i| corrs[i]).collect();
    let refined = eight_point(&inlier_corrs).unwrap_or(hypothesis);
    let final_support = consensus(&refined, corrs, threshold_sq);
    let (f, inliers) = if final_support.inliers.len() >= MIN_SAMPLE {
        (refined, final_support.inliers)
    } else {
        (hypothesis, support.inliers)
    };
    let evaluated: Vec<_> = inliers.iter().map(|&i| corrs[i]).collect();
    let mut result = classify_failure(Some(&f), &evaluated);
    result.inliers = inliers;
    Ok(result)
}

/// Scores a model against evaluation correspondences: failure is a missing
/// model or a median root Sampson error above [`FAILURE_THRESHOLD_PX`].
pub fn classify_failure(
    f: Option<&FundamentalMatrix>,
    eval_corrs: &[Correspondence],
) -> EstimationResult {
    let Some(f) = f else {
        return EstimationResult {
            fundamental: None,
            inliers: Vec::new(),
            median_root_sampson_px: None,
            is_failure: true,
            excluded: 0,
        };
    };
    let mut errors = Vec::with_capacity(eval_corrs.len());
    let mut excluded = 0;
    for c in eval_corrs {
        match f.root_sampson_error(c) {
            Ok(e) => errors.push(e),
            Err(_) => excluded += 1,
        }
    }
    let median_root_sampson_px = median(&errors);
    let is_failure = median_root_sampson_px.is_none_or(|m| !(m <= FAILURE_THRESHOLD_PX));
    EstimationResult {
        fundamental: Some(*f),
        inliers: Vec::new(),
        median_root_sampson_px,
        is_failure,
        excluded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{compose_fundamental, look_at_rotation, skew, CameraModel};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn camera_at(center: Vector3<f64>) -> CameraModel {
        let r = look_at_rotation(&center, &Vector3::zeros(), &Vector3::z());
        CameraModel::new(50.0, 36.0, (518, 518), r, -(r * center)).unwrap()
    }

    fn setup(seed: u64, n: usize) -> (FundamentalMatrix, Vec<Correspondence>) {
        let c1 = camera_at(Vector3::new(2.2, -1.4, 0.6));
        let c2 = camera_at(Vector3::new(0.9, -2.5, 0.9));
        let f = compose_fundamental(&c1, &c2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut corrs = Vec::new();
        while corrs.len() < n {
            let x = Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            let (p1, p2) = (c1.project(&x).unwrap(), c2.project(&x).unwrap());
            if c1.contains(&p1) && c2.contains(&p2) {
                corrs.push(Correspondence::new(
                    p1.x,
                    p1.y,
                    p2.x,
                    p2.y,
                    corrs.len() as u64,
                ));
            }
        }
        (f, corrs)
    }

    #[test]
    fn recovers_ground_truth_from_twenty_exact_points() {
        let (f, corrs) = setup(1, 20);
        let est = eight_point(&corrs).unwrap();
        assert!(est.distance(&f) <= 1e-6, "distance {}", est.distance(&f));
    }

    #[test]
    fn recovers_ground_truth_from_exactly_eight_points() {
        let (f, corrs) = setup(2, 8);
        let est = eight_point(&corrs).unwrap();
        assert!(est.distance(&f) <= 1e-5, "distance {}", est.distance(&f));
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let corrs: Vec<_> = (0..8)
            .map(|i| {
                let s = f64::from(i) * 30.0;
                Correspondence::new(10.0 + s, 20.0 + 0.5 * s, 40.0 + s, 25.0 + 0.5 * s, i as u64)
            })
            .collect();
        assert!(matches!(
            eight_point(&corrs),
            Err(EstimationError::DegenerateConfiguration { .. })
        ));
    }

    #[test]
    fn too_few_points() {
        let (_, corrs) = setup(3, 7);
        assert!(matches!(
            eight_point(&corrs),
            Err(EstimationError::InsufficientCorrespondences { found: 7 })
        ));
        assert!(matches!(
            ransac_fundamental(&corrs, &RansacConfig::default()),
            Err(EstimationError::InsufficientCorrespondences { found: 7 })
        ));
    }

    #[test]
    fn adding_exact_points_never_hurts() {
        let (f, corrs) = setup(4, 40);
        let mut previous = eight_point(&corrs[..8]).unwrap().distance(&f);
        for n in 9..=40 {
            let d = eight_point(&corrs[..n]).unwrap().distance(&f);
            assert!(d <= previous + 1e-9, "n={n}: {d} > {previous}");
            previous = previous.max(d);
        }
    }

    #[test]
    fn ransac_without_outliers_keeps_everything() {
        let (f, corrs) = setup(5, 100);
        let res = ransac_fundamental(&corrs, &RansacConfig::with_seed(1)).unwrap();
        assert_eq!(res.inliers, (0..100).collect::<Vec<_>>());
        assert!(res.fundamental.unwrap().distance(&f) <= 1e-6);
        assert!(!res.is_failure);
    }

    #[test]
    fn ransac_is_deterministic_per_seed() {
        let (_, mut corrs) = setup(6, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for c in corrs.iter_mut().take(20) {
            *c = Correspondence::new(
                rng.random_range(0.0..518.0),
                rng.random_range(0.0..518.0),
                rng.random_range(0.0..518.0),
                rng.random_range(0.0..518.0),
                c.point_id,
            );
        }
        let a = ransac_fundamental(&corrs, &RansacConfig::with_seed(7)).unwrap();
        let b = ransac_fundamental(&corrs, &RansacConfig::with_seed(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let bad = RansacConfig {
            min_sample: 7,
            ..RansacConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RansacConfig {
            inlier_threshold_px: 0.0,
            ..RansacConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(RansacConfig::default().validate().is_ok());
    }

    #[test]
    fn failure_rule_boundaries() {
        // F = [e_x]ₓ gives root Sampson |y1 - y2| / √2 exactly.
        let f = FundamentalMatrix::from_matrix(&skew(&Vector3::new(1.0, 0.0, 0.0))).unwrap();
        let at = |root: f64| -> Vec<Correspondence> {
            (0..5)
                .map(|i| {
                    let y = 100.0 + 20.0 * f64::from(i);
                    Correspondence::new(50.0, y, 80.0, y + root * 2f64.sqrt(), i as u64)
                })
                .collect()
        };
        let r = classify_failure(Some(&f), &at(10.5));
        assert!(r.is_failure);
        assert!((r.median_root_sampson_px.unwrap() - 10.5).abs() < 1e-9);
        assert!(!classify_failure(Some(&f), &at(9.5)).is_failure);
        assert!(!classify_failure(Some(&f), &at(0.0)).is_failure);
        assert!(classify_failure(None, &at(0.0)).is_failure);
    }

    #[test]
    fn ground_truth_passes_failure_rule() {
        let (f, corrs) = setup(8, 30);
        let r = classify_failure(Some(&f), &corrs);
        assert!(!r.is_failure);
        assert!(r.median_root_sampson_px.unwrap() < 1e-6);
    }

    #[test]
    fn noisy_points_stay_subpixel() {
        let (f, corrs) = setup(9, 60);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let noisy: Vec<_> = corrs
            .iter()
            .map(|c| {
                Correspondence::new(
                    c.x1.x + noise.sample(&mut rng),
                    c.x1.y + noise.sample(&mut rng),
                    c.x2.x + noise.sample(&mut rng),
                    c.x2.y + noise.sample(&mut rng),
                    c.point_id,
                )
            })
            .collect();
        let est = eight_point(&noisy).unwrap();
        let r = classify_failure(Some(&est), &noisy);
        assert!(r.median_root_sampson_px.unwrap() < 1.0);
        let gt = classify_failure(Some(&f), &noisy);
        assert!(gt.median_root_sampson_px.unwrap() < 1.0);
    }
}
