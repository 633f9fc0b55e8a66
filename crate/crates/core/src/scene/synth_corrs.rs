//! Perturbed correspondence sets derived from ground truth.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ScenePair;
use crate::geometry::{Correspondence, FundamentalMatrix, PointKind};

/// A correspondence with its ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledCorrespondence {
    pub corr: Correspondence,
    pub correct: bool,
}

/// Independent isotropic Gaussian noise on both points.
pub fn add_gaussian_noise<R: Rng>(
    corrs: &[Correspondence],
    sigma_px: f64,
    rng: &mut R,
) -> Vec<Correspondence> {
    let normal = Normal::new(0.0, sigma_px).expect("finite non-negative sigma");
    corrs
        .iter()
        .map(|c| {
            let mut n = || normal.sample(rng);
            Correspondence::new(
                c.x1.x + n(),
                c.x1.y + n(),
                c.x2.x + n(),
                c.x2.y + n(),
                c.point_id,
            )
        })
        .collect()
}

/// Uniformly random pixel pairs whose root Sampson error under `f_gt` is at
/// least `margin_px`, so none of them can pass a tighter inlier threshold by
/// chance. Ids continue from `first_id`.
pub fn add_outliers<R: Rng>(
    f_gt: &FundamentalMatrix,
    n: usize,
    margin_px: f64,
    image_size: (u32, u32),
    first_id: u64,
    rng: &mut R,
) -> Vec<Correspondence> {
    let (w, h) = (f64::from(image_size.0), f64::from(image_size.1));
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c = Correspondence::new(
            rng.random_range(0.0..w - 1.0),
            rng.random_range(0.0..h - 1.0),
            rng.random_range(0.0..w - 1.0),
            rng.random_range(0.0..h - 1.0),
            first_id + out.len() as u64,
        );
        if f_gt.root_sampson_error(&c).is_ok_and(|e| e >= margin_px) {
            out.push(c);
        }
    }
    out
}

/// A random subset of `n` correspondences in their original order.
pub fn thin_correspondences<R: Rng>(
    corrs: &[Correspondence],
    n: usize,
    rng: &mut R,
) -> Vec<Correspondence> {
    if n >= corrs.len() {
        return corrs.to_vec();
    }
    let mut keep = index::sample(rng, corrs.len(), n).into_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| corrs[i]).collect()
}

/// Matches as an appearance-only matcher would produce them on a ring of
/// identical copies: every visible object point of view 1 is matched to
/// the same member of every copy visible in view 2, so only one match in
/// `k` is correct. Shadow-proxy markers are unique and matched only to
/// themselves.
pub fn ambiguous_correspondences(pair: &ScenePair) -> Vec<LabeledCorrespondence> {
    let visible = |cam: &crate::geometry::CameraModel, id: usize| {
        let p = cam.project(&pair.points[id].position())?;
        cam.strictly_contains(&p).then_some(p)
    };
    let mut members_in_view2: HashMap<u32, Vec<(u64, nalgebra::Vector2<f64>)>> = HashMap::new();
    for (i, p) in pair.points.iter().enumerate() {
        if let PointKind::Object { member, .. } = p.kind {
            if let Some(x2) = visible(&pair.cam2, i) {
                members_in_view2.entry(member).or_default().push((p.id, x2));
            }
        }
    }
    let mut out = Vec::new();
    for (i, p) in pair.points.iter().enumerate() {
        let Some(x1) = visible(&pair.cam1, i) else {
            continue;
        };
        match p.kind {
            PointKind::Object { member, .. } => {
                for &(id2, x2) in members_in_view2.get(&member).into_iter().flatten() {
                    out.push(LabeledCorrespondence {
                        corr: Correspondence::new(x1.x, x1.y, x2.x, x2.y, p.id),
                        correct: id2 == p.id,
                    });
                }
            }
            PointKind::ShadowProxy { .. } => {
                if let Some(x2) = visible(&pair.cam2, i) {
                    out.push(LabeledCorrespondence {
                        corr: Correspondence::new(x1.x, x1.y, x2.x, x2.y, p.id),
                        correct: true,
                    });
                }
            }
        }
    }
    out
}
