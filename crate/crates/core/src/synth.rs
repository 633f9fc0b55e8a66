//! Oracle run directories written straight from ground truth.
//!
//! An oracle run has the exact layout an exporter produces, so every
//! downstream analysis can be exercised without model weights:
//!
//! - camera-token features that are pure noise below
//!   [`OracleRunOptions::informative_from`] and a fixed linear embedding of
//!   the ground-truth F from that layer on;
//! - top-k attention in which a chosen set of heads puts its row maximum on
//!   a true corresponding patch and every other head misses;
//! - predicted cameras equal to the ground truth up to an optional rotation
//!   error on the second camera.
//!
//! Occluded variants drop a fixed fraction of the matching heads' hits for
//! queries from masked patches of the occluded view.

use std::collections::BTreeSet;

use nalgebra::{Rotation3, Unit, Vector3};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    token_at, token_index, Token, TokenLayout, NUM_HEADS, NUM_LAYERS, SEQ_LEN, TOKENS_PER_VIEW,
};
use crate::geometry::CameraModel;
use crate::interventions::HeadTarget;
use crate::probing::LinearEmbedding;
use crate::rng::{derive_seed, stream_rng};
use crate::scene::{
    scene_id, CameraConfigMode, Direction, OcclusionSpec, PatchCorrespondences, ScenePair,
    NUM_PATCHES,
};
use crate::tensor_io::{
    AttentionExport, AttentionRecord, AttentionSpace, AttentionStorage, AttentionStorageKind,
    CameraPairRecord, DType, ModelId, PairRun, Result, RunDir, RunKey, RunManifest, SparseTopK,
    TensorIoError, TokenFeatures, EXPORTER_VERSION, RUN_MANIFEST_VERSION,
};

/// Row maximum written for a matching head.
pub const ORACLE_PEAK: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleRunOptions {
    pub n_heads: u32,
    /// Stored entries per attention row.
    pub k: u32,
    /// Write attention for all 24 layers.
    pub attention: bool,
    /// Heads whose restricted argmax lands on a true target.
    pub matching_heads: Vec<HeadTarget>,
    pub features: bool,
    pub informative_from: u32,
    pub embedding_dim: usize,
    pub embedding_seed: u64,
    /// Rotation error applied to the predicted second camera, degrees.
    pub camera_error_deg: f64,
    /// Share of matching-head hits kept for masked query patches in an
    /// occluded run.
    pub occluded_keep_fraction: f64,
    pub condition: Option<String>,
    pub seed: u64,
}

impl Default for OracleRunOptions {
    fn default() -> Self {
        Self {
            n_heads: NUM_HEADS,
            k: 2,
            attention: true,
            matching_heads: default_matching_heads(NUM_HEADS),
            features: true,
            informative_from: 12,
            embedding_dim: 64,
            embedding_seed: 0,
            camera_error_deg: 0.0,
            occluded_keep_fraction: 0.5,
            condition: None,
            seed: 0,
        }
    }
}

/// Heads 0..4 of layers 8..=15, clipped to `n_heads`.
pub fn default_matching_heads(n_heads: u32) -> Vec<HeadTarget> {
    (8..=15)
        .flat_map(|layer| (0..4.min(n_heads)).map(move |head| HeadTarget { layer, head }))
        .collect()
}

impl OracleRunOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorIoError::Invalid(format!("oracle run: {m}")));
        if self.n_heads == 0 || self.n_heads > NUM_HEADS {
            return bad(format!(
                "head count {} outside 1..={NUM_HEADS}",
                self.n_heads
            ));
        }
        if self.k == 0 || self.k > TOKENS_PER_VIEW {
            return bad(format!("k must lie in 1..={TOKENS_PER_VIEW}"));
        }
        if let Some(t) = self
            .matching_heads
            .iter()
            .find(|t| t.layer >= NUM_LAYERS || t.head >= self.n_heads)
        {
            return bad(format!(
                "matching head (layer {}, head {}) out of range",
                t.layer, t.head
            ));
        }
        if self.embedding_dim == 0 || !self.embedding_dim.is_multiple_of(2) {
            return bad("embedding_dim must be even and positive".into());
        }
        if !(0.0..=1.0).contains(&self.occluded_keep_fraction) {
            return bad("occluded_keep_fraction must lie in [0, 1]".into());
        }
        if !(self.camera_error_deg.is_finite() && self.camera_error_deg >= 0.0) {
            return bad("camera_error_deg must be finite and nonnegative".into());
        }
        Ok(())
    }
}

/// `<scene>_pair<p>/<mode>/<focal>mm`, the layout of generated datasets.
pub fn oracle_key(
    scene_index: u32,
    pair_index: u32,
    mode: CameraConfigMode,
    focal_mm: f64,
) -> RunKey {
    RunKey {
        scene: format!("{}_pair{pair_index}", scene_id(scene_index)),
        mode: mode.name().to_string(),
        focal: format!("{focal_mm}mm"),
    }
}

fn scene_seed(opts: &OracleRunOptions, pair: &ScenePair) -> u64 {
    derive_seed(
        opts.seed,
        &[pair.config.seed, u64::from(pair.config.pair_index)],
    )
}

/// Ground-truth cameras with the second one rotated by `error_deg` about a
/// random axis through its center.
pub fn perturbed_cameras(pair: &ScenePair, error_deg: f64, seed: u64) -> CameraPairRecord {
    let cam2 = if error_deg == 0.0 {
        pair.cam2.clone()
    } else {
        let mut rng = stream_rng(seed, 0);
        let axis = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let delta = Rotation3::from_axis_angle(&Unit::new_normalize(axis), error_deg.to_radians());
        let c = &pair.cam2;
        CameraModel::from_intrinsics(
            *c.intrinsics(),
            delta * c.rotation(),
            delta * c.translation(),
            c.image_size(),
            c.sensor_width_mm(),
        )
        .expect("rotated camera stays valid")
    };
    CameraPairRecord {
        cam1: pair.cam1.clone(),
        cam2,
    }
}

/// Camera-token features of one layer.
pub fn oracle_features(
    pair: &ScenePair,
    layer: u32,
    opts: &OracleRunOptions,
    embedding: &LinearEmbedding,
) -> TokenFeatures {
    let v = if layer >= opts.informative_from {
        embedding.embed(&pair.f_gt, pair.cam1.image_size())
    } else {
        let mut rng = stream_rng(derive_seed(scene_seed(opts, pair), &[u64::from(layer)]), 1);
        (0..opts.embedding_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    };
    let half = opts.embedding_dim / 2;
    TokenFeatures::camera(layer, v[..half].to_vec(), v[half..].to_vec()).expect("even nonzero dim")
}

/// Which hits an occluded run drops: for each masked query patch of the
/// occluded view, the matching heads past the kept prefix.
struct Suppression<'a> {
    view: u8,
    masked: &'a [u32],
    dropped: BTreeSet<HeadTarget>,
}

impl<'a> Suppression<'a> {
    fn new(spec: &'a OcclusionSpec, matching: &[HeadTarget], keep_fraction: f64) -> Self {
        let mut sorted = matching.to_vec();
        sorted.sort_unstable();
        let keep = (keep_fraction * sorted.len() as f64).round() as usize;
        Self {
            view: spec.view,
            masked: &spec.masked_patches,
            dropped: sorted.into_iter().skip(keep).collect(),
        }
    }

    fn drops(&self, target: HeadTarget, view: u8, patch: u32) -> bool {
        view == self.view
            && self.dropped.contains(&target)
            && self.masked.binary_search(&patch).is_ok()
    }
}

/// Top-k attention of one layer. Rows of matching heads whose query patch
/// has ground-truth targets peak on the lowest target; all other rows peak
/// on a pseudo-random non-target patch of the other view.
fn oracle_attention(
    layer: u32,
    gt: &PatchCorrespondences,
    opts: &OracleRunOptions,
    seed: u64,
    suppression: Option<&Suppression<'_>>,
) -> AttentionRecord {
    let s = SEQ_LEN as usize;
    let k = opts.k as usize;
    let rows = opts.n_heads as usize * s;
    let mut sp = SparseTopK {
        k: opts.k,
        values: Vec::with_capacity(rows * k),
        indices: Vec::with_capacity(rows * k),
        target_argmax: Vec::with_capacity(rows),
        target_max: Vec::with_capacity(rows),
    };
    let matching: BTreeSet<u32> = opts
        .matching_heads
        .iter()
        .filter(|t| t.layer == layer)
        .map(|t| t.head)
        .collect();
    let empty = BTreeSet::new();
    for head in 0..opts.n_heads {
        for query in 0..SEQ_LEN {
            let (view, token) = token_at(query).expect("query within sequence");
            let dir = if view == 0 {
                Direction::OneToTwo
            } else {
                Direction::TwoToOne
            };
            let other = 1 - view;
            let patch = match token {
                Token::Patch(p) => Some(p),
                _ => None,
            };
            let targets = patch.and_then(|p| gt.targets(dir, p)).unwrap_or(&empty);
            let hit = patch.is_some_and(|p| {
                matching.contains(&head)
                    && !targets.is_empty()
                    && !suppression
                        .is_some_and(|sup| sup.drops(HeadTarget { layer, head }, view as u8, p))
            });
            let peak_patch = if hit {
                *targets.first().expect("nonempty targets")
            } else {
                let start =
                    derive_seed(seed, &[u64::from(layer), u64::from(head), u64::from(query)])
                        % u64::from(NUM_PATCHES);
                (0..NUM_PATCHES)
                    .map(|i| (start as u32 + i) % NUM_PATCHES)
                    .find(|p| !targets.contains(p))
                    .expect("some patch is not a target")
            };
            let peak = token_index(other, Token::Patch(peak_patch)).expect("valid patch");
            sp.target_argmax.push(peak);
            sp.target_max.push(ORACLE_PEAK);
            sp.indices.push(peak);
            sp.values.push(ORACLE_PEAK);
            let own = view * TOKENS_PER_VIEW;
            let mut v = ORACLE_PEAK;
            for j in 0..k as u32 - 1 {
                v *= 0.5;
                sp.indices.push(own + (query - own + j) % TOKENS_PER_VIEW);
                sp.values.push(v);
            }
        }
    }
    AttentionRecord {
        layer,
        n_heads: opts.n_heads,
        space: AttentionSpace::Probabilities,
        storage: AttentionStorage::SparseTopK(sp),
    }
}

/// Writes a complete run for `pair` under `root`. With `occlusion`, the
/// spec is stored alongside and matching-head hits on masked query patches
/// are thinned.
pub fn write_oracle_run(
    root: &RunDir,
    key: RunKey,
    pair: &ScenePair,
    opts: &OracleRunOptions,
    occlusion: Option<&OcclusionSpec>,
) -> Result<PairRun> {
    opts.validate()?;
    let run = root.pair(key);
    let seed = scene_seed(opts, pair);
    let layers: Vec<u32> = if opts.attention {
        (0..NUM_LAYERS).collect()
    } else {
        Vec::new()
    };
    let manifest = RunManifest {
        schema_version: RUN_MANIFEST_VERSION,
        scene_id: run.key.scene.clone(),
        mode: pair.config.mode.name().to_string(),
        focal_length_mm: pair.config.focal_length_mm,
        cameras: CameraPairRecord {
            cam1: pair.cam1.clone(),
            cam2: pair.cam2.clone(),
        },
        layers: layers.clone(),
        n_heads: opts.n_heads,
        token_layout: TokenLayout::default(),
        attention: AttentionExport {
            storage: AttentionStorageKind::TopK,
            k: Some(opts.k),
            space: AttentionSpace::Probabilities,
        },
        intervention: None,
        occlusion: occlusion.map(|_| "occlusion.json".to_string()),
        condition: opts.condition.clone(),
        exporter_version: EXPORTER_VERSION.to_string(),
        model: ModelId::Oracle,
    };
    run.write_manifest(&manifest)?;
    run.write_ground_truth(pair)?;
    run.write_predicted_cameras(&perturbed_cameras(
        pair,
        opts.camera_error_deg,
        derive_seed(seed, &[u64::MAX]),
    ))?;
    if let Some(spec) = occlusion {
        spec.validate()
            .map_err(|e| TensorIoError::Invalid(e.to_string()))?;
        run.write_occlusion(spec)?;
    }
    if opts.features {
        let embedding = LinearEmbedding::new(opts.embedding_dim, opts.embedding_seed);
        (0..NUM_LAYERS).into_par_iter().try_for_each(|l| {
            run.write_features(&oracle_features(pair, l, opts, &embedding), DType::F64)
        })?;
    }
    let suppression = occlusion
        .map(|spec| Suppression::new(spec, &opts.matching_heads, opts.occluded_keep_fraction));
    layers.par_iter().try_for_each(|&l| {
        run.write_attention(&oracle_attention(
            l,
            &pair.patch_corrs,
            opts,
            seed,
            suppression.as_ref(),
        ))
    })?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{compare_heads_matched, matching_accuracy, ArgmaxScope};
    use crate::geometry::compose_fundamental;
    use crate::scene::{generate_scene_retrying, make_occlusion_spec, SceneConfig};

    fn pair(seed: u64) -> ScenePair {
        generate_scene_retrying(
            &SceneConfig::new(CameraConfigMode::Small, 50.0, 120, seed),
            20,
        )
        .unwrap()
    }

    fn small_opts() -> OracleRunOptions {
        OracleRunOptions {
            n_heads: 2,
            k: 3,
            matching_heads: default_matching_heads(2),
            ..Default::default()
        }
    }

    #[test]
    fn matching_heads_score_one_and_others_zero() {
        let p = pair(1);
        let dir = tempfile::tempdir().unwrap();
        let run = write_oracle_run(
            &RunDir::new(dir.path()),
            oracle_key(0, 0, CameraConfigMode::Small, 50.0),
            &p,
            &small_opts(),
            None,
        )
        .unwrap();
        assert_eq!(run.key.to_string(), "scene0000_pair0/small/50mm");
        let gt = run.read_ground_truth().unwrap();
        for layer in [3, 9] {
            let attn = run.read_attention(layer).unwrap();
            for dir in Direction::BOTH {
                for row in
                    matching_accuracy(&attn, &gt.patch_corrs, dir, ArgmaxScope::TargetPatches)
                        .unwrap()
                {
                    let expected = if (8..=15).contains(&layer) { 1.0 } else { 0.0 };
                    assert_eq!(row.accuracy, expected, "layer {layer} head {}", row.head);
                }
            }
        }
        let m = run.read_manifest().unwrap();
        assert_eq!(
            (m.model, m.n_heads, m.layers.len()),
            (ModelId::Oracle, 2, 24)
        );
        let cams = run.read_predicted_cameras().unwrap();
        assert_eq!(compose_fundamental(&cams.cam1, &cams.cam2).unwrap(), p.f_gt);
    }

    #[test]
    fn occluded_run_keeps_the_requested_share_of_hits() {
        let p = pair(2);
        let spec = make_occlusion_spec(&p, 3, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let key = oracle_key(0, 0, CameraConfigMode::Small, 50.0);
        let opts = small_opts();
        let clean = write_oracle_run(
            &RunDir::new(dir.path().join("clean")),
            key.clone(),
            &p,
            &opts,
            None,
        )
        .unwrap();
        let occ = write_oracle_run(
            &RunDir::new(dir.path().join("occ")),
            key,
            &p,
            &opts,
            Some(&spec),
        )
        .unwrap();
        assert_eq!(occ.read_occlusion().unwrap().as_ref(), Some(&spec));
        let load = |r: &PairRun| {
            (0..NUM_LAYERS)
                .map(|l| r.read_attention(l).unwrap())
                .collect::<Vec<_>>()
        };
        let cmp = compare_heads_matched(
            &load(&clean),
            &load(&occ),
            &spec.target_patches,
            &p.patch_corrs,
            Direction::TwoToOne,
        )
        .unwrap();
        for c in &cmp {
            assert_eq!(c.clean, 16);
            assert_eq!(c.occluded, 8);
            assert_eq!(c.retained(), Some(0.5));
        }
    }

    #[test]
    fn features_switch_to_the_embedding() {
        let p = pair(3);
        let opts = OracleRunOptions::default();
        let emb = LinearEmbedding::new(64, 0);
        let late = oracle_features(&p, 12, &opts, &emb);
        assert_eq!(late.flattened(), emb.embed(&p.f_gt, (518, 518)).as_slice());
        let early = oracle_features(&p, 11, &opts, &emb);
        assert_ne!(early.flattened(), late.flattened());
        assert_eq!(early, oracle_features(&p, 11, &opts, &emb));
    }

    #[test]
    fn camera_error_rotates_about_the_center() {
        let p = pair(4);
        let cams = perturbed_cameras(&p, 2.0, 9);
        assert!((cams.cam2.center() - p.cam2.center()).norm() < 1e-12);
        let cos = (cams.cam2.rotation().transpose() * p.cam2.rotation()).trace();
        let angle = ((cos - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
        assert!((angle - 2.0).abs() < 1e-9);
    }

    #[test]
    fn options_are_validated() {
        let bad = OracleRunOptions {
            embedding_dim: 7,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = OracleRunOptions {
            n_heads: 2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
