//! Run directories.
//!
//! ```text
//! <root>/<scene>/<mode>/<focal>/
//!     manifest.json
//!     features_L<layer>.epgt      camera tokens, f32/f64 [2, dim] or [2, 1, dim]
//!     attn_L<layer>.epgt          see `AttentionRecord`
//!     predicted_cameras.json      {"cam1": camera, "cam2": camera}
//!     occlusion.json              present for occluded runs
//!     matches.csv                 optional external matches
//!     gt/scene.json               cameras, F, E and points
//!     gt/correspondences.csv      exact pixel correspondences
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::csv_corrs::{read_correspondences, write_correspondences};
use super::format::{read_tensor, write_tensor, DType, Tensor, TensorData};
use super::{
    io_err, read_attention, read_json, write_attention, write_json, AttentionRecord,
    AttentionSpace, Result, TensorIoError,
};
use crate::attention::{TokenLayout, NUM_HEADS, NUM_LAYERS};
use crate::geometry::{
    compose_fundamental, CameraModel, Correspondence, FundamentalMatrix, ScenePoint,
};
use crate::scene::{
    build_patch_correspondences, DatasetManifest, OcclusionSpec, PatchCorrespondences, SceneConfig,
    ScenePair,
};

pub const RUN_MANIFEST_VERSION: u32 = 1;
pub const EXPORTER_VERSION: &str = concat!("epgt-core ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelId {
    #[serde(rename = "vggt-1b")]
    Vggt1b,
    #[serde(rename = "stub")]
    Stub,
    /// Runs synthesized directly from ground truth, without any model.
    #[serde(rename = "oracle")]
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionStorageKind {
    Dense,
    TopK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub storage: AttentionStorageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<u32>,
    pub space: AttentionSpace,
}

/// Which intervention produced a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionRef {
    /// Path of the intervention spec JSON, as given to the exporter.
    pub spec: String,
    pub label: String,
    /// `post_softmax_zero` or `pre_softmax_mask`.
    pub variant: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub scene_id: String,
    pub mode: String,
    pub focal_length_mm: f64,
    /// Input camera parameters of the pair.
    pub cameras: CameraPairRecord,
    /// Exported global-attention layers.
    pub layers: Vec<u32>,
    pub n_heads: u32,
    pub token_layout: TokenLayout,
    pub attention: AttentionExport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervention: Option<InterventionRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion: Option<String>,
    /// Free-form label of an external condition such as a lighting setup.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    pub exporter_version: String,
    pub model: ModelId,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorIoError::Invalid(format!("manifest: {m}")));
        if self.schema_version != RUN_MANIFEST_VERSION {
            return bad(format!(
                "unsupported schema_version {}",
                self.schema_version
            ));
        }
        if let Some(l) = self.layers.iter().find(|&&l| l >= NUM_LAYERS) {
            return bad(format!("layer {l} outside 0..{NUM_LAYERS}"));
        }
        let mut sorted = self.layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.layers.len() {
            return bad("duplicate layers".into());
        }
        if self.n_heads == 0 || self.n_heads > NUM_HEADS {
            return bad(format!(
                "head count {} outside 1..={NUM_HEADS}",
                self.n_heads
            ));
        }
        if matches!(self.model, ModelId::Vggt1b | ModelId::Stub) && self.n_heads != NUM_HEADS {
            return bad(format!("{:?} runs have {NUM_HEADS} heads", self.model));
        }
        if self.token_layout != TokenLayout::default() {
            return bad("token layout differs from 1374 tokens per view".into());
        }
        match (self.attention.storage, self.attention.k) {
            (AttentionStorageKind::TopK, None | Some(0)) => {
                return bad("top-k export needs k >= 1".into())
            }
            (AttentionStorageKind::Dense, Some(_)) => return bad("dense export takes no k".into()),
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPairRecord {
    pub cam1: CameraModel,
    pub cam2: CameraModel,
}

impl CameraPairRecord {
    pub fn fundamental(
        &self,
    ) -> std::result::Result<FundamentalMatrix, crate::geometry::GeometryError> {
        compose_fundamental(&self.cam1, &self.cam2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Camera,
    Register,
    Patch,
}

/// Token features of both views at one layer, `[2, n_tokens, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    pub layer: u32,
    pub kind: TokenKind,
    pub n_tokens: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl TokenFeatures {
    pub fn camera(layer: u32, view0: Vec<f64>, view1: Vec<f64>) -> Result<Self> {
        if view0.len() != view1.len() || view0.is_empty() {
            return Err(TensorIoError::ShapeMismatch(
                "camera features of both views need one nonzero dim".into(),
            ));
        }
        let dim = view0.len();
        let mut values = view0;
        values.extend(view1);
        Ok(Self {
            layer,
            kind: TokenKind::Camera,
            n_tokens: 1,
            dim,
            values,
        })
    }

    pub fn view(&self, view: usize) -> &[f64] {
        let n = self.n_tokens * self.dim;
        &self.values[view * n..(view + 1) * n]
    }

    /// Both views' tokens flattened, view 0 first.
    pub fn flattened(&self) -> &[f64] {
        &self.values
    }

    fn from_tensor(layer: u32, t: &Tensor) -> Result<Self> {
        let values = t
            .to_f64_vec()
            .ok_or_else(|| TensorIoError::Invalid("features must be f32 or f64".into()))?;
        let (n_tokens, dim) = match t.dims.as_slice() {
            [2, d] => (1, *d as usize),
            [2, n, d] => (*n as usize, *d as usize),
            other => {
                return Err(TensorIoError::ShapeMismatch(format!(
                    "features must be [2, dim] or [2, n, dim], got {other:?}"
                )))
            }
        };
        if dim == 0 {
            return Err(TensorIoError::ShapeMismatch(
                "zero feature dimension".into(),
            ));
        }
        Ok(Self {
            layer,
            kind: TokenKind::Camera,
            n_tokens,
            dim,
            values,
        })
    }
}

/// Reads camera-token features; any `[2, 1, dim]` or `[2, dim]` tensor.
pub fn read_features(path: &Path, layer: u32) -> Result<TokenFeatures> {
    let f = TokenFeatures::from_tensor(layer, &read_tensor(path)?)?;
    if f.n_tokens != 1 {
        return Err(TensorIoError::ShapeMismatch(format!(
            "camera features hold one token per view, got {}",
            f.n_tokens
        )));
    }
    Ok(f)
}

pub fn write_features(path: &Path, features: &TokenFeatures, dtype: DType) -> Result<()> {
    let dims = vec![2, features.n_tokens as u64, features.dim as u64];
    let data = match dtype {
        DType::F32 => TensorData::F32(features.values.iter().map(|&v| v as f32).collect()),
        DType::F64 => TensorData::F64(features.values.clone()),
        DType::U32 => return Err(TensorIoError::Invalid("features are floating point".into())),
    };
    write_tensor(path, &Tensor::new(dims, data)?)
}

/// Ground-truth description stored in `gt/scene.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SceneConfig>,
    pub cameras: CameraPairRecord,
    /// Row-major, canonical scale.
    pub f_gt: [[f64; 3]; 3],
    pub e_gt: [[f64; 3]; 3],
    pub points: Vec<ScenePoint>,
}

fn rows(m: &nalgebra::Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

/// Ground truth as read back from a run.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub cameras: CameraPairRecord,
    pub f_gt: FundamentalMatrix,
    pub corrs: Vec<Correspondence>,
    pub patch_corrs: PatchCorrespondences,
    pub record: SceneRecord,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RunKey {
    pub scene: String,
    pub mode: String,
    pub focal: String,
}

impl RunKey {
    pub fn rel_dir(&self) -> PathBuf {
        Path::new(&self.scene).join(&self.mode).join(&self.focal)
    }
}

impl std::fmt::Display for RunKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.scene, self.mode, self.focal)
    }
}

/// A run root holding any number of pair runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `dataset.json`, the generation manifest mapping runs to splits.
    pub fn dataset_path(&self) -> PathBuf {
        self.root.join("dataset.json")
    }

    pub fn write_dataset(&self, manifest: &DatasetManifest) -> Result<()> {
        write_json(&self.dataset_path(), manifest)
    }

    pub fn read_dataset(&self) -> Result<Option<DatasetManifest>> {
        let path = self.dataset_path();
        if !path.is_file() {
            return Ok(None);
        }
        read_json(&path).map(Some)
    }

    pub fn pair(&self, key: RunKey) -> PairRun {
        PairRun {
            dir: self.root.join(key.rel_dir()),
            key,
        }
    }

    /// Every `<scene>/<mode>/<focal>` holding a manifest, sorted.
    pub fn discover(&self) -> Result<Vec<PairRun>> {
        let mut out = Vec::new();
        for scene in sorted_subdirs(&self.root)? {
            for mode in sorted_subdirs(&scene)? {
                for focal in sorted_subdirs(&mode)? {
                    if focal.join("manifest.json").is_file() {
                        let name = |p: &Path| {
                            p.file_name()
                                .map(|n| n.to_string_lossy().into_owned())
                                .unwrap_or_default()
                        };
                        let key = RunKey {
                            scene: name(&scene),
                            mode: name(&mode),
                            focal: name(&focal),
                        };
                        out.push(PairRun { dir: focal, key });
                    }
                }
            }
        }
        Ok(out)
    }
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if path.is_dir() && !hidden {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// One `<scene>/<mode>/<focal>` directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRun {
    pub dir: PathBuf,
    pub key: RunKey,
}

impl PairRun {
    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn features_path(&self, layer: u32) -> PathBuf {
        self.dir.join(format!("features_L{layer}.epgt"))
    }

    pub fn attention_path(&self, layer: u32) -> PathBuf {
        self.dir.join(format!("attn_L{layer}.epgt"))
    }

    pub fn predicted_cameras_path(&self) -> PathBuf {
        self.dir.join("predicted_cameras.json")
    }

    pub fn occlusion_path(&self) -> PathBuf {
        self.dir.join("occlusion.json")
    }

    /// Matches from an external matcher, read by the file-based baselines.
    pub fn matches_path(&self) -> PathBuf {
        self.dir.join("matches.csv")
    }

    pub fn gt_dir(&self) -> PathBuf {
        self.dir.join("gt")
    }

    pub fn read_manifest(&self) -> Result<RunManifest> {
        let m: RunManifest = read_json(&self.manifest_path())?;
        m.validate()?;
        Ok(m)
    }

    pub fn write_manifest(&self, m: &RunManifest) -> Result<()> {
        m.validate()?;
        write_json(&self.manifest_path(), m)
    }

    pub fn read_features(&self, layer: u32) -> Result<TokenFeatures> {
        read_features(&self.features_path(layer), layer)
    }

    pub fn write_features(&self, features: &TokenFeatures, dtype: DType) -> Result<()> {
        write_features(&self.features_path(features.layer), features, dtype)
    }

    pub fn read_attention(&self, layer: u32) -> Result<AttentionRecord> {
        let rec = read_attention(&self.attention_path(layer))?;
        if rec.layer != layer {
            return Err(TensorIoError::Invalid(format!(
                "{} holds layer {}",
                self.attention_path(layer).display(),
                rec.layer
            )));
        }
        Ok(rec)
    }

    pub fn write_attention(&self, record: &AttentionRecord) -> Result<()> {
        write_attention(&self.attention_path(record.layer), record)
    }

    pub fn read_predicted_cameras(&self) -> Result<CameraPairRecord> {
        read_json(&self.predicted_cameras_path())
    }

    pub fn write_predicted_cameras(&self, cams: &CameraPairRecord) -> Result<()> {
        write_json(&self.predicted_cameras_path(), cams)
    }

    pub fn read_occlusion(&self) -> Result<Option<OcclusionSpec>> {
        let path = self.occlusion_path();
        if !path.is_file() {
            return Ok(None);
        }
        let spec: OcclusionSpec = read_json(&path)?;
        spec.validate()
            .map_err(|e| TensorIoError::Invalid(format!("{}: {e}", path.display())))?;
        Ok(Some(spec))
    }

    pub fn write_occlusion(&self, spec: &OcclusionSpec) -> Result<()> {
        write_json(&self.occlusion_path(), spec)
    }

    pub fn write_ground_truth(&self, pair: &ScenePair) -> Result<()> {
        let record = SceneRecord {
            config: Some(pair.config.clone()),
            cameras: CameraPairRecord {
                cam1: pair.cam1.clone(),
                cam2: pair.cam2.clone(),
            },
            f_gt: rows(pair.f_gt.matrix()),
            e_gt: rows(pair.e_gt.matrix()),
            points: pair.points.clone(),
        };
        write_json(&self.gt_dir().join("scene.json"), &record)?;
        write_correspondences(&self.gt_dir().join("correspondences.csv"), &pair.corrs)
    }

    /// Reads `gt/`. F is recomposed from the stored cameras; patch
    /// correspondences are rebuilt from the pixel correspondences.
    pub fn read_ground_truth(&self) -> Result<GroundTruth> {
        let record: SceneRecord = read_json(&self.gt_dir().join("scene.json"))?;
        let size = record.cameras.cam1.image_size();
        let file = read_correspondences(&self.gt_dir().join("correspondences.csv"), size)?;
        if let Some(r) = file.rejected.first() {
            return Err(TensorIoError::Parse {
                line: r.line,
                message: r.reason.clone(),
            });
        }
        let f_gt = record
            .cameras
            .fundamental()
            .map_err(|e| TensorIoError::Invalid(format!("ground-truth cameras: {e}")))?;
        let patch_corrs = build_patch_correspondences(&file.corrs)
            .map_err(|e| TensorIoError::Invalid(format!("ground-truth correspondences: {e}")))?;
        Ok(GroundTruth {
            cameras: record.cameras.clone(),
            f_gt,
            corrs: file.corrs,
            patch_corrs,
            record,
        })
    }

    /// `matches.csv` when present. Rows failing validation are dropped.
    pub fn read_matches(&self, image_size: (u32, u32)) -> Result<Option<Vec<Correspondence>>> {
        let path = self.matches_path();
        if !path.is_file() {
            return Ok(None);
        }
        Ok(Some(read_correspondences(&path, image_size)?.corrs))
    }

    /// Layers with an attention file on disk, ascending.
    pub fn attention_layers(&self) -> Vec<u32> {
        (0..NUM_LAYERS)
            .filter(|&l| self.attention_path(l).is_file())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene_retrying, CameraConfigMode};

    fn manifest(pair: &ScenePair) -> RunManifest {
        RunManifest {
            schema_version: RUN_MANIFEST_VERSION,
            scene_id: "scene0000_pair0".into(),
            mode: "small".into(),
            focal_length_mm: 50.0,
            cameras: CameraPairRecord {
                cam1: pair.cam1.clone(),
                cam2: pair.cam2.clone(),
            },
            layers: (0..24).collect(),
            n_heads: 16,
            token_layout: TokenLayout::default(),
            attention: AttentionExport {
                storage: AttentionStorageKind::TopK,
                k: Some(32),
                space: AttentionSpace::Probabilities,
            },
            intervention: None,
            occlusion: None,
            condition: None,
            exporter_version: EXPORTER_VERSION.into(),
            model: ModelId::Stub,
        }
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let pair =
            generate_scene_retrying(&SceneConfig::new(CameraConfigMode::Small, 50.0, 40, 1), 10)
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path()).pair(RunKey {
            scene: "scene0000_pair0".into(),
            mode: "small".into(),
            focal: "50mm".into(),
        });
        let m = manifest(&pair);
        run.write_manifest(&m).unwrap();
        assert_eq!(run.read_manifest().unwrap(), m);
        let json = fs::read_to_string(run.manifest_path()).unwrap();
        assert!(json.contains("\"model\": \"stub\""));

        let mut bad = m.clone();
        bad.n_heads = 8;
        assert!(bad.validate().is_err());
        let mut bad = m.clone();
        bad.layers.push(24);
        assert!(bad.validate().is_err());
        let mut bad = m;
        bad.attention.k = None;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ground_truth_and_discovery() {
        let pair =
            generate_scene_retrying(&SceneConfig::new(CameraConfigMode::Medium, 35.0, 40, 2), 10)
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let root = RunDir::new(dir.path());
        let keys = [
            ("b", "small", "50mm"),
            ("a", "stereo", "24mm"),
            ("a", "large", "24mm"),
        ];
        for (s, m, f) in keys {
            let run = root.pair(RunKey {
                scene: s.into(),
                mode: m.into(),
                focal: f.into(),
            });
            run.write_manifest(&manifest(&pair)).unwrap();
            run.write_ground_truth(&pair).unwrap();
        }
        fs::create_dir_all(dir.path().join("c/small/50mm")).unwrap();
        let found: Vec<String> = root
            .discover()
            .unwrap()
            .iter()
            .map(|r| r.key.to_string())
            .collect();
        assert_eq!(found, vec!["a/large/24mm", "a/stereo/24mm", "b/small/50mm"]);

        let gt = root.discover().unwrap()[0].read_ground_truth().unwrap();
        assert_eq!(gt.corrs, pair.corrs);
        assert_eq!(gt.f_gt, pair.f_gt);
        assert_eq!(gt.patch_corrs, pair.patch_corrs);
    }

    #[test]
    fn features_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features_L3.epgt");
        let f = TokenFeatures::camera(3, vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]).unwrap();
        write_features(&path, &f, DType::F64).unwrap();
        let back = read_features(&path, 3).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.view(1), &[4.0, 5.0, 6.0]);
        write_tensor(
            &path,
            &Tensor::f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(read_features(&path, 3).unwrap().dim, 2);
        write_tensor(&path, &Tensor::f32(vec![3, 2], vec![0.0; 6]).unwrap()).unwrap();
        assert!(read_features(&path, 3).is_err());
    }
}
