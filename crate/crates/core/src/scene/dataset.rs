//! Dataset manifests: which scene/configuration/pair combinations exist and
//! which split each scene belongs to.

use serde::{Deserialize, Serialize};

use super::{focal_index, Ambiguity, CameraConfigMode, Result, SceneConfig, SceneError};
use crate::rng::derive_seed;

pub const MANIFEST_VERSION: u32 = 1;
pub const PAIRS_PER_SCENE: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(SceneError::InvalidConfig(format!(
                "unknown split {other:?}"
            ))),
        }
    }
}

/// Scenes are dealt round-robin into `categories` buckets; within a bucket
/// the first `train` instances train, the next `val` validate and the next
/// `test` test, repeating for larger datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub categories: u32,
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            categories: 10,
            train: 15,
            val: 2,
            test: 2,
        }
    }
}

impl SplitPlan {
    pub fn category(&self, scene_index: u32) -> u32 {
        scene_index % self.categories.max(1)
    }

    pub fn split_of(&self, scene_index: u32) -> Split {
        let instance = scene_index / self.categories.max(1);
        let r = instance % (self.train + self.val + self.test).max(1);
        if r < self.train {
            Split::Train
        } else if r < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }

    /// Scene count covering every category's full instance quota.
    pub fn full_size(&self) -> u32 {
        self.categories * (self.train + self.val + self.test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub modes: Vec<CameraConfigMode>,
    pub focals_mm: Vec<f64>,
    pub n_scenes: u32,
    #[serde(default = "default_pairs")]
    pub pairs_per_scene: u32,
    pub n_points: usize,
    #[serde(default = "default_ambiguity")]
    pub ambiguity: Ambiguity,
    #[serde(default)]
    pub split_plan: SplitPlan,
    /// Forces every scene into one split.
    #[serde(default)]
    pub split_override: Option<Split>,
    pub seed: u64,
}

fn default_pairs() -> u32 {
    PAIRS_PER_SCENE
}

fn default_ambiguity() -> Ambiguity {
    Ambiguity::Unique
}

impl GenerateRequest {
    pub fn full_grid(n_scenes: u32, n_points: usize, seed: u64) -> Self {
        Self {
            modes: CameraConfigMode::ALL.to_vec(),
            focals_mm: super::FOCAL_LENGTHS_MM.to_vec(),
            n_scenes,
            pairs_per_scene: PAIRS_PER_SCENE,
            n_points,
            ambiguity: Ambiguity::Unique,
            split_plan: SplitPlan::default(),
            split_override: None,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePairEntry {
    pub pair_index: u32,
    /// Run-directory path relative to the run root.
    pub rel_dir: String,
    pub config: SceneConfig,
}

/// One scene under one camera configuration and focal length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGroup {
    pub scene_id: String,
    pub scene_index: u32,
    pub category: u32,
    pub split: Split,
    pub mode: CameraConfigMode,
    pub focal_length_mm: f64,
    pub pairs: Vec<ScenePairEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub request: GenerateRequest,
    pub groups: Vec<SceneGroup>,
}

pub fn scene_id(scene_index: u32) -> String {
    format!("scene{scene_index:04}")
}

/// `<scene>_pair<p>/<mode>/<focal>mm`.
pub fn pair_rel_dir(
    scene_index: u32,
    pair_index: u32,
    mode: CameraConfigMode,
    focal_mm: f64,
) -> String {
    format!(
        "{}_pair{pair_index}/{}/{}mm",
        scene_id(scene_index),
        mode.name(),
        focal_mm
    )
}

impl DatasetManifest {
    /// Enumerates scenes × modes × focal lengths, each group holding its
    /// camera pairs. Points depend only on the scene; cameras on the pair.
    pub fn build(request: &GenerateRequest) -> Result<Self> {
        if let Some(f) = request
            .focals_mm
            .iter()
            .find(|f| focal_index(**f).is_none())
        {
            return Err(SceneError::InvalidConfig(format!(
                "focal length {f} mm is not a legal value"
            )));
        }
        if request.modes.is_empty() || request.focals_mm.is_empty() || request.pairs_per_scene == 0
        {
            return Err(SceneError::InvalidConfig(
                "empty mode, focal or pair list".into(),
            ));
        }
        let mut groups = Vec::new();
        for scene_index in 0..request.n_scenes {
            let scene_seed = derive_seed(request.seed, &[u64::from(scene_index)]);
            for &mode in &request.modes {
                for &focal in &request.focals_mm {
                    let pairs = (0..request.pairs_per_scene)
                        .map(|pair_index| ScenePairEntry {
                            pair_index,
                            rel_dir: pair_rel_dir(scene_index, pair_index, mode, focal),
                            config: SceneConfig::new(mode, focal, request.n_points, scene_seed)
                                .with_ambiguity(request.ambiguity)
                                .with_pair_index(pair_index),
                        })
                        .collect();
                    groups.push(SceneGroup {
                        scene_id: scene_id(scene_index),
                        scene_index,
                        category: request.split_plan.category(scene_index),
                        split: request
                            .split_override
                            .unwrap_or_else(|| request.split_plan.split_of(scene_index)),
                        mode,
                        focal_length_mm: focal,
                        pairs,
                    });
                }
            }
        }
        Ok(Self {
            schema_version: MANIFEST_VERSION,
            request: request.clone(),
            groups,
        })
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&SceneGroup, &ScenePairEntry)> {
        self.groups
            .iter()
            .flat_map(|g| g.pairs.iter().map(move |p| (g, p)))
    }

    /// Split of every run, keyed by its relative directory.
    pub fn splits_by_dir(&self) -> std::collections::BTreeMap<String, Split> {
        self.pairs()
            .map(|(g, p)| (p.rel_dir.clone(), g.split))
            .collect()
    }
}
