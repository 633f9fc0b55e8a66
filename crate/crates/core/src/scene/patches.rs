use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector2;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{Result, SceneError, ScenePair};
use crate::geometry::Correspondence;
use crate::rng::seeded;

pub const IMAGE_SIZE_PX: u32 = 518;
pub const PATCH_SIZE_PX: u32 = 14;
pub const PATCH_GRID: u32 = IMAGE_SIZE_PX / PATCH_SIZE_PX;
pub const NUM_PATCHES: u32 = PATCH_GRID * PATCH_GRID;
pub const OCCLUSION_SPEC_VERSION: u32 = 1;

/// Row-major patch index of a pixel, `floor(y/14)·37 + floor(x/14)`.
pub fn pixel_to_patch(p: &Vector2<f64>) -> Result<u32> {
    let size = f64::from(IMAGE_SIZE_PX);
    if !(p.x >= 0.0 && p.y >= 0.0 && p.x < size && p.y < size) {
        return Err(SceneError::OutOfBounds {
            x: p.x,
            y: p.y,
            size: IMAGE_SIZE_PX,
        });
    }
    let col = (p.x / f64::from(PATCH_SIZE_PX)).floor() as u32;
    let row = (p.y / f64::from(PATCH_SIZE_PX)).floor() as u32;
    Ok(row * PATCH_GRID + col)
}

/// `(row, col)` of a patch on the 37×37 grid.
pub fn patch_coords(patch: u32) -> (u32, u32) {
    (patch / PATCH_GRID, patch % PATCH_GRID)
}

/// The patch and its 8-neighborhood, clipped at the grid border, ascending.
pub fn patch_neighborhood(patch: u32) -> Vec<u32> {
    let (r, c) = patch_coords(patch);
    let mut out = Vec::with_capacity(9);
    for rr in r.saturating_sub(1)..=(r + 1).min(PATCH_GRID - 1) {
        for cc in c.saturating_sub(1)..=(c + 1).min(PATCH_GRID - 1) {
            out.push(rr * PATCH_GRID + cc);
        }
    }
    out
}

/// Direction of a query: from a source view's patches to the other view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "1->2")]
    OneToTwo,
    #[serde(rename = "2->1")]
    TwoToOne,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::OneToTwo, Direction::TwoToOne];

    /// 0-based index of the view whose patches issue the queries.
    pub fn source_view(self) -> u8 {
        match self {
            Self::OneToTwo => 0,
            Self::TwoToOne => 1,
        }
    }

    pub fn target_view(self) -> u8 {
        1 - self.source_view()
    }

    pub fn reversed(self) -> Self {
        match self {
            Self::OneToTwo => Self::TwoToOne,
            Self::TwoToOne => Self::OneToTwo,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::OneToTwo => "1->2",
            Self::TwoToOne => "2->1",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Direction {
    type Err = SceneError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1->2" | "12" | "1to2" => Ok(Self::OneToTwo),
            "2->1" | "21" | "2to1" => Ok(Self::TwoToOne),
            other => Err(SceneError::InvalidConfig(format!(
                "unknown direction {other:?}"
            ))),
        }
    }
}

/// Patch-level ground truth in both directions. A source patch maps to every
/// target patch containing the counterpart of any of its pixels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PatchCorrespondences {
    forward: BTreeMap<u32, BTreeSet<u32>>,
    backward: BTreeMap<u32, BTreeSet<u32>>,
}

impl PatchCorrespondences {
    pub fn insert(&mut self, patch1: u32, patch2: u32) {
        self.forward.entry(patch1).or_default().insert(patch2);
        self.backward.entry(patch2).or_default().insert(patch1);
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut out = Self::default();
        for (a, b) in pairs {
            out.insert(a, b);
        }
        out
    }

    pub fn map(&self, direction: Direction) -> &BTreeMap<u32, BTreeSet<u32>> {
        match direction {
            Direction::OneToTwo => &self.forward,
            Direction::TwoToOne => &self.backward,
        }
    }

    pub fn targets(&self, direction: Direction, source: u32) -> Option<&BTreeSet<u32>> {
        self.map(direction).get(&source)
    }

    /// All `(view-1 patch, view-2 patch)` pairs, ascending.
    pub fn pairs(&self) -> Vec<(u32, u32)> {
        self.forward
            .iter()
            .flat_map(|(&a, bs)| bs.iter().map(move |&b| (a, b)))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Keeps only the relations whose view-2 patch satisfies `keep`.
    pub fn filter_view2(&self, keep: impl Fn(u32) -> bool) -> Self {
        Self::from_pairs(self.pairs().into_iter().filter(|&(_, b)| keep(b)))
    }
}

pub fn build_patch_correspondences(corrs: &[Correspondence]) -> Result<PatchCorrespondences> {
    let mut out = PatchCorrespondences::default();
    for c in corrs {
        out.insert(pixel_to_patch(&c.p1())?, pixel_to_patch(&c.p2())?);
    }
    Ok(out)
}

/// White-patch occlusion of one view, applied by the exporter before
/// inference. Each target patch is masked together with its clipped 3×3
/// neighborhood.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionSpec {
    pub schema_version: u32,
    /// 0-based index of the occluded view.
    pub view: u8,
    pub patch_size_px: u32,
    pub grid: u32,
    /// Central patches, ascending; heads-matched metrics are read here.
    pub target_patches: Vec<u32>,
    /// Union of the targets' neighborhoods, ascending.
    pub masked_patches: Vec<u32>,
    pub fill_rgb: [u8; 3],
    pub seed: u64,
}

impl OcclusionSpec {
    pub fn new(view: u8, target_patches: Vec<u32>, seed: u64) -> Self {
        let mut targets = target_patches;
        targets.sort_unstable();
        targets.dedup();
        let masked: BTreeSet<u32> = targets
            .iter()
            .flat_map(|&p| patch_neighborhood(p))
            .collect();
        Self {
            schema_version: OCCLUSION_SPEC_VERSION,
            view,
            patch_size_px: PATCH_SIZE_PX,
            grid: PATCH_GRID,
            target_patches: targets,
            masked_patches: masked.into_iter().collect(),
            fill_rgb: [255, 255, 255],
            seed,
        }
    }

    pub fn is_masked_pixel(&self, x: u32, y: u32) -> bool {
        if x >= IMAGE_SIZE_PX || y >= IMAGE_SIZE_PX {
            return false;
        }
        let patch = (y / PATCH_SIZE_PX) * PATCH_GRID + x / PATCH_SIZE_PX;
        self.masked_patches.binary_search(&patch).is_ok()
    }

    /// Half-open pixel rectangle `(x0, y0, x1, y1)` covered by a patch.
    pub fn patch_rect(patch: u32) -> (u32, u32, u32, u32) {
        let (r, c) = patch_coords(patch);
        (
            c * PATCH_SIZE_PX,
            r * PATCH_SIZE_PX,
            (c + 1) * PATCH_SIZE_PX,
            (r + 1) * PATCH_SIZE_PX,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SceneError::InvalidConfig(msg));
        if self.schema_version != OCCLUSION_SPEC_VERSION {
            return bad(format!(
                "unsupported occlusion schema_version {}",
                self.schema_version
            ));
        }
        if self.view > 1 {
            return bad(format!("view must be 0 or 1, got {}", self.view));
        }
        if self.patch_size_px != PATCH_SIZE_PX || self.grid != PATCH_GRID {
            return bad("patch geometry must be 14 px on a 37x37 grid".into());
        }
        if let Some(p) = self
            .target_patches
            .iter()
            .chain(&self.masked_patches)
            .find(|&&p| p >= NUM_PATCHES)
        {
            return bad(format!("patch index {p} out of range"));
        }
        let expected = Self::new(self.view, self.target_patches.clone(), self.seed);
        if expected.target_patches != self.target_patches
            || expected.masked_patches != self.masked_patches
        {
            return bad(
                "masked_patches must be the sorted union of the targets' 3x3 neighborhoods".into(),
            );
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("occlusion spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self =
            serde_json::from_str(s).map_err(|e| SceneError::InvalidConfig(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Picks `n_targets` view-2 patches that have known correspondences.
pub fn make_occlusion_spec(pair: &ScenePair, n_targets: usize, seed: u64) -> Result<OcclusionSpec> {
    let candidates: Vec<u32> = pair
        .patch_corrs
        .map(Direction::TwoToOne)
        .keys()
        .copied()
        .collect();
    if candidates.len() < n_targets {
        return Err(SceneError::InsufficientCorrespondences {
            needed: n_targets,
            found: candidates.len(),
        });
    }
    let mut rng = seeded(seed);
    let targets = index::sample(&mut rng, candidates.len(), n_targets)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    Ok(OcclusionSpec::new(1, targets, seed))
}
