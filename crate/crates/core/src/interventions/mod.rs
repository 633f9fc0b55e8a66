//! Attention-knockout interventions: specifications handed to the exporter,
//! target selection from matching matrices, a reference simulator for
//! conformance checks, and before/after evaluation of geometric output.

mod evaluate;
mod simulate;

pub use evaluate::{
    evaluate_intervention, ordered_by_degradation, score_pair, score_run, InterventionOutcome,
    Readout, ScenePairing, SceneScore,
};
pub use simulate::{simulate_knockout, softmax_row};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{NUM_HEADS, NUM_LAYERS};
use crate::rng::stream_rng;
use crate::scene::PatchCorrespondences;
use crate::tensor_io::TensorIoError;

pub const INTERVENTION_SPEC_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error("invalid intervention spec: {0}")]
    Schema(String),
    #[error("layer range {0}..={1} selects nothing")]
    EmptyRange(u32, u32),
    #[error("matching matrix must be {NUM_LAYERS}x{NUM_HEADS}")]
    MatrixShape,
    #[error("simulation needs a dense attention record")]
    NeedsDense,
    #[error("re-softmax knockout needs pre-softmax logits")]
    NeedsLogits,
    #[error("localized knockout needs patch correspondences")]
    MissingCorrespondences,
    #[error("baseline and intervened runs cover different scenes: {0}")]
    ScenesMismatch(String),
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error(transparent)]
    Probe(#[from] crate::probing::ProbeError),
}

pub type Result<T> = std::result::Result<T, InterventionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadTarget {
    pub layer: u32,
    pub head: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnockoutMode {
    /// The whole attention map of each targeted head.
    FullMapZero,
    /// For every patch with a correspondence, its attention into the other
    /// view.
    CorrespondingRowZero,
    /// Only the true corresponding columns of those rows, masked before the
    /// softmax so each row is renormalized.
    TargetedZeroResoftmax,
}

impl KnockoutMode {
    pub fn is_localized(self) -> bool {
        self != KnockoutMode::FullMapZero
    }
}

/// Where zeroing happens for [`KnockoutMode::FullMapZero`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnockoutVariant {
    /// Probabilities of the targeted heads set to zero.
    #[default]
    PostSoftmaxZero,
    /// Scores of the targeted heads set to zero before the softmax, which
    /// leaves uniform rows.
    PreSoftmaxMask,
}

impl KnockoutVariant {
    pub fn name(self) -> &'static str {
        match self {
            KnockoutVariant::PostSoftmaxZero => "post_softmax_zero",
            KnockoutVariant::PreSoftmaxMask => "pre_softmax_mask",
        }
    }
}

/// Patch correspondences for the localized modes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source", deny_unknown_fields)]
pub enum CorrespondenceRef {
    /// Each run's own `gt/correspondences.csv`.
    GroundTruth,
    /// Explicit `(view-1 patch, view-2 patch)` pairs.
    Inline { pairs: Vec<(u32, u32)> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSpec {
    pub schema_version: u32,
    pub label: String,
    pub mode: KnockoutMode,
    #[serde(default)]
    pub variant: KnockoutVariant,
    pub targets: Vec<HeadTarget>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correspondences: Option<CorrespondenceRef>,
}

impl InterventionSpec {
    pub fn new(label: impl Into<String>, mode: KnockoutMode, targets: Vec<HeadTarget>) -> Self {
        let correspondences = mode
            .is_localized()
            .then_some(CorrespondenceRef::GroundTruth);
        Self {
            schema_version: INTERVENTION_SPEC_VERSION,
            label: label.into(),
            mode,
            variant: KnockoutVariant::default(),
            targets,
            correspondences,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(InterventionError::Schema(m));
        if self.schema_version != INTERVENTION_SPEC_VERSION {
            return bad(format!(
                "schema_version {} is not {INTERVENTION_SPEC_VERSION}",
                self.schema_version
            ));
        }
        if self.targets.is_empty() {
            return bad("no targets".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.targets {
            if t.layer >= NUM_LAYERS || t.head >= NUM_HEADS {
                return bad(format!(
                    "target (layer {}, head {}) out of range",
                    t.layer, t.head
                ));
            }
            if !seen.insert(*t) {
                return bad(format!(
                    "duplicate target (layer {}, head {})",
                    t.layer, t.head
                ));
            }
        }
        match (self.mode.is_localized(), &self.correspondences) {
            (true, None) => {
                return bad(format!("{:?} needs a correspondence reference", self.mode))
            }
            (false, Some(_)) => {
                return bad("full_map_zero takes no correspondence reference".into())
            }
            _ => {}
        }
        if self.mode.is_localized() && self.variant != KnockoutVariant::PostSoftmaxZero {
            return bad(format!(
                "variant {} applies to full_map_zero only",
                self.variant.name()
            ));
        }
        if let Some(CorrespondenceRef::Inline { pairs }) = &self.correspondences {
            let n = crate::scene::NUM_PATCHES;
            if pairs.is_empty() || pairs.iter().any(|&(a, b)| a >= n || b >= n) {
                return bad("inline pairs must be nonempty patch indices below 1369".into());
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| InterventionError::Schema(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self =
            serde_json::from_str(text).map_err(|e| InterventionError::Schema(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Targets in `layer`, ascending by head.
    pub fn heads_in_layer(&self, layer: u32) -> Vec<u32> {
        let mut h: Vec<u32> = self
            .targets
            .iter()
            .filter(|t| t.layer == layer)
            .map(|t| t.head)
            .collect();
        h.sort_unstable();
        h
    }

    /// Patch correspondences for a localized mode, taking ground truth from
    /// the caller when the spec refers to it.
    pub fn resolve_correspondences(
        &self,
        ground_truth: Option<&PatchCorrespondences>,
    ) -> Result<PatchCorrespondences> {
        match &self.correspondences {
            Some(CorrespondenceRef::Inline { pairs }) => {
                Ok(PatchCorrespondences::from_pairs(pairs.iter().copied()))
            }
            Some(CorrespondenceRef::GroundTruth) => ground_truth
                .cloned()
                .ok_or(InterventionError::MissingCorrespondences),
            None => Ok(PatchCorrespondences::default()),
        }
    }
}

pub fn serialize_spec(spec: &InterventionSpec) -> Result<String> {
    spec.to_json()
}

pub fn parse_spec(text: &str) -> Result<InterventionSpec> {
    InterventionSpec::from_json(text)
}

pub const EARLY_LAYERS: (u32, u32) = (0, 7);
pub const LATE_LAYERS: (u32, u32) = (18, 23);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TargetStrategy {
    /// The `k` most accurate heads of every layer in `first..=last`.
    TopKHeadsInLayerRange { first: u32, last: u32, k: u32 },
    /// `count` distinct seeded random heads from layers 0–7.
    RandomEarly { count: u32 },
    /// `count` distinct seeded random heads from layers 18–23.
    RandomLate { count: u32 },
}

fn check_range(first: u32, last: u32) -> Result<()> {
    if first > last || last >= NUM_LAYERS {
        return Err(InterventionError::EmptyRange(first, last));
    }
    Ok(())
}

/// Picks knockout targets from a `[layer][head]` accuracy matrix. Output is
/// sorted by layer then head. Ties prefer the lower head index; NaN cells
/// are never chosen by the top-k strategy.
pub fn select_targets(
    matrix: &[Vec<f64>],
    strategy: TargetStrategy,
    seed: u64,
) -> Result<Vec<HeadTarget>> {
    if matrix.len() != NUM_LAYERS as usize || matrix.iter().any(|r| r.len() != NUM_HEADS as usize) {
        return Err(InterventionError::MatrixShape);
    }
    let random = |(first, last): (u32, u32), count: u32, stream: u64| -> Result<Vec<HeadTarget>> {
        check_range(first, last)?;
        let pool = (last - first + 1) * NUM_HEADS;
        if count == 0 || count > pool {
            return Err(InterventionError::Schema(format!(
                "count {count} must lie in 1..={pool}"
            )));
        }
        let mut rng = stream_rng(seed, stream);
        let mut out: Vec<HeadTarget> = sample(&mut rng, pool as usize, count as usize)
            .into_iter()
            .map(|i| HeadTarget {
                layer: first + i as u32 / NUM_HEADS,
                head: i as u32 % NUM_HEADS,
            })
            .collect();
        out.sort();
        Ok(out)
    };
    match strategy {
        TargetStrategy::TopKHeadsInLayerRange { first, last, k } => {
            check_range(first, last)?;
            if k == 0 || k > NUM_HEADS {
                return Err(InterventionError::Schema(format!(
                    "k {k} must lie in 1..={NUM_HEADS}"
                )));
            }
            let mut out = Vec::new();
            for layer in first..=last {
                let row = &matrix[layer as usize];
                let mut heads: Vec<u32> = (0..NUM_HEADS)
                    .filter(|&h| !row[h as usize].is_nan())
                    .collect();
                heads.sort_by(|&a, &b| row[b as usize].total_cmp(&row[a as usize]).then(a.cmp(&b)));
                let mut chosen: Vec<u32> = heads.into_iter().take(k as usize).collect();
                chosen.sort_unstable();
                out.extend(chosen.into_iter().map(|head| HeadTarget { layer, head }));
            }
            Ok(out)
        }
        TargetStrategy::RandomEarly { count } => random(EARLY_LAYERS, count, 1),
        TargetStrategy::RandomLate { count } => random(LATE_LAYERS, count, 2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(layer: u32, head: u32) -> HeadTarget {
        HeadTarget { layer, head }
    }

    #[test]
    fn round_trip_and_schema_errors() {
        let spec = InterventionSpec::new(
            "mid",
            KnockoutMode::FullMapZero,
            vec![t(12, 3), t(13, 7), t(14, 0)],
        );
        let json = serialize_spec(&spec).unwrap();
        assert_eq!(parse_spec(&json).unwrap(), spec);

        let unknown = json.replace("full_map_zero", "half_map_zero");
        assert!(matches!(
            parse_spec(&unknown),
            Err(InterventionError::Schema(_))
        ));

        let mut missing =
            InterventionSpec::new("x", KnockoutMode::TargetedZeroResoftmax, vec![t(1, 1)]);
        missing.correspondences = None;
        assert!(matches!(
            missing.validate(),
            Err(InterventionError::Schema(_))
        ));
        let text = serde_json::to_string(&missing).unwrap();
        assert!(matches!(
            parse_spec(&text),
            Err(InterventionError::Schema(_))
        ));

        for bad in [
            vec![],
            vec![t(24, 0)],
            vec![t(0, 16)],
            vec![t(3, 3), t(3, 3)],
        ] {
            let s = InterventionSpec {
                targets: bad,
                ..spec.clone()
            };
            assert!(s.validate().is_err());
        }
        let wrong_version = json.replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(parse_spec(&wrong_version).is_err());
    }

    #[test]
    fn inline_pairs_round_trip() {
        let mut spec =
            InterventionSpec::new("rows", KnockoutMode::CorrespondingRowZero, vec![t(12, 1)]);
        spec.correspondences = Some(CorrespondenceRef::Inline {
            pairs: vec![(1, 2), (3, 4)],
        });
        let back = parse_spec(&serialize_spec(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        let pc = back.resolve_correspondences(None).unwrap();
        assert_eq!(pc.pairs(), vec![(1, 2), (3, 4)]);
        let gt = InterventionSpec::new("rows", KnockoutMode::CorrespondingRowZero, vec![t(12, 1)]);
        assert!(matches!(
            gt.resolve_correspondences(None),
            Err(InterventionError::MissingCorrespondences)
        ));
    }

    #[test]
    fn pre_softmax_variant_only_for_full_maps() {
        let mut spec =
            InterventionSpec::new("rows", KnockoutMode::CorrespondingRowZero, vec![t(12, 1)]);
        spec.variant = KnockoutVariant::PreSoftmaxMask;
        assert!(spec.validate().is_err());
        let mut full = InterventionSpec::new("full", KnockoutMode::FullMapZero, vec![t(12, 1)]);
        full.variant = KnockoutVariant::PreSoftmaxMask;
        assert!(
            parse_spec(&serialize_spec(&full).unwrap()).unwrap().variant
                == KnockoutVariant::PreSoftmaxMask
        );
    }

    fn matrix() -> Vec<Vec<f64>> {
        (0..24)
            .map(|l| (0..16).map(|h| ((l * 16 + h) % 7) as f64 * 0.01).collect())
            .collect()
    }

    #[test]
    fn top_k_picks_the_best_heads() {
        let mut m = matrix();
        m[13][3] = 1.0;
        m[13][7] = 1.0;
        let picked = select_targets(
            &m,
            TargetStrategy::TopKHeadsInLayerRange {
                first: 13,
                last: 13,
                k: 2,
            },
            0,
        )
        .unwrap();
        assert_eq!(picked, vec![t(13, 3), t(13, 7)]);
        let wide = select_targets(
            &m,
            TargetStrategy::TopKHeadsInLayerRange {
                first: 12,
                last: 15,
                k: 2,
            },
            0,
        )
        .unwrap();
        assert_eq!(wide.len(), 8);
        assert!(wide.contains(&t(13, 3)) && wide.contains(&t(13, 7)));
        let flat = vec![vec![0.5; 16]; 24];
        let ties = select_targets(
            &flat,
            TargetStrategy::TopKHeadsInLayerRange {
                first: 0,
                last: 0,
                k: 2,
            },
            0,
        )
        .unwrap();
        assert_eq!(ties, vec![t(0, 0), t(0, 1)]);
    }

    #[test]
    fn random_baselines_are_seeded_and_confined() {
        let m = matrix();
        let a = select_targets(&m, TargetStrategy::RandomEarly { count: 4 }, 9).unwrap();
        assert_eq!(
            a,
            select_targets(&m, TargetStrategy::RandomEarly { count: 4 }, 9).unwrap()
        );
        assert!(a.iter().all(|x| x.layer <= 7));
        let late = select_targets(&m, TargetStrategy::RandomLate { count: 96 }, 9).unwrap();
        assert_eq!(late.len(), 96);
        assert!(late.iter().all(|x| (18..=23).contains(&x.layer)));
        assert!(select_targets(&m, TargetStrategy::RandomLate { count: 97 }, 9).is_err());
    }

    #[test]
    fn bad_ranges_and_shapes() {
        let m = matrix();
        assert!(matches!(
            select_targets(
                &m,
                TargetStrategy::TopKHeadsInLayerRange {
                    first: 15,
                    last: 12,
                    k: 1
                },
                0
            ),
            Err(InterventionError::EmptyRange(15, 12))
        ));
        assert!(matches!(
            select_targets(
                &m,
                TargetStrategy::TopKHeadsInLayerRange {
                    first: 20,
                    last: 24,
                    k: 1
                },
                0
            ),
            Err(InterventionError::EmptyRange(..))
        ));
        assert!(matches!(
            select_targets(&m[..3], TargetStrategy::RandomEarly { count: 1 }, 0),
            Err(InterventionError::MatrixShape)
        ));
    }
}
