use std::collections::BTreeMap;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::{InterventionError, Result};
use crate::geometry::{compose_fundamental, Correspondence, FundamentalMatrix};
use crate::probing::ProbeModel;
use crate::stats::median;
use crate::tensor_io::{GroundTruth, PairRun};

/// How a run's fundamental matrix is read out.
#[derive(Debug, Clone, Copy)]
pub enum Readout<'a> {
    /// Compose F from the exported predicted cameras.
    PredictedCameras,
    /// Apply a trained probe to the run's camera-token features.
    Probe(&'a ProbeModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene: String,
    /// Median root Sampson distance (px) of the read-out F over the ground
    /// truth correspondences; infinite when no usable F exists.
    pub root_sampson_px: f64,
}

/// Median root Sampson of `f` over `corrs`, skipping points at an epipole.
pub fn score_pair(f: Option<&Matrix3<f64>>, corrs: &[Correspondence]) -> f64 {
    let Some(f) = f.and_then(|m| FundamentalMatrix::from_matrix(m).ok()) else {
        return f64::INFINITY;
    };
    let roots: Vec<f64> = corrs
        .iter()
        .filter_map(|c| f.root_sampson_error(c).ok())
        .collect();
    median(&roots).unwrap_or(f64::INFINITY)
}

pub fn score_run(run: &PairRun, gt: &GroundTruth, readout: Readout<'_>) -> Result<SceneScore> {
    let f = match readout {
        Readout::PredictedCameras => {
            let cams = run.read_predicted_cameras()?;
            compose_fundamental(&cams.cam1, &cams.cam2)
                .ok()
                .map(|f| *f.matrix())
        }
        Readout::Probe(model) => {
            let features = run.read_features(model.layer)?;
            Some(model.forward(features.flattened())?)
        }
    };
    Ok(SceneScore {
        scene: run.key.to_string(),
        root_sampson_px: score_pair(f.as_ref(), &gt.corrs),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePairing {
    pub scene: String,
    pub baseline_px: f64,
    pub intervened_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub label: String,
    pub baseline_px: f64,
    pub intervened_px: f64,
    /// `intervened_px - baseline_px`.
    pub delta: f64,
    pub per_scene: Vec<ScenePairing>,
}

fn index(scores: &[SceneScore], which: &str) -> Result<BTreeMap<String, f64>> {
    let mut map = BTreeMap::new();
    for s in scores {
        if map.insert(s.scene.clone(), s.root_sampson_px).is_some() {
            return Err(InterventionError::ScenesMismatch(format!(
                "{} listed twice in the {which} run",
                s.scene
            )));
        }
    }
    Ok(map)
}

/// Medians over scenes of baseline and intervened scores. Both sides must
/// cover the same scenes.
pub fn evaluate_intervention(
    label: &str,
    baseline: &[SceneScore],
    intervened: &[SceneScore],
) -> Result<InterventionOutcome> {
    let b = index(baseline, "baseline")?;
    let i = index(intervened, "intervened")?;
    if let Some(s) = b
        .keys()
        .find(|k| !i.contains_key(*k))
        .or_else(|| i.keys().find(|k| !b.contains_key(*k)))
    {
        return Err(InterventionError::ScenesMismatch(format!(
            "{s} is missing from one side"
        )));
    }
    if b.is_empty() {
        return Err(InterventionError::Empty);
    }
    let per_scene: Vec<ScenePairing> = b
        .iter()
        .map(|(scene, &bv)| ScenePairing {
            scene: scene.clone(),
            baseline_px: bv,
            intervened_px: i[scene],
        })
        .collect();
    let bm = median(&per_scene.iter().map(|p| p.baseline_px).collect::<Vec<_>>())
        .ok_or(InterventionError::Empty)?;
    let im = median(
        &per_scene
            .iter()
            .map(|p| p.intervened_px)
            .collect::<Vec<_>>(),
    )
    .ok_or(InterventionError::Empty)?;
    Ok(InterventionOutcome {
        label: label.to_string(),
        baseline_px: bm,
        intervened_px: im,
        delta: im - bm,
        per_scene,
    })
}

/// Outcomes from most to least degrading; ties keep label order.
pub fn ordered_by_degradation(outcomes: &[InterventionOutcome]) -> Vec<&InterventionOutcome> {
    let mut v: Vec<&InterventionOutcome> = outcomes.iter().collect();
    v.sort_by(|a, b| {
        b.delta
            .total_cmp(&a.delta)
            .then_with(|| a.label.cmp(&b.label))
    });
    v
}
