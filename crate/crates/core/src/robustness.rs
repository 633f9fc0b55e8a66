//! Perturbation studies: occlusion, focal-length sweeps, repeated-object
//! ambiguity and externally labeled conditions.
//!
//! Every study reduces to trials of a method on one scene pair. A trial
//! fails when the method yields no model or the model's median root Sampson
//! error over the evaluation correspondences exceeds
//! [`FAILURE_THRESHOLD_PX`](crate::estimators::FAILURE_THRESHOLD_PX). The
//! evaluation set is the pair's ground-truth correspondences, shared by all
//! methods of a condition.
//!
//! Trials run in parallel; the reduction follows configuration order, so a
//! re-run with the same seed is bit-identical.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{compare_heads_matched, AttentionError, HeadsMatchedComparison, NUM_LAYERS};
use crate::estimators::{classify_failure, eight_point, ransac_fundamental, RansacConfig};
use crate::geometry::{compose_fundamental, Correspondence, FundamentalMatrix};
use crate::rng::{derive_seed, stream_rng};
use crate::scene::{
    add_gaussian_noise, add_outliers, ambiguous_correspondences, focal_index,
    generate_scene_retrying, thin_correspondences, Ambiguity, CameraConfigMode, Direction,
    OcclusionSpec, SceneConfig, SceneError,
};
use crate::stats::{mean, median};
use crate::tensor_io::{
    AttentionRecord, GroundTruth, PairRun, RunDir, RunKey, RunManifest, TensorIoError,
};

/// Smallest distance of injected outliers from their epipolar line, px.
pub const OUTLIER_MARGIN_PX: f64 = 5.0;
const OUTLIER_ID_BASE: u64 = 1 << 40;
const SCENE_ATTEMPTS: u32 = 50;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid study config: {0}")]
    Config(String),
    #[error("no occluded run matches clean run {0}")]
    MissingRunPair(String),
    #[error("incomplete grid: {}", .0.join("; "))]
    IncompleteGrid(Vec<String>),
    #[error("no runs selected under {0}")]
    NoRuns(PathBuf),
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

pub type Result<T> = std::result::Result<T, StudyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Occlusion,
    FocalSweep,
    Ambiguity,
    ExternalCondition,
}

impl StudyKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Occlusion => "occlusion",
            Self::FocalSweep => "focal_sweep",
            Self::Ambiguity => "ambiguity",
            Self::ExternalCondition => "external_condition",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// F composed from the run's predicted cameras.
    ModelRun,
    EightPointRansacOnFile,
    EightPointOnFile,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::ModelRun => "model_run",
            Self::EightPointRansacOnFile => "eight_point_ransac_on_file",
            Self::EightPointOnFile => "eight_point_on_file",
        }
    }
}

pub fn ambiguity_name(a: Ambiguity) -> &'static str {
    match a {
        Ambiguity::Unique => "unique",
        Ambiguity::RepeatedRing => "repeated_ring",
        Ambiguity::RepeatedRingWithShadowProxy => "repeated_ring_with_shadow_proxy",
    }
}

/// A study, usually read from TOML.
///
/// Synthetic studies (focal sweep without `run_dir`, ambiguity) generate
/// `scenes` pairs per condition; scene `i` uses the seed
/// `derive_seed(seed, [i])` in every condition, so conditions are paired.
/// Run-directory studies use every run whose mode and focal length are
/// selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub study: StudyKind,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub run_dir: Option<PathBuf>,
    #[serde(default)]
    pub occluded_run_dir: Option<PathBuf>,
    #[serde(default = "default_scenes")]
    pub scenes: u32,
    #[serde(default = "default_modes")]
    pub modes: Vec<CameraConfigMode>,
    #[serde(default = "default_focals")]
    pub focals_mm: Vec<f64>,
    #[serde(default = "default_ambiguities")]
    pub ambiguities: Vec<Ambiguity>,
    /// External-condition labels to require; empty takes every label found.
    #[serde(default)]
    pub conditions: Vec<String>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub seed: u64,
    /// Points per synthetic scene; for ring scenes, points per object copy.
    #[serde(default = "default_points")]
    pub n_points: usize,
    #[serde(default)]
    pub noise_px: f64,
    /// Share of outliers in the corrupted input, in [0, 1).
    #[serde(default)]
    pub outlier_fraction: f64,
    /// Keep at most this many input correspondences.
    #[serde(default)]
    pub thin_to: Option<usize>,
    #[serde(default = "default_threshold")]
    pub ransac_threshold_px: f64,
    #[serde(default = "default_direction")]
    pub heads_direction: Direction,
}

fn default_scenes() -> u32 {
    20
}
fn default_modes() -> Vec<CameraConfigMode> {
    vec![CameraConfigMode::Small]
}
fn default_focals() -> Vec<f64> {
    vec![50.0]
}
fn default_ambiguities() -> Vec<Ambiguity> {
    vec![
        Ambiguity::Unique,
        Ambiguity::RepeatedRing,
        Ambiguity::RepeatedRingWithShadowProxy,
    ]
}
fn default_methods() -> Vec<Method> {
    vec![Method::EightPointRansacOnFile, Method::EightPointOnFile]
}
fn default_points() -> usize {
    100
}
fn default_threshold() -> f64 {
    1.0
}
fn default_direction() -> Direction {
    Direction::TwoToOne
}

impl StudyConfig {
    pub fn new(study: StudyKind) -> Self {
        Self {
            study,
            label: None,
            run_dir: None,
            occluded_run_dir: None,
            scenes: default_scenes(),
            modes: default_modes(),
            focals_mm: default_focals(),
            ambiguities: default_ambiguities(),
            conditions: Vec::new(),
            methods: default_methods(),
            seed: 0,
            n_points: default_points(),
            noise_px: 0.0,
            outlier_fraction: 0.0,
            thin_to: None,
            ransac_threshold_px: default_threshold(),
            heads_direction: default_direction(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| StudyError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("study config serializes")
    }

    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.study.name().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(StudyError::Config(m.to_string()));
        if self.methods.is_empty() || self.modes.is_empty() || self.focals_mm.is_empty() {
            return bad("methods, modes and focals_mm must be nonempty");
        }
        if let Some(f) = self.focals_mm.iter().find(|f| focal_index(**f).is_none()) {
            return Err(StudyError::Config(format!(
                "focal length {f} mm is not one of 24, 35, 40, 50, 70, 85, 100"
            )));
        }
        if !(self.noise_px.is_finite() && self.noise_px >= 0.0) {
            return bad("noise_px must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 1)");
        }
        if !(self.ransac_threshold_px.is_finite() && self.ransac_threshold_px > 0.0) {
            return bad("ransac_threshold_px must be positive");
        }
        let synthetic = self.run_dir.is_none() && self.study != StudyKind::Occlusion;
        if synthetic && (self.scenes == 0 || self.n_points == 0) {
            return bad("synthetic studies need scenes >= 1 and n_points >= 1");
        }
        match self.study {
            StudyKind::Occlusion if self.run_dir.is_none() || self.occluded_run_dir.is_none() => {
                bad("occlusion studies need run_dir and occluded_run_dir")
            }
            StudyKind::ExternalCondition if self.run_dir.is_none() => {
                bad("external-condition studies need run_dir")
            }
            StudyKind::Ambiguity if self.run_dir.is_some() => {
                bad("ambiguity studies are synthetic; drop run_dir")
            }
            StudyKind::Ambiguity if self.ambiguities.is_empty() => {
                bad("ambiguities must be nonempty")
            }
            _ => Ok(()),
        }
    }

    fn ransac(&self, seed: u64) -> RansacConfig {
        RansacConfig {
            inlier_threshold_px: self.ransac_threshold_px,
            ..RansacConfig::with_seed(seed)
        }
    }

    /// Noise, then outliers, then thinning, all drawn from `seed`.
    fn corrupt(
        &self,
        corrs: &[Correspondence],
        f_gt: &FundamentalMatrix,
        size: (u32, u32),
        seed: u64,
    ) -> Vec<Correspondence> {
        let mut rng = stream_rng(seed, 1);
        let mut out = if self.noise_px > 0.0 {
            add_gaussian_noise(corrs, self.noise_px, &mut rng)
        } else {
            corrs.to_vec()
        };
        if self.outlier_fraction > 0.0 {
            let n_out = (self.outlier_fraction / (1.0 - self.outlier_fraction) * out.len() as f64)
                .round() as usize;
            out.extend(add_outliers(
                f_gt,
                n_out,
                OUTLIER_MARGIN_PX,
                size,
                OUTLIER_ID_BASE,
                &mut rng,
            ));
        }
        if let Some(n) = self.thin_to {
            out = thin_correspondences(&out, n, &mut rng);
        }
        out
    }
}

/// Outcome of one method on one scene pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub failure: bool,
    /// Median root Sampson over the evaluation set, when a model exists.
    pub median_root_sampson_px: Option<f64>,
}

impl Trial {
    pub fn score(f: Option<&FundamentalMatrix>, eval: &[Correspondence]) -> Self {
        let r = classify_failure(f, eval);
        Self {
            failure: r.is_failure,
            median_root_sampson_px: r.median_root_sampson_px,
        }
    }
}

/// Runs a file-based method on `input` and scores it on `eval`.
pub fn run_file_method(
    method: Method,
    input: &[Correspondence],
    eval: &[Correspondence],
    ransac: &RansacConfig,
) -> Trial {
    let f = match method {
        Method::EightPointOnFile => eight_point(input).ok(),
        Method::EightPointRansacOnFile => ransac_fundamental(input, ransac)
            .ok()
            .and_then(|r| r.fundamental),
        Method::ModelRun => None,
    };
    Trial::score(f.as_ref(), eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: String,
    pub mode: Option<String>,
    pub focal_mm: Option<f64>,
    pub method: Method,
    pub n: usize,
    pub failures: usize,
    /// `failures / n`; 1 for a condition without trials.
    pub failure_rate: f64,
    /// Over successful trials only; `None` without successes.
    pub median_root_sampson_px: Option<f64>,
}

impl ConditionRow {
    pub fn reduce(
        condition: String,
        mode: Option<String>,
        focal_mm: Option<f64>,
        method: Method,
        trials: &[Trial],
    ) -> Self {
        let n = trials.len();
        let failures = trials.iter().filter(|t| t.failure).count();
        let successes: Vec<f64> = trials
            .iter()
            .filter(|t| !t.failure)
            .filter_map(|t| t.median_root_sampson_px)
            .collect();
        Self {
            condition,
            mode,
            focal_mm,
            method,
            n,
            failures,
            failure_rate: if n == 0 {
                1.0
            } else {
                failures as f64 / n as f64
            },
            median_root_sampson_px: median(&successes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSceneRow {
    pub scene: String,
    pub method: Method,
    pub clean_px: Option<f64>,
    pub occluded_px: Option<f64>,
}

impl OcclusionSceneRow {
    pub fn delta(&self) -> Option<f64> {
        Some(self.occluded_px? - self.clean_px?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodDelta {
    pub method: Method,
    /// Mean of occluded minus clean median root Sampson, px.
    pub mean_delta_px: Option<f64>,
    /// Scenes where both runs produced a model.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchHeads {
    pub scene: String,
    pub comparison: HeadsMatchedComparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadsSummary {
    pub mean_clean: f64,
    pub mean_occluded: f64,
    /// Occluded over clean matches, summed over every recorded patch.
    pub retained_fraction: Option<f64>,
    pub per_patch: Vec<PatchHeads>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSummary {
    pub per_scene: Vec<OcclusionSceneRow>,
    pub deltas: Vec<MethodDelta>,
    /// Present when every run exports attention for all 24 layers.
    pub heads: Option<HeadsSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: StudyKind,
    pub label: String,
    pub rows: Vec<ConditionRow>,
    pub occlusion: Option<OcclusionSummary>,
    /// Grid cells without data.
    pub incomplete: Vec<String>,
}

impl StudyReport {
    /// `Err(IncompleteGrid)` when cells lacked data; the report itself stays
    /// usable.
    pub fn check_complete(&self) -> Result<()> {
        if self.incomplete.is_empty() {
            Ok(())
        } else {
            Err(StudyError::IncompleteGrid(self.incomplete.clone()))
        }
    }

    pub fn row(&self, condition: &str, method: Method) -> Option<&ConditionRow> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.method == method)
    }
}

pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    match cfg.study {
        StudyKind::Occlusion => run_occlusion_study(cfg),
        StudyKind::FocalSweep => run_focal_sweep(cfg),
        StudyKind::Ambiguity => run_ambiguity_study(cfg),
        StudyKind::ExternalCondition => run_external_condition_study(cfg),
    }
}

fn key_seed(seed: u64, key: &RunKey) -> u64 {
    let hash = key
        .to_string()
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x1000_0000_01b3)
        });
    derive_seed(seed, &[hash])
}

fn focal_label(f: f64) -> String {
    format!("{f}mm")
}

struct LoadedRun {
    run: PairRun,
    manifest: RunManifest,
    gt: GroundTruth,
}

fn load_runs(root: &PathBuf, cfg: &StudyConfig) -> Result<Vec<LoadedRun>> {
    let mut out = Vec::new();
    for run in RunDir::new(root).discover()? {
        let manifest = run.read_manifest()?;
        let selected = manifest
            .mode
            .parse::<CameraConfigMode>()
            .is_ok_and(|m| cfg.modes.contains(&m))
            && cfg.focals_mm.contains(&manifest.focal_length_mm);
        if selected {
            let gt = run.read_ground_truth()?;
            out.push(LoadedRun { run, manifest, gt });
        }
    }
    Ok(out)
}

/// Input of the file-based methods: `matches.csv` when present, otherwise
/// the ground truth minus points hidden by the run's occlusion mask,
/// corrupted per the config.
fn file_input(
    r: &LoadedRun,
    cfg: &StudyConfig,
    occlusion: Option<&OcclusionSpec>,
) -> Result<Vec<Correspondence>> {
    let size = r.gt.cameras.cam1.image_size();
    if let Some(m) = r.run.read_matches(size)? {
        return Ok(m);
    }
    let visible: Vec<Correspondence> =
        r.gt.corrs
            .iter()
            .filter(|c| {
                occlusion.is_none_or(|spec| {
                    let p = if spec.view == 0 { c.p1() } else { c.p2() };
                    !spec.is_masked_pixel(p.x.floor() as u32, p.y.floor() as u32)
                })
            })
            .copied()
            .collect();
    Ok(cfg.corrupt(&visible, &r.gt.f_gt, size, key_seed(cfg.seed, &r.run.key)))
}

fn run_trial(
    r: &LoadedRun,
    cfg: &StudyConfig,
    method: Method,
    occlusion: Option<&OcclusionSpec>,
    eval: &[Correspondence],
) -> Result<Trial> {
    Ok(match method {
        Method::ModelRun => {
            let cams = r.run.read_predicted_cameras()?;
            Trial::score(
                compose_fundamental(&cams.cam1, &cams.cam2).ok().as_ref(),
                eval,
            )
        }
        m => {
            let input = file_input(r, cfg, occlusion)?;
            run_file_method(
                m,
                &input,
                eval,
                &cfg.ransac(derive_seed(key_seed(cfg.seed, &r.run.key), &[2])),
            )
        }
    })
}

/// Trials on every run of a labeled group, for each configured method.
fn run_group(runs: &[&LoadedRun], cfg: &StudyConfig) -> Result<Vec<Vec<Trial>>> {
    let per_run: Vec<Vec<Trial>> = runs
        .par_iter()
        .map(|r| {
            cfg.methods
                .iter()
                .map(|&m| run_trial(r, cfg, m, None, &r.gt.corrs))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok((0..cfg.methods.len())
        .map(|i| per_run.iter().map(|t| t[i]).collect())
        .collect())
}

/// One synthetic trial set: a scene from the shared per-index seed,
/// matched per its ambiguity, scored for every file-based method.
fn synthetic_trials(
    cfg: &StudyConfig,
    mode: CameraConfigMode,
    focal: f64,
    ambiguity: Ambiguity,
    index: u32,
) -> Result<Vec<Trial>> {
    let seed = derive_seed(cfg.seed, &[u64::from(index)]);
    let scene_cfg = SceneConfig::new(mode, focal, cfg.n_points, seed).with_ambiguity(ambiguity);
    let pair = generate_scene_retrying(&scene_cfg, SCENE_ATTEMPTS)?;
    let matches: Vec<Correspondence> = match ambiguity {
        Ambiguity::Unique => pair.corrs.clone(),
        _ => ambiguous_correspondences(&pair)
            .into_iter()
            .map(|l| l.corr)
            .collect(),
    };
    let size = pair.cam1.image_size();
    let input = cfg.corrupt(&matches, &pair.f_gt, size, seed);
    let ransac = cfg.ransac(derive_seed(seed, &[2]));
    Ok(cfg
        .methods
        .iter()
        .filter(|&&m| m != Method::ModelRun)
        .map(|&m| run_file_method(m, &input, &pair.corrs, &ransac))
        .collect())
}

struct Cell {
    condition: String,
    mode: CameraConfigMode,
    focal: f64,
    ambiguity: Ambiguity,
}

fn run_synthetic_cells(cfg: &StudyConfig, cells: &[Cell]) -> Result<StudyReport> {
    let jobs: Vec<(usize, u32)> = (0..cells.len())
        .flat_map(|c| (0..cfg.scenes).map(move |i| (c, i)))
        .collect();
    let results: Vec<Vec<Trial>> = jobs
        .par_iter()
        .map(|&(c, i)| synthetic_trials(cfg, cells[c].mode, cells[c].focal, cells[c].ambiguity, i))
        .collect::<Result<_>>()?;
    let file_methods: Vec<Method> = cfg
        .methods
        .iter()
        .copied()
        .filter(|&m| m != Method::ModelRun)
        .collect();
    let mut rows = Vec::new();
    let mut incomplete = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        let trials = &results[c * cfg.scenes as usize..(c + 1) * cfg.scenes as usize];
        for &method in &cfg.methods {
            let column: Vec<Trial> = match file_methods.iter().position(|&m| m == method) {
                Some(j) => trials.iter().map(|t| t[j]).collect(),
                None => {
                    incomplete.push(format!(
                        "{} {}: synthetic scenes have no model run",
                        cell.condition,
                        method.name()
                    ));
                    Vec::new()
                }
            };
            rows.push(ConditionRow::reduce(
                cell.condition.clone(),
                Some(cell.mode.name().to_string()),
                Some(cell.focal),
                method,
                &column,
            ));
        }
    }
    Ok(StudyReport {
        study: cfg.study,
        label: cfg.label(),
        rows,
        occlusion: None,
        incomplete,
    })
}

/// Grid over modes × focal lengths × methods, one row per cell even when
/// the cell has no data.
pub fn run_focal_sweep(cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let Some(root) = &cfg.run_dir else {
        let cells: Vec<Cell> = cfg
            .modes
            .iter()
            .flat_map(|&mode| {
                cfg.focals_mm.iter().map(move |&focal| Cell {
                    condition: format!("{mode}/{}", focal_label(focal)),
                    mode,
                    focal,
                    ambiguity: Ambiguity::Unique,
                })
            })
            .collect();
        return run_synthetic_cells(cfg, &cells);
    };
    let runs = load_runs(root, cfg)?;
    let mut rows = Vec::new();
    let mut incomplete = Vec::new();
    for &mode in &cfg.modes {
        for &focal in &cfg.focals_mm {
            let condition = format!("{mode}/{}", focal_label(focal));
            let group: Vec<&LoadedRun> = runs
                .iter()
                .filter(|r| {
                    r.manifest.mode.parse() == Ok(mode) && r.manifest.focal_length_mm == focal
                })
                .collect();
            if group.is_empty() {
                incomplete.push(format!("{condition}: no runs"));
            }
            let trials = run_group(&group, cfg)?;
            for (&method, t) in cfg.methods.iter().zip(&trials) {
                rows.push(ConditionRow::reduce(
                    condition.clone(),
                    Some(mode.name().to_string()),
                    Some(focal),
                    method,
                    t,
                ));
            }
        }
    }
    Ok(StudyReport {
        study: cfg.study,
        label: cfg.label(),
        rows,
        occlusion: None,
        incomplete,
    })
}

/// Ambiguity levels × modes × focal lengths on synthetic ring scenes
/// matched by appearance only.
pub fn run_ambiguity_study(cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &ambiguity in &cfg.ambiguities {
        for &mode in &cfg.modes {
            for &focal in &cfg.focals_mm {
                let condition = format!(
                    "{}/{mode}/{}",
                    ambiguity_name(ambiguity),
                    focal_label(focal)
                );
                cells.push(Cell {
                    condition,
                    mode,
                    focal,
                    ambiguity,
                });
            }
        }
    }
    run_synthetic_cells(cfg, &cells)
}

/// Runs grouped by their manifest's condition label (`none` when absent).
pub fn run_external_condition_study(cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let root = cfg.run_dir.as_ref().expect("validated");
    let runs = load_runs(root, cfg)?;
    let mut groups: BTreeMap<String, Vec<&LoadedRun>> = BTreeMap::new();
    for r in &runs {
        groups
            .entry(
                r.manifest
                    .condition
                    .clone()
                    .unwrap_or_else(|| "none".into()),
            )
            .or_default()
            .push(r);
    }
    let mut incomplete = Vec::new();
    for c in &cfg.conditions {
        if !groups.contains_key(c) {
            incomplete.push(format!("{c}: no runs"));
            groups.insert(c.clone(), Vec::new());
        }
    }
    if !cfg.conditions.is_empty() {
        groups.retain(|k, _| cfg.conditions.contains(k));
    }
    if groups.is_empty() {
        return Err(StudyError::NoRuns(root.clone()));
    }
    let mut rows = Vec::new();
    for (condition, group) in &groups {
        let trials = run_group(group, cfg)?;
        for (&method, t) in cfg.methods.iter().zip(&trials) {
            rows.push(ConditionRow::reduce(
                condition.clone(),
                None,
                None,
                method,
                t,
            ));
        }
    }
    Ok(StudyReport {
        study: cfg.study,
        label: cfg.label(),
        rows,
        occlusion: None,
        incomplete,
    })
}

fn attention_stack(run: &PairRun) -> Result<Option<Vec<AttentionRecord>>> {
    if run.attention_layers().len() != NUM_LAYERS as usize {
        return Ok(None);
    }
    Ok(Some(
        (0..NUM_LAYERS)
            .map(|l| run.read_attention(l))
            .collect::<std::result::Result<_, _>>()?,
    ))
}

struct OcclusionScene {
    clean: Vec<Trial>,
    occluded: Vec<Trial>,
    heads: Option<Vec<HeadsMatchedComparison>>,
}

fn occlusion_scene(
    clean: &LoadedRun,
    occluded: &LoadedRun,
    cfg: &StudyConfig,
) -> Result<OcclusionScene> {
    let spec = occluded.run.read_occlusion()?.ok_or_else(|| {
        StudyError::Io(TensorIoError::Invalid(format!(
            "{} has no occlusion.json",
            occluded.run.dir.display()
        )))
    })?;
    let eval = &clean.gt.corrs;
    let trials = |r: &LoadedRun, occ: Option<&OcclusionSpec>| {
        cfg.methods
            .iter()
            .map(|&m| run_trial(r, cfg, m, occ, eval))
            .collect::<Result<Vec<_>>>()
    };
    let heads = match (
        attention_stack(&clean.run)?,
        attention_stack(&occluded.run)?,
    ) {
        (Some(c), Some(o)) => Some(compare_heads_matched(
            &c,
            &o,
            &spec.target_patches,
            &clean.gt.patch_corrs,
            cfg.heads_direction,
        )?),
        _ => None,
    };
    Ok(OcclusionScene {
        clean: trials(clean, None)?,
        occluded: trials(occluded, Some(&spec))?,
        heads,
    })
}

/// Clean and occluded runs paired by `<scene>/<mode>/<focal>`. Reports the
/// clean and occluded conditions per method, per-scene Sampson deltas, and
/// heads-matched counts on the occlusion targets.
pub fn run_occlusion_study(cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let clean_root = cfg.run_dir.as_ref().expect("validated");
    let occ_root = cfg.occluded_run_dir.as_ref().expect("validated");
    let clean = load_runs(clean_root, cfg)?;
    let occluded = load_runs(occ_root, cfg)?;
    let mut by_key: BTreeMap<&RunKey, &LoadedRun> =
        occluded.iter().map(|r| (&r.run.key, r)).collect();
    let mut pairs = Vec::new();
    for c in &clean {
        let o = by_key
            .remove(&c.run.key)
            .ok_or_else(|| StudyError::MissingRunPair(c.run.key.to_string()))?;
        pairs.push((c, o));
    }
    if let Some(extra) = by_key.keys().next() {
        return Err(StudyError::MissingRunPair(format!(
            "{extra} (occluded run without a clean run)"
        )));
    }
    if pairs.is_empty() {
        return Err(StudyError::NoRuns(clean_root.clone()));
    }
    let scenes: Vec<OcclusionScene> = pairs
        .par_iter()
        .map(|(c, o)| occlusion_scene(c, o, cfg))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (condition, pick) in [("clean", false), ("occluded", true)] {
        for (j, &method) in cfg.methods.iter().enumerate() {
            let t: Vec<Trial> = scenes
                .iter()
                .map(|s| if pick { s.occluded[j] } else { s.clean[j] })
                .collect();
            rows.push(ConditionRow::reduce(
                condition.to_string(),
                None,
                None,
                method,
                &t,
            ));
        }
    }
    let mut per_scene = Vec::new();
    for ((c, _), s) in pairs.iter().zip(&scenes) {
        for (j, &method) in cfg.methods.iter().enumerate() {
            per_scene.push(OcclusionSceneRow {
                scene: c.run.key.to_string(),
                method,
                clean_px: s.clean[j].median_root_sampson_px,
                occluded_px: s.occluded[j].median_root_sampson_px,
            });
        }
    }
    let deltas = cfg
        .methods
        .iter()
        .map(|&method| {
            let d: Vec<f64> = per_scene
                .iter()
                .filter(|r| r.method == method)
                .filter_map(OcclusionSceneRow::delta)
                .filter(|d| d.is_finite())
                .collect();
            MethodDelta {
                method,
                mean_delta_px: mean(&d),
                n: d.len(),
            }
        })
        .collect();
    let heads = if scenes.iter().all(|s| s.heads.is_some()) {
        let per_patch: Vec<PatchHeads> = pairs
            .iter()
            .zip(&scenes)
            .flat_map(|((c, _), s)| {
                s.heads.iter().flatten().map(|&comparison| PatchHeads {
                    scene: c.run.key.to_string(),
                    comparison,
                })
            })
            .collect();
        let clean_counts: Vec<f64> = per_patch
            .iter()
            .map(|p| f64::from(p.comparison.clean))
            .collect();
        let occ_counts: Vec<f64> = per_patch
            .iter()
            .map(|p| f64::from(p.comparison.occluded))
            .collect();
        let total_clean: f64 = clean_counts.iter().sum();
        (!per_patch.is_empty()).then(|| HeadsSummary {
            mean_clean: mean(&clean_counts).unwrap_or(0.0),
            mean_occluded: mean(&occ_counts).unwrap_or(0.0),
            retained_fraction: (total_clean > 0.0)
                .then(|| occ_counts.iter().sum::<f64>() / total_clean),
            per_patch,
        })
    } else {
        None
    };
    Ok(StudyReport {
        study: cfg.study,
        label: cfg.label(),
        rows,
        occlusion: Some(OcclusionSummary {
            per_scene,
            deltas,
            heads,
        }),
        incomplete: Vec::new(),
    })
}
