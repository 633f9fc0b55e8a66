use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    batch_loss_grad, Activation, OutputFrame, ProbeError, ProbeModel, ProbeSample, Result,
    DEFAULT_HIDDEN,
};
use crate::geometry::{singular_ratio, FundamentalMatrix};
use crate::rng::{derive_seed, stream_rng};
use crate::stats::{mean, median};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs between learning-rate decays.
    pub step_size: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub output_frame: OutputFrame,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_size: 10,
            gamma: 0.5,
            batch_size: 32,
            hidden: DEFAULT_HIDDEN,
            activation: Activation::Relu,
            output_frame: OutputFrame::Normalized,
            seed: 0,
        }
    }
}

impl ProbeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ProbeError::Invalid(m.into()));
        if self.batch_size == 0 || self.step_size == 0 || self.hidden == 0 {
            return bad("batch_size, step_size and hidden must be positive");
        }
        if !(self.lr > 0.0 && self.gamma > 0.0 && self.eps > 0.0) {
            return bad("lr, gamma and eps must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Step schedule: the rate is multiplied by `gamma` every `step_size`
/// epochs.
pub fn lr_at_epoch(cfg: &ProbeTrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.gamma.powi((epoch / cfg.step_size) as i32)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(model: &mut ProbeModel) -> Self {
        let m: Vec<Vec<f64>> = model
            .buffers_mut()
            .iter()
            .map(|b| vec![0.0; b.len()])
            .collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    fn step(
        &mut self,
        cfg: &ProbeTrainConfig,
        lr: f64,
        model: &mut ProbeModel,
        grads: [&[f64]; 4],
    ) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in model
            .buffers_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedProbe {
    pub model: ProbeModel,
    /// Mean training loss (px²) of each epoch, accumulated over its batches.
    pub epoch_losses: Vec<f64>,
}

fn common_shape(samples: &[ProbeSample]) -> Result<(usize, (u32, u32))> {
    let first = samples.first().ok_or(ProbeError::EmptyTrainingSet)?;
    for s in samples {
        if s.features.len() != first.features.len() {
            return Err(ProbeError::DimensionMismatch {
                expected: first.features.len(),
                found: s.features.len(),
            });
        }
        if s.image_size != first.image_size {
            return Err(ProbeError::MixedImageSizes(first.image_size, s.image_size));
        }
    }
    Ok((first.features.len(), first.image_size))
}

/// Trains the probe of `layer`. Shuffling and initialization derive from
/// `cfg.seed` and the layer, so results are bit-identical across runs.
pub fn train_probe(
    layer: u32,
    samples: &[ProbeSample],
    cfg: &ProbeTrainConfig,
) -> Result<TrainedProbe> {
    cfg.validate()?;
    let (d_in, size) = common_shape(samples)?;
    let seed = derive_seed(cfg.seed, &[u64::from(layer)]);
    let mut model = ProbeModel::init(
        layer,
        d_in,
        cfg.hidden,
        cfg.activation,
        cfg.output_frame,
        size,
        seed,
    );
    let mut adam = Adam::new(&mut model);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(seed, epoch as u64 + 1));
        let lr = lr_at_epoch(cfg, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ProbeSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, grads) = batch_loss_grad(&model, &batch)?;
            if !loss.is_finite() {
                return Err(ProbeError::NonFiniteLoss { epoch });
            }
            total += loss * chunk.len() as f64;
            adam.step(cfg, lr, &mut model, grads.buffers());
        }
        epoch_losses.push(total / samples.len() as f64);
    }
    if model.validate().is_err() {
        return Err(ProbeError::NonFiniteLoss {
            epoch: cfg.epochs.saturating_sub(1),
        });
    }
    Ok(TrainedProbe {
        model,
        epoch_losses,
    })
}

/// Trains independent probes for several layers in parallel; output order
/// follows the input.
pub fn train_layers(
    per_layer: &[(u32, Vec<ProbeSample>)],
    cfg: &ProbeTrainConfig,
) -> Result<Vec<TrainedProbe>> {
    per_layer
        .par_iter()
        .map(|(layer, samples)| train_probe(*layer, samples, cfg))
        .collect()
}

/// Reduction across scenes of the per-scene mean root Sampson distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEvalRow {
    pub layer: u32,
    pub split: String,
    /// Aggregate over scenes of each scene's mean root Sampson distance (px).
    pub root_sampson_px: f64,
    /// Mean over scenes of σ3/σ1 of the unprojected prediction.
    pub singular_ratio: f64,
    pub n_scenes: usize,
    /// Scenes whose prediction is zero or has every correspondence at an
    /// epipole.
    pub n_excluded: usize,
}

pub fn evaluate_probe(
    probe: &ProbeModel,
    samples: &[ProbeSample],
    split: &str,
    aggregate: Aggregate,
) -> Result<ProbeEvalRow> {
    let mut errors = Vec::with_capacity(samples.len());
    let mut ratios = Vec::with_capacity(samples.len());
    for s in samples {
        let Ok(f) = FundamentalMatrix::from_matrix(&probe.forward(&s.features)?) else {
            continue;
        };
        let roots: Vec<f64> = s
            .corrs
            .iter()
            .filter_map(|c| f.root_sampson_error(c).ok())
            .collect();
        let Some(scene_mean) = mean(&roots) else {
            continue;
        };
        errors.push(scene_mean);
        ratios.push(singular_ratio(&f));
    }
    let root_sampson_px = match aggregate {
        Aggregate::Mean => mean(&errors),
        Aggregate::Median => median(&errors),
    };
    Ok(ProbeEvalRow {
        layer: probe.layer,
        split: split.to_string(),
        root_sampson_px: root_sampson_px.unwrap_or(f64::NAN),
        singular_ratio: mean(&ratios).unwrap_or(f64::NAN),
        n_scenes: errors.len(),
        n_excluded: samples.len() - errors.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probing::{linear_embedding_samples, LinearEmbedding};
    use crate::scene::{generate_scene, CameraConfigMode, SceneConfig};
    use nalgebra::{DVector, Matrix3};

    fn samples(n: usize, seed: u64) -> Vec<ProbeSample> {
        let scenes: Vec<_> = (0..n as u64)
            .map(|i| {
                generate_scene(&SceneConfig::new(
                    CameraConfigMode::ALL[i as usize % 4],
                    50.0,
                    16,
                    seed + i,
                ))
                .unwrap()
            })
            .collect();
        linear_embedding_samples(&LinearEmbedding::new(16, 5), &scenes)
    }

    #[test]
    fn schedule_halves_every_ten_epochs() {
        let cfg = ProbeTrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0), 1e-4);
        assert_eq!(lr_at_epoch(&cfg, 9), 1e-4);
        assert_eq!(lr_at_epoch(&cfg, 10), 5e-5);
        assert_eq!(lr_at_epoch(&cfg, 49), 1e-4 / 16.0);
        assert_eq!((cfg.epochs, cfg.hidden, cfg.batch_size), (50, 512, 32));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let s = samples(3, 1);
        let cfg = ProbeTrainConfig {
            epochs: 0,
            hidden: 8,
            seed: 4,
            ..Default::default()
        };
        let t = train_probe(2, &s, &cfg).unwrap();
        let init = ProbeModel::init(
            2,
            16,
            8,
            Activation::Relu,
            OutputFrame::Normalized,
            (518, 518),
            derive_seed(4, &[2]),
        );
        assert_eq!(t.model, init);
        assert!(t.epoch_losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let s = samples(12, 2);
        let cfg = ProbeTrainConfig {
            epochs: 6,
            hidden: 32,
            batch_size: 4,
            lr: 1e-3,
            ..Default::default()
        };
        let a = train_probe(0, &s, &cfg).unwrap();
        let b = train_probe(0, &s, &cfg).unwrap();
        assert_eq!(a.model.parameters(), b.model.parameters());
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert!(a.epoch_losses.last().unwrap() < a.epoch_losses.first().unwrap());
        let par = train_layers(&[(0, s.clone()), (1, s)], &cfg).unwrap();
        assert_eq!(par[0], a);
        assert_ne!(par[1].model.parameters(), a.model.parameters());
    }

    #[test]
    fn empty_and_mixed_inputs_rejected() {
        let cfg = ProbeTrainConfig::default();
        assert!(matches!(
            train_probe(0, &[], &cfg),
            Err(ProbeError::EmptyTrainingSet)
        ));
        let mut s = samples(2, 3);
        s[1].features.pop();
        assert!(matches!(
            train_probe(0, &s, &cfg),
            Err(ProbeError::DimensionMismatch { .. })
        ));
        let bad = ProbeTrainConfig {
            batch_size: 0,
            ..cfg
        };
        assert!(matches!(
            train_probe(0, &samples(2, 3), &bad),
            Err(ProbeError::Invalid(_))
        ));
    }

    fn constant_probe(m: &Matrix3<f64>, d_in: usize) -> ProbeModel {
        let mut p = ProbeModel::init(
            0,
            d_in,
            4,
            Activation::Relu,
            OutputFrame::Pixel,
            (518, 518),
            0,
        );
        p.w2.fill(0.0);
        p.b2 = DVector::from_row_slice(m.transpose().as_slice());
        p
    }

    #[test]
    fn exact_probe_scores_zero() {
        let scene =
            generate_scene(&SceneConfig::new(CameraConfigMode::Large, 24.0, 30, 9)).unwrap();
        let s =
            linear_embedding_samples(&LinearEmbedding::new(16, 1), std::slice::from_ref(&scene));
        let row = evaluate_probe(
            &constant_probe(scene.f_gt.matrix(), 16),
            &s,
            "test",
            Aggregate::Mean,
        )
        .unwrap();
        assert!(row.root_sampson_px < 1e-6);
        assert!(row.singular_ratio <= 1e-12);
        let scaled = evaluate_probe(
            &constant_probe(&(scene.f_gt.matrix() * -3.0), 16),
            &s,
            "test",
            Aggregate::Mean,
        )
        .unwrap();
        assert!(scaled.singular_ratio <= 1e-12);
        let id = evaluate_probe(
            &constant_probe(&(Matrix3::identity() / 3f64.sqrt()), 16),
            &s,
            "test",
            Aggregate::Mean,
        )
        .unwrap();
        assert!((id.singular_ratio - 1.0).abs() < 1e-12);
        assert_eq!((id.n_scenes, id.n_excluded), (1, 0));
    }

    #[test]
    fn evaluation_is_invariant_to_output_scale() {
        let s = samples(5, 11);
        let mut p = ProbeModel::init(
            0,
            16,
            8,
            Activation::Relu,
            OutputFrame::Pixel,
            (518, 518),
            3,
        );
        let a = evaluate_probe(&p, &s, "val", Aggregate::Median).unwrap();
        p.w2 *= -2.5;
        p.b2 *= -2.5;
        let b = evaluate_probe(&p, &s, "val", Aggregate::Median).unwrap();
        assert!((a.root_sampson_px - b.root_sampson_px).abs() <= 1e-9 * a.root_sampson_px);
        assert!((a.singular_ratio - b.singular_ratio).abs() <= 1e-12);
    }
}
