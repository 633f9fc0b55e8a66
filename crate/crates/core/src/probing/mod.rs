//! Two-layer MLP probes that read a fundamental matrix out of frozen
//! camera-token features, trained and scored with the Sampson distance in
//! pixel space.

mod checkpoint;
mod oracle;
mod train;

pub use checkpoint::{load_probe, save_probe, ProbeHeader, PROBE_CHECKPOINT_VERSION};
pub use oracle::{linear_embedding_samples, LinearEmbedding};
pub use train::{
    evaluate_probe, lr_at_epoch, train_layers, train_probe, Aggregate, ProbeEvalRow,
    ProbeTrainConfig, TrainedProbe,
};

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Correspondence, GeometryError, SampsonTerms};
use crate::rng::stream_rng;
use crate::tensor_io::TensorIoError;

pub const DEFAULT_HIDDEN: usize = 512;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("feature dimension {found} does not match probe input {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("every correspondence sits at an epipole of the prediction")]
    AllDegenerate,
    #[error("non-finite training loss in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("no training samples")]
    EmptyTrainingSet,
    #[error("samples mix image sizes {0:?} and {1:?}")]
    MixedImageSizes((u32, u32), (u32, u32)),
    #[error("invalid probe: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

/// Coordinates in which the nine probe outputs are read.
///
/// `Pixel` outputs are the pixel-frame matrix directly. `Normalized`
/// outputs are a matrix `M` over coordinates centred on the image and
/// scaled to [-1, 1]; the pixel-frame prediction is `Tᵀ M T`. The loss is
/// the pixel-space Sampson distance either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFrame {
    Pixel,
    #[default]
    Normalized,
}

/// Maps pixel coordinates of an image of `size` to [-1, 1] around the
/// image centre, isotropically.
pub fn normalizing_transform(size: (u32, u32)) -> Matrix3<f64> {
    let (w, h) = (f64::from(size.0), f64::from(size.1));
    let s = 2.0 / w.max(h);
    Matrix3::new(
        s,
        0.0,
        -s * (w - 1.0) / 2.0,
        0.0,
        s,
        -s * (h - 1.0) / 2.0,
        0.0,
        0.0,
        1.0,
    )
}

impl OutputFrame {
    pub fn to_pixel(self, m: &Matrix3<f64>, size: (u32, u32)) -> Matrix3<f64> {
        match self {
            OutputFrame::Pixel => *m,
            OutputFrame::Normalized => {
                let t = normalizing_transform(size);
                t.transpose() * m * t
            }
        }
    }

    /// Gradient with respect to the output matrix given the gradient with
    /// respect to the pixel-frame matrix.
    fn pull_back(self, g: &Matrix3<f64>, size: (u32, u32)) -> Matrix3<f64> {
        match self {
            OutputFrame::Pixel => *g,
            OutputFrame::Normalized => {
                let t = normalizing_transform(size);
                t * g * t.transpose()
            }
        }
    }
}

/// One probe sample: the flattened features of a scene pair and its ground
/// truth correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSample {
    pub features: Vec<f64>,
    pub corrs: Vec<Correspondence>,
    pub image_size: (u32, u32),
}

impl ProbeSample {
    /// Camera-token features of `layer` and the ground truth of a run.
    pub fn from_run(run: &crate::tensor_io::PairRun, layer: u32) -> Result<Self> {
        let features = run.read_features(layer)?;
        let gt = run.read_ground_truth()?;
        Ok(Self {
            features: features.flattened().to_vec(),
            corrs: gt.corrs,
            image_size: gt.cameras.cam1.image_size(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub layer: u32,
    pub activation: Activation,
    pub output_frame: OutputFrame,
    pub image_size: (u32, u32),
    /// `hidden × d_in`
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// `9 × hidden`, rows in row-major order of the 3×3 output.
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl ProbeModel {
    /// He-uniform weights (bound √(6 / fan_in)) from `seed`, zero biases.
    pub fn init(
        layer: u32,
        d_in: usize,
        hidden: usize,
        activation: Activation,
        output_frame: OutputFrame,
        image_size: (u32, u32),
        seed: u64,
    ) -> Self {
        let mut rng = stream_rng(seed, 0);
        let b1 = (6.0 / d_in.max(1) as f64).sqrt();
        let b2 = (6.0 / hidden.max(1) as f64).sqrt();
        let w1 = DMatrix::from_fn(hidden, d_in, |_, _| rng.random_range(-b1..=b1));
        let w2 = DMatrix::from_fn(9, hidden, |_, _| rng.random_range(-b2..=b2));
        Self {
            layer,
            activation,
            output_frame,
            image_size,
            w1,
            b1: DVector::zeros(hidden),
            w2,
            b2: DVector::zeros(9),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        if self.b1.len() != h || self.w2.shape() != (9, h) || self.b2.len() != 9 {
            return Err(ProbeError::Invalid(format!(
                "inconsistent shapes w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                self.w1.shape(),
                self.b1.len(),
                self.w2.shape(),
                self.b2.len()
            )));
        }
        let finite = |s: &[f64]| s.iter().all(|v| v.is_finite());
        if !(finite(self.w1.as_slice())
            && finite(self.b1.as_slice())
            && finite(self.w2.as_slice())
            && finite(self.b2.as_slice()))
        {
            return Err(ProbeError::Invalid("non-finite parameter".into()));
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d_in() {
            return Err(ProbeError::DimensionMismatch {
                expected: self.d_in(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Raw 3×3 output in the probe's output frame.
    pub fn forward_output(&self, x: &[f64]) -> Result<Matrix3<f64>> {
        self.check_dim(x)?;
        let z = &self.w1 * DVector::from_column_slice(x) + &self.b1;
        let h = z.map(|v| self.activation.apply(v));
        let out = &self.w2 * h + &self.b2;
        Ok(Matrix3::from_row_slice(out.as_slice()))
    }

    /// Pixel-frame prediction, neither normalized nor rank-2 projected.
    pub fn forward(&self, x: &[f64]) -> Result<Matrix3<f64>> {
        Ok(self
            .output_frame
            .to_pixel(&self.forward_output(x)?, self.image_size))
    }

    /// All parameters in the order w1, b1, w2, b2 (matrices column-major).
    pub fn parameters(&self) -> Vec<f64> {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
        ]
        .concat()
    }

    pub fn set_parameters(&mut self, p: &[f64]) {
        let mut rest = p;
        for buf in self.buffers_mut() {
            let (head, tail) = rest.split_at(buf.len());
            buf.copy_from_slice(head);
            rest = tail;
        }
    }

    pub(crate) fn buffers_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ]
    }
}

/// `probe(x)` in the pixel frame.
pub fn probe_forward(probe: &ProbeModel, feature: &[f64]) -> Result<Matrix3<f64>> {
    probe.forward(feature)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampsonLoss {
    /// Mean squared Sampson distance (px²) over the usable correspondences.
    pub value: f64,
    pub used: usize,
    /// Correspondences dropped by the epipole guard.
    pub excluded: usize,
}

/// Mean Sampson distance of `f` over `corrs`, skipping correspondences at
/// an epipole.
pub fn sampson_loss(f: &Matrix3<f64>, corrs: &[Correspondence]) -> Result<SampsonLoss> {
    sampson_loss_grad(f, corrs).map(|(l, _)| l)
}

/// The loss together with its gradient with respect to `f`.
pub fn sampson_loss_grad(
    f: &Matrix3<f64>,
    corrs: &[Correspondence],
) -> Result<(SampsonLoss, Matrix3<f64>)> {
    let mut sum = 0.0;
    let mut grad = Matrix3::zeros();
    let mut used = 0usize;
    for c in corrs {
        let t = SampsonTerms::new(f, c);
        if t.is_degenerate() {
            continue;
        }
        let (e, d) = (t.residual, t.denominator);
        sum += e * e / d;
        let a = nalgebra::Vector3::new(t.line2.x, t.line2.y, 0.0);
        let b = nalgebra::Vector3::new(t.line1.x, t.line1.y, 0.0);
        grad += (2.0 * e / d) * c.x2 * c.x1.transpose()
            - (2.0 * e * e / (d * d)) * (a * c.x1.transpose() + c.x2 * b.transpose());
        used += 1;
    }
    if used == 0 {
        return Err(ProbeError::AllDegenerate);
    }
    let n = used as f64;
    Ok((
        SampsonLoss {
            value: sum / n,
            used,
            excluded: corrs.len() - used,
        },
        grad / n,
    ))
}

/// Parameter gradients laid out like [`ProbeModel::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
        ]
        .concat()
    }

    pub(crate) fn buffers(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
        ]
    }
}

/// Mean per-sample loss of a batch and its gradient, each sample's loss
/// being its mean Sampson distance.
pub fn batch_loss_grad(model: &ProbeModel, batch: &[&ProbeSample]) -> Result<(f64, Gradients)> {
    let n = batch.len();
    if n == 0 {
        return Err(ProbeError::EmptyTrainingSet);
    }
    let d_in = model.d_in();
    let mut x = DMatrix::zeros(d_in, n);
    for (j, s) in batch.iter().enumerate() {
        model.check_dim(&s.features)?;
        x.column_mut(j).copy_from_slice(&s.features);
    }
    let mut z = &model.w1 * &x;
    for mut col in z.column_iter_mut() {
        col += &model.b1;
    }
    let h = z.map(|v| model.activation.apply(v));
    let mut out = &model.w2 * &h;
    for mut col in out.column_iter_mut() {
        col += &model.b2;
    }
    let mut g_out = DMatrix::zeros(9, n);
    let mut total = 0.0;
    for (j, s) in batch.iter().enumerate() {
        let m = Matrix3::from_row_slice(out.column(j).as_slice());
        let f = model.output_frame.to_pixel(&m, s.image_size);
        let (loss, g) = sampson_loss_grad(&f, &s.corrs)?;
        total += loss.value;
        let g = model.output_frame.pull_back(&g, s.image_size) / n as f64;
        for r in 0..3 {
            for c in 0..3 {
                g_out[(3 * r + c, j)] = g[(r, c)];
            }
        }
    }
    let w2 = &g_out * h.transpose();
    let b2 = g_out.column_sum();
    let mut g_h = model.w2.transpose() * &g_out;
    g_h.zip_apply(&z, |g, zv| *g *= model.activation.derivative(zv));
    let w1 = &g_h * x.transpose();
    let b1 = g_h.column_sum();
    Ok((total / n as f64, Gradients { w1, b1, w2, b2 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{compose_fundamental, sampson_error_raw};
    use crate::scene::{generate_scene, CameraConfigMode, SceneConfig};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn scene(seed: u64) -> crate::scene::ScenePair {
        generate_scene(&SceneConfig::new(CameraConfigMode::Medium, 35.0, 24, seed)).unwrap()
    }

    #[test]
    fn zero_weights_with_identity_bias_gives_identity() {
        let mut p = ProbeModel::init(0, 5, 8, Activation::Relu, OutputFrame::Pixel, (518, 518), 1);
        p.w1.fill(0.0);
        p.w2.fill(0.0);
        p.b2 = DVector::from_row_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(probe_forward(&p, &[0.3; 5]).unwrap(), Matrix3::identity());
        assert!(matches!(
            probe_forward(&p, &[0.0; 4]),
            Err(ProbeError::DimensionMismatch {
                expected: 5,
                found: 4
            })
        ));
    }

    #[test]
    fn initialization_is_seeded_and_bounded() {
        let a = ProbeModel::init(
            0,
            64,
            512,
            Activation::Relu,
            OutputFrame::Pixel,
            (518, 518),
            7,
        );
        let b = ProbeModel::init(
            0,
            64,
            512,
            Activation::Relu,
            OutputFrame::Pixel,
            (518, 518),
            7,
        );
        let c = ProbeModel::init(
            0,
            64,
            512,
            Activation::Relu,
            OutputFrame::Pixel,
            (518, 518),
            8,
        );
        assert_eq!(a, b);
        assert_ne!(a.w1, c.w1);
        assert!(a.w1.iter().all(|v| v.abs() <= (6.0f64 / 64.0).sqrt()));
        assert!(a.b1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_of_ground_truth_is_zero_and_scale_free() {
        let s = scene(3);
        let f = *s.f_gt.matrix();
        assert!(sampson_loss(&f, &s.corrs).unwrap().value < 1e-20);
        let m = Matrix3::from_fn(|i, j| f[(i, j)] + 1e-4 * (i as f64 - j as f64));
        let l1 = sampson_loss(&m, &s.corrs).unwrap().value;
        let l2 = sampson_loss(&(m * -37.5), &s.corrs).unwrap().value;
        assert_relative_eq!(l1, l2, max_relative = 1e-12);
    }

    #[test]
    fn loss_is_plain_mean() {
        let c = Correspondence::new(0.0, 0.0, 0.0, 0.0, 0);
        let s1 = sampson_error_raw(
            &Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0),
            &c,
        )
        .unwrap();
        assert_eq!(s1, 0.0);
        // F = [[0,0,0],[0,0,-1],[0,1,0]]: residual v2 - v1, denominator 2.
        let far = Correspondence::new(0.0, 0.0, 0.0, 2.0 * 2f64.sqrt(), 1);
        let loss = sampson_loss(
            &Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0),
            &[c, far],
        )
        .unwrap();
        assert_relative_eq!(loss.value, 2.0, max_relative = 1e-12);
        assert_relative_eq!(
            loss.value.sqrt(),
            std::f64::consts::SQRT_2,
            max_relative = 1e-12
        );
    }

    #[test]
    fn degenerate_terms_are_counted_and_all_degenerate_errors() {
        let f = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        let e = nalgebra::Vector3::new(1.0, 0.0, 0.0);
        let at_epipoles = Correspondence {
            x1: e,
            x2: e,
            point_id: 0,
        };
        assert!(matches!(
            sampson_loss(&f, &[at_epipoles]),
            Err(ProbeError::AllDegenerate)
        ));
        let ok = Correspondence::new(1.0, 1.0, 1.0, 1.0, 1);
        let l = sampson_loss(&f, &[ok, at_epipoles]).unwrap();
        assert_eq!((l.used, l.excluded), (1, 1));
        assert!(matches!(
            sampson_loss(&f, &[]),
            Err(ProbeError::AllDegenerate)
        ));
    }

    fn fd_check(frame: OutputFrame, activation: Activation, seed: u64, h: f64) -> f64 {
        let scenes: Vec<_> = (0..3).map(|i| scene(seed * 10 + i)).collect();
        let d_in = 6;
        let mut rng = stream_rng(seed, 99);
        let samples: Vec<ProbeSample> = scenes
            .iter()
            .map(|s| ProbeSample {
                features: (0..d_in).map(|_| rng.random_range(-1.0..1.0)).collect(),
                corrs: s.corrs.clone(),
                image_size: (518, 518),
            })
            .collect();
        let batch: Vec<&ProbeSample> = samples.iter().collect();
        let mut model = ProbeModel::init(0, d_in, 7, activation, frame, (518, 518), seed);
        for v in model.b1.iter_mut().chain(model.b2.iter_mut()) {
            *v = rng.random_range(-0.5..0.5);
        }
        if frame == OutputFrame::Pixel {
            // keep the pixel-frame output near a plausible matrix
            let f = compose_fundamental(&scenes[0].cam1, &scenes[0].cam2).unwrap();
            model.w2 *= 1e-3;
            model.b2 = DVector::from_row_slice(f.matrix().transpose().as_slice());
        }
        let (_, g) = batch_loss_grad(&model, &batch).unwrap();
        let analytic = g.flat();
        let p0 = model.parameters();
        let mut worst: f64 = 0.0;
        for i in 0..p0.len() {
            let step = h * p0[i].abs().max(1.0);
            let mut p = p0.clone();
            p[i] = p0[i] + step;
            model.set_parameters(&p);
            let up = batch_loss_grad(&model, &batch).unwrap().0;
            p[i] = p0[i] - step;
            model.set_parameters(&p);
            let down = batch_loss_grad(&model, &batch).unwrap().0;
            let numeric = (up - down) / (2.0 * step);
            let scale = numeric.abs().max(analytic[i].abs());
            if scale > 1e-6 * analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())) {
                worst = worst.max((numeric - analytic[i]).abs() / scale);
            }
        }
        model.set_parameters(&p0);
        worst
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in 1..4 {
            for frame in [OutputFrame::Normalized, OutputFrame::Pixel] {
                let h = if frame == OutputFrame::Pixel {
                    1e-9
                } else {
                    1e-5
                };
                let err = fd_check(frame, Activation::Relu, seed, h);
                assert!(err <= 1e-4, "{frame:?} seed {seed}: {err:e}");
            }
            assert!(fd_check(OutputFrame::Normalized, Activation::Tanh, seed, 1e-5) <= 1e-4);
        }
    }

    #[test]
    fn normalized_frame_maps_pixel_centres_into_unit_square() {
        let t = normalizing_transform((518, 518));
        let a = t * nalgebra::Vector3::new(0.0, 517.0, 1.0);
        assert_relative_eq!(a.x, -517.0 / 518.0, max_relative = 1e-12);
        assert_relative_eq!(a.y, 517.0 / 518.0, max_relative = 1e-12);
    }
}
