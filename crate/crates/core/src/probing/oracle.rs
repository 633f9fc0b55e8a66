use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use super::{normalizing_transform, ProbeSample};
use crate::geometry::FundamentalMatrix;
use crate::rng::stream_rng;
use crate::scene::ScenePair;

/// Synthetic features that encode the ground truth linearly: a fixed
/// Gaussian `d_in × 9` embedding of the canonical fundamental matrix
/// expressed in image-normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEmbedding {
    pub matrix: DMatrix<f64>,
}

impl LinearEmbedding {
    pub fn new(d_in: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0);
        Self {
            matrix: DMatrix::from_fn(d_in, 9, |_, _| StandardNormal.sample(&mut rng)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn embed(&self, f: &FundamentalMatrix, image_size: (u32, u32)) -> Vec<f64> {
        let t_inv = normalizing_transform(image_size)
            .try_inverse()
            .expect("normalizing transform is invertible");
        let m = t_inv.transpose() * f.matrix() * t_inv;
        let n = FundamentalMatrix::from_matrix(&m).expect("ground truth is nonzero");
        let v = nalgebra::DVector::from_row_slice(n.matrix().transpose().as_slice());
        (&self.matrix * v).as_slice().to_vec()
    }
}

/// One sample per scene pair with embedded ground truth as features.
pub fn linear_embedding_samples(
    embedding: &LinearEmbedding,
    scenes: &[ScenePair],
) -> Vec<ProbeSample> {
    scenes
        .iter()
        .map(|s| {
            let size = s.cam1.image_size();
            ProbeSample {
                features: embedding.embed(&s.f_gt, size),
                corrs: s.corrs.clone(),
                image_size: size,
            }
        })
        .collect()
}
