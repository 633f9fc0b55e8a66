use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    Activation, OutputFrame, ProbeError, ProbeModel, ProbeTrainConfig, Result, TrainedProbe,
};
use crate::tensor_io::{read_json, read_tensors, write_json, write_tensors, Tensor, TensorIoError};

pub const PROBE_CHECKPOINT_VERSION: u32 = 1;

/// JSON side of a probe checkpoint. The weights live next to it in an EPGT
/// file holding four f64 records: w1 `[hidden, d_in]`, b1 `[hidden]`, w2
/// `[9, hidden]`, b2 `[9]`, matrices row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHeader {
    pub schema_version: u32,
    pub layer: u32,
    pub d_in: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub output_frame: OutputFrame,
    pub image_size: (u32, u32),
    pub config: ProbeTrainConfig,
    pub epoch_losses: Vec<f64>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("epgt"))
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Writes `<stem>.json` and `<stem>.epgt`.
pub fn save_probe(stem: &Path, trained: &TrainedProbe, config: &ProbeTrainConfig) -> Result<()> {
    let m = &trained.model;
    let (h, d) = (m.hidden() as u64, m.d_in() as u64);
    let tensors = [
        Tensor::f64(vec![h, d], row_major(&m.w1))?,
        Tensor::f64(vec![h], m.b1.as_slice().to_vec())?,
        Tensor::f64(vec![9, h], row_major(&m.w2))?,
        Tensor::f64(vec![9], m.b2.as_slice().to_vec())?,
    ];
    let header = ProbeHeader {
        schema_version: PROBE_CHECKPOINT_VERSION,
        layer: m.layer,
        d_in: m.d_in(),
        hidden: m.hidden(),
        activation: m.activation,
        output_frame: m.output_frame,
        image_size: m.image_size,
        config: *config,
        epoch_losses: trained.epoch_losses.clone(),
    };
    let (json, epgt) = paths(stem);
    write_tensors(&epgt, &tensors)?;
    write_json(&json, &header)?;
    Ok(())
}

pub fn load_probe(stem: &Path) -> Result<(ProbeHeader, ProbeModel)> {
    let (json, epgt) = paths(stem);
    let header: ProbeHeader = read_json(&json)?;
    if header.schema_version != PROBE_CHECKPOINT_VERSION {
        return Err(TensorIoError::VersionMismatch {
            found: header.schema_version,
        }
        .into());
    }
    let tensors = read_tensors(&epgt)?;
    let (h, d) = (header.hidden as u64, header.d_in as u64);
    let expected = [vec![h, d], vec![h], vec![9, h], vec![9]];
    if tensors.len() != 4 || tensors.iter().zip(&expected).any(|(t, e)| &t.dims != e) {
        return Err(TensorIoError::ShapeMismatch(format!(
            "{}: probe weights do not match header",
            epgt.display()
        ))
        .into());
    }
    let data = |i: usize| -> Result<Vec<f64>> {
        tensors[i]
            .as_f64()
            .map(<[f64]>::to_vec)
            .ok_or_else(|| ProbeError::Invalid("probe weights must be f64".into()))
    };
    let model = ProbeModel {
        layer: header.layer,
        activation: header.activation,
        output_frame: header.output_frame,
        image_size: header.image_size,
        w1: DMatrix::from_row_slice(header.hidden, header.d_in, &data(0)?),
        b1: DVector::from_vec(data(1)?),
        w2: DMatrix::from_row_slice(9, header.hidden, &data(2)?),
        b2: DVector::from_vec(data(3)?),
    };
    model.validate()?;
    Ok((header, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = ProbeModel::init(
            7,
            5,
            6,
            Activation::Tanh,
            OutputFrame::Normalized,
            (518, 518),
            3,
        );
        let trained = TrainedProbe {
            model,
            epoch_losses: vec![3.0, 2.5],
        };
        let cfg = ProbeTrainConfig {
            hidden: 6,
            ..Default::default()
        };
        let stem = dir.path().join("probe_L07");
        save_probe(&stem, &trained, &cfg).unwrap();
        let (header, back) = load_probe(&stem).unwrap();
        assert_eq!(back, trained.model);
        assert_eq!(header.epoch_losses, trained.epoch_losses);
        assert_eq!((header.layer, header.d_in, header.hidden), (7, 5, 6));
        std::fs::write(
            stem.with_extension("epgt"),
            Tensor::f64(vec![1], vec![0.0]).unwrap().encode(),
        )
        .unwrap();
        assert!(load_probe(&stem).is_err());
    }
}
