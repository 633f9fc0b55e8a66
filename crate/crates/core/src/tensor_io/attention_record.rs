//! Per-layer global-attention maps over the two-view token sequence.
//!
//! An attention file (`attn_L<layer>.epgt`) is a multi-record EPGT file. The
//! first record is a u32 `[4]` descriptor `(layer, space, storage, k)` with
//! space 0 = post-softmax probabilities, 1 = pre-softmax logits, and storage
//! 0 = dense, 1 = top-k. Dense storage follows as one f32 `[H, S, S]`
//! record. Top-k storage follows as four records:
//!
//! - `values` f32 `[H, S, k]`, descending per row;
//! - `indices` u32 `[H, S, k]`, the matching columns;
//! - `target_argmax` u32 `[H, S]`, the column of the largest entry among the
//!   other view's patch columns (lowest column on ties);
//! - `target_max` f32 `[H, S]`, that entry's value.
//!
//! `S` is always 2748.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::format::{read_tensors, write_tensors, Tensor};
use super::{Result, TensorIoError};
use crate::attention::{patch_columns, token_at, NUM_HEADS, NUM_LAYERS, SEQ_LEN};

const S: usize = SEQ_LEN as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSpace {
    Probabilities,
    Logits,
}

impl AttentionSpace {
    fn code(self) -> u32 {
        match self {
            Self::Probabilities => 0,
            Self::Logits => 1,
        }
    }

    /// Value standing in for an entry a top-k record does not store.
    pub fn absent(self) -> f32 {
        match self {
            Self::Probabilities => 0.0,
            Self::Logits => f32::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseTopK {
    pub k: u32,
    pub values: Vec<f32>,
    pub indices: Vec<u32>,
    pub target_argmax: Vec<u32>,
    pub target_max: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionStorage {
    /// Row-major `[H, S, S]`.
    Dense(Vec<f32>),
    SparseTopK(SparseTopK),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: u32,
    pub n_heads: u32,
    pub space: AttentionSpace,
    pub storage: AttentionStorage,
}

/// Largest entry of a row over some column set, with every column tied at
/// that value.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMaximum {
    pub value: f32,
    pub columns: Vec<u32>,
}

/// Columns of the other view's patch tokens for a query position.
pub fn target_columns(query: u32) -> std::ops::Range<u32> {
    let (view, _) = token_at(query).expect("query within sequence");
    patch_columns(1 - view)
}

fn row_maximum(row: &[f32], columns: impl Iterator<Item = u32>) -> Option<RowMaximum> {
    let mut best: Option<RowMaximum> = None;
    for c in columns {
        let v = row[c as usize];
        if v.is_nan() {
            continue;
        }
        match &mut best {
            Some(b) if v == b.value => b.columns.push(c),
            Some(b) if v < b.value => {}
            _ => {
                best = Some(RowMaximum {
                    value: v,
                    columns: vec![c],
                })
            }
        }
    }
    best
}

impl AttentionRecord {
    pub fn dense(layer: u32, n_heads: u32, space: AttentionSpace, data: Vec<f32>) -> Result<Self> {
        let rec = Self {
            layer,
            n_heads,
            space,
            storage: AttentionStorage::Dense(data),
        };
        rec.validate_shape()?;
        Ok(rec)
    }

    /// All-zero dense record to be filled row by row.
    pub fn zeros(layer: u32, n_heads: u32, space: AttentionSpace) -> Self {
        Self {
            layer,
            n_heads,
            space,
            storage: AttentionStorage::Dense(vec![0.0; n_heads as usize * S * S]),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, AttentionStorage::Dense(_))
    }

    fn offset(&self, head: u32, query: u32) -> usize {
        (head as usize * S + query as usize) * S
    }

    pub fn row(&self, head: u32, query: u32) -> Option<&[f32]> {
        match &self.storage {
            AttentionStorage::Dense(d) if head < self.n_heads && query < SEQ_LEN => {
                let o = self.offset(head, query);
                Some(&d[o..o + S])
            }
            _ => None,
        }
    }

    pub fn row_mut(&mut self, head: u32, query: u32) -> Option<&mut [f32]> {
        let o = self.offset(head, query);
        match &mut self.storage {
            AttentionStorage::Dense(d) if head < self.n_heads && query < SEQ_LEN => {
                Some(&mut d[o..o + S])
            }
            _ => None,
        }
    }

    /// Maximum over the other view's patch columns.
    pub fn target_maximum(&self, head: u32, query: u32) -> Option<RowMaximum> {
        match &self.storage {
            AttentionStorage::Dense(_) => {
                row_maximum(self.row(head, query)?, target_columns(query))
            }
            AttentionStorage::SparseTopK(sp) => {
                let r = head as usize * S + query as usize;
                let value = sp.target_max[r];
                let mut columns = vec![sp.target_argmax[r]];
                let span = target_columns(query);
                let k = sp.k as usize;
                for i in r * k..(r + 1) * k {
                    let c = sp.indices[i];
                    if sp.values[i] == value && span.contains(&c) && !columns.contains(&c) {
                        columns.push(c);
                    }
                }
                Some(RowMaximum { value, columns })
            }
        }
    }

    /// Maximum over every column of the row.
    pub fn global_maximum(&self, head: u32, query: u32) -> Option<RowMaximum> {
        match &self.storage {
            AttentionStorage::Dense(_) => row_maximum(self.row(head, query)?, 0..SEQ_LEN),
            AttentionStorage::SparseTopK(sp) => {
                let k = sp.k as usize;
                let r = head as usize * S + query as usize;
                let vals = &sp.values[r * k..(r + 1) * k];
                let idx = &sp.indices[r * k..(r + 1) * k];
                let value = vals[0];
                let columns = vals
                    .iter()
                    .zip(idx)
                    .filter(|(v, _)| **v == value)
                    .map(|(_, &c)| c)
                    .collect();
                Some(RowMaximum { value, columns })
            }
        }
    }

    /// Keeps the `k` largest entries of every row (lowest column first on
    /// ties) plus the exact maximum over the other view's patch columns.
    pub fn to_sparse(&self, k: u32) -> Result<Self> {
        let AttentionStorage::Dense(_) = &self.storage else {
            return Ok(self.clone());
        };
        if k == 0 || k > SEQ_LEN {
            return Err(TensorIoError::Invalid(format!(
                "k must lie in 1..={SEQ_LEN}, got {k}"
            )));
        }
        let ku = k as usize;
        let rows = self.n_heads as usize * S;
        let mut sp = SparseTopK {
            k,
            values: Vec::with_capacity(rows * ku),
            indices: Vec::with_capacity(rows * ku),
            target_argmax: Vec::with_capacity(rows),
            target_max: Vec::with_capacity(rows),
        };
        let mut order: Vec<u32> = Vec::with_capacity(S);
        for head in 0..self.n_heads {
            for query in 0..SEQ_LEN {
                let row = self.row(head, query).expect("dense row");
                let cmp =
                    |a: &u32, b: &u32| row[*b as usize].total_cmp(&row[*a as usize]).then(a.cmp(b));
                order.clear();
                order.extend(0..SEQ_LEN);
                if ku < S {
                    order.select_nth_unstable_by(ku - 1, cmp);
                }
                order.truncate(ku);
                order.sort_unstable_by(cmp);
                sp.values.extend(order.iter().map(|&c| row[c as usize]));
                sp.indices.extend_from_slice(&order);
                let m = row_maximum(row, target_columns(query)).unwrap_or(RowMaximum {
                    value: self.space.absent(),
                    columns: vec![target_columns(query).start],
                });
                sp.target_argmax.push(m.columns[0]);
                sp.target_max.push(m.value);
            }
        }
        Ok(Self {
            layer: self.layer,
            n_heads: self.n_heads,
            space: self.space,
            storage: AttentionStorage::SparseTopK(sp),
        })
    }

    /// Dense reconstruction with unstored entries set to the space's absent
    /// value.
    pub fn to_dense(&self) -> Self {
        let AttentionStorage::SparseTopK(sp) = &self.storage else {
            return self.clone();
        };
        let mut out = Self::zeros(self.layer, self.n_heads, self.space);
        let k = sp.k as usize;
        for head in 0..self.n_heads {
            for query in 0..SEQ_LEN {
                let r = head as usize * S + query as usize;
                let row = out.row_mut(head, query).expect("dense row");
                row.fill(self.space.absent());
                row[sp.target_argmax[r] as usize] = sp.target_max[r];
                for i in r * k..(r + 1) * k {
                    row[sp.indices[i] as usize] = sp.values[i];
                }
            }
        }
        out
    }

    fn validate_shape(&self) -> Result<()> {
        let bad = |m: String| Err(TensorIoError::Invalid(m));
        if self.layer >= NUM_LAYERS {
            return bad(format!("layer {} outside 0..{NUM_LAYERS}", self.layer));
        }
        if self.n_heads == 0 || self.n_heads > NUM_HEADS {
            return bad(format!(
                "head count {} outside 1..={NUM_HEADS}",
                self.n_heads
            ));
        }
        let rows = self.n_heads as usize * S;
        match &self.storage {
            AttentionStorage::Dense(d) if d.len() != rows * S => {
                bad(format!("dense record holds {} values", d.len()))
            }
            AttentionStorage::SparseTopK(sp) => {
                let k = sp.k as usize;
                if sp.k == 0 {
                    return bad("top-k records need k >= 1".into());
                }
                if sp.values.len() != rows * k
                    || sp.indices.len() != rows * k
                    || sp.target_argmax.len() != rows
                    || sp.target_max.len() != rows
                {
                    return bad("top-k arrays disagree with [H, S, k]".into());
                }
                if sp
                    .indices
                    .iter()
                    .chain(&sp.target_argmax)
                    .any(|&i| i >= SEQ_LEN)
                {
                    return bad(format!("column index >= {SEQ_LEN}"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Shape checks plus, for dense probabilities, rows summing to 1 ± 1e-4.
    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if let (AttentionStorage::Dense(_), AttentionSpace::Probabilities) =
            (&self.storage, self.space)
        {
            for head in 0..self.n_heads {
                for query in 0..SEQ_LEN {
                    let sum: f64 = self
                        .row(head, query)
                        .expect("row")
                        .iter()
                        .map(|&v| f64::from(v))
                        .sum();
                    if (sum - 1.0).abs() > 1e-4 {
                        return Err(TensorIoError::Invalid(format!(
                            "layer {} head {head} row {query} sums to {sum}",
                            self.layer
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> Result<Vec<Tensor>> {
        let (h, s) = (u64::from(self.n_heads), u64::from(SEQ_LEN));
        let (storage, k) = match &self.storage {
            AttentionStorage::Dense(_) => (0, 0),
            AttentionStorage::SparseTopK(sp) => (1, sp.k),
        };
        let mut out = vec![Tensor::u32(
            vec![4],
            vec![self.layer, self.space.code(), storage, k],
        )?];
        match &self.storage {
            AttentionStorage::Dense(d) => out.push(Tensor::f32(vec![h, s, s], d.clone())?),
            AttentionStorage::SparseTopK(sp) => {
                let k = u64::from(sp.k);
                out.push(Tensor::f32(vec![h, s, k], sp.values.clone())?);
                out.push(Tensor::u32(vec![h, s, k], sp.indices.clone())?);
                out.push(Tensor::u32(vec![h, s], sp.target_argmax.clone())?);
                out.push(Tensor::f32(vec![h, s], sp.target_max.clone())?);
            }
        }
        Ok(out)
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let bad = |m: &str| TensorIoError::Invalid(format!("attention file: {m}"));
        let mut it = tensors.into_iter();
        let meta = it.next().ok_or_else(|| bad("missing descriptor"))?;
        let [layer, space, storage, k] =
            <[u32; 4]>::try_from(meta.as_u32().ok_or_else(|| bad("descriptor must be u32"))?)
                .map_err(|_| bad("descriptor must hold 4 values"))?;
        let space = match space {
            0 => AttentionSpace::Probabilities,
            1 => AttentionSpace::Logits,
            _ => return Err(bad("unknown space code")),
        };
        let f32_of = |t: Option<Tensor>, name: &str| -> Result<(Vec<u64>, Vec<f32>)> {
            let t = t.ok_or_else(|| bad(&format!("missing {name}")))?;
            let dims = t.dims.clone();
            match t.data {
                super::format::TensorData::F32(v) => Ok((dims, v)),
                _ => Err(bad(&format!("{name} must be f32"))),
            }
        };
        let u32_of = |t: Option<Tensor>, name: &str| -> Result<(Vec<u64>, Vec<u32>)> {
            let t = t.ok_or_else(|| bad(&format!("missing {name}")))?;
            let dims = t.dims.clone();
            match t.data {
                super::format::TensorData::U32(v) => Ok((dims, v)),
                _ => Err(bad(&format!("{name} must be u32"))),
            }
        };
        let s = u64::from(SEQ_LEN);
        let rec = match storage {
            0 => {
                let (dims, data) = f32_of(it.next(), "dense map")?;
                if dims.len() != 3 || dims[1] != s || dims[2] != s {
                    return Err(bad("dense map must be [H, 2748, 2748]"));
                }
                Self {
                    layer,
                    n_heads: dims[0] as u32,
                    space,
                    storage: AttentionStorage::Dense(data),
                }
            }
            1 => {
                let (vd, values) = f32_of(it.next(), "values")?;
                let (id, indices) = u32_of(it.next(), "indices")?;
                let (ad, target_argmax) = u32_of(it.next(), "target_argmax")?;
                let (md, target_max) = f32_of(it.next(), "target_max")?;
                let h = *vd.first().ok_or_else(|| bad("values must be [H, S, k]"))?;
                let kk = u64::from(k);
                if vd != [h, s, kk] || id != [h, s, kk] || ad != [h, s] || md != [h, s] {
                    return Err(bad("top-k record shapes disagree"));
                }
                Self {
                    layer,
                    n_heads: h as u32,
                    space,
                    storage: AttentionStorage::SparseTopK(SparseTopK {
                        k,
                        values,
                        indices,
                        target_argmax,
                        target_max,
                    }),
                }
            }
            _ => return Err(bad("unknown storage code")),
        };
        if it.next().is_some() {
            return Err(bad("unexpected extra records"));
        }
        rec.validate_shape()?;
        Ok(rec)
    }
}

pub fn write_attention(path: &Path, record: &AttentionRecord) -> Result<()> {
    write_tensors(path, &record.to_tensors()?)
}

pub fn read_attention(path: &Path) -> Result<AttentionRecord> {
    AttentionRecord::from_tensors(read_tensors(path)?)
}
