//! Correspondence matching read off global-attention maps.
//!
//! A source patch *matches* in a head when the largest attention entry of its
//! query row, restricted to the other view's patch columns, falls on a patch
//! that truly corresponds. Exact ties count as a hit when any tied column is
//! a true target.

mod layout;

pub use layout::{
    patch_columns, patch_of_column, token_at, token_index, Token, TokenLayout, MAX_HEADS_MATCHED,
    NUM_HEADS, NUM_LAYERS, NUM_VIEWS, REGISTER_TOKENS, SEQ_LEN, TOKENS_PER_VIEW,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{Direction, PatchCorrespondences};
use crate::tensor_io::{AttentionRecord, RowMaximum};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("invalid token index: {0}")]
    InvalidIndex(String),
    #[error("no patch correspondences in direction {0}")]
    EmptyCorrespondences(Direction),
    #[error("layer {0} missing from the attention stack")]
    MissingLayer(u32),
    #[error("layer {0} appears twice in the attention stack")]
    DuplicateLayer(u32),
    #[error("heads-matched count {0} exceeds {MAX_HEADS_MATCHED}")]
    CeilingExceeded(u32),
    #[error("nothing to aggregate")]
    NoReports,
}

pub type Result<T> = std::result::Result<T, AttentionError>;

/// Columns searched for the argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgmaxScope {
    /// Only the other view's patch tokens.
    #[default]
    TargetPatches,
    /// Every token of the sequence, including special and same-view tokens.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchingRow {
    pub layer: u32,
    pub head: u32,
    pub direction: Direction,
    pub accuracy: f64,
    pub n_pairs: u64,
}

fn is_hit(
    max: &RowMaximum,
    direction: Direction,
    targets: &std::collections::BTreeSet<u32>,
) -> bool {
    let view = u32::from(direction.target_view());
    max.columns
        .iter()
        .any(|&c| patch_of_column(view, c).is_some_and(|p| targets.contains(&p)))
}

fn row_maximum(
    attn: &AttentionRecord,
    head: u32,
    query: u32,
    scope: ArgmaxScope,
) -> Option<RowMaximum> {
    match scope {
        ArgmaxScope::TargetPatches => attn.target_maximum(head, query),
        ArgmaxScope::Global => attn.global_maximum(head, query),
    }
}

/// Whether `source`'s query row matches in `head`.
pub fn patch_matches(
    attn: &AttentionRecord,
    head: u32,
    source: u32,
    patch_corrs: &PatchCorrespondences,
    direction: Direction,
    scope: ArgmaxScope,
) -> Result<bool> {
    let Some(targets) = patch_corrs.targets(direction, source) else {
        return Ok(false);
    };
    let query = token_index(u32::from(direction.source_view()), Token::Patch(source))?;
    Ok(row_maximum(attn, head, query, scope).is_some_and(|m| is_hit(&m, direction, targets)))
}

/// Per-head accuracy of one layer: hits over unique source patches with at
/// least one correspondence.
pub fn matching_accuracy(
    attn: &AttentionRecord,
    patch_corrs: &PatchCorrespondences,
    direction: Direction,
    scope: ArgmaxScope,
) -> Result<Vec<MatchingRow>> {
    let sources = patch_corrs.map(direction);
    if sources.is_empty() {
        return Err(AttentionError::EmptyCorrespondences(direction));
    }
    let n = sources.len() as u64;
    (0..attn.n_heads)
        .map(|head| {
            let mut hits = 0u64;
            for &source in sources.keys() {
                if patch_matches(attn, head, source, patch_corrs, direction, scope)? {
                    hits += 1;
                }
            }
            Ok(MatchingRow {
                layer: attn.layer,
                head,
                direction,
                accuracy: hits as f64 / n as f64,
                n_pairs: n,
            })
        })
        .collect()
}

/// Checks that a stack holds every layer exactly once and returns it
/// ordered by layer.
pub fn ordered_stack(stack: &[AttentionRecord]) -> Result<Vec<&AttentionRecord>> {
    let mut by_layer: BTreeMap<u32, &AttentionRecord> = BTreeMap::new();
    for rec in stack {
        if by_layer.insert(rec.layer, rec).is_some() {
            return Err(AttentionError::DuplicateLayer(rec.layer));
        }
    }
    if let Some(missing) = (0..NUM_LAYERS).find(|l| !by_layer.contains_key(l)) {
        return Err(AttentionError::MissingLayer(missing));
    }
    Ok(by_layer.into_values().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadsMatchedCount {
    pub patch: u32,
    pub count: u32,
}

/// Number of (layer, head) pairs in which `patch` matches, over all 24
/// global layers.
pub fn heads_matched(
    stack: &[AttentionRecord],
    patch: u32,
    patch_corrs: &PatchCorrespondences,
    direction: Direction,
) -> Result<HeadsMatchedCount> {
    let mut count = 0u32;
    for rec in ordered_stack(stack)? {
        for head in 0..rec.n_heads {
            if patch_matches(
                rec,
                head,
                patch,
                patch_corrs,
                direction,
                ArgmaxScope::TargetPatches,
            )? {
                count += 1;
            }
        }
    }
    if count > MAX_HEADS_MATCHED {
        return Err(AttentionError::CeilingExceeded(count));
    }
    Ok(HeadsMatchedCount { patch, count })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadsMatchedComparison {
    pub patch: u32,
    pub clean: u32,
    pub occluded: u32,
}

impl HeadsMatchedComparison {
    pub fn delta(&self) -> i64 {
        i64::from(self.occluded) - i64::from(self.clean)
    }

    /// Fraction of clean matches still present, `None` without clean matches.
    pub fn retained(&self) -> Option<f64> {
        (self.clean > 0).then(|| f64::from(self.occluded) / f64::from(self.clean))
    }
}

/// Heads-matched counts for the same patches in a clean and an occluded
/// run, scored against the same ground truth.
pub fn compare_heads_matched(
    clean: &[AttentionRecord],
    occluded: &[AttentionRecord],
    patches: &[u32],
    patch_corrs: &PatchCorrespondences,
    direction: Direction,
) -> Result<Vec<HeadsMatchedComparison>> {
    patches
        .iter()
        .map(|&patch| {
            Ok(HeadsMatchedComparison {
                patch,
                clean: heads_matched(clean, patch, patch_corrs, direction)?.count,
                occluded: heads_matched(occluded, patch, patch_corrs, direction)?.count,
            })
        })
        .collect()
}

/// Matching rows of one scene pair, tagged for aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMatching {
    pub scene: String,
    pub mode: String,
    pub rows: Vec<MatchingRow>,
}

/// Unweighted mean over scenes within each mode, then over modes, per
/// (layer, head, direction). `n_pairs` sums the evaluated source patches.
pub fn aggregate_matching(items: &[SceneMatching]) -> Result<Vec<MatchingRow>> {
    if items.is_empty() {
        return Err(AttentionError::NoReports);
    }
    type Key = (Direction, u32, u32);
    let mut per_mode: BTreeMap<(Key, &str), (f64, u64, u64)> = BTreeMap::new();
    for item in items {
        for r in &item.rows {
            let e = per_mode
                .entry(((r.direction, r.layer, r.head), item.mode.as_str()))
                .or_default();
            e.0 += r.accuracy;
            e.1 += 1;
            e.2 += r.n_pairs;
        }
    }
    let mut per_key: BTreeMap<Key, (f64, u64, u64)> = BTreeMap::new();
    for ((key, _), (sum, count, pairs)) in per_mode {
        let e = per_key.entry(key).or_default();
        e.0 += sum / count as f64;
        e.1 += 1;
        e.2 += pairs;
    }
    Ok(per_key
        .into_iter()
        .map(
            |((direction, layer, head), (sum, modes, pairs))| MatchingRow {
                layer,
                head,
                direction,
                accuracy: sum / modes as f64,
                n_pairs: pairs,
            },
        )
        .collect())
}

/// `[layer][head]` accuracy matrix (24 × 16) of one direction; NaN where no
/// row exists.
pub fn accuracy_matrix(rows: &[MatchingRow], direction: Direction) -> Vec<Vec<f64>> {
    let mut m = vec![vec![f64::NAN; NUM_HEADS as usize]; NUM_LAYERS as usize];
    for r in rows.iter().filter(|r| r.direction == direction) {
        if r.layer < NUM_LAYERS && r.head < NUM_HEADS {
            m[r.layer as usize][r.head as usize] = r.accuracy;
        }
    }
    m
}
