use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{AttentionError, Result};
use crate::scene::{NUM_PATCHES, PATCH_GRID, PATCH_SIZE_PX};

pub const REGISTER_TOKENS: u32 = 4;
pub const TOKENS_PER_VIEW: u32 = 1 + REGISTER_TOKENS + NUM_PATCHES;
pub const NUM_VIEWS: u32 = 2;
pub const SEQ_LEN: u32 = NUM_VIEWS * TOKENS_PER_VIEW;
pub const NUM_LAYERS: u32 = 24;
pub const NUM_HEADS: u32 = 16;
/// Upper bound of a heads-matched count, one per (layer, head).
pub const MAX_HEADS_MATCHED: u32 = NUM_LAYERS * NUM_HEADS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Camera,
    Register(u32),
    Patch(u32),
}

/// Token order of a two-view sequence: view 0 then view 1, and within a
/// view the camera token, the register tokens, then the patches row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub views: u32,
    pub camera_tokens: u32,
    pub register_tokens: u32,
    pub patch_tokens: u32,
    pub patch_grid: u32,
    pub patch_size_px: u32,
    pub tokens_per_view: u32,
    pub seq_len: u32,
}

impl Default for TokenLayout {
    fn default() -> Self {
        Self {
            views: NUM_VIEWS,
            camera_tokens: 1,
            register_tokens: REGISTER_TOKENS,
            patch_tokens: NUM_PATCHES,
            patch_grid: PATCH_GRID,
            patch_size_px: PATCH_SIZE_PX,
            tokens_per_view: TOKENS_PER_VIEW,
            seq_len: SEQ_LEN,
        }
    }
}

pub fn token_index(view: u32, token: Token) -> Result<u32> {
    if view >= NUM_VIEWS {
        return Err(AttentionError::InvalidIndex(format!("view {view}")));
    }
    let offset = view * TOKENS_PER_VIEW;
    match token {
        Token::Camera => Ok(offset),
        Token::Register(r) if r < REGISTER_TOKENS => Ok(offset + 1 + r),
        Token::Patch(p) if p < NUM_PATCHES => Ok(offset + 1 + REGISTER_TOKENS + p),
        other => Err(AttentionError::InvalidIndex(format!("{other:?}"))),
    }
}

/// Inverse of [`token_index`].
pub fn token_at(position: u32) -> Result<(u32, Token)> {
    if position >= SEQ_LEN {
        return Err(AttentionError::InvalidIndex(format!("position {position}")));
    }
    let view = position / TOKENS_PER_VIEW;
    let local = position % TOKENS_PER_VIEW;
    let token = match local {
        0 => Token::Camera,
        l if l <= REGISTER_TOKENS => Token::Register(l - 1),
        l => Token::Patch(l - 1 - REGISTER_TOKENS),
    };
    Ok((view, token))
}

/// Sequence positions of a view's patch tokens.
pub fn patch_columns(view: u32) -> Range<u32> {
    let start = view * TOKENS_PER_VIEW + 1 + REGISTER_TOKENS;
    start..start + NUM_PATCHES
}

/// Patch index of a sequence position if it is a patch token of `view`.
pub fn patch_of_column(view: u32, column: u32) -> Option<u32> {
    let r = patch_columns(view);
    r.contains(&column).then(|| column - r.start)
}
