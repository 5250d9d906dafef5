//! Synthetic few-shot segmentation episodes and the feature encoder.
//!
//! Eight shape classes are split into four folds of two test classes each.
//! Support images can carry two kinds of disruptive background: shapes of
//! classes absent from the query, and a designated lookalike of the target
//! class rendered with the target's intensity.

mod dump;
mod encoder;
mod generator;
pub mod shapes;

pub use dump::{read_dump, write_dump, DUMP_MAGIC, DUMP_VERSION};
pub use encoder::{extract_features, extract_features_chw, EncoderParams};
pub use generator::{
    episode_seed, generate_episode, generate_episode_with, mix64, Difficulty, Episode, EpisodeSampler, GenConfig,
    Sample,
};
pub use shapes::{rasterize_mask, ShapeClass, ShapeInstance, NUM_CLASSES};

use crate::error::{Result, TbsError};

pub const IMAGE_SIZE: usize = 64;
/// Side of the feature grid (output stride 8).
pub const FEAT_SIZE: usize = 8;
pub const FEAT_CHANNELS: usize = 32;
pub const NUM_FOLDS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

/// Fold `f` tests on classes `{2f, 2f+1}` and trains on the rest.
pub fn fold_split(fold_id: usize) -> Result<FoldSplit> {
    if fold_id >= NUM_FOLDS {
        return Err(TbsError::Fold(fold_id));
    }
    let test_classes = vec![2 * fold_id, 2 * fold_id + 1];
    let train_classes = (0..NUM_CLASSES).filter(|c| !test_classes.contains(c)).collect();
    Ok(FoldSplit {
        fold_id,
        train_classes,
        test_classes,
    })
}

/// 64×64 → 8×8: a cell is foreground iff at least half of its 8×8 block is.
pub fn downsample_mask(mask: &[bool]) -> Vec<bool> {
    assert_eq!(mask.len(), IMAGE_SIZE * IMAGE_SIZE, "mask must be 64x64");
    let block = IMAGE_SIZE / FEAT_SIZE;
    let mut out = vec![false; FEAT_SIZE * FEAT_SIZE];
    for (cell, o) in out.iter_mut().enumerate() {
        let (cy, cx) = (cell / FEAT_SIZE, cell % FEAT_SIZE);
        let count = (0..block)
            .flat_map(|dy| (0..block).map(move |dx| (cy * block + dy) * IMAGE_SIZE + cx * block + dx))
            .filter(|&i| mask[i])
            .count();
        *o = 2 * count >= block * block;
    }
    out
}

/// Nearest-neighbour upsampling of an 8×8 grid back to 64×64.
pub fn upsample_mask(cells: &[bool]) -> Vec<bool> {
    let block = IMAGE_SIZE / FEAT_SIZE;
    (0..IMAGE_SIZE * IMAGE_SIZE)
        .map(|i| {
            let (y, x) = (i / IMAGE_SIZE, i % IMAGE_SIZE);
            cells[(y / block) * FEAT_SIZE + x / block]
        })
        .collect()
}

/// Bilinear upsampling of 8×8 cell values to 64×64 with cell-centred
/// samples; values beyond the outer cell centres are held constant.
pub fn upsample_bilinear(cells: &[f32]) -> Vec<f32> {
    let block = (IMAGE_SIZE / FEAT_SIZE) as f32;
    let last = (FEAT_SIZE - 1) as f32;
    let coord = |p: usize| {
        let u = ((p as f32 + 0.5) / block - 0.5).clamp(0.0, last);
        let i = (u.floor() as usize).min(FEAT_SIZE - 2);
        (i, u - i as f32)
    };
    let mut out = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for y in 0..IMAGE_SIZE {
        let (i, fy) = coord(y);
        for x in 0..IMAGE_SIZE {
            let (j, fx) = coord(x);
            let at = |r: usize, c: usize| cells[r * FEAT_SIZE + c];
            let top = at(i, j) * (1.0 - fx) + at(i, j + 1) * fx;
            let bottom = at(i + 1, j) * (1.0 - fx) + at(i + 1, j + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
