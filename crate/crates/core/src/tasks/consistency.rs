use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::mnist::ImageDataset;

/// The three self-consistency pair constructions over masked images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "setting", rename_all = "snake_case")]
pub enum ConsistencySetting {
    /// (X, mask(X, t)): MI should be non-decreasing in t.
    Baseline { rows_kept: usize },
    /// ([X, X], [mask(X, t), mask(X, t−3)]): extra processing must not add
    /// information, ideal ratio to the baseline is 1.
    DataProcessing { rows_kept: usize },
    /// ([X₁, X₂], [mask(X₁, t), mask(X₂, t)]) with independent X₁, X₂:
    /// ideal ratio to the baseline is 2.
    Additivity { rows_kept: usize },
}

impl ConsistencySetting {
    pub fn rows_kept(&self) -> usize {
        match *self {
            ConsistencySetting::Baseline { rows_kept }
            | ConsistencySetting::DataProcessing { rows_kept }
            | ConsistencySetting::Additivity { rows_kept } => rows_kept,
        }
    }

    /// Channel counts of the (x, y) views.
    pub fn channels(&self) -> (usize, usize) {
        match self {
            ConsistencySetting::Baseline { .. } => (1, 1),
            ConsistencySetting::DataProcessing { .. } | ConsistencySetting::Additivity { .. } => {
                (2, 2)
            }
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            ConsistencySetting::Baseline { .. } => "baseline",
            ConsistencySetting::DataProcessing { .. } => "data_processing",
            ConsistencySetting::Additivity { .. } => "additivity",
        }
    }
}

/// Zero out rows [t, H); rows [0, t) pass through. Pure: the input slice is
/// untouched. Operates per channel on a (C·H·W) buffer.
pub fn mask_rows(image: &[f64], channels: usize, side: usize, t: usize) -> Vec<f64> {
    debug_assert!(t <= side);
    debug_assert_eq!(image.len(), channels * side * side);
    let mut out = image.to_vec();
    for c in 0..channels {
        let base = c * side * side;
        out[base + t * side..base + side * side].fill(0.0);
    }
    out
}

/// Draw a batch of (x, y) views for a self-consistency setting. Stacking is
/// on the channel axis; flattened rows are C·H·W so concatenation stacks
/// channels.
pub fn consistency_batch(
    setting: &ConsistencySetting,
    dataset: &ImageDataset,
    n: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    let side = dataset.side();
    let t = setting.rows_kept();
    if t > side {
        return Err(Error::contract(
            "consistency_batch",
            format!("rows_kept {t} exceeds image height {side}"),
        ));
    }
    let p = side * side;
    let (cx, cy) = setting.channels();
    let mut x = Vec::with_capacity(n * cx * p);
    let mut y = Vec::with_capacity(n * cy * p);
    match *setting {
        ConsistencySetting::Baseline { rows_kept } => {
            for _ in 0..n {
                let img = dataset.image(rng.usize_below(dataset.len()));
                x.extend_from_slice(img);
                y.extend(mask_rows(img, 1, side, rows_kept));
            }
        }
        ConsistencySetting::DataProcessing { rows_kept } => {
            if rows_kept < 3 {
                return Err(Error::contract(
                    "consistency_batch",
                    format!("data_processing requires rows_kept ≥ 3, got {rows_kept}"),
                ));
            }
            for _ in 0..n {
                let img = dataset.image(rng.usize_below(dataset.len()));
                x.extend_from_slice(img);
                x.extend_from_slice(img);
                y.extend(mask_rows(img, 1, side, rows_kept));
                y.extend(mask_rows(img, 1, side, rows_kept - 3));
            }
        }
        ConsistencySetting::Additivity { rows_kept } => {
            for _ in 0..n {
                let img1 = dataset.image(rng.usize_below(dataset.len())).to_vec();
                let img2 = dataset.image(rng.usize_below(dataset.len())).to_vec();
                x.extend_from_slice(&img1);
                x.extend_from_slice(&img2);
                y.extend(mask_rows(&img1, 1, side, rows_kept));
                y.extend(mask_rows(&img2, 1, side, rows_kept));
            }
        }
    }
    Ok((
        Tensor::from_vec(vec![n, cx * p], x),
        Tensor::from_vec(vec![n, cy * p], y),
    ))
}
