//! Subimage selection, tiling and background filtering.

use std::path::Path;

use super::image::RgbBuffer;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Side of the square subimages cut from each slide excerpt.
pub const SUBIMAGE_SIZE: usize = 768;
/// Side of the square patches (instances).
pub const PATCH_SIZE: usize = 96;
/// Overlapping subimages taken from each training image.
pub const TRAIN_SUBIMAGES: usize = 8;
/// A pixel is background when every channel is at or above this value.
pub const DEFAULT_WHITE_THRESHOLD: u8 = 240;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractMode {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subimage {
    /// Top-left corner `(x, y)` in the source image.
    pub offset: (usize, usize),
    pub pixels: RgbBuffer,
}

/// One instance: a square RGB block and its `(row, col)` cell in the tiling grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub pixels: RgbBuffer,
    pub row: usize,
    pub col: usize,
}

impl Patch {
    pub fn to_tensor(&self) -> Tensor {
        self.pixels.to_tensor()
    }
}

/// Subimage offsets along one axis in training mode: `round(i * slack / 7)`.
fn sliding_offsets(slack: usize) -> Vec<usize> {
    let steps = (TRAIN_SUBIMAGES - 1) as f64;
    (0..TRAIN_SUBIMAGES)
        .map(|i| (i as f64 * slack as f64 / steps).round() as usize)
        .collect()
}

/// Eight overlapping subimages sliding along the longer axis (train), or the
/// single centered one (test). The shorter axis is always centered.
pub fn extract_subimages(image: &RgbBuffer, mode: ExtractMode, source: &Path) -> Result<Vec<Subimage>> {
    let (w, h) = (image.width(), image.height());
    if w < SUBIMAGE_SIZE || h < SUBIMAGE_SIZE {
        return Err(Error::Ingest {
            path: source.to_path_buf(),
            message: format!("image is {w}x{h}; at least {SUBIMAGE_SIZE}x{SUBIMAGE_SIZE} is required"),
        });
    }
    let (slack_x, slack_y) = (w - SUBIMAGE_SIZE, h - SUBIMAGE_SIZE);
    let offsets: Vec<(usize, usize)> = match mode {
        ExtractMode::Test => vec![(slack_x / 2, slack_y / 2)],
        ExtractMode::Train if slack_x >= slack_y => {
            sliding_offsets(slack_x).into_iter().map(|x| (x, slack_y / 2)).collect()
        }
        ExtractMode::Train => sliding_offsets(slack_y).into_iter().map(|y| (slack_x / 2, y)).collect(),
    };
    offsets
        .into_iter()
        .map(|(x, y)| {
            Ok(Subimage {
                offset: (x, y),
                pixels: image.crop(x, y, SUBIMAGE_SIZE, SUBIMAGE_SIZE)?,
            })
        })
        .collect()
}

/// Splits a 768x768 subimage into its 8x8 grid of 96x96 patches, row-major.
pub fn tile_patches(subimage: &RgbBuffer) -> Result<Vec<Patch>> {
    if subimage.width() != SUBIMAGE_SIZE || subimage.height() != SUBIMAGE_SIZE {
        return Err(Error::Internal(format!(
            "tile_patches expects a {SUBIMAGE_SIZE}x{SUBIMAGE_SIZE} subimage, got {}x{}",
            subimage.width(),
            subimage.height()
        )));
    }
    Ok(tile_grid(subimage, PATCH_SIZE))
}

/// Non-overlapping `size x size` tiling in row-major order; a remainder
/// narrower than one patch on the right or bottom edge is ignored.
pub fn tile_grid(image: &RgbBuffer, size: usize) -> Vec<Patch> {
    let (rows, cols) = (image.height() / size, image.width() / size);
    let mut out = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let pixels = image
                .crop(col * size, row * size, size, size)
                .expect("grid cell lies inside the image");
            out.push(Patch { pixels, row, col });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Discard,
}

/// Discards a patch when strictly more than 75% of its pixels are white.
pub fn white_filter(patch: &RgbBuffer, threshold: u8) -> FilterDecision {
    let total = patch.width() * patch.height();
    let white = patch.pixels().filter(|p| p.iter().all(|&c| c >= threshold)).count();
    if 4 * white > 3 * total {
        FilterDecision::Discard
    } else {
        FilterDecision::Keep
    }
}
