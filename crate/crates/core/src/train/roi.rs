use std::path::Path;

use super::checkpoint::Checkpoint;
use crate::data::{
    extract_subimages, save_gray_png, tile_grid, white_filter, ExtractMode, FilterDecision, Layout, RgbBuffer,
};
use crate::error::{Error, Result};
use crate::numerics::{Mode, StreamKey};

#[derive(Debug, Clone, PartialEq)]
pub struct RoiCell {
    pub row: usize,
    pub col: usize,
    /// Instance score; 0 for discarded background patches.
    pub score: f64,
    pub discarded: bool,
}

/// Per-patch instance scores over the scored region and their heatmap.
#[derive(Debug, Clone)]
pub struct RoiMap {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    /// Row-major.
    pub cells: Vec<RoiCell>,
}

impl RoiMap {
    /// Highest-scoring cell, first in row-major order on ties.
    pub fn argmax(&self) -> &RoiCell {
        self.cells
            .iter()
            .reduce(|best, c| if c.score > best.score { c } else { best })
            .expect("at least one cell")
    }

    /// Grayscale heatmap, one `patch_size` square per cell, 0 black and 1 white.
    pub fn heatmap(&self) -> (usize, usize, Vec<u8>) {
        let (w, h) = (self.cols * self.patch_size, self.rows * self.patch_size);
        let mut pixels = vec![0u8; w * h];
        for (y, line) in pixels.chunks_exact_mut(w).enumerate() {
            for (x, px) in line.iter_mut().enumerate() {
                let cell = &self.cells[(y / self.patch_size) * self.cols + x / self.patch_size];
                *px = (cell.score * 255.0).round() as u8;
            }
        }
        (w, h, pixels)
    }

    pub fn save_heatmap(&self, path: &Path) -> Result<()> {
        let (w, h, pixels) = self.heatmap();
        save_gray_png(path, w, h, &pixels)
    }

    pub fn save_table(&self, path: &Path) -> Result<()> {
        let mut out = csv::Writer::from_path(path)?;
        out.write_record(["row", "col", "score", "discarded"])?;
        for c in &self.cells {
            out.write_record([
                c.row.to_string(),
                c.col.to_string(),
                c.score.to_string(),
                u8::from(c.discarded).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Scores every patch of the image's test view: the centered 768x768
/// subimage for slides, the whole grid for tiled images.
pub fn score_roi(checkpoint: &Checkpoint, image: &RgbBuffer, white_threshold: u8, source: &Path) -> Result<RoiMap> {
    let patch_size = checkpoint.layout.patch_size();
    let patches = match checkpoint.layout {
        Layout::Slide => {
            let sub = extract_subimages(image, ExtractMode::Test, source)?;
            tile_grid(&sub[0].pixels, patch_size)
        }
        Layout::Tiled { .. } => {
            if image.width() < patch_size || image.height() < patch_size {
                return Err(Error::Ingest {
                    path: source.to_path_buf(),
                    message: format!("image smaller than one {patch_size}px patch"),
                });
            }
            tile_grid(image, patch_size)
        }
    };
    let model = &checkpoint.model;
    let mut rng = StreamKey::new(0).rng();
    let mut cells = Vec::with_capacity(patches.len());
    for p in &patches {
        let discarded = white_filter(&p.pixels, white_threshold) == FilterDecision::Discard;
        let score = if discarded {
            0.0
        } else {
            model.instance_score(&p.to_tensor(), Mode::Eval, &mut rng)?
        };
        cells.push(RoiCell {
            row: p.row,
            col: p.col,
            score,
            discarded,
        });
    }
    let rows = patches.iter().map(|p| p.row + 1).max().unwrap_or(0);
    let cols = patches.iter().map(|p| p.col + 1).max().unwrap_or(0);
    Ok(RoiMap {
        rows,
        cols,
        patch_size,
        cells,
    })
}
