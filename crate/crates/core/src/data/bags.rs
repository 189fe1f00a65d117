use std::path::PathBuf;

use log::warn;

use super::folds::{FoldPlan, Role};
use super::image::RgbBuffer;
use super::manifest::{Layout, Manifest};
use super::protocol::{
    extract_subimages, tile_grid, white_filter, ExtractMode, FilterDecision, Patch, TRAIN_SUBIMAGES,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub source: PathBuf,
    pub patient_id: String,
    /// Top-left corner of the subimage in the source image.
    pub offset: (usize, usize),
}

/// A labelled, non-empty collection of patches. Patch order is the tiling order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bag {
    pub id: u64,
    pub label: u8,
    pub patches: Vec<Patch>,
    pub provenance: Provenance,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BagOptions {
    pub layout: Layout,
    pub white_threshold: u8,
}

/// Bags for one image. Bag ids are `row * 8 + subimage index`, so they are
/// unique within a manifest and stable across folds.
pub fn image_bags(
    image: &RgbBuffer,
    mode: ExtractMode,
    options: &BagOptions,
    row: usize,
    label: u8,
    provenance: Provenance,
) -> Result<Vec<Bag>> {
    let views: Vec<((usize, usize), Vec<Patch>)> = match options.layout {
        Layout::Slide => extract_subimages(image, mode, &provenance.source)?
            .into_iter()
            .map(|s| Ok((s.offset, super::protocol::tile_patches(&s.pixels)?)))
            .collect::<Result<_>>()?,
        Layout::Tiled { patch_size } => {
            if image.width() < patch_size || image.height() < patch_size {
                return Err(Error::Ingest {
                    path: provenance.source.clone(),
                    message: format!("image smaller than one {patch_size}px patch"),
                });
            }
            vec![((0, 0), tile_grid(image, patch_size))]
        }
    };
    let mut bags = Vec::with_capacity(views.len());
    for (i, (offset, patches)) in views.into_iter().enumerate() {
        let kept: Vec<Patch> = patches
            .into_iter()
            .filter(|p| white_filter(&p.pixels, options.white_threshold) == FilterDecision::Keep)
            .collect();
        if kept.is_empty() {
            warn!(
                "dropping subimage {i} at offset {offset:?} of {}: every patch is background",
                provenance.source.display()
            );
            continue;
        }
        bags.push(Bag {
            id: (row * TRAIN_SUBIMAGES + i) as u64,
            label,
            patches: kept,
            provenance: Provenance {
                offset,
                ..provenance.clone()
            },
        });
    }
    Ok(bags)
}

/// Bags of one fold split, in manifest order. Training and validation images
/// contribute one bag per overlapping subimage; test images one bag each.
pub fn build_bags(
    manifest: &Manifest,
    plan: &FoldPlan,
    fold: usize,
    role: Role,
    white_threshold: u8,
) -> Result<Vec<Bag>> {
    if fold >= plan.k {
        return Err(Error::config(format!("fold {fold} out of range for {} folds", plan.k)));
    }
    let options = BagOptions {
        layout: manifest.layout,
        white_threshold,
    };
    let mode = match role {
        Role::Test => ExtractMode::Test,
        Role::Train | Role::Val => ExtractMode::Train,
    };
    let mut bags = Vec::new();
    for (row, entry) in manifest.entries.iter().enumerate() {
        if plan.role(fold, &entry.patient_id) != Some(role) {
            continue;
        }
        let image = RgbBuffer::load(&entry.path)?;
        bags.extend(image_bags(
            &image,
            mode,
            &options,
            row,
            entry.label,
            Provenance {
                source: entry.path.clone(),
                patient_id: entry.patient_id.clone(),
                offset: (0, 0),
            },
        )?);
    }
    Ok(bags)
}
