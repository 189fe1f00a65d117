//! Dataset ingestion and the patch-extraction protocol: subimage selection,
//! tiling, background filtering, patient-level folds, bag assembly, and a
//! synthetic bag generator.

mod bags;
mod folds;
mod image;
mod manifest;
mod protocol;
pub mod synth;

pub use bags::{build_bags, image_bags, Bag, BagOptions, Provenance};
pub use folds::{make_folds, FoldPlan, Role};
pub use image::{save_gray_png, RgbBuffer};
pub use manifest::{write_manifest, Layout, Manifest, ManifestEntry, DESCRIPTOR_FILE};
pub use protocol::{
    extract_subimages, tile_grid, tile_patches, white_filter, ExtractMode, FilterDecision, Patch, Subimage,
    DEFAULT_WHITE_THRESHOLD, PATCH_SIZE, SUBIMAGE_SIZE, TRAIN_SUBIMAGES,
};
pub use synth::{synth_bags, SynthConfig, SynthDataset};
