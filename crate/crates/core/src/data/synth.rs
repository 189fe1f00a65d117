//! Synthetic witness-detection bags for desk-scale end-to-end checks.
//!
//! Negative instances are clipped Gaussian colour noise. A witness instance
//! additionally carries a bright centered square one third of the patch side.
//! A bag is positive iff it holds at least one witness. Witness flags are
//! returned for diagnostics only.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::bags::{Bag, Provenance};
use super::image::RgbBuffer;
use super::manifest::{write_manifest, Layout, DESCRIPTOR_FILE};
use super::protocol::{Patch, TRAIN_SUBIMAGES};
use crate::error::{Error, Result};
use crate::numerics::{Prng, Purpose, StreamKey};

const BACKGROUND_MEAN: [f64; 3] = [0.80, 0.55, 0.70];
const BACKGROUND_SD: f64 = 0.12;
const WITNESS_MEAN: f64 = 0.96;
const WITNESS_SD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_bags: usize,
    pub k_min: usize,
    pub k_max: usize,
    /// Per-instance witness probability inside positive bags.
    pub witness_rate: f64,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_bags: 400,
            k_min: 5,
            k_max: 15,
            witness_rate: 0.2,
            patch_size: 24,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bags == 0 || !self.num_bags.is_multiple_of(2) {
            return Err(Error::config(format!(
                "num_bags must be a positive even number, got {}",
                self.num_bags
            )));
        }
        if self.k_min < 1 || self.k_max < self.k_min {
            return Err(Error::config(format!(
                "need 1 <= k_min <= k_max, got {}..{}",
                self.k_min, self.k_max
            )));
        }
        if !(self.witness_rate > 0.0 && self.witness_rate < 1.0) {
            return Err(Error::config(format!(
                "witness_rate must lie in (0, 1), got {}",
                self.witness_rate
            )));
        }
        if self.patch_size < 3 {
            return Err(Error::config(format!(
                "patch_size must be at least 3, got {}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub bags: Vec<Bag>,
    /// `witness[b][k]`: instance `k` of bag `b` is a witness.
    pub witness: Vec<Vec<bool>>,
    pub patch_size: usize,
}

fn channel(rng: &mut Prng, dist: &Normal<f64>) -> u8 {
    (dist.sample(rng).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One instance; `witness` adds the bright centered square.
pub fn synth_patch(size: usize, witness: bool, rng: &mut Prng) -> RgbBuffer {
    let dists = BACKGROUND_MEAN.map(|m| Normal::new(m, BACKGROUND_SD).expect("valid sd"));
    let mut data = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size {
        for d in &dists {
            data.push(channel(rng, d));
        }
    }
    let mut img = RgbBuffer::new(size, size, data).expect("consistent size");
    if witness {
        let side = size / 3;
        let start = (size - side) / 2;
        let bright = Normal::new(WITNESS_MEAN, WITNESS_SD).expect("valid sd");
        for y in start..start + side {
            for x in start..start + side {
                let px = [channel(rng, &bright), channel(rng, &bright), channel(rng, &bright)];
                img.set_pixel(x, y, px);
            }
        }
    }
    img
}

fn bag_name(i: usize) -> String {
    format!("bag_{i:04}")
}

pub fn synth_bags(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let key = StreamKey::new(config.seed).purpose(Purpose::Synth);
    let mut labels: Vec<u8> = (0..config.num_bags)
        .map(|i| u8::from(i < config.num_bags / 2))
        .collect();
    labels.shuffle(&mut key.child(0).rng());

    let mut bags = Vec::with_capacity(config.num_bags);
    let mut witness = Vec::with_capacity(config.num_bags);
    for (i, &label) in labels.iter().enumerate() {
        let mut rng = key.child(1).child(i as u64).rng();
        let k = rng.random_range(config.k_min..=config.k_max);
        let mut flags = vec![false; k];
        if label == 1 {
            for f in flags.iter_mut() {
                *f = rng.random::<f64>() < config.witness_rate;
            }
            if !flags.contains(&true) {
                let j = rng.random_range(0..k);
                flags[j] = true;
            }
        }
        let patches = flags
            .iter()
            .enumerate()
            .map(|(col, &w)| Patch {
                pixels: synth_patch(config.patch_size, w, &mut rng),
                row: 0,
                col,
            })
            .collect();
        let name = bag_name(i);
        bags.push(Bag {
            id: (i * TRAIN_SUBIMAGES) as u64,
            label,
            patches,
            provenance: Provenance {
                source: format!("{name}.png").into(),
                patient_id: name,
                offset: (0, 0),
            },
        });
        witness.push(flags);
    }
    Ok(SynthDataset {
        bags,
        witness,
        patch_size: config.patch_size,
    })
}

/// Lays a bag's patches out left to right in one strip image.
pub fn bag_strip(bag: &Bag, patch_size: usize) -> RgbBuffer {
    let mut img = RgbBuffer::filled(patch_size * bag.len(), patch_size, [0, 0, 0]);
    for (k, p) in bag.patches.iter().enumerate() {
        img.paste(&p.pixels, k * patch_size, 0);
    }
    img
}

/// A strip of `k` negative instances with exactly one witness; returns the
/// image and the witness position.
pub fn single_witness_strip(patch_size: usize, k: usize, key: StreamKey) -> (RgbBuffer, usize) {
    let mut rng = key.rng();
    let hit = rng.random_range(0..k);
    let mut img = RgbBuffer::filled(patch_size * k, patch_size, [0, 0, 0]);
    for j in 0..k {
        img.paste(&synth_patch(patch_size, j == hit, &mut rng), j * patch_size, 0);
    }
    (img, hit)
}

/// Writes one PNG strip per bag, `manifest.csv`, `witness.csv` and the
/// tiled-layout `dataset.cfg`.
pub fn write_dataset(dir: &Path, data: &SynthDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(data.bags.len());
    let mut witness = csv::Writer::from_path(dir.join("witness.csv"))?;
    witness.write_record(["bag", "patch", "witness"])?;
    for (bag, flags) in data.bags.iter().zip(&data.witness) {
        let name = bag.provenance.patient_id.clone();
        let file = format!("{name}.png");
        bag_strip(bag, data.patch_size).save_png(&dir.join(&file))?;
        for (k, &w) in flags.iter().enumerate() {
            witness.write_record([name.as_str(), &k.to_string(), if w { "1" } else { "0" }])?;
        }
        rows.push((file, bag.label, name));
    }
    witness.flush()?;
    write_manifest(&dir.join("manifest.csv"), &rows)?;
    std::fs::write(
        dir.join(DESCRIPTOR_FILE),
        Layout::Tiled {
            patch_size: data.patch_size,
        }
        .to_descriptor(),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_bags, make_folds, Manifest, Role};

    fn small() -> SynthConfig {
        SynthConfig {
            num_bags: 20,
            k_min: 2,
            k_max: 6,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn balanced_and_labels_are_or_of_witnesses() {
        let d = synth_bags(&SynthConfig {
            num_bags: 100,
            ..small()
        })
        .unwrap();
        assert_eq!(d.bags.iter().filter(|b| b.label == 1).count(), 50);
        for (b, w) in d.bags.iter().zip(&d.witness) {
            assert_eq!(b.label == 1, w.contains(&true));
            assert_eq!(b.len(), w.len());
            assert!((2..=6).contains(&b.len()));
            assert!(b
                .patches
                .iter()
                .all(|p| p.pixels.width() == 24 && p.pixels.height() == 24));
        }
    }

    #[test]
    fn deterministic() {
        let a = synth_bags(&small()).unwrap();
        let b = synth_bags(&small()).unwrap();
        assert_eq!(a.bags, b.bags);
        assert_eq!(a.witness, b.witness);
        let c = synth_bags(&SynthConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.bags, c.bags);
    }

    #[test]
    fn invalid_configs() {
        for bad in [
            SynthConfig { k_min: 0, ..small() },
            SynthConfig {
                k_max: 1,
                k_min: 2,
                ..small()
            },
            SynthConfig {
                witness_rate: 1.0,
                ..small()
            },
            SynthConfig { num_bags: 7, ..small() },
        ] {
            assert!(matches!(synth_bags(&bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn witness_square_is_bright() {
        let mut rng = StreamKey::new(0).rng();
        let p = synth_patch(24, true, &mut rng);
        let c = p.pixel(12, 12);
        assert!(c.iter().all(|&v| v > 220));
        let n = synth_patch(24, false, &mut rng);
        let mean: f64 = n.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n.data().len() as f64;
        assert!((mean - 255.0 * 0.6833).abs() < 10.0);
    }

    #[test]
    fn written_dataset_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_bags(&small()).unwrap();
        write_dataset(dir.path(), &d).unwrap();
        let manifest = Manifest::load(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(manifest.layout, Layout::Tiled { patch_size: 24 });
        let plan = make_folds(&manifest.entries, 2, 0.1, StreamKey::new(0)).unwrap();
        let mut reloaded = Vec::new();
        for role in [Role::Train, Role::Val, Role::Test] {
            reloaded.extend(build_bags(&manifest, &plan, 0, role, 240).unwrap());
        }
        reloaded.sort_by_key(|b| b.id);
        assert_eq!(reloaded.len(), d.bags.len());
        for (r, o) in reloaded.iter().zip(&d.bags) {
            assert_eq!(r.id, o.id);
            assert_eq!(r.label, o.label);
            assert_eq!(r.patches, o.patches);
        }
        let witness = std::fs::read_to_string(dir.path().join("witness.csv")).unwrap();
        assert_eq!(
            witness.lines().count(),
            1 + d.witness.iter().map(Vec::len).sum::<usize>()
        );
    }

    #[test]
    fn single_witness_strip_marks_one_patch() {
        let (img, hit) = single_witness_strip(24, 9, StreamKey::new(11));
        assert_eq!(img.width(), 24 * 9);
        assert!(img.pixel(hit * 24 + 12, 12).iter().all(|&v| v > 220));
    }
}
