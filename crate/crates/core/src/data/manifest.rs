use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::protocol::PATCH_SIZE;
use crate::error::{Error, Result};
use crate::kv;

/// Name of the optional descriptor placed next to a manifest.
pub const DESCRIPTOR_FILE: &str = "dataset.cfg";

/// How images become bags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Slide excerpts: 768x768 subimages (eight overlapping ones per training
    /// image, the centered one per test image), each tiled into 96x96 patches.
    Slide,
    /// Each image is already one bag: a grid of `patch_size` squares.
    Tiled { patch_size: usize },
}

impl Layout {
    pub fn patch_size(&self) -> usize {
        match self {
            Layout::Slide => PATCH_SIZE,
            Layout::Tiled { patch_size } => *patch_size,
        }
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        match self {
            Layout::Slide => vec![("layout", "slide".into())],
            Layout::Tiled { patch_size } => vec![("layout", "tiled".into()), ("patch_size", patch_size.to_string())],
        }
    }

    pub fn from_kv(layout: &str, patch_size: Option<usize>) -> Result<Layout> {
        match (layout, patch_size) {
            ("slide", None) => Ok(Layout::Slide),
            ("slide", Some(p)) if p == PATCH_SIZE => Ok(Layout::Slide),
            ("tiled", Some(p)) if p > 0 => Ok(Layout::Tiled { patch_size: p }),
            ("tiled", None) => Err(Error::config("tiled layout needs patch_size")),
            _ => Err(Error::config(format!(
                "invalid layout {layout:?} / patch_size {patch_size:?}"
            ))),
        }
    }

    /// Reads a dataset descriptor (`layout = slide|tiled`, `patch_size = N`).
    pub fn from_descriptor(text: &str) -> Result<Layout> {
        let mut layout = None;
        let mut patch = None;
        for (k, v) in kv::parse(text)? {
            match k.as_str() {
                "layout" => layout = Some(v),
                "patch_size" => patch = Some(kv::parse_value::<usize>(&k, &v)?),
                _ => return Err(Error::config(format!("unknown dataset descriptor key {k:?}"))),
            }
        }
        Layout::from_kv(layout.as_deref().unwrap_or("slide"), patch)
    }

    pub fn to_descriptor(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layout::Slide => f.write_str("slide"),
            Layout::Tiled { patch_size } => write!(f, "tiled({patch_size}px)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Resolved against the manifest's directory.
    pub path: PathBuf,
    pub label: u8,
    pub patient_id: String,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub layout: Layout,
}

#[derive(Deserialize)]
struct Row {
    path: String,
    label: String,
    patient_id: String,
}

const HEADER: [&str; 3] = ["path", "label", "patient_id"];

impl Manifest {
    /// Loads `path,label,patient_id` rows. A `dataset.cfg` beside the
    /// manifest selects the layout; without one the slide protocol applies.
    pub fn load(path: &Path) -> Result<Manifest> {
        let ingest = |message: String| Error::Ingest {
            path: path.to_path_buf(),
            message,
        };
        let root = path.parent().unwrap_or(Path::new("."));
        let mut reader = csv::Reader::from_path(path).map_err(|e| ingest(e.to_string()))?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != HEADER {
            return Err(ingest(format!(
                "header must be `path,label,patient_id`, got {:?}",
                headers
            )));
        }
        let mut entries = Vec::new();
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| ingest(format!("row {}: {e}", i + 1)))?;
            let label = match row.label.trim() {
                "0" => 0,
                "1" => 1,
                other => return Err(ingest(format!("row {}: label must be 0 or 1, got {other:?}", i + 1))),
            };
            if row.patient_id.trim().is_empty() {
                return Err(ingest(format!("row {}: empty patient_id", i + 1)));
            }
            entries.push(ManifestEntry {
                path: root.join(row.path.trim()),
                label,
                patient_id: row.patient_id.trim().to_string(),
            });
        }
        if entries.is_empty() {
            return Err(ingest("manifest has no rows".into()));
        }
        let descriptor = root.join(DESCRIPTOR_FILE);
        let layout = if descriptor.exists() {
            Layout::from_descriptor(&std::fs::read_to_string(&descriptor)?)?
        } else {
            Layout::Slide
        };
        Ok(Manifest { entries, layout })
    }
}

/// Writes a manifest; `paths` are stored as given (typically relative).
pub fn write_manifest(path: &Path, rows: &[(String, u8, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for (p, label, patient) in rows {
        w.write_record([p.as_str(), &label.to_string(), patient.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_resolves_paths_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("manifest.csv");
        write_manifest(
            &m,
            &[("a.png".into(), 1, "p1".into()), ("b.png".into(), 0, "p2".into())],
        )
        .unwrap();
        let man = Manifest::load(&m).unwrap();
        assert_eq!(man.layout, Layout::Slide);
        assert_eq!(man.entries[0].path, dir.path().join("a.png"));
        assert_eq!(man.entries[1].label, 0);

        std::fs::write(
            dir.path().join(DESCRIPTOR_FILE),
            Layout::Tiled { patch_size: 24 }.to_descriptor(),
        )
        .unwrap();
        assert_eq!(Manifest::load(&m).unwrap().layout, Layout::Tiled { patch_size: 24 });
    }

    #[test]
    fn rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        std::fs::write(&m, "path,label,patient_id\na.png,2,p\n").unwrap();
        assert!(matches!(Manifest::load(&m), Err(Error::Ingest { .. })));
        std::fs::write(&m, "file,label,patient\na.png,1,p\n").unwrap();
        assert!(Manifest::load(&m).is_err());
        std::fs::write(&m, "path,label,patient_id\n").unwrap();
        assert!(Manifest::load(&m).is_err());
    }

    #[test]
    fn descriptor_round_trip() {
        for l in [Layout::Slide, Layout::Tiled { patch_size: 32 }] {
            assert_eq!(Layout::from_descriptor(&l.to_descriptor()).unwrap(), l);
        }
        assert!(Layout::from_descriptor("layout = tiled").is_err());
        assert!(Layout::from_descriptor("colour = red").is_err());
    }
}
