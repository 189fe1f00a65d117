//! Binary checkpoint: `MILCKPT`, a u32 format version, a u32-length-prefixed
//! UTF-8 `key = value` blob, then one record per tensor (u32 name length,
//! name, u32 rank, u64 extents, f64 payload) until end of file. All integers
//! and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::TrainConfig;
use crate::data::Layout;
use crate::error::{Error, Result};
use crate::kv;
use crate::model::{InstanceClassifierConfig, MilModel, ModelParams, PARAMS_VERSION};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 7] = b"MILCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// A trained model with everything needed to rebuild and explain it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// The model's pooling operator is `train.pooling`.
    pub model: MilModel,
    pub layout: Layout,
    pub train: TrainConfig,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl Checkpoint {
    fn config_blob(&self) -> String {
        let mut lines = Vec::new();
        lines.extend(self.model.classifier.to_kv());
        lines.extend(self.layout.to_kv());
        lines.extend(self.train.to_kv());
        lines.push(("best_epoch", self.best_epoch.to_string()));
        lines.push(("best_val_loss", self.best_val_loss.to_string()));
        lines.push(("params_version", self.model.params.version.to_string()));
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let blob = self.config_blob();
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(blob.as_bytes());
        for (name, t) in self.model.params.named() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let blob_len = r.u32()? as usize;
        let blob =
            std::str::from_utf8(r.take(blob_len)?).map_err(|_| Error::Checkpoint("config blob is not UTF-8".into()))?;

        let mut tensors = BTreeMap::new();
        while !r.done() {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        Checkpoint::assemble(blob, tensors)
    }

    fn assemble(blob: &str, mut tensors: BTreeMap<String, Tensor>) -> Result<Checkpoint> {
        let bad = |e: Error| Error::Checkpoint(format!("config blob: {e}"));
        let mut fields = BTreeMap::new();
        let mut train = TrainConfig::default();
        for (k, v) in kv::parse(blob).map_err(bad)? {
            if !train.set(&k, &v).map_err(bad)? {
                fields.insert(k, v);
            }
        }
        let mut take = |k: &str| {
            fields
                .remove(k)
                .ok_or_else(|| Error::Checkpoint(format!("config blob lacks {k}")))
        };
        let classifier = InstanceClassifierConfig::from_kv(&take("layers")?, &take("input_shape")?).map_err(bad)?;
        let layout_name = take("layout")?;
        let patch_size = take("patch_size")
            .ok()
            .map(|v| kv::parse_value("patch_size", &v))
            .transpose()
            .map_err(bad)?;
        let layout = Layout::from_kv(&layout_name, patch_size).map_err(bad)?;
        let best_epoch = kv::parse_value("best_epoch", &take("best_epoch")?).map_err(bad)?;
        let best_val_loss = kv::parse_value("best_val_loss", &take("best_val_loss")?).map_err(bad)?;
        let params_version: u32 = kv::parse_value("params_version", &take("params_version")?).map_err(bad)?;
        if params_version != PARAMS_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported parameter version {params_version}"
            )));
        }
        if let Some(k) = fields.keys().next() {
            return Err(Error::Checkpoint(format!("unknown config key {k:?}")));
        }

        let mut params = ModelParams::zeros(&classifier);
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        let model = MilModel::new(classifier, params, train.pooling).map_err(bad)?;
        Ok(Checkpoint {
            model,
            layout,
            train,
            best_epoch,
            best_val_loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated checkpoint: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::StreamKey;
    use crate::pooling::PoolingConfig;

    fn sample() -> Checkpoint {
        let classifier = InstanceClassifierConfig::default_for_patch(24).unwrap();
        let train = TrainConfig {
            pooling: PoolingConfig::lse(10.0),
            seed: 9,
            ..TrainConfig::default()
        };
        Checkpoint {
            model: MilModel::initialized(classifier, train.pooling, StreamKey::new(1)).unwrap(),
            layout: Layout::Tiled { patch_size: 24 },
            train,
            best_epoch: 7,
            best_val_loss: 0.123456789,
        }
    }

    #[test]
    fn byte_identical_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..7], b"MILCKPT");
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 1);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing")),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let mut bad_version = bytes.clone();
        bad_version[7] = 2;
        for bad in [
            &bad_magic[..],
            &bad_version[..],
            &bytes[..bytes.len() - 3],
            &bytes[..20],
        ] {
            assert!(matches!(Checkpoint::from_bytes(bad), Err(Error::Checkpoint(_))));
        }
        // dropping the last tensor record leaves a missing tensor
        let c = sample();
        let last = c
            .model
            .params
            .named()
            .last()
            .map(|(n, t)| 4 + n.len() + 4 + 8 * t.shape().len() + 8 * t.len())
            .unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - last]).is_err());
    }
}
