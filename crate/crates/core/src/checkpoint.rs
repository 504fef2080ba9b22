//! Checkpoint file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "LSFK" | u32 version | u32 config-text length | config text (UTF-8)
//! then repeated until EOF:
//!   u32 name length | name bytes | u8 rank | rank x u64 dims | f32 data
//! ```
//!
//! The config text is the canonical sorted `key=value` form of
//! [`ModelConfig`]. Tensor records hold every model parameter in visit
//! order, followed by optional extra records (optimizer state, epoch
//! counter) whose names start with `train.` or `adam.`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LSFormer, ModelConfig};
use crate::param::HasParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LSFK";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot a model (parameters plus batch-norm running statistics)
    /// and optional extra tensors (optimizer state, epoch counter).
    pub fn capture(model: &LSFormer, extras: &[(String, Tensor)]) -> Self {
        let mut tensors: Vec<(String, Tensor)> = model
            .params()
            .iter()
            .map(|p| (p.name().to_string(), p.value()))
            .collect();
        tensors.extend(model.state_tensors());
        tensors.extend(extras.iter().map(|(n, t)| (n.clone(), t.detach())));
        Self {
            version: VERSION,
            config: model.cfg.clone(),
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copy parameter tensors into `model`, validating the config and every
    /// shape. Extra (`train.`/`adam.`) records are ignored here.
    pub fn apply_to(&self, model: &LSFormer) -> Result<()> {
        let theirs = model.cfg.to_config_text();
        let ours = self.config.to_config_text();
        if theirs != ours {
            let diff = first_diff_line(&ours, &theirs).unwrap_or_default();
            return Err(Error::Config(format!(
                "checkpoint config conflicts with model config ({diff})"
            )));
        }
        let map: std::collections::BTreeMap<&str, &Tensor> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        for p in model.params() {
            let t = map.get(p.name()).ok_or_else(|| {
                Error::Format(format!("checkpoint is missing parameter {}", p.name()))
            })?;
            if t.shape() != p.shape().as_slice() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {} has shape {:?}, model expects {:?}",
                    p.name(),
                    t.shape(),
                    p.shape()
                )));
            }
            p.set_value((*t).clone());
        }
        model.load_state_tensors(|name| map.get(name).map(|t| (*t).clone()))?;
        Ok(())
    }

    /// Build a fresh model from the embedded config and load the weights.
    pub fn restore_model(&self) -> Result<LSFormer> {
        let model = LSFormer::new(self.config.clone(), 0)?;
        self.apply_to(&model)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        let cfg = self.config.to_config_text();
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg.as_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.rank() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path)?;
        let mut r = Reader { buf: &buf, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:02x?}, expected {:02x?}",
                magic, MAGIC
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_bytes = r.take(cfg_len)?;
        let cfg_text = std::str::from_utf8(cfg_bytes)
            .map_err(|_| Error::Format("checkpoint config text is not UTF-8".into()))?;
        let config = ModelConfig::from_config_text(cfg_text)?;

        let mut tensors = Vec::new();
        while !r.done() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("checkpoint tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            if rank > crate::tensor::MAX_RANK {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} has rank {rank}"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
            }
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self {
            version,
            config,
            tensors,
        })
    }
}

fn first_diff_line(a: &str, b: &str) -> Option<String> {
    for (la, lb) in a.lines().zip(b.lines()) {
        if la != lb {
            return Some(format!("checkpoint has `{la}`, model has `{lb}`"));
        }
    }
    None
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("lsfk-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = LSFormer::new(ModelConfig::micro(), 7).unwrap();
        let ckpt = Checkpoint::capture(&model, &[("train.epoch".into(), Tensor::scalar(3.0))]);
        let p1 = tmpdir().join("a.lsfk");
        let p2 = tmpdir().join("b.lsfk");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.get("train.epoch").unwrap().scalar_value(), 3.0);
    }

    #[test]
    fn round_trip_restores_parameters_exactly() {
        let model = LSFormer::new(ModelConfig::micro(), 11).unwrap();
        let path = tmpdir().join("c.lsfk");
        Checkpoint::capture(&model, &[]).save(&path).unwrap();
        let restored = Checkpoint::load(&path).unwrap().restore_model().unwrap();
        for (a, b) in model.params().iter().zip(restored.params().iter()) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.value().data(), b.value().data());
        }
    }

    #[test]
    fn tampered_magic_is_rejected() {
        let model = LSFormer::new(ModelConfig::micro(), 7).unwrap();
        let path = tmpdir().join("d.lsfk");
        Checkpoint::capture(&model, &[]).save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_names_offset() {
        let model = LSFormer::new(ModelConfig::micro(), 7).unwrap();
        let path = tmpdir().join("e.lsfk");
        Checkpoint::capture(&model, &[]).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("offset"), "{err}");
    }

    #[test]
    fn config_conflict_is_explicit() {
        let small = LSFormer::new(ModelConfig::micro(), 7).unwrap();
        let path = tmpdir().join("f.lsfk");
        Checkpoint::capture(&small, &[]).save(&path).unwrap();
        let mut other_cfg = ModelConfig::micro();
        other_cfg.embed_dim = 32;
        let other = LSFormer::new(other_cfg, 7).unwrap();
        let err = Checkpoint::load(&path).unwrap().apply_to(&other).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("embed_dim"), "{err}");
    }
}
