//! Self-describing binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "ECHOCKPT"
//! version    u32
//! cfg_hash   u32      CRC-32 of the config text
//! cfg_len    u64, then cfg_len bytes of UTF-8 TOML
//! count      u32      number of tensors
//! directory  count × { name_len u32, name, ndim u32, dims u64 × ndim }
//! data       f64 values of every tensor, directory order
//! checksum   u32      CRC-32 of every preceding byte
//! ```
//!
//! Tensors are kept sorted by name, so saving a loaded checkpoint reproduces
//! the original file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use echo_lora::adapters::strip_echo;
use echo_lora::autodiff::Tensor;
use echo_lora::model::Model;

use crate::config::RunConfig;
use crate::error::{io_err, HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"ECHOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub config_hash: u32,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Snapshot of every tensor of `model`, frozen and trainable.
    pub fn from_model(model: &Model, config: &RunConfig) -> Self {
        let config_text = config.to_toml();
        let tensors = model
            .named_tensors()
            .into_iter()
            .map(|(name, t)| {
                let copy = Tensor::new(t.shape(), t.data().to_vec()).expect("shape matches data");
                (name, copy)
            })
            .collect();
        Checkpoint { config_hash: crc32fast::hash(config_text.as_bytes()), config_text, tensors }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config_text, "<checkpoint config>")
    }

    pub fn has_echo(&self) -> bool {
        self.tensors.keys().any(|n| n.starts_with("echo."))
    }

    /// Rebuilds the model. Echo modules are restored only when the file carries them.
    pub fn to_model(&self) -> Result<Model> {
        let mut model_cfg = self.config()?.model_config();
        if !self.has_echo() {
            model_cfg.echo = None;
        }
        let model = Model::from_named(&model_cfg, |name| self.tensors.get(name).cloned())?;
        Ok(model)
    }

    /// Deploy form: echo tensors removed, config marked echo-disabled.
    pub fn strip_echo(&self) -> Result<Checkpoint> {
        let required: Vec<String> = self.tensors.keys().filter(|n| n.starts_with("adapter.")).cloned().collect();
        let tensors = strip_echo(self.tensors.clone(), &required)?;
        let mut config = self.config()?;
        config.echo.enabled = false;
        let config_text = config.to_toml();
        Ok(Checkpoint { config_hash: crc32fast::hash(config_text.as_bytes()), config_text, tensors })
    }

    /// Logs a warning when `config` differs from the one the file was written with.
    pub fn warn_on_config_mismatch(&self, config: &RunConfig) -> bool {
        let hash = config.hash();
        let mismatch = hash != self.config_hash;
        if mismatch {
            log::warn!("checkpoint config hash {:08x} differs from the current config {:08x}", self.config_hash, hash);
        }
        mismatch
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(HarnessError::Truncated { offset: bytes.len() as u64 });
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..body_len]) != stored {
            return Err(HarnessError::Checksum { offset: body_len as u64 });
        }
        let mut r = Reader { bytes: &bytes[..body_len], pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(HarnessError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(HarnessError::Checkpoint(format!("unsupported format version {version}")));
        }
        let config_hash = r.u32()?;
        let cfg_len = r.u64()? as usize;
        let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
            .map_err(|_| HarnessError::Checkpoint("config text is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut directory = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| HarnessError::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            directory.push((name, shape));
        }
        let mut tensors = BTreeMap::new();
        for (name, shape) in directory {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n.min(r.remaining() / 8));
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            let t = Tensor::new(&shape, data)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(HarnessError::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if r.remaining() != 0 {
            return Err(HarnessError::Checkpoint(format!("{} trailing bytes before the checksum", r.remaining())));
        }
        Ok(Checkpoint { config_text, config_hash, tensors })
    }

    /// Writes to a sibling temp file and renames it into place, so an
    /// interrupted save never leaves a half-written checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(&self.to_bytes()).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(HarnessError::Truncated { offset: self.pos as u64 }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.backbone.n_layers = 4;
        cfg.backbone.d_model = 8;
        cfg.backbone.n_heads = 2;
        cfg.backbone.d_ff = 16;
        cfg.backbone.vocab_size = 20;
        cfg.backbone.max_seq_len = 16;
        cfg.adapter.rank = 2;
        cfg.echo.source_layers = vec![3];
        cfg.echo.target_layers = vec![1];
        cfg.echo.bottleneck_dim = 4;
        cfg
    }

    #[test]
    fn header_fields_are_little_endian() {
        let cfg = small();
        let model = Model::init(&cfg.model_config(), 0).unwrap();
        let bytes = Checkpoint::from_model(&model, &cfg).to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), cfg.hash());
    }

    #[test]
    fn short_input_is_truncated() {
        assert!(matches!(Checkpoint::from_bytes(b"ECHO"), Err(HarnessError::Truncated { offset: 4 })));
    }

    #[test]
    fn valid_checksum_over_short_body_reports_truncation() {
        let mut body = MAGIC.to_vec();
        body.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&body), Err(HarnessError::Truncated { offset: 12 })));
    }
}
