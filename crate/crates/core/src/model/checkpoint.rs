//! Checkpoint byte layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "HPCKPT\0\x01"
//! hlen     u32      length of the JSON header
//! header   hlen     UTF-8 JSON `CheckpointHeader`
//! count    u64      number of parameters
//! params   count × f64
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamLayout, StudentModel};
use crate::error::{Error, Result};
use crate::util::{put_f64s, put_u32, put_u64, read_file, write_file, Reader};

const MAGIC: &[u8; 8] = b"HPCKPT\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub vocab_hash: String,
    /// Free-form provenance such as the epoch or run id.
    #[serde(default)]
    pub tags: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: StudentModel,
}

impl Checkpoint {
    pub fn new(model: StudentModel, vocab_hash: impl Into<String>) -> Self {
        Self {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                model: model.config.clone(),
                vocab_hash: vocab_hash.into(),
                tags: Default::default(),
            },
            model,
        }
    }

    pub fn with_tag(mut self, key: &str, value: impl ToString) -> Self {
        self.header.tags.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut buf = Vec::with_capacity(24 + header.len() + 8 * self.model.params.len());
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, header.len() as u32);
        buf.extend_from_slice(&header);
        put_u64(&mut buf, self.model.params.len() as u64);
        put_f64s(&mut buf, &self.model.params);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.expect_magic(MAGIC)?;
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::format(path, format!("bad checkpoint header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {}", header.version)));
        }
        header.model.validate()?;
        let layout = ParamLayout::for_config(&header.model);
        let count = r.u64()? as usize;
        if count != layout.total() {
            return Err(Error::format(
                path,
                format!("parameter count {count} does not match architecture ({})", layout.total()),
            ));
        }
        let params = r.f64s(count)?;
        r.finish()?;
        let model = StudentModel {
            config: header.model.clone(),
            layout,
            params,
        };
        Ok(Self { header, model })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_file(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?, path)
}
