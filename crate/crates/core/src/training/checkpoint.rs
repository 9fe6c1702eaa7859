//! Binary checkpoint: magic `TVCK`, u16 version, u64 header length, JSON header,
//! then every parameter as little-endian f32 in store order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::ObjectiveConfig;
use crate::Model32;

const MAGIC: &[u8; 4] = b"TVCK";
const VERSION: u16 = 1;

/// A trained model with everything needed to evaluate it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model32,
    pub normalizer: Normalizer,
    pub objective: ObjectiveConfig,
    pub class_names: Vec<String>,
    pub timesteps: usize,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    objective: ObjectiveConfig,
    normalizer: Normalizer,
    class_names: Vec<String>,
    timesteps: usize,
    params: Vec<ParamEntry>,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, message: message.into() }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.cfg.clone(),
            objective: self.objective.clone(),
            normalizer: self.normalizer.clone(),
            class_names: self.class_names.clone(),
            timesteps: self.timesteps,
            params: self
                .model
                .store
                .iter()
                .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(
            14 + json.len() + 4 * self.model.store.iter().map(|(_, p)| p.value.len()).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.model.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 14 || &buf[..4] != MAGIC {
            return Err(format_err(0, "not a checkpoint"));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != VERSION {
            return Err(format_err(4, format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(buf[6..14].try_into().expect("8 bytes")) as usize;
        let body =
            14usize.checked_add(len).filter(|&e| e <= buf.len()).ok_or_else(|| format_err(6, "truncated header"))?;
        let header: Header = serde_json::from_slice(&buf[14..body]).map_err(|e| format_err(14, e.to_string()))?;
        let mut model = Model32::new(header.model, 0)?;
        if model.store.len() != header.params.len() {
            return Err(format_err(14, "parameter list does not match the model configuration"));
        }
        let mut offset = body;
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for (id, entry) in ids.into_iter().zip(&header.params) {
            let p = model.store.get_mut(id);
            if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
                return Err(format_err(14, format!("parameter {} does not match the model configuration", entry.name)));
            }
            let n = p.value.len() * 4;
            let chunk = buf
                .get(offset..offset + n)
                .ok_or_else(|| format_err(offset, format!("truncated at {}", entry.name)))?;
            for (dst, src) in p.value.data_mut().iter_mut().zip(chunk.chunks_exact(4)) {
                *dst = f32::from_le_bytes(src.try_into().expect("4 bytes"));
            }
            offset += n;
        }
        if offset != buf.len() {
            return Err(format_err(offset, "trailing bytes after parameters"));
        }
        Ok(Self {
            model,
            normalizer: header.normalizer,
            objective: header.objective,
            class_names: header.class_names,
            timesteps: header.timesteps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
