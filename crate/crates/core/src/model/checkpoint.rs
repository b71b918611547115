//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `MGPTCKPT`, a little-endian `u32` format version,
//! a `u64` header length, a JSON header, then every parameter tensor as
//! little-endian `f64` in [`ModelParams::tensors`] order, followed by the
//! AdamW first and second moments when present.

use super::optim::AdamWState;
use super::params::{ModelConfig, ModelParams};
use super::ModelError;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MGPTCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub opt_state: Option<AdamWState>,
    /// Hash of the vocabulary manifest the model was trained against.
    pub manifest_hash: String,
    pub stage: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    manifest_hash: String,
    stage: Option<usize>,
    optimizer_step: Option<u64>,
    tensors: Vec<(String, usize)>,
}

fn write_tensors<W: Write>(w: &mut W, p: &ModelParams) -> std::io::Result<()> {
    for t in p.tensors() {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for x in t {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_tensors<R: Read>(r: &mut R, p: &mut ModelParams) -> std::io::Result<()> {
    for t in p.tensors_mut() {
        let mut buf = vec![0u8; t.len() * 8];
        r.read_exact(&mut buf)?;
        for (x, b) in t.iter_mut().zip(buf.chunks_exact(8)) {
            *x = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let header = Header {
            config: self.params.config.clone(),
            manifest_hash: self.manifest_hash.clone(),
            stage: self.stage,
            optimizer_step: self.opt_state.as_ref().map(|s| s.step),
            tensors: self
                .params
                .tensor_names()
                .into_iter()
                .zip(self.params.tensors().iter().map(|t| t.len()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        write_tensors(&mut w, &self.params)?;
        if let Some(st) = &self.opt_state {
            write_tensors(&mut w, &st.m)?;
            write_tensors(&mut w, &st.v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let bad = |s: &str| ModelError::Checkpoint(s.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 24 {
            return Err(bad("header too large"));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;

        let mut params = ModelParams::init(&header.config)?;
        let expected: Vec<(String, usize)> = params
            .tensor_names()
            .into_iter()
            .zip(params.tensors().iter().map(|t| t.len()))
            .collect();
        if expected != header.tensors {
            return Err(bad("tensor table does not match the config"));
        }
        read_tensors(&mut r, &mut params)?;
        let opt_state = match header.optimizer_step {
            Some(step) => {
                let mut st = AdamWState::new(&params);
                st.step = step;
                read_tensors(&mut r, &mut st.m)?;
                read_tensors(&mut r, &mut st.v)?;
                Some(st)
            }
            None => None,
        };
        Ok(Self { params, opt_state, manifest_hash: header.manifest_hash, stage: header.stage })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}
