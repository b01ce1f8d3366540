//! Binary checkpoint: magic, u32 version, u64 header length, JSON header,
//! then little-endian f64 parameters and, optionally, the two AdamW moment
//! vectors of the same length.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig, ModelSpec, NnError, VectorFieldModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CFLWCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelSpec,
    pub seed: u64,
    pub step: u64,
    pub param_count: usize,
    pub has_optimizer: bool,
    pub optimizer: AdamWConfig,
    /// Caller-defined metadata (space descriptor, noise spec, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: VectorFieldModel,
    pub optimizer: Option<AdamW>,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), NnError> {
    let mut header = ckpt.header.clone();
    header.param_count = ckpt.model.param_count();
    header.model = *ckpt.model.spec();
    header.has_optimizer = ckpt.optimizer.is_some();
    let json = serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    write_f64s(&mut w, ckpt.model.params())?;
    if let Some(opt) = &ckpt.optimizer {
        let (m, v) = opt.moments();
        write_f64s(&mut w, m)?;
        write_f64s(&mut w, v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| NnError::Checkpoint(e.to_string()))?;

    let expected = header.model.architecture.parameter_count(header.model.input_dim);
    if header.param_count != expected {
        return Err(NnError::Checkpoint(format!(
            "header claims {} parameters, architecture has {expected}",
            header.param_count
        )));
    }
    let params = read_f64s(&mut r, expected)?;
    let model = VectorFieldModel::from_params(header.model, params)?;
    let optimizer = if header.has_optimizer {
        let m = read_f64s(&mut r, expected)?;
        let v = read_f64s(&mut r, expected)?;
        Some(AdamW::from_state(header.optimizer, header.step, m, v))
    } else {
        None
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(NnError::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint {
        header,
        model,
        optimizer,
    })
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, NnError> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| NnError::Checkpoint("truncated payload".into()))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}
