//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "BSCK" | version u32 | vocab low u8 | vocab high u8
//! | config json (u32 length + bytes) | adam timestep u64
//! | record count u32 | records: name (u16 length + utf8), count u64, f64 values
//! | sha256 of everything above (32 bytes)
//! ```
//!
//! Parameter tensors use the names from [`NetworkParams::tensors`]; Adam
//! moments are stored as `adam.m.<name>` and `adam.v.<name>`.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::optim::AdamState;
use super::params::NetworkParams;
use super::train::TrainConfig;
use super::NeuralError;
use crate::encoder::Vocabulary;

const MAGIC: &[u8; 4] = b"BSCK";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub adam: AdamState,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
}

impl Checkpoint {
    /// Fails with `VersionMismatch` when the checkpoint was trained on a
    /// different vocabulary than the caller expects.
    pub fn ensure_vocabulary(&self, expected: &Vocabulary) -> Result<(), NeuralError> {
        if self.vocab != *expected || self.params.vocab_size != expected.size() {
            return Err(NeuralError::VersionMismatch(format!(
                "checkpoint vocabulary {}..={} ({} symbols), expected {}..={} ({} symbols)",
                self.vocab.low(),
                self.vocab.high(),
                self.params.vocab_size,
                expected.low(),
                expected.high(),
                expected.size()
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, NeuralError> {
    let params = &ckpt.params;
    if params.vocab_size != ckpt.vocab.size() {
        return Err(NeuralError::ShapeMismatch(format!(
            "network has {} outputs but vocabulary has {} symbols",
            params.vocab_size,
            ckpt.vocab.size()
        )));
    }
    params.ensure_same_shape(&ckpt.adam.first_moment)?;
    params.ensure_same_shape(&ckpt.adam.second_moment)?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(ckpt.vocab.low());
    out.push(ckpt.vocab.high());
    let mut config = serde_json::to_value(&ckpt.config).map_err(|e| NeuralError::CorruptCheckpoint(e.to_string()))?;
    config["adam"] = serde_json::to_value(ckpt.adam.config).map_err(|e| NeuralError::CorruptCheckpoint(e.to_string()))?;
    let config = config.to_string();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&ckpt.adam.timestep.to_le_bytes());

    let mut records: Vec<(String, &[f64])> = params.tensors();
    for (name, t) in ckpt.adam.first_moment.tensors() {
        records.push((format!("adam.m.{name}"), t));
    }
    for (name, t) in ckpt.adam.second_moment.tensors() {
        records.push((format!("adam.v.{name}"), t));
    }
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, values) in records {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NeuralError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(NeuralError::CorruptCheckpoint("unexpected end of data".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NeuralError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NeuralError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NeuralError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NeuralError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint, NeuralError> {
    let corrupt = |m: &str| NeuralError::CorruptCheckpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(corrupt("file too short"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(NeuralError::VersionMismatch(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let low = r.u8()?;
    let high = r.u8()?;
    let vocab = Vocabulary::new(low, high).map_err(|e| corrupt(&e.to_string()))?;
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?).map_err(|_| corrupt("config is not utf-8"))?;
    let config_value: serde_json::Value = serde_json::from_str(config_text).map_err(|e| corrupt(&e.to_string()))?;
    let config: TrainConfig = serde_json::from_value(config_value.clone()).map_err(|e| corrupt(&e.to_string()))?;
    let adam_config = match config_value.get("adam") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| corrupt(&e.to_string()))?,
        None => config.adam(),
    };
    let timestep = r.u64()?;

    let count = r.u32()? as usize;
    let mut records: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| corrupt("tensor name is not utf-8"))?
            .to_string();
        let n = r.u64()? as usize;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if records.insert(name.clone(), values).is_some() {
            return Err(corrupt(&format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after tensor records"));
    }

    let mut params = NetworkParams::zeros(vocab.size(), config.hidden, config.layers);
    let mut adam = AdamState::new(&params, adam_config);
    adam.timestep = timestep;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut fill = |dst: Vec<&mut [f64]>, prefix: &str| -> Result<(), NeuralError> {
        for (name, dst) in names.iter().zip(dst) {
            let key = format!("{prefix}{name}");
            let src = records
                .remove(&key)
                .ok_or_else(|| corrupt(&format!("missing tensor {key}")))?;
            if src.len() != dst.len() {
                return Err(corrupt(&format!(
                    "tensor {key} has {} values, expected {}",
                    src.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(&src);
        }
        Ok(())
    };
    fill(params.tensors_mut(), "")?;
    fill(adam.first_moment.tensors_mut(), "adam.m.")?;
    fill(adam.second_moment.tensors_mut(), "adam.v.")?;
    if let Some(extra) = records.keys().next() {
        return Err(corrupt(&format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        params,
        adam,
        vocab,
        config,
    })
}
