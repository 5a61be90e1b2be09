//! Binary checkpoints: a JSON header naming every tensor and its shape,
//! followed by little-endian `f32` data and the bit-packed trainability mask.
//!
//! Layout: `STKCKPT1`, header length (`u32` LE), header JSON, tensor data,
//! mask bits (one bit per element, tensors in header order, LSB first).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::hex;
use crate::error::{Error, Result};
use crate::models::{ModelBundle, ModelConfig};
use crate::params::TrainableMask;
use crate::tensor::{Scalar, Tensor};
use crate::text::Tokenizer;

pub const MAGIC: &[u8; 8] = b"STKCKPT1";
pub const CHECKPOINT_SCHEMA: u32 = 1;

/// How far along the pipeline a bundle is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initialized,
    Clip,
    LmPretrained,
    Llm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    stage: Stage,
    config: ModelConfig,
    vocab: Vec<String>,
    lm_base_vocab: usize,
    extended: bool,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub bundle: ModelBundle<f32>,
    pub tokenizer: Tokenizer,
    pub stage: Stage,
    /// SHA-256 of the file contents.
    pub digest: String,
}

pub fn encode<T: Scalar>(bundle: &ModelBundle<T>, tok: &Tokenizer, stage: Stage) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    let params = bundle.params();
    for (name, t) in &params {
        tensors.push(TensorEntry {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
            offset,
        });
        offset += t.len();
    }
    let header = Header {
        schema_version: CHECKPOINT_SCHEMA,
        stage,
        config: bundle.config,
        vocab: tok.vocab().to_vec(),
        lm_base_vocab: bundle.lm.base_vocab,
        extended: bundle.lm.is_extended(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * 4 + offset / 8 + 1);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &params {
        for v in t.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    let mut bits = vec![0u8; offset.div_ceil(8)];
    let mut k = 0;
    for (name, t) in &params {
        let mask = bundle.mask.get(name);
        for i in 0..t.len() {
            if mask.is_some_and(|m| m[i]) {
                bits[k / 8] |= 1 << (k % 8);
            }
            k += 1;
        }
    }
    out.extend_from_slice(&bits);
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, bundle: &ModelBundle<T>, tok: &Tokenizer, stage: Stage) -> Result<()> {
    let bytes = encode(bundle, tok, stage)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parses and validates a checkpoint: every tensor the configuration
/// implies must be present exactly once with the expected shape.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    if header.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::SchemaVersion {
            found: header.schema_version,
            expected: CHECKPOINT_SCHEMA,
        });
    }
    let tok = Tokenizer::from_vocab(header.vocab.clone())?;
    if header.lm_base_vocab != tok.base_size() {
        return Err(bad(format!(
            "language model base vocabulary {} does not match tokenizer {}",
            header.lm_base_vocab,
            tok.base_size()
        )));
    }
    let mut bundle = ModelBundle::<f32>::new(header.config, &tok, 0)?;
    if header.extended {
        bundle.extend_vocab(&tok, 0.0, 0)?;
    }
    let expected: Vec<(String, (usize, usize))> =
        bundle.params().into_iter().map(|(n, t)| (n, t.shape())).collect();
    if expected.len() != header.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors, found {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    let total: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    let data = &body[hlen..];
    let mask_len = total.div_ceil(8);
    if data.len() != total * 4 + mask_len {
        return Err(bad(format!(
            "payload is {} bytes, expected {}",
            data.len(),
            total * 4 + mask_len
        )));
    }
    let bits = &data[total * 4..];
    let mut mask = TrainableMask::new();
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name || (entry.rows, entry.cols) != *shape {
            return Err(bad(format!(
                "tensor {} {}x{} where {name} {}x{} was expected",
                entry.name, entry.rows, entry.cols, shape.0, shape.1
            )));
        }
        let n = entry.rows * entry.cols;
        if entry.offset + n > total {
            return Err(bad(format!("tensor {} overruns the payload", entry.name)));
        }
        let values: Vec<f32> = data[entry.offset * 4..(entry.offset + n) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        *bundle.param_mut(name).expect("expected tensor exists") = Tensor::from_vec(entry.rows, entry.cols, values)?;
        let m: Vec<bool> = (entry.offset..entry.offset + n)
            .map(|k| bits[k / 8] & (1 << (k % 8)) != 0)
            .collect();
        mask.set(name, m);
    }
    bundle.mask = mask;
    Ok(Checkpoint {
        bundle,
        tokenizer: tok,
        stage: header.stage,
        digest: hex(&Sha256::digest(bytes)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let tok = Tokenizer::standard();
        let mut b = ModelBundle::<f32>::new(ModelConfig::tiny(), &tok, 3).unwrap();
        b.extend_vocab(&tok, 0.01, 1).unwrap();
        let bytes = encode(&b, &tok, Stage::Llm).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.bundle, b);
        assert_eq!(ck.stage, Stage::Llm);
        assert_eq!(ck.tokenizer.vocab(), tok.vocab());
        assert_eq!(encode(&ck.bundle, &ck.tokenizer, ck.stage).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let tok = Tokenizer::standard();
        let b = ModelBundle::<f32>::new(ModelConfig::tiny(), &tok, 3).unwrap();
        let bytes = encode(&b, &tok, Stage::Clip).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"garbage!").is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode(&wrong), Err(Error::Checkpoint(_))));
        // Change a shape in the header without touching the payload.
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[12..12 + hlen].to_vec()).unwrap();
        let edited = header.replacen("\"rows\":1,", "\"rows\":2,", 1);
        assert_ne!(edited, header);
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(edited.len() as u32).to_le_bytes());
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[12 + hlen..]);
        assert!(decode(&out).is_err());
    }
}
