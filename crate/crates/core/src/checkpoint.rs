//! Model checkpoints.
//!
//! Layout: the 8-byte magic `NASCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u32` header length, a JSON header of that many
//! bytes, then the flat parameter array as little-endian floats of the
//! header's dtype.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{BlockKind, Vocabulary};
use crate::error::{Error, Result};
use crate::fcn::{FcnConfig, FcnModel};
use crate::gpt::{Dtype, Gpt, GptConfig, Real, TrainReport};

pub const MAGIC: &[u8; 8] = b"NASCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gpt,
    Fcn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub model: ModelKind,
    pub dtype: Dtype,
    pub param_count: usize,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub config: serde_json::Value,
    /// Output classes of a selector, in order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<BlockKind>>,
    /// The vocabulary itself, stored with sequence models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vocabulary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<TrainReport>,
}

fn encode<R: Real>(header: &Header, params: &[R]) -> Result<Vec<u8>> {
    let h = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + h.len() + params.len() * R::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    for p in params {
        p.write_le(&mut out);
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Checkpoint("truncated preamble".into()))
}

/// Splits a checkpoint into its header and raw parameter bytes.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(bytes, 8)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let len = read_u32(bytes, 12)? as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != version {
        return Err(Error::Checkpoint("header version disagrees with preamble".into()));
    }
    let data = &bytes[16 + len..];
    if data.len() != header.param_count * header.dtype.size() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            header.param_count * header.dtype.size(),
            data.len()
        )));
    }
    Ok((header, data))
}

fn decode_params<R: Real>(header: &Header, data: &[u8]) -> Vec<R> {
    let size = header.dtype.size();
    data.chunks_exact(size)
        .map(|c| match header.dtype {
            Dtype::F32 => R::lit(f32::read_le(c) as f64),
            Dtype::F64 => R::lit(f64::read_le(c)),
        })
        .collect()
}

pub fn encode_gpt<R: Real>(
    model: &Gpt<R>,
    vocab: &Vocabulary,
    report: Option<&TrainReport>,
) -> Result<Vec<u8>> {
    if model.vocab_size() != vocab.size() {
        return Err(Error::Checkpoint("model and vocabulary sizes differ".into()));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        model: ModelKind::Gpt,
        dtype: R::DTYPE,
        param_count: model.param_count(),
        vocab_size: model.vocab_size(),
        vocab_hash: vocab.hash(),
        config: serde_json::to_value(model.config())?,
        classes: None,
        vocabulary: Some(vocab.clone()),
        report: report.cloned(),
    };
    encode(&header, model.params())
}

/// Decodes a sequence model (converted to `R`) and its vocabulary.
pub fn decode_gpt<R: Real>(bytes: &[u8]) -> Result<(Gpt<R>, Vocabulary, Header)> {
    let (header, data) = decode_header(bytes)?;
    if header.model != ModelKind::Gpt {
        return Err(Error::Checkpoint(format!("expected a gpt checkpoint, found {:?}", header.model)));
    }
    let vocab = header
        .vocabulary
        .clone()
        .ok_or_else(|| Error::Checkpoint("gpt checkpoint lacks its vocabulary".into()))?;
    if vocab.hash() != header.vocab_hash || vocab.size() != header.vocab_size {
        return Err(Error::Checkpoint("vocabulary does not match its recorded hash".into()));
    }
    let config: GptConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| Error::Checkpoint(format!("bad gpt config: {e}")))?;
    let model = Gpt::from_params(config, header.vocab_size, decode_params(&header, data))?;
    Ok((model, vocab, header))
}

pub fn encode_fcn(model: &FcnModel, vocab_hash: &str) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        model: ModelKind::Fcn,
        dtype: Dtype::F64,
        param_count: model.params().len(),
        vocab_size: model.vocab_size(),
        vocab_hash: vocab_hash.to_string(),
        config: serde_json::to_value(model.config())?,
        classes: Some(model.classes().to_vec()),
        vocabulary: None,
        report: None,
    };
    encode(&header, model.params())
}

pub fn decode_fcn(bytes: &[u8]) -> Result<(FcnModel, Header)> {
    let (header, data) = decode_header(bytes)?;
    if header.model != ModelKind::Fcn {
        return Err(Error::Checkpoint(format!("expected an fcn checkpoint, found {:?}", header.model)));
    }
    let config: FcnConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| Error::Checkpoint(format!("bad fcn config: {e}")))?;
    let classes = header
        .classes
        .clone()
        .ok_or_else(|| Error::Checkpoint("fcn checkpoint lacks its classes".into()))?;
    let model = FcnModel::from_parts(config, header.vocab_size, classes, decode_params(&header, data))?;
    Ok((model, header))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_gpt<R: Real>(
    path: &Path,
    model: &Gpt<R>,
    vocab: &Vocabulary,
    report: Option<&TrainReport>,
) -> Result<String> {
    let bytes = encode_gpt(model, vocab, report)?;
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_gpt<R: Real>(path: &Path) -> Result<(Gpt<R>, Vocabulary, Header)> {
    decode_gpt(&read(path)?)
}

pub fn save_fcn(path: &Path, model: &FcnModel, vocab_hash: &str) -> Result<String> {
    let bytes = encode_fcn(model, vocab_hash)?;
    write_bytes(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_fcn(path: &Path) -> Result<(FcnModel, Header)> {
    decode_fcn(&read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of a file's contents.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}
