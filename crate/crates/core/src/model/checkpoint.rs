//! Checkpoint serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GEOF" | u32 version | u64 header_len | header JSON
//!        | u64 tensor_count
//!        | { u64 name_len | name utf-8 | u64 ndim | u64 dims.. | f32 data.. } *
//!        | u32 crc32 (IEEE, over everything before it)
//! ```
//!
//! The header carries the model config, step counter, and the base RNG seed
//! (all training randomness is a pure function of seed and step, so a single
//! seed is the complete RNG state). Parameter tensors are stored under their
//! canonical names; optimizer moments under `adam_m.`/`adam_v.` prefixes.
//! Round-trips are bit-exact, including the moments.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::{init_model, ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GEOF";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (supported: {VERSION})")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("header deserialization failed: {0}")]
    Header(#[from] serde_json::Error),
    #[error("invalid model config in checkpoint: {0}")]
    Model(#[from] super::ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    step: u64,
    rng_seed: u64,
}

/// Everything needed to restart training exactly where it stopped.
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub adam: AdamState,
    pub step: u64,
    pub rng_seed: u64,
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>, adam: AdamState, step: u64, rng_seed: u64) -> Self {
        Checkpoint { params, adam, step, rng_seed }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut w = Crc32Writer::new(BufWriter::new(File::create(path)?));
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header {
        model: ckpt.params.cfg.clone(),
        step: ckpt.step,
        rng_seed: ckpt.rng_seed,
    })?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;

    let named = ckpt.params.named();
    let count = named.len() * 3;
    w.write_all(&(count as u64).to_le_bytes())?;
    for (name, tensor) in &named {
        write_tensor(&mut w, name, tensor)?;
    }
    for (i, (name, _)) in named.iter().enumerate() {
        write_tensor(&mut w, &format!("adam_m.{name}"), &ckpt.adam.m[i])?;
    }
    for (i, (name, _)) in named.iter().enumerate() {
        write_tensor(&mut w, &format!("adam_v.{name}"), &ckpt.adam.v[i])?;
    }
    let crc = w.crc();
    let mut inner = w.into_inner();
    inner.write_all(&crc.to_le_bytes())?;
    inner.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 4 + 4 + 8 + 4 {
        return Err(CheckpointError::Corrupt("file truncated".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32(body) != stored_crc {
        return Err(CheckpointError::Corrupt("checksum mismatch".into()));
    }

    let mut r = Cursor { buf: body, pos: 0 };
    if r.take_bytes(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.take_u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = r.take_u64()? as usize;
    let header: Header = serde_json::from_slice(r.take_bytes(header_len)?)?;
    let count = r.take_u64()? as usize;
    let mut tensors: HashMap<String, Tensor<f32>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, tensor) = read_tensor(&mut r)?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt("trailing bytes after tensors".into()));
    }

    // Rebuild params/moments in canonical order, validating shape per name.
    let mut params = init_model::<f32>(&header.model)?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, tensor) in params.named_mut() {
        let stored = tensors
            .remove(&name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor `{name}`")))?;
        if stored.shape() != tensor.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                stored.shape(),
                tensor.shape()
            )));
        }
        *tensor = stored;
        let am = tensors
            .remove(&format!("adam_m.{name}"))
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor `adam_m.{name}`")))?;
        let av = tensors
            .remove(&format!("adam_v.{name}"))
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor `adam_v.{name}`")))?;
        m.push(am);
        v.push(av);
    }
    if !tensors.is_empty() {
        let extra: Vec<&String> = tensors.keys().collect();
        return Err(CheckpointError::Corrupt(format!("unexpected tensors {extra:?}")));
    }
    Ok(Checkpoint { params, adam: AdamState { m, v }, step: header.step, rng_seed: header.rng_seed })
}

/// Names and shapes without reconstructing the model (for `inspect-ckpt`).
pub fn describe_checkpoint(path: &Path) -> Result<(ModelConfig, u64, u64, Vec<(String, Vec<usize>)>), CheckpointError> {
    let ckpt = load_checkpoint(path)?;
    let mut entries: Vec<(String, Vec<usize>)> = ckpt
        .params
        .named()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    entries.sort();
    Ok((ckpt.params.cfg.clone(), ckpt.step, ckpt.rng_seed, entries))
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> Result<(), CheckpointError> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
    for d in t.shape() {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut Cursor) -> Result<(String, Tensor<f32>), CheckpointError> {
    let name_len = r.take_u64()? as usize;
    let name = String::from_utf8(r.take_bytes(name_len)?.to_vec())
        .map_err(|_| CheckpointError::Corrupt("tensor name is not utf-8".into()))?;
    let ndim = r.take_u64()? as usize;
    if ndim > 8 {
        return Err(CheckpointError::Corrupt(format!("tensor `{name}` has {ndim} dims")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.take_u64()? as usize);
    }
    let count: usize = shape.iter().product();
    if count > (1 << 31) {
        return Err(CheckpointError::Corrupt(format!("tensor `{name}` is implausibly large")));
    }
    let raw = r.take_bytes(count * 4)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((name, Tensor::from_vec(&shape, data)))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take_bytes(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt("file truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn take_u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take_bytes(4)?.try_into().unwrap()))
    }
    fn take_u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take_bytes(8)?.try_into().unwrap()))
    }
}

// IEEE CRC32 (reflected, poly 0xEDB88320), table-driven.

fn crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut bit = 0;
        while bit < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            bit += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

static CRC_TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();

pub fn crc32(bytes: &[u8]) -> u32 {
    let table = CRC_TABLE.get_or_init(crc_table);
    let mut c = 0xFFFF_FFFFu32;
    for b in bytes {
        c = table[((c ^ *b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

struct Crc32Writer<W: Write> {
    inner: W,
    crc: u32,
}

impl<W: Write> Crc32Writer<W> {
    fn new(inner: W) -> Self {
        Crc32Writer { inner, crc: 0xFFFF_FFFF }
    }
    fn crc(&self) -> u32 {
        self.crc ^ 0xFFFF_FFFF
    }
    fn into_inner(self) -> W {
        self.inner
    }
}

impl<W: Write> Write for Crc32Writer<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        let table = CRC_TABLE.get_or_init(crc_table);
        for b in &buf[..n] {
            self.crc = table[((self.crc ^ *b as u32) & 0xFF) as usize] ^ (self.crc >> 8);
        }
        Ok(n)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_logits;

    #[test]
    fn crc32_known_vector() {
        // standard test vector
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    fn small_ckpt() -> Checkpoint {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            dropout: 0.0,
            vocab_size: 20,
            context_len: 16,
            seed: 3,
        };
        let params = init_model::<f32>(&cfg).unwrap();
        let mut adam = AdamState::zeros_like(&params);
        adam.m[0].data_mut()[0] = 0.123;
        adam.v[2].data_mut()[1] = 4.5e-3;
        Checkpoint::new(params, adam, 77, 99)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.geof");
        let ckpt = small_ckpt();
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, 77);
        assert_eq!(loaded.rng_seed, 99);
        for ((_, a), (_, b)) in ckpt.params.named().iter().zip(loaded.params.named().iter()) {
            assert_eq!(a.data(), b.data());
        }
        for (a, b) in ckpt.adam.m.iter().zip(loaded.adam.m.iter()) {
            assert_eq!(a.data(), b.data());
        }
        for (a, b) in ckpt.adam.v.iter().zip(loaded.adam.v.iter()) {
            assert_eq!(a.data(), b.data());
        }

        let toks = vec![1u32, 5, 9, 3];
        let before = forward_logits(&ckpt.params, &toks, 1).unwrap();
        let after = forward_logits(&loaded.params, &toks, 1).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.geof");
        save_checkpoint(&path, &small_ckpt()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::Corrupt(msg)) => assert!(msg.contains("checksum")),
            other => panic!("expected checksum failure, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn future_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.geof");
        save_checkpoint(&path, &small_ckpt()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        // patch the crc so the version check is what trips
        let body_len = bytes.len() - 4;
        let crc = crc32(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::UnsupportedVersion(2))));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.geof");
        save_checkpoint(&path, &small_ckpt()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.geof");
        save_checkpoint(&path, &small_ckpt()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0..4].copy_from_slice(b"NOPE");
        let body_len = bytes.len() - 4;
        let crc = crc32(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));
    }
}
