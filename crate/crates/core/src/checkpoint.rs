//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//! `b"VLLA"`, `u16` version, `u64` FNV-1a digest of the model config, then
//! one record per tensor until end of file: `u32` name length, UTF-8 name,
//! `u32` rank, `rank × u32` dims, `numel × f64` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VLLA";
pub const VERSION: u16 = 1;

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Self(Self::OFFSET)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }

    pub fn hash(bytes: &[u8]) -> u64 {
        let mut h = Self::new();
        h.write(bytes);
        h.finish()
    }
}

pub fn config_digest(config: &ModelConfig) -> u64 {
    Fnv1a::hash(config.canonical().as_bytes())
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(&params.config).to_le_bytes());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Load(format!("truncated checkpoint at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode(bytes: &[u8], config: &ModelConfig) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Load("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Load(format!("unsupported checkpoint version {version}")));
    }
    let digest = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let want = config_digest(config);
    if digest != want {
        return Err(Error::Load(format!(
            "config digest {digest:016x} does not match the requested model ({want:016x})"
        )));
    }
    let mut named = Vec::new();
    while !r.done() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Load("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Load("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Load(e.to_string()))?;
        named.push((name, t));
    }
    ModelParams::from_named(config, named)
}

/// Writes `params` to `path` via a temporary sibling file and a rename.
pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    let bytes = encode(params);
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path, config: &ModelConfig) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    decode(&bytes, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 12,
            max_tokens: 6,
            max_regions: 3,
            region_feat_dim: 4,
            num_answers: 3,
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(Fnv1a::hash(b""), 0xcbf29ce484222325);
        assert_eq!(Fnv1a::hash(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(Fnv1a::hash(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = ModelParams::init(&small(), &mut seeded(3)).unwrap();
        save(&path, &p).unwrap();
        let q = load(&path, &small()).unwrap();
        assert_eq!(p, q);
        assert!(!dir.path().join("model.ckpt.tmp").exists());
    }

    #[test]
    fn digest_mismatch_is_a_load_error() {
        let p = ModelParams::init(&small(), &mut seeded(3)).unwrap();
        let bytes = encode(&p);
        let other = ModelConfig { hidden: 12, ..small() };
        assert!(matches!(decode(&bytes, &other), Err(Error::Load(_))));
    }

    #[test]
    fn truncation_and_bad_magic() {
        let p = ModelParams::init(&small(), &mut seeded(3)).unwrap();
        let bytes = encode(&p);
        assert!(matches!(decode(&bytes[..bytes.len() - 3], &small()), Err(Error::Load(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, &small()), Err(Error::Load(_))));
        assert!(matches!(load(Path::new("/nonexistent/x.ckpt"), &small()), Err(Error::Load(_))));
    }
}
