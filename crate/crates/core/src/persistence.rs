//! Binary token caches and checkpoints, and `key = value` manifests.
//!
//! Both binary formats are little-endian, versioned and end with a CRC-64
//! (ECMA-182) of every preceding byte.
//!
//! Token cache (`HDTK`, version 1):
//! `magic[4] version:u32 V:u32 d:u32 count:u64`, then per sample
//! `len:u32 seq:u16[len] struct:f32[len*d] mask:u8[ceil(len/8)]` with mask
//! bits packed least-significant first, then `crc:u64`.
//!
//! Checkpoint (`HDCK`, version 1):
//! `magic[4] version:u32`, ten `u32` model fields (d_hidden, n_layers,
//! n_heads, max_len, vocab_size, struct_dim, denoiser_hidden,
//! denoiser_layers, time_embed_dim, ddpm_steps), `train_digest:u64
//! has_optimizer:u8 step:u64 scale:f64 fitted_mean:f64 fitted_var:f64
//! n_params:u64 params:f32[n]`, optionally `opt_step:u64 m:f32[n] v:f32[n]`,
//! then `crc:u64`. Parameters follow the canonical layout order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crc::{Crc, CRC_64_ECMA_182};

use crate::error::{Error, Result};
use crate::network::{ModelConfig, ModelParams};
use crate::token_space::{TokenId, TokenScaler, TrackPair};
use crate::training::OptimizerState;

pub const TOKEN_CACHE_MAGIC: &[u8; 4] = b"HDTK";
pub const TOKEN_CACHE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

pub fn checksum(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::arg(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(&tmp, e));
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize32(&mut self, v: usize, field: &'static str) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::format(field, "value exceeds u32"))?;
        self.u32(v);
        Ok(())
    }
    fn finish(mut self) -> Vec<u8> {
        let crc = checksum(&self.buf);
        self.u64(crc);
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(field, format!("file truncated at byte {}", self.buf.len()))),
        }
    }
    fn array<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().expect("exact length"))
    }
    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.array::<1>(field)?[0])
    }
    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(field)?))
    }
    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(field)?))
    }
    fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(field)?))
    }
    fn u16s(&mut self, n: usize, field: &'static str) -> Result<Vec<u16>> {
        let bytes = self.take(n.checked_mul(2).ok_or_else(|| Error::format(field, "length overflow"))?, field)?;
        Ok(bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
    }
    fn f32s(&mut self, n: usize, field: &'static str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(field, "length overflow"))?, field)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(Error::format("magic", format!("expected {:?}, found {:?}", expected, m)));
        }
        Ok(())
    }
    fn version(&mut self, what: &'static str, expected: u32) -> Result<()> {
        let found = self.u32("version")?;
        if found != expected {
            return Err(Error::UnsupportedVersion { what, found, expected });
        }
        Ok(())
    }
    /// Reads the trailing checksum and verifies it against everything before it.
    fn verify(&mut self) -> Result<()> {
        let body = self.pos;
        let stored = self.u64("checksum")?;
        if self.pos != self.buf.len() {
            return Err(Error::format("checksum", format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        let computed = checksum(&self.buf[..body]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(())
    }
}

/// Decoded token cache.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenCache {
    pub vocab_size: usize,
    pub dim: usize,
    pub samples: Vec<TrackPair>,
}

pub fn encode_token_cache(vocab_size: usize, dim: usize, samples: &[TrackPair]) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(TOKEN_CACHE_MAGIC);
    w.u32(TOKEN_CACHE_VERSION);
    w.usize32(vocab_size, "vocab_size")?;
    w.usize32(dim, "dim")?;
    w.u64(samples.len() as u64);
    for p in samples {
        if p.dim() != dim {
            return Err(Error::arg(format!("sample dim {} differs from cache dim {dim}", p.dim())));
        }
        w.usize32(p.len(), "length")?;
        for &s in &p.seq {
            w.u16(s);
        }
        for &v in &p.struct_tokens {
            w.f32(v);
        }
        for chunk in p.struct_mask.chunks(8) {
            let byte = chunk.iter().enumerate().fold(0u8, |b, (k, &m)| b | ((m as u8) << k));
            w.u8(byte);
        }
    }
    Ok(w.finish())
}

pub fn decode_token_cache(bytes: &[u8]) -> Result<TokenCache> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(TOKEN_CACHE_MAGIC)?;
    r.version("token cache", TOKEN_CACHE_VERSION)?;
    let vocab_size = r.u32("vocab_size")? as usize;
    let dim = r.u32("dim")? as usize;
    if dim == 0 {
        return Err(Error::format("dim", "must be >= 1"));
    }
    let count = r.u64("sample_count")?;
    let mut samples = Vec::new();
    for _ in 0..count {
        let len = r.u32("length")? as usize;
        let seq: Vec<TokenId> = r.u16s(len, "seq")?;
        let tokens = r.f32s(len.checked_mul(dim).ok_or_else(|| Error::format("struct", "length overflow"))?, "struct")?;
        let bits = r.take(len.div_ceil(8), "mask")?;
        let mask: Vec<bool> = (0..len).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        let pair = TrackPair::new(seq, tokens, mask, dim).map_err(|e| Error::format("sample", e.to_string()))?;
        samples.push(pair);
    }
    r.verify()?;
    Ok(TokenCache { vocab_size, dim, samples })
}

pub fn save_token_cache(path: &Path, vocab_size: usize, dim: usize, samples: &[TrackPair]) -> Result<()> {
    write_atomic(path, &encode_token_cache(vocab_size, dim, samples)?)
}

pub fn load_token_cache(path: &Path) -> Result<TokenCache> {
    decode_token_cache(&read_file(path)?)
}

/// Everything a checkpoint file holds.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub step: u64,
    pub train_digest: u64,
    pub scaler: TokenScaler,
}

fn model_fields(cfg: &ModelConfig) -> [usize; 10] {
    [
        cfg.d_hidden,
        cfg.n_layers,
        cfg.n_heads,
        cfg.max_len,
        cfg.vocab_size,
        cfg.struct_dim,
        cfg.denoiser_hidden,
        cfg.denoiser_layers,
        cfg.time_embed_dim,
        cfg.ddpm_steps as usize,
    ]
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    for v in model_fields(ck.params.config()) {
        w.usize32(v, "model_config")?;
    }
    w.u64(ck.train_digest);
    w.u8(ck.optimizer.is_some() as u8);
    w.u64(ck.step);
    w.f64(ck.scaler.scale);
    w.f64(ck.scaler.fitted_mean);
    w.f64(ck.scaler.fitted_var);
    w.u64(ck.params.len() as u64);
    for &p in ck.params.flat() {
        w.f32(p);
    }
    if let Some(opt) = &ck.optimizer {
        if opt.m.len() != ck.params.len() || opt.v.len() != ck.params.len() {
            return Err(Error::arg("optimizer moments do not match parameter count"));
        }
        w.u64(opt.step);
        for &x in opt.m.iter().chain(&opt.v) {
            w.f32(x);
        }
    }
    Ok(w.finish())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(CHECKPOINT_MAGIC)?;
    r.version("checkpoint", CHECKPOINT_VERSION)?;
    let mut f = [0usize; 10];
    for x in f.iter_mut() {
        *x = r.u32("model_config")? as usize;
    }
    let config = ModelConfig {
        d_hidden: f[0],
        n_layers: f[1],
        n_heads: f[2],
        max_len: f[3],
        vocab_size: f[4],
        struct_dim: f[5],
        denoiser_hidden: f[6],
        denoiser_layers: f[7],
        time_embed_dim: f[8],
        ddpm_steps: f[9] as u32,
    };
    config.validate().map_err(|e| Error::format("model_config", e.to_string()))?;
    let train_digest = r.u64("train_digest")?;
    let has_opt = match r.u8("optimizer_flag")? {
        0 => false,
        1 => true,
        other => return Err(Error::format("optimizer_flag", format!("expected 0 or 1, found {other}"))),
    };
    let step = r.u64("step")?;
    let scaler = TokenScaler { scale: r.f64("scaler")?, fitted_mean: r.f64("scaler")?, fitted_var: r.f64("scaler")? };
    let n = r.u64("param_count")? as usize;
    let expected = crate::network::Layout::new(&config).total;
    if n != expected {
        return Err(Error::format("param_count", format!("found {n}, layout needs {expected}")));
    }
    let data = r.f32s(n, "params")?;
    let optimizer = if has_opt {
        let opt_step = r.u64("optimizer_step")?;
        let m = r.f32s(n, "optimizer_m")?;
        let v = r.f32s(n, "optimizer_v")?;
        Some(OptimizerState { m, v, step: opt_step })
    } else {
        None
    };
    r.verify()?;
    if !(scaler.scale.is_finite() && scaler.scale > 0.0) {
        return Err(Error::format("scaler", format!("invalid scale {}", scaler.scale)));
    }
    let params = ModelParams::from_flat(&config, data)?;
    Ok(Checkpoint { params, optimizer, step, train_digest, scaler })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

/// Ordered `key = value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key, value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Adds every leaf of a serializable value under dotted keys.
    pub fn set_flattened<T: serde::Serialize>(&mut self, prefix: &str, value: &T) -> Result<&mut Self> {
        let v = toml::Value::try_from(value).map_err(|e| Error::Config(e.to_string()))?;
        flatten(prefix, &v, self);
        Ok(self)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::format("manifest", format!("line {} is not `key = value`", n + 1)))?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Manifest) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        toml::Value::String(s) => {
            out.set(prefix, s);
        }
        other => {
            out.set(prefix, other);
        }
    }
}

/// Sidecar manifest path: `out.hdtk` becomes `out.hdtk.manifest`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".manifest");
    PathBuf::from(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(len: usize, seed: u16) -> TrackPair {
        let seq = (0..len).map(|i| (i as u16 * 7 + seed) % 5).collect();
        let z = (0..len * 3).map(|i| (i as f32 * 0.37 + seed as f32).sin()).collect();
        let mask = (0..len).map(|i| (i + seed as usize).is_multiple_of(3)).collect();
        TrackPair::new(seq, z, mask, 3).unwrap()
    }

    #[test]
    fn token_cache_round_trip() {
        let samples: Vec<TrackPair> = (0..20).map(|k| pair(1 + k % 11, k as u16)).collect();
        let bytes = encode_token_cache(5, 3, &samples).unwrap();
        let back = decode_token_cache(&bytes).unwrap();
        assert_eq!(back.samples, samples);
        assert_eq!((back.vocab_size, back.dim), (5, 3));
    }

    #[test]
    fn empty_cache_is_valid() {
        let bytes = encode_token_cache(5, 3, &[]).unwrap();
        assert!(decode_token_cache(&bytes).unwrap().samples.is_empty());
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = encode_token_cache(5, 3, &[pair(9, 1), pair(4, 2)]).unwrap();
        for cut in [3, 10, 30, bytes.len() - 9, bytes.len() - 1] {
            assert!(matches!(decode_token_cache(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = encode_token_cache(5, 3, &[pair(3, 0)]).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_token_cache(&bytes), Err(Error::UnsupportedVersion { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_token_cache(&bytes), Err(Error::Format { field: "magic", .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let mut m = Manifest::new();
        m.set("seed", 7).set("path", "a b.hdtk").set("seed", 8);
        let back = Manifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.get("seed"), Some("8"));
    }
}
