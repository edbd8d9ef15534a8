//! Checkpoint files.
//!
//! Binary layout, all integers `u64` little-endian:
//!
//! ```text
//! "ESOTN1"
//! tensor_count
//! repeat tensor_count: name_len, name bytes (UTF-8), ndim, dims[ndim]
//! total_dim x f64 little-endian
//! ```
//!
//! A sidecar `<file>.meta` holds the policy config and run metadata as
//! `key = value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use super::{ParamManifest, PolicyConfig, PolicyParams, TensorSpec};

pub const MAGIC: &[u8; 6] = b"ESOTN1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: bad magic bytes")]
    BadMagic { path: String },
    #[error("{path}: truncated or malformed at byte {offset}")]
    Malformed { path: String, offset: usize },
    #[error("{path}: sidecar: {message}")]
    Sidecar { path: String, message: String },
    #[error("checkpoint manifest does not match policy config: {0}")]
    ManifestMismatch(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: PolicyConfig,
    pub params: PolicyParams,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Errors unless the stored manifest equals the one `config` would build.
    pub fn ensure_matches(&self, config: &PolicyConfig) -> Result<(), CheckpointError> {
        let expected = config.manifest();
        if **self.params.manifest() != expected {
            return Err(CheckpointError::ManifestMismatch(format!(
                "checkpoint has total_dim {} (hidden_dim {}), config expects {} (hidden_dim {})",
                self.params.manifest().total_dim(),
                self.config.hidden_dim,
                expected.total_dim(),
                config.hidden_dim
            )));
        }
        Ok(())
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_params(params: &PolicyParams) -> Vec<u8> {
    let manifest = params.manifest();
    let mut buf = Vec::with_capacity(64 + 8 * manifest.total_dim());
    buf.extend_from_slice(MAGIC);
    put_u64(&mut buf, manifest.tensors().len() as u64);
    for t in manifest.tensors() {
        put_u64(&mut buf, t.name.len() as u64);
        buf.extend_from_slice(t.name.as_bytes());
        put_u64(&mut buf, t.shape.len() as u64);
        for &d in &t.shape {
            put_u64(&mut buf, d as u64);
        }
    }
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn len(&mut self) -> Option<usize> {
        let v = self.u64()?;
        // Anything larger than the remaining input cannot be a real count.
        (v <= self.bytes.len() as u64).then_some(v as usize)
    }
}

pub fn decode_params(bytes: &[u8], path: &str) -> Result<PolicyParams, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic { path: path.into() });
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let malformed = |r: &Reader| CheckpointError::Malformed { path: path.into(), offset: r.pos };
    let count = r.len().ok_or_else(|| malformed(&r))?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.len().ok_or_else(|| malformed(&r))?;
        let name = r
            .take(name_len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| malformed(&r))?
            .to_string();
        let ndim = r.len().ok_or_else(|| malformed(&r))?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.len().ok_or_else(|| malformed(&r))?);
        }
        tensors.push(TensorSpec { name, shape });
    }
    let manifest = ParamManifest::new(tensors).map_err(|_| malformed(&r))?;
    let mut values = Vec::with_capacity(manifest.total_dim());
    for _ in 0..manifest.total_dim() {
        let b = r.take(8).ok_or_else(|| malformed(&r))?;
        values.push(f64::from_le_bytes(b.try_into().unwrap()));
    }
    if r.pos != bytes.len() {
        return Err(malformed(&r));
    }
    super::unflatten(Arc::new(manifest), values).map_err(|_| CheckpointError::Malformed {
        path: path.into(),
        offset: bytes.len(),
    })
}

fn sidecar_text(ckpt: &Checkpoint) -> String {
    let c = &ckpt.config;
    let mut out = String::new();
    out.push_str(&format!("policy.hidden_dim = {}\n", c.hidden_dim));
    out.push_str(&format!("policy.message_passing_steps = {}\n", c.message_passing_steps));
    out.push_str(&format!("policy.action_noise_epsilon = {}\n", c.action_noise_epsilon));
    out.push_str(&format!("policy.deterministic_eval = {}\n", c.deterministic_eval));
    out.push_str(&format!("policy.mask_infeasible = {}\n", c.mask_infeasible));
    for (k, v) in &ckpt.metadata {
        out.push_str(&format!("meta.{k} = {v}\n"));
    }
    out
}

fn parse_sidecar(text: &str, path: &str) -> Result<(PolicyConfig, BTreeMap<String, String>), CheckpointError> {
    let err = |message: String| CheckpointError::Sidecar { path: path.into(), message };
    let mut config = PolicyConfig::default();
    let mut meta = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`: {line}")))?;
        let (k, v) = (k.trim(), v.trim());
        let bad = |_| err(format!("bad value for {k}: {v}"));
        match k {
            "policy.hidden_dim" => config.hidden_dim = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "policy.message_passing_steps" => {
                config.message_passing_steps = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            }
            "policy.action_noise_epsilon" => {
                config.action_noise_epsilon = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
            }
            "policy.deterministic_eval" => {
                config.deterministic_eval = v.parse().map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?
            }
            "policy.mask_infeasible" => {
                config.mask_infeasible = v.parse().map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?
            }
            other => match other.strip_prefix("meta.") {
                Some(m) => {
                    meta.insert(m.to_string(), v.to_string());
                }
                None => return Err(err(format!("unknown key {other}"))),
            },
        }
    }
    Ok((config, meta))
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io_err = |p: &Path| {
        let p = p.display().to_string();
        move |source| CheckpointError::Io { path: p, source }
    };
    fs::write(path, encode_params(&ckpt.params)).map_err(io_err(path))?;
    let meta = sidecar_path(path);
    fs::write(&meta, sidecar_text(ckpt)).map_err(io_err(&meta))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let shown = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: shown.clone(), source })?;
    let params = decode_params(&bytes, &shown)?;
    let meta_path = sidecar_path(path);
    let text = fs::read_to_string(&meta_path).map_err(|source| CheckpointError::Io {
        path: meta_path.display().to_string(),
        source,
    })?;
    let (config, metadata) = parse_sidecar(&text, &shown)?;
    let ckpt = Checkpoint { config, params, metadata };
    ckpt.ensure_matches(&config)?;
    Ok(ckpt)
}
