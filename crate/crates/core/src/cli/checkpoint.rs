//! Versioned binary container for parameter stores and optimizer state.
//!
//! Layout: `CXRL`, a little-endian `u32` format version, a little-endian
//! `u64` header length, the UTF-8 header, then the payload of little-endian
//! `f32` values. The header is line-oriented:
//!
//! ```text
//! kind generator
//! payload_sha256 <hex>
//! meta <key> <value>
//! config <key>=<value>
//! tensor <name> <frozen> <d0,d1,..> <byte offset> <byte length>
//! ```
//!
//! Tensor names are `param/<store>/<name>` or
//! `optim/<store>/{first,second}/<name>`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fsio::atomic_write;
use crate::numcore::{sha256_hex, AdamConfig, Moments, OptimState, ParamStore, Precision, Tensor};

pub const MAGIC: &[u8; 4] = b"CXRL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("payload hash mismatch")]
    HashMismatch,
    #[error("truncated container")]
    Truncated,
    #[error("malformed header: {0}")]
    Format(String),
}

/// In-memory form of a container.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    /// Config snapshot as `(key, value)` pairs.
    pub config: Vec<(String, String)>,
    pub stores: BTreeMap<String, ParamStore>,
    pub optims: BTreeMap<String, OptimState>,
}

fn f32_bytes(t: &Tensor, out: &mut Vec<u8>) {
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "-".into();
    }
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.into(),
            ..Self::default()
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut lines = Vec::new();
        let mut push = |name: String, frozen: bool, t: &Tensor, payload: &mut Vec<u8>| {
            let off = payload.len();
            f32_bytes(t, payload);
            lines.push(format!(
                "tensor {name} {} {} {off} {}",
                u8::from(frozen),
                shape_text(t.shape()),
                payload.len() - off
            ));
        };
        for (store_name, store) in &self.stores {
            for (name, p) in store.iter() {
                push(format!("param/{store_name}/{name}"), p.frozen, &p.value, &mut payload);
            }
        }
        for (store_name, st) in &self.optims {
            for (name, m) in st.moments() {
                push(format!("optim/{store_name}/first/{name}"), false, &m.first, &mut payload);
                push(format!("optim/{store_name}/second/{name}"), false, &m.second, &mut payload);
            }
        }
        let mut header = format!("kind {}\npayload_sha256 {}\n", self.kind, sha256_hex(&payload));
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for (store_name, st) in &self.optims {
            let c = st.config;
            header.push_str(&format!(
                "meta optim.{store_name} step={} lr={:?} beta1={:?} beta2={:?} eps={:?}\n",
                st.step, c.lr, c.beta1, c.beta2, c.eps
            ));
        }
        for (k, v) in &self.config {
            header.push_str(&format!("config {k}={v}\n"));
        }
        for l in lines {
            header.push_str(&l);
            header.push('\n');
        }
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(if MAGIC.starts_with(bytes) {
                CheckpointError::Truncated
            } else {
                CheckpointError::BadMagic
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let hend = 16usize
            .checked_add(usize::try_from(hlen).map_err(|_| CheckpointError::Truncated)?)
            .ok_or(CheckpointError::Truncated)?;
        if bytes.len() < hend {
            return Err(CheckpointError::Truncated);
        }
        let header = std::str::from_utf8(&bytes[16..hend]).map_err(|_| CheckpointError::Format("header is not UTF-8".into()))?;
        let payload = &bytes[hend..];
        let bad = |msg: String| CheckpointError::Format(msg);

        let mut ck = Checkpoint::default();
        let mut digest = None;
        let mut tensors = Vec::new();
        let mut optim_meta: BTreeMap<String, (u64, AdamConfig)> = BTreeMap::new();
        for line in header.lines() {
            let (tag, rest) = line.split_once(' ').ok_or_else(|| bad(format!("line `{line}`")))?;
            match tag {
                "kind" => ck.kind = rest.to_string(),
                "payload_sha256" => digest = Some(rest.to_string()),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    if let Some(store) = k.strip_prefix("optim.") {
                        optim_meta.insert(store.to_string(), parse_optim_meta(v).ok_or_else(|| bad(format!("optimizer line `{line}`")))?);
                    } else {
                        ck.meta.insert(k.to_string(), v.to_string());
                    }
                }
                "config" => {
                    let (k, v) = rest.split_once('=').ok_or_else(|| bad(format!("config line `{line}`")))?;
                    ck.config.push((k.to_string(), v.to_string()));
                }
                "tensor" => tensors.push(parse_tensor_line(rest).ok_or_else(|| bad(format!("tensor line `{line}`")))?),
                _ => return Err(bad(format!("unknown tag `{tag}`"))),
            }
        }

        let mut spans: Vec<(usize, usize)> = Vec::new();
        for t in &tensors {
            let end = t.offset.checked_add(t.len).ok_or(CheckpointError::Truncated)?;
            let count: usize = t.shape.iter().product();
            if t.len != count * 4 {
                return Err(bad(format!("{} declares {} bytes for {count} values", t.name, t.len)));
            }
            if end > payload.len() {
                return Err(CheckpointError::Truncated);
            }
            spans.push((t.offset, end));
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(bad("overlapping tensors".into()));
        }
        let digest = digest.ok_or_else(|| bad("missing payload hash".into()))?;
        if sha256_hex(payload) != digest {
            return Err(CheckpointError::HashMismatch);
        }

        let mut moments: BTreeMap<String, BTreeMap<String, (Option<Tensor>, Option<Tensor>)>> = BTreeMap::new();
        for t in tensors {
            let values: Vec<f64> = payload[t.offset..t.offset + t.len]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            let tensor = Tensor::new(t.shape.clone(), values).map_err(|e| bad(e.to_string()))?;
            let parts: Vec<&str> = t.name.splitn(4, '/').collect();
            match parts.as_slice() {
                ["param", store, rest @ ..] if !rest.is_empty() => {
                    let name = rest.join("/");
                    ck.stores
                        .entry(store.to_string())
                        .or_insert_with(|| ParamStore::new(Precision::F32))
                        .insert(name, tensor, t.frozen)
                        .map_err(|e| bad(e.to_string()))?;
                }
                ["optim", store, which, name] => {
                    let slot = moments.entry(store.to_string()).or_default().entry(name.to_string()).or_default();
                    match *which {
                        "first" => slot.0 = Some(tensor),
                        "second" => slot.1 = Some(tensor),
                        _ => return Err(bad(format!("tensor `{}`", t.name))),
                    }
                }
                _ => return Err(bad(format!("tensor `{}`", t.name))),
            }
        }
        for (store, (step, config)) in optim_meta {
            let mut m = BTreeMap::new();
            for (name, (first, second)) in moments.remove(&store).unwrap_or_default() {
                match (first, second) {
                    (Some(first), Some(second)) => {
                        m.insert(name, Moments { first, second });
                    }
                    _ => return Err(bad(format!("incomplete optimizer moments for `{name}`"))),
                }
            }
            ck.optims.insert(store, OptimState::from_parts(config, step, m, Precision::F32));
        }
        if !moments.is_empty() {
            return Err(bad("optimizer moments without optimizer metadata".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        atomic_write(path, &self.encode()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }

    /// Hash of the payload recorded in the header of an encoded container.
    pub fn payload_hash(&self) -> String {
        let bytes = self.encode();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        sha256_hex(&bytes[16 + hlen..])
    }

    pub fn store(&self, name: &str) -> Result<&ParamStore, CheckpointError> {
        self.stores
            .get(name)
            .ok_or_else(|| CheckpointError::Format(format!("no `{name}` parameters in {} checkpoint", self.kind)))
    }

    pub fn meta(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::Format(format!("missing `{key}` in {} checkpoint", self.kind)))
    }
}

struct TensorLine {
    name: String,
    frozen: bool,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn parse_tensor_line(rest: &str) -> Option<TensorLine> {
    let f: Vec<&str> = rest.split(' ').collect();
    if f.len() != 5 {
        return None;
    }
    let shape = if f[2] == "-" {
        Vec::new()
    } else {
        f[2].split(',').map(|d| d.parse().ok()).collect::<Option<Vec<usize>>>()?
    };
    Some(TensorLine {
        name: f[0].to_string(),
        frozen: match f[1] {
            "0" => false,
            "1" => true,
            _ => return None,
        },
        shape,
        offset: f[3].parse().ok()?,
        len: f[4].parse().ok()?,
    })
}

fn parse_optim_meta(v: &str) -> Option<(u64, AdamConfig)> {
    let kv: BTreeMap<&str, &str> = v.split(' ').filter_map(|p| p.split_once('=')).collect();
    Some((
        kv.get("step")?.parse().ok()?,
        AdamConfig {
            lr: kv.get("lr")?.parse().ok()?,
            beta1: kv.get("beta1")?.parse().ok()?,
            beta2: kv.get("beta2")?.parse().ok()?,
            eps: kv.get("eps")?.parse().ok()?,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{optimizer_step, Gradients, RngStream};

    fn sample() -> Checkpoint {
        let mut s = RngStream::new(9, "ckpt");
        let mut store = ParamStore::new(Precision::F32);
        store.insert("a.w", Tensor::new(vec![2, 3], (0..6).map(|_| s.normal()).collect()).unwrap(), false).unwrap();
        store.insert("b", Tensor::scalar(0.25), true).unwrap();
        let mut opt = OptimState::new(&store, AdamConfig::default());
        let mut g = Gradients::new();
        g.insert("a.w", Tensor::new(vec![2, 3], (0..6).map(|_| s.normal()).collect()).unwrap());
        optimizer_step(&mut store, &g, &mut opt).unwrap();
        let mut ck = Checkpoint::new("test");
        ck.meta.insert("dataset_hash".into(), "abc".into());
        ck.config.push(("seed".into(), "7".into()));
        ck.stores.insert("gen".into(), store);
        ck.optims.insert("gen".into(), opt);
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), ck.encode());
        let header = String::from_utf8_lossy(&ck.encode()).to_string();
        assert_eq!(header.matches("param/gen/a.w ").count(), 1);
        assert_eq!(header.matches("param/gen/b ").count(), 1);
    }

    #[test]
    fn validation_errors_are_distinct() {
        let bytes = sample().encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(CheckpointError::BadMagic)));
        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(Checkpoint::decode(&newer), Err(CheckpointError::UnsupportedVersion(2))));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(Checkpoint::decode(&flipped), Err(CheckpointError::HashMismatch)));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated)));
        assert!(matches!(Checkpoint::decode(&bytes[..10]), Err(CheckpointError::Truncated)));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(CheckpointError::Io { .. })));
    }
}
