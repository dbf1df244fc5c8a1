//! The `FGPL` container: named parameter arrays plus key=value metadata.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "FGPL" | version | meta_len | meta (UTF-8 "key=value\n" lines)
//! then until EOF: name_len | name | rank | dims[rank] | f32 values
//! ```
//!
//! Values are stored as `f32`, so a round trip rounds 64-bit parameters
//! once; a second save of a loaded checkpoint reproduces the bytes.

use std::collections::BTreeMap;
use std::path::Path;

use diffcore::{ParamStore, Tensor};
use tracing::warn;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FGPL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self {
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| bad(format!("metadata key {key:?} missing")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| bad(format!("metadata {key}={v:?} does not parse")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(bad(format!("metadata entry {k:?} cannot be encoded")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        put_len(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());
        for (name, t) in self.params.iter() {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_len(&mut out, d)?;
            }
            for &v in t.values() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(bad("not an FGPL checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let n = r.u32("metadata length")? as usize;
        let meta_text =
            std::str::from_utf8(r.take(n, "metadata")?).map_err(|_| bad("metadata is not UTF-8"))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("metadata line {line:?} has no '='")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let mut params = ParamStore::new();
        while r.pos < bytes.len() {
            let n = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|_| bad("array name is not UTF-8"))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad(format!("array {name} is too large")))?;
            let raw = r.take(count.checked_mul(4).ok_or_else(|| bad("array too large"))?, "values")?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, values).map_err(|e| bad(e.to_string()))?;
            if params.contains(&name) {
                return Err(bad(format!("array {name} appears twice")));
            }
            params.insert(name, t);
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads and warns when the stored config hash differs from `hash`.
    pub fn load_checked(path: &Path, hash: &str) -> Result<Self> {
        let c = Self::load(path)?;
        match c.meta.get("config_hash") {
            Some(h) if h == hash => {}
            Some(h) => warn!(
                path = %path.display(),
                stored = %h,
                current = %hash,
                "checkpoint was written under a different config"
            ),
            None => warn!(path = %path.display(), "checkpoint has no config hash"),
        }
        Ok(c)
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| bad(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(bad(format!(
                "truncated while reading {what} at byte {} ({} bytes total)",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Rounds every parameter to `f32` and back, matching what a save/load
/// cycle does.
pub fn round_to_storage(params: &mut ParamStore) {
    for (_, t) in params.iter_mut() {
        for v in t.values_mut() {
            *v = *v as f32 as f64;
        }
    }
}
