//! Versioned binary container of named `f64` arrays plus a key/value echo.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"LKAHCKPT"
//! u32    version
//! u32    meta byte length, then UTF-8 "key=value\n" lines
//! u32    array count
//! per array: u32 name length, name bytes, u32 ndim, u64 × ndim dims,
//!            f64 × product(dims) values
//! ```

use std::collections::BTreeMap;
use std::path::Path as FsPath;

use super::{ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LKAHCKPT";
const VERSION: u32 = 1;

const SHARED_KEY: &str = "bundle.shared_encoder";
const FROZEN_KEY: &str = "bundle.teacher_frozen";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?).map_err(|_| Error::Checkpoint("meta is not UTF-8".into()))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Checkpoint(format!("bad meta line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
            arrays.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: &FsPath) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl ModelBundle {
    /// Every parameter in store order, with the model config echoed in meta.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = self.config.to_kv();
        meta.insert(SHARED_KEY.into(), self.shared_encoder().to_string());
        meta.insert(FROZEN_KEY.into(), self.teacher_frozen().to_string());
        let arrays = self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        Checkpoint { meta, arrays }
    }

    /// Rebuilds a bundle; every parameter must be present with its exact
    /// shape, and no unknown parameter arrays may appear. Arrays whose name
    /// contains a `/` belong to other components (optimizer state) and are
    /// ignored here.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_kv(&ck.meta)?;
        let mut bundle = ModelBundle::new(config)?;
        if ck.meta.get(SHARED_KEY).map(String::as_str) == Some("false") {
            bundle.split_encoders();
        }
        let mut seen = 0;
        for (name, t) in &ck.arrays {
            if name.contains('/') {
                continue;
            }
            let id = bundle.store.find(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let p = bundle.store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} in file, {:?} expected",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
            seen += 1;
        }
        if seen != bundle.store.len() {
            let missing: Vec<_> =
                bundle.store.iter().map(|(_, p)| p.name.clone()).filter(|n| ck.array(n).is_none()).collect();
            return Err(Error::Checkpoint(format!("missing parameters: {}", missing.join(", "))));
        }
        if ck.meta.get(FROZEN_KEY).map(String::as_str) == Some("true") {
            bundle.set_teacher_frozen(true);
        }
        Ok(bundle)
    }
}
