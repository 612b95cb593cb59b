//! Named-tensor archive shared by features, knowledge and frozen weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "KHSTORE\0"
//! version    u32       1
//! byte order u32       0x01020304
//! count      u32       number of tensors
//! count × entry:
//!     name_len u16, name (UTF-8)
//!     dtype    u8      0 = f32
//!     ndim     u8
//!     dims     u64 × ndim
//!     offset   u64     relative to the payload start
//!     byte_len u64
//!     sha256   32 bytes over the tensor's payload bytes
//! payload
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MAGIC: [u8; 8] = *b"KHSTORE\0";
pub const VERSION: u32 = 1;
pub const BYTE_ORDER_TAG: u32 = 0x0102_0304;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    fn bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn sha256(&self) -> [u8; 32] {
        Sha256::digest(self.bytes()).into()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    order: Vec<String>,
    tensors: BTreeMap<String, Tensor>,
}

/// Reads little-endian fields, reporting running off the end as truncation.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Truncated(format!("while reading {what}")));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
    digest: [u8; 32],
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Names in insertion (file) order.
    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::Format("tensor names must be 1..=65535 bytes".into()));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        if shape.len() > u8::MAX as usize || shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "FeatureStore::insert",
                format!("shape {shape:?} for {} values", data.len()),
            ));
        }
        self.order.push(name.clone());
        self.tensors.insert(name, Tensor { shape, data });
        Ok(())
    }

    /// Stores a matrix as a 2-D f32 tensor (values are rounded to f32).
    pub fn insert_mat(&mut self, name: impl Into<String>, m: &Mat) -> Result<()> {
        let data = m.data().iter().map(|&v| v as f32).collect();
        self.insert(name, vec![m.rows(), m.cols()], data)
    }

    /// Loads a 1-D (as a row vector) or 2-D tensor.
    pub fn mat(&self, name: &str) -> Result<Mat> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let (rows, cols) = match t.shape[..] {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected 1-D or 2-D",
                    t.shape
                )))
            }
        };
        Mat::from_vec(rows, cols, t.data.iter().map(|&v| v as f64).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::new();
        header.extend_from_slice(&MAGIC);
        header.extend_from_slice(&VERSION.to_le_bytes());
        header.extend_from_slice(&BYTE_ORDER_TAG.to_le_bytes());
        header.extend_from_slice(&(self.order.len() as u32).to_le_bytes());
        let mut payload = Vec::new();
        for name in &self.order {
            let t = &self.tensors[name];
            let bytes = t.bytes();
            header.extend_from_slice(&(name.len() as u16).to_le_bytes());
            header.extend_from_slice(name.as_bytes());
            header.push(DTYPE_F32);
            header.push(t.shape.len() as u8);
            for &d in &t.shape {
                header.extend_from_slice(&(d as u64).to_le_bytes());
            }
            header.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            header.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            header.extend_from_slice(&Sha256::digest(&bytes));
            payload.extend_from_slice(&bytes);
        }
        header.extend_from_slice(&payload);
        header
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if buf.len() < MAGIC.len() {
            return Err(Error::Truncated("while reading magic".into()));
        }
        if c.take(8, "magic")? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        match c.u32("byte order tag")? {
            BYTE_ORDER_TAG => {}
            t if t == BYTE_ORDER_TAG.swap_bytes() => return Err(Error::Endianness),
            t => return Err(Error::Format(format!("bad byte order tag {t:#010x}"))),
        }
        let count = c.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = c.u16("name length")? as usize;
            let name = std::str::from_utf8(c.take(len, "name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = c.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!(
                    "tensor `{name}` has unknown dtype {dtype}"
                )));
            }
            let ndim = c.u8("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(c.u64("dims")? as usize);
            }
            let offset = c.u64("offset")?;
            let byte_len = c.u64("byte length")?;
            let digest: [u8; 32] = c.take(32, "checksum")?.try_into().unwrap();
            entries.push(Entry {
                name,
                shape,
                offset,
                byte_len,
                digest,
            });
        }
        let payload = &buf[c.pos..];
        let mut store = FeatureStore::new();
        for e in entries {
            let expect = e
                .shape
                .iter()
                .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64));
            if expect != Some(e.byte_len) {
                return Err(Error::Format(format!(
                    "tensor `{}` declares {} bytes for shape {:?}",
                    e.name, e.byte_len, e.shape
                )));
            }
            let end = e.offset.checked_add(e.byte_len);
            let bytes = match end {
                Some(end) if end <= payload.len() as u64 => {
                    &payload[e.offset as usize..end as usize]
                }
                _ => return Err(Error::Truncated(format!("payload of `{}`", e.name))),
            };
            let digest: [u8; 32] = Sha256::digest(bytes).into();
            if digest != e.digest {
                return Err(Error::Checksum(e.name));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            store.insert(e.name, e.shape, data)?;
        }
        Ok(store)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn checksums(&self) -> Checksums {
        Checksums {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), hex::encode(t.sha256())))
                .collect(),
        }
    }

    /// Compares every tensor against a sidecar listing; both sides must
    /// name the same set of tensors.
    pub fn verify_checksums(&self, sidecar: &Checksums) -> Result<()> {
        let ours = self.checksums();
        for (name, hex) in &sidecar.tensors {
            match ours.tensors.get(name) {
                None => return Err(Error::MissingTensor(name.clone())),
                Some(h) if !h.eq_ignore_ascii_case(hex) => {
                    return Err(Error::Checksum(name.clone()))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = ours
            .tensors
            .keys()
            .find(|n| !sidecar.tensors.contains_key(*n))
        {
            return Err(Error::Format(format!(
                "tensor `{extra}` is not listed in the sidecar"
            )));
        }
        Ok(())
    }
}

/// Contents of `<store>.checksums.json`: tensor name to hex SHA-256.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Checksums {
    pub tensors: BTreeMap<String, String>,
}

impl Checksums {
    pub fn sidecar_path(store: impl AsRef<Path>) -> PathBuf {
        let mut s = store.as_ref().as_os_str().to_owned();
        s.push(".checksums.json");
        PathBuf::from(s)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes the store and its sidecar next to it.
pub fn write_with_sidecar(store: &FeatureStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    store.write(path)?;
    store.checksums().write(Checksums::sidecar_path(path))
}

/// Reads a store and, when a sidecar exists, verifies it too.
pub fn read_verified(path: impl AsRef<Path>) -> Result<FeatureStore> {
    let path = path.as_ref();
    let store = FeatureStore::read(path)?;
    let sidecar = Checksums::sidecar_path(path);
    if sidecar.exists() {
        store.verify_checksums(&Checksums::read(&sidecar)?)?;
    }
    Ok(store)
}
