//! Chunked little-endian binary container used for operator caches and
//! model checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   "CFANBIN1"
//! count      u64       number of entries
//! entry*     name_len u32, name (utf-8), kind u8 (0 f64, 1 u64, 2 text),
//!            ndims u32, dims u64 * ndims, payload_len u64 (bytes), payload
//! trailer    32 bytes  SHA-256 of everything above
//! ```

use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"CFANBIN1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a container file (bad magic)")]
    BadMagic,
    #[error("container truncated at byte {0}")]
    Truncated(usize),
    #[error("container checksum mismatch")]
    ChecksumMismatch,
    #[error("missing entry {0:?}")]
    MissingEntry(String),
    #[error("entry {name:?} has kind {found}, expected {expected}")]
    WrongKind {
        name: String,
        found: &'static str,
        expected: &'static str,
    },
    #[error("entry {name:?}: {message}")]
    Malformed { name: String, message: String },
    #[error("duplicate entry {0:?}")]
    Duplicate(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
    Text(String),
}

impl Payload {
    fn kind(&self) -> &'static str {
        match self {
            Payload::F64(_) => "f64",
            Payload::U64(_) => "u64",
            Payload::Text(_) => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

/// Ordered collection of named arrays. Entry order is preserved, so equal
/// containers serialise to identical bytes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    fn push(&mut self, name: &str, dims: Vec<usize>, payload: Payload) -> Result<(), ContainerError> {
        if self.contains(name) {
            return Err(ContainerError::Duplicate(name.to_string()));
        }
        let expected: usize = dims.iter().product();
        let len = match &payload {
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
            Payload::Text(_) => expected,
        };
        if len != expected {
            return Err(ContainerError::Malformed {
                name: name.to_string(),
                message: format!("{len} values for dims {dims:?}"),
            });
        }
        self.entries.push(Entry {
            name: name.to_string(),
            dims,
            payload,
        });
        Ok(())
    }

    /// Copies every entry of `other` under `prefix`.
    pub fn insert_prefixed(&mut self, prefix: &str, other: &Container) -> Result<(), ContainerError> {
        for e in &other.entries {
            self.push(&format!("{prefix}{}", e.name), e.dims.clone(), e.payload.clone())?;
        }
        Ok(())
    }

    /// The entries whose names start with `prefix`, with the prefix removed.
    pub fn extract_prefixed(&self, prefix: &str) -> Container {
        let entries = self
            .entries
            .iter()
            .filter_map(|e| {
                e.name.strip_prefix(prefix).map(|rest| Entry {
                    name: rest.to_string(),
                    ..e.clone()
                })
            })
            .collect();
        Container { entries }
    }

    pub fn put_f64(&mut self, name: &str, dims: &[usize], data: Vec<f64>) -> Result<(), ContainerError> {
        self.push(name, dims.to_vec(), Payload::F64(data))
    }

    pub fn put_u64(&mut self, name: &str, dims: &[usize], data: Vec<u64>) -> Result<(), ContainerError> {
        self.push(name, dims.to_vec(), Payload::U64(data))
    }

    pub fn put_usize(&mut self, name: &str, data: &[usize]) -> Result<(), ContainerError> {
        self.put_u64(name, &[data.len()], data.iter().map(|&v| v as u64).collect())
    }

    pub fn put_text(&mut self, name: &str, text: &str) -> Result<(), ContainerError> {
        self.push(name, vec![1], Payload::Text(text.to_string()))
    }

    fn get(&self, name: &str) -> Result<&Entry, ContainerError> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| ContainerError::MissingEntry(name.to_string()))
    }

    fn wrong_kind(e: &Entry, expected: &'static str) -> ContainerError {
        ContainerError::WrongKind {
            name: e.name.clone(),
            found: e.payload.kind(),
            expected,
        }
    }

    pub fn get_f64(&self, name: &str) -> Result<(&[usize], &[f64]), ContainerError> {
        let e = self.get(name)?;
        match &e.payload {
            Payload::F64(v) => Ok((&e.dims, v)),
            _ => Err(Self::wrong_kind(e, "f64")),
        }
    }

    pub fn get_u64(&self, name: &str) -> Result<(&[usize], &[u64]), ContainerError> {
        let e = self.get(name)?;
        match &e.payload {
            Payload::U64(v) => Ok((&e.dims, v)),
            _ => Err(Self::wrong_kind(e, "u64")),
        }
    }

    pub fn get_usize(&self, name: &str) -> Result<Vec<usize>, ContainerError> {
        Ok(self.get_u64(name)?.1.iter().map(|&v| v as usize).collect())
    }

    pub fn get_text(&self, name: &str) -> Result<&str, ContainerError> {
        let e = self.get(name)?;
        match &e.payload {
            Payload::Text(s) => Ok(s),
            _ => Err(Self::wrong_kind(e, "text")),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            let (kind, bytes): (u8, Vec<u8>) = match &e.payload {
                Payload::F64(v) => (0, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
                Payload::U64(v) => (1, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
                Payload::Text(s) => (2, s.as_bytes().to_vec()),
            };
            out.push(kind);
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 8 + 32 {
            return Err(ContainerError::Truncated(bytes.len()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(ContainerError::ChecksumMismatch);
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let count = r.u64()? as usize;
        let mut c = Container::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| ContainerError::Malformed {
                name: "?".into(),
                message: "entry name is not utf-8".into(),
            })?;
            let kind = r.take(1)?[0];
            let ndims = r.u32()? as usize;
            let dims = (0..ndims)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let len = r.u64()? as usize;
            let raw = r.take(len)?;
            let malformed = |message: &str| ContainerError::Malformed {
                name: name.clone(),
                message: message.to_string(),
            };
            let payload = match kind {
                0 | 1 if !len.is_multiple_of(8) => return Err(malformed("payload not a multiple of 8 bytes")),
                0 => Payload::F64(
                    raw.chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect(),
                ),
                1 => Payload::U64(
                    raw.chunks_exact(8)
                        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect(),
                ),
                2 => Payload::Text(String::from_utf8(raw.to_vec()).map_err(|_| malformed("text is not utf-8"))?),
                _ => return Err(malformed("unknown kind")),
            };
            c.push(&name, dims, payload)?;
        }
        if r.pos != body.len() {
            return Err(ContainerError::Malformed {
                name: "<trailer>".into(),
                message: "unexpected bytes after the last entry".into(),
            });
        }
        Ok(c)
    }

    /// Writes to a temporary sibling file, then renames it into place.
    pub fn write_atomic(&self, path: &Path) -> Result<(), ContainerError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ContainerError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Write-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(ContainerError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
