//! TensorPack: the checksummed binary container for named tensors,
//! used for datasets and checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic  "BKFT"                       4 bytes
//! version u32                         (= 1)
//! entry count u32
//! per entry:
//!   name_len u16, name UTF-8
//!   dtype u8 (0 = f32, 1 = f64)
//!   ndim  u8
//!   dims  u32 * ndim
//!   data  little-endian scalars, row-major
//! crc32 of every preceding byte       4 bytes
//! ```
//!
//! Entries keep insertion order, so serialization is a pure function of
//! the logical content. Reads verify magic, checksum, then version,
//! before any entry is parsed.

use std::collections::HashMap;
use std::path::Path;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"BKFT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PackError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a TensorPack file (magic {got:?})")]
    BadMagic { got: Vec<u8> },
    #[error("file too short ({len} bytes) to be a TensorPack")]
    TooShort { len: usize },
    #[error("unsupported TensorPack version {got}, this build reads version {expected}")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("structurally invalid entry table at byte {offset}")]
    Corrupt { offset: usize },
    #[error("entry name is not valid UTF-8 text")]
    BadName,
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("duplicate entry name {0:?}")]
    DuplicateName(String),
    #[error("no entry named {0:?}")]
    Missing(String),
    #[error("entry {name:?} holds {got} values, expected {expected}")]
    SizeMismatch {
        name: String,
        got: usize,
        expected: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

/// Ordered collection of named tensors with a trailing CRC32.
#[derive(Debug, Clone, Default)]
pub struct TensorPack {
    names: Vec<String>,
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl TensorPack {
    pub fn new() -> Self {
        TensorPack::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn insert(&mut self, name: &str, entry: Entry) -> Result<(), PackError> {
        if self.index.contains_key(name) {
            return Err(PackError::DuplicateName(name.to_string()));
        }
        assert!(name.len() <= u16::MAX as usize, "entry name too long");
        let expected: usize = entry.dims.iter().product::<usize>().max(1);
        if entry.data.len() != expected {
            return Err(PackError::SizeMismatch {
                name: name.to_string(),
                got: entry.data.len(),
                expected,
            });
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.names.push(name.to_string());
        self.entries.push(entry);
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: &str, t: &Tensor) -> Result<(), PackError> {
        self.insert(
            name,
            Entry {
                dims: t.shape().to_vec(),
                data: TensorData::F64(t.data().to_vec()),
            },
        )
    }

    pub fn insert_f32(
        &mut self,
        name: &str,
        dims: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<(), PackError> {
        self.insert(
            name,
            Entry {
                dims,
                data: TensorData::F32(data),
            },
        )
    }

    /// Stores a UTF-8 string as an f32 vector of byte values, so textual
    /// metadata (configs, manifests) can ride inside the container.
    pub fn insert_text(&mut self, name: &str, text: &str) -> Result<(), PackError> {
        let bytes: Vec<f32> = text.bytes().map(f32::from).collect();
        let dims = vec![bytes.len().max(1)];
        let data = if bytes.is_empty() { vec![0.0] } else { bytes };
        self.insert_f32(name, dims, data)
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn require(&self, name: &str) -> Result<&Entry, PackError> {
        self.get(name)
            .ok_or_else(|| PackError::Missing(name.to_string()))
    }

    /// Entry as an f64 tensor, widening f32 payloads.
    pub fn tensor(&self, name: &str) -> Result<Tensor, PackError> {
        let entry = self.require(name)?;
        let data = match &entry.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        };
        Tensor::new(entry.dims.clone(), data).map_err(|_| PackError::SizeMismatch {
            name: name.to_string(),
            got: entry.data.len(),
            expected: entry.dims.iter().product(),
        })
    }

    pub fn text(&self, name: &str) -> Result<String, PackError> {
        let entry = self.require(name)?;
        let TensorData::F32(v) = &entry.data else {
            return Err(PackError::BadName);
        };
        let bytes: Vec<u8> = v.iter().map(|&x| x as u8).collect();
        let bytes = if bytes == [0] { Vec::new() } else { bytes };
        String::from_utf8(bytes).map_err(|_| PackError::BadName)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in self.names.iter().zip(&self.entries) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.data.dtype_tag());
            out.push(entry.dims.len() as u8);
            for &d in &entry.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &entry.data {
                TensorData::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PackError> {
        if bytes.len() < 4 {
            return Err(PackError::TooShort { len: bytes.len() });
        }
        if bytes[..4] != MAGIC {
            return Err(PackError::BadMagic {
                got: bytes[..4].to_vec(),
            });
        }
        if bytes.len() < 16 {
            return Err(PackError::TooShort { len: bytes.len() });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(PackError::ChecksumMismatch { stored, computed });
        }
        let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(PackError::VersionMismatch {
                got: version,
                expected: VERSION,
            });
        }
        let count = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
        let mut pack = TensorPack::new();
        let mut offset = 12usize;
        fn take<'a>(body: &'a [u8], offset: &mut usize, n: usize) -> Result<&'a [u8], PackError> {
            if *offset + n > body.len() {
                return Err(PackError::Corrupt { offset: *offset });
            }
            let s = &body[*offset..*offset + n];
            *offset += n;
            Ok(s)
        }
        for _ in 0..count {
            let name_len =
                u16::from_le_bytes(take(body, &mut offset, 2)?.try_into().expect("2")) as usize;
            let name = std::str::from_utf8(take(body, &mut offset, name_len)?)
                .map_err(|_| PackError::BadName)?
                .to_string();
            let dtype = take(body, &mut offset, 1)?[0];
            let ndim = take(body, &mut offset, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(
                    u32::from_le_bytes(take(body, &mut offset, 4)?.try_into().expect("4")) as usize,
                );
            }
            let numel: usize = dims.iter().product::<usize>().max(1);
            let data = match dtype {
                0 => {
                    let raw = take(body, &mut offset, numel * 4)?;
                    TensorData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                            .collect(),
                    )
                }
                1 => {
                    let raw = take(body, &mut offset, numel * 8)?;
                    TensorData::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                            .collect(),
                    )
                }
                other => return Err(PackError::BadDtype(other)),
            };
            pack.insert(&name, Entry { dims, data })?;
        }
        if offset != body.len() {
            return Err(PackError::Corrupt { offset });
        }
        Ok(pack)
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<(), PackError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self, PackError> {
        let bytes = std::fs::read(path)?;
        TensorPack::from_bytes(&bytes)
    }
}
