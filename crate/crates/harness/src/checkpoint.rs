//! Binary checkpoints of named `f32` arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GTN1"                      magic
//! u32                         format version (1)
//! u32, [u8]                   metadata length, UTF-8 metadata
//! u32                         array count
//! per array:
//!   u16, [u8]                 name length, UTF-8 name
//!   u8                        dtype (0 = f32)
//!   u8, [u32; rank]           rank, dims
//!   [f32; product(dims)]      values
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use gtn_core::{ParamStore, Tensor};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"GTN1";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"GTN1\"")]
    BadMagic([u8; 4]),
    #[error("format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, {available} left")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no array named `{0}`")]
    Missing(String),
    #[error("array `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    /// Snapshot of every parameter value in the store, in store order.
    pub fn from_store(store: &ParamStore, metadata: impl Into<String>) -> Self {
        Self {
            metadata: metadata.into(),
            arrays: store
                .iter()
                .map(|p| NamedArray {
                    name: p.name.clone(),
                    tensor: p.value.clone(),
                })
                .collect(),
        }
    }

    /// Overwrites each store parameter with the array of the same name.
    /// Every parameter must be present with a matching shape.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        for p in store.iter_mut() {
            let a = self
                .arrays
                .iter()
                .find(|a| a.name == p.name)
                .ok_or_else(|| CheckpointError::Missing(p.name.clone()))?;
            if a.tensor.shape() != p.value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    found: a.tensor.shape().to_vec(),
                    expected: p.value.shape().to_vec(),
                });
            }
            p.value = a.tensor.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(self.metadata.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&len_u32(self.arrays.len(), "array count")?.to_le_bytes());
        for a in &self.arrays {
            let name_len = u16::try_from(a.name.len())
                .map_err(|_| CheckpointError::Malformed(format!("name `{}` longer than 65535 bytes", a.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(DTYPE_F32);
            let rank = u8::try_from(a.tensor.rank())
                .map_err(|_| CheckpointError::Malformed(format!("rank of `{}` exceeds 255", a.name)))?;
            out.push(rank);
            for &d in a.tensor.shape() {
                out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
            }
            for v in a.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let meta_len = r.u32()? as usize;
        let metadata = utf8(r.take(meta_len)?, "metadata")?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = utf8(r.take(name_len)?, "array name")?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(CheckpointError::UnsupportedDtype(dtype));
            }
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Malformed(format!("dims {dims:?} of `{name}` overflow")))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = if n == 0 {
                Tensor::zeros(&dims)
            } else {
                Tensor::new(dims, data).map_err(|e| CheckpointError::Malformed(format!("`{name}`: {e}")))?
            };
            arrays.push(NamedArray { name, tensor });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { metadata, arrays })
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| CheckpointError::Malformed(format!("{what} {n} exceeds u32")))
}

fn utf8(bytes: &[u8], what: &str) -> Result<String> {
    String::from_utf8(bytes.to_vec()).map_err(|e| CheckpointError::Malformed(format!("{what} is not UTF-8: {e}")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(store: &ParamStore, metadata: &str, path: &Path) -> Result<()> {
    let bytes = Checkpoint::from_store(store, metadata).encode()?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::decode(&bytes)
}
