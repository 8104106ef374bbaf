//! Flat binary container shared by checkpoints, score files, masks and
//! adapters.
//!
//! Layout: `u64` little-endian header length, the UTF-8 JSON header, then the
//! concatenated little-endian payloads of every entry in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpeftError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
    U64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F64 | DType::U64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    Float(Vec<f64>),
    Index(Vec<u64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Storage type; float payloads are widened to `f64` in memory.
    pub dtype: DType,
    pub data: EntryData,
}

impl Entry {
    pub fn float(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Self {
        Entry {
            name: name.into(),
            shape,
            dtype,
            data: EntryData::Float(data),
        }
    }

    pub fn index(name: impl Into<String>, shape: Vec<usize>, data: Vec<u64>) -> Self {
        Entry {
            name: name.into(),
            shape,
            dtype: DType::U64,
            data: EntryData::Index(data),
        }
    }

    pub fn floats(&self) -> Option<&[f64]> {
        match &self.data {
            EntryData::Float(v) => Some(v),
            EntryData::Index(_) => None,
        }
    }

    pub fn indices(&self) -> Option<&[u64]> {
        match &self.data {
            EntryData::Index(v) => Some(v),
            EntryData::Float(_) => None,
        }
    }

    fn len(&self) -> usize {
        match &self.data {
            EntryData::Float(v) => v.len(),
            EntryData::Index(v) => v.len(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    entries: Vec<EntryHeader>,
    metadata: serde_json::Value,
}

const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub format: String,
    pub metadata: serde_json::Value,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new(format: impl Into<String>, metadata: serde_json::Value) -> Self {
        Container {
            format: format.into(),
            metadata,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: Entry) {
        self.entries.push(entry);
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let nbytes = e.len() * e.dtype.size();
                let h = EntryHeader {
                    name: e.name.clone(),
                    dtype: e.dtype,
                    shape: e.shape.clone(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                h
            })
            .collect();
        let header = Header {
            format: self.format.clone(),
            version: VERSION,
            entries,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            match (&e.data, e.dtype) {
                (EntryData::Float(v), DType::F32) => {
                    v.iter().for_each(|x| out.extend_from_slice(&(*x as f32).to_le_bytes()))
                }
                (EntryData::Float(v), _) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                (EntryData::Index(v), _) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: &str| SpeftError::format(origin, msg);
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        if header.version != VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let payload = &bytes[8 + hlen..];
        let mut entries = Vec::with_capacity(header.entries.len());
        for h in header.entries {
            let raw = payload
                .get(h.offset..h.offset + h.nbytes)
                .ok_or_else(|| bad(&format!("entry `{}` out of bounds", h.name)))?;
            if h.nbytes % h.dtype.size() != 0 {
                return Err(bad(&format!("entry `{}` has ragged payload", h.name)));
            }
            let data = match h.dtype {
                DType::F64 => EntryData::Float(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                DType::F32 => EntryData::Float(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect(),
                ),
                DType::U64 => EntryData::Index(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
            };
            entries.push(Entry {
                name: h.name,
                shape: h.shape,
                dtype: h.dtype,
                data,
            });
        }
        Ok(Container {
            format: header.format,
            metadata: header.metadata,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| SpeftError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| SpeftError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| SpeftError::io(path, e))?;
        Container::from_bytes(&bytes, path)
    }

    /// Loads and checks the `format` tag.
    pub fn load_expecting(path: &Path, format: &str) -> Result<Self> {
        let c = Container::load(path)?;
        if c.format != format {
            return Err(SpeftError::format(
                path,
                format!("expected format `{format}`, found `{}`", c.format),
            ));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn bytes_round_trip() {
        let mut c = Container::new("test", json!({"seed": 3}));
        c.push(Entry::float("w", vec![2, 2], vec![1.0, -2.5, 0.0, 3.25], DType::F64));
        c.push(Entry::float("h", vec![2], vec![0.5, 1.5], DType::F32));
        c.push(Entry::index("idx", vec![3], vec![0, 7, 1 << 40]));
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        // header length prefix is little-endian
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + hlen + 4 * 8 + 2 * 4 + 3 * 8);
    }

    #[test]
    fn truncated_input_is_format_error() {
        let c = Container::new("test", json!({}));
        let bytes = c.to_bytes();
        let err = Container::from_bytes(&bytes[..bytes.len() - 1], Path::new("x.bin")).unwrap_err();
        assert!(matches!(err, SpeftError::Format { .. }));
    }
}
