//! Self-describing binary container for float tensors.
//!
//! Layout: 8-byte magic `FUSCBLOB`, u32 LE format version, u64 LE header
//! length, a JSON header, then the tensors as contiguous little-endian f32
//! in header order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"FUSCBLOB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("not a tensor container (bad magic)")]
    BadMagic,
    #[error("container format version {found} is not supported (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("expected container kind {expected:?}, found {found:?}")]
    WrongKind { expected: String, found: String },
    #[error("container is truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded container.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Vec<f32>>,
}

impl Blob {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Blob { kind: kind.into(), meta, tensors: BTreeMap::new() }
    }

    pub fn with(mut self, name: impl Into<String>, data: Vec<f32>) -> Self {
        self.tensors.insert(name.into(), data);
        self
    }

    pub fn take(&mut self, name: &str) -> Result<Vec<f32>, BlobError> {
        self.tensors.remove(name).ok_or_else(|| BlobError::MissingTensor(name.to_string()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), BlobError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(BlobError::WrongKind { expected: kind.to_string(), found: self.kind.clone() })
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, BlobError> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, v)| TensorEntry { name: n.clone(), len: v.len() }).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.values().map(|v| v.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.tensors.values() {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BlobError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(BlobError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(BlobError::UnsupportedVersion { found: version, expected: FORMAT_VERSION });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(BlobError::Corrupt("header extends past end of file".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut rest = &body[hlen..];
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let nbytes = entry.len * 4;
            if rest.len() < nbytes {
                return Err(BlobError::Corrupt(format!("tensor {:?} is truncated", entry.name)));
            }
            let data = rest[..nbytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            rest = &rest[nbytes..];
            tensors.insert(entry.name, data);
        }
        if !rest.is_empty() {
            return Err(BlobError::Corrupt(format!("{} trailing bytes", rest.len())));
        }
        Ok(Blob { kind: header.kind, meta: header.meta, tensors })
    }

    /// Writes to a temporary sibling, fsyncs, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), BlobError> {
        write_atomic(path, &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BlobError> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Crash-safe file replacement.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(bytes)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Header of an id-indexed f32 matrix stored as three sibling files:
/// `<stem>.json` (this header), `<stem>.ids` (one id per line) and
/// `<stem>.f32` (row-major little-endian data).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixHeader {
    pub kind: String,
    pub version: u32,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub ids_file: String,
    pub data_file: String,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn sibling(path: &Path, ext: &str) -> std::path::PathBuf {
    path.with_extension(ext)
}

/// Writes a matrix artifact; `path` names the JSON header.
pub fn save_matrix(
    path: &Path,
    kind: &str,
    ids: &[String],
    cols: usize,
    data: &[f32],
    meta: serde_json::Value,
) -> Result<(), BlobError> {
    assert_eq!(ids.len() * cols, data.len(), "matrix shape does not match data");
    let ids_path = sibling(path, "ids");
    let data_path = sibling(path, "f32");
    let mut id_text = String::new();
    for id in ids {
        if id.contains('\n') {
            return Err(BlobError::Corrupt(format!("id {id:?} contains a newline")));
        }
        id_text.push_str(id);
        id_text.push('\n');
    }
    write_atomic(&ids_path, id_text.as_bytes())?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_atomic(&data_path, &bytes)?;
    let file_name = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let header = MatrixHeader {
        kind: kind.to_string(),
        version: FORMAT_VERSION,
        rows: ids.len(),
        cols,
        dtype: "f32le".into(),
        ids_file: file_name(&ids_path),
        data_file: file_name(&data_path),
        meta,
    };
    write_atomic(path, &serde_json::to_vec_pretty(&header)?)?;
    Ok(())
}

/// Reads a matrix artifact written by [`save_matrix`].
pub fn load_matrix(path: &Path, kind: &str) -> Result<(MatrixHeader, Vec<String>, Vec<f32>), BlobError> {
    let header: MatrixHeader = serde_json::from_slice(&std::fs::read(path)?)?;
    if header.kind != kind {
        return Err(BlobError::WrongKind { expected: kind.to_string(), found: header.kind });
    }
    if header.version != FORMAT_VERSION {
        return Err(BlobError::UnsupportedVersion { found: header.version, expected: FORMAT_VERSION });
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let ids: Vec<String> = std::fs::read_to_string(dir.join(&header.ids_file))?
        .lines()
        .map(str::to_string)
        .collect();
    let bytes = std::fs::read(dir.join(&header.data_file))?;
    if ids.len() != header.rows || bytes.len() != header.rows * header.cols * 4 {
        return Err(BlobError::Corrupt(format!(
            "expected {}x{} matrix, found {} ids and {} bytes",
            header.rows,
            header.cols,
            ids.len(),
            bytes.len()
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((header, ids, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_identical() {
        let b = Blob::new("demo", serde_json::json!({"n": 3}))
            .with("a", vec![1.0, -0.0, f32::MIN_POSITIVE])
            .with("b", vec![]);
        let back = Blob::from_bytes(&b.to_bytes().unwrap()).unwrap();
        assert_eq!(back.kind, "demo");
        let bits = |v: &Vec<f32>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.tensors["a"]), bits(&b.tensors["a"]));
        assert_eq!(back.tensors["b"].len(), 0);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(Blob::from_bytes(b"NOTABLOBxxxxxxxxxxxxxxxx"), Err(BlobError::BadMagic)));
        let bytes = Blob::new("k", serde_json::Value::Null).with("x", vec![1.0; 4]).to_bytes().unwrap();
        assert!(matches!(Blob::from_bytes(&bytes[..bytes.len() - 2]), Err(BlobError::Corrupt(_))));
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(Blob::from_bytes(&wrong), Err(BlobError::UnsupportedVersion { found: 9, .. })));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.blob");
        let b = Blob::new("k", serde_json::json!([1, 2])).with("t", vec![0.5]);
        b.save(&p).unwrap();
        assert_eq!(Blob::load(&p).unwrap(), b);
        assert!(Blob::load(&p).unwrap().expect_kind("other").is_err());
    }

    #[test]
    fn matrix_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.json");
        let ids = vec!["a".to_string(), "b".to_string()];
        save_matrix(&p, "m", &ids, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5], serde_json::json!({"x": 1})).unwrap();
        let (h, back_ids, data) = load_matrix(&p, "m").unwrap();
        assert_eq!((h.rows, h.cols), (2, 3));
        assert_eq!(back_ids, ids);
        assert_eq!(data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]);
        assert!(load_matrix(&p, "other").is_err());
        std::fs::write(dir.path().join("emb.f32"), [0u8; 5]).unwrap();
        assert!(matches!(load_matrix(&p, "m"), Err(BlobError::Corrupt(_))));
    }
}
