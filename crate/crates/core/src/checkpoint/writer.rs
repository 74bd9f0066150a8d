use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{Checkpoint, TensorMeta};
use crate::dtype::DType;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WriteSummary {
    pub path: PathBuf,
    pub bytes: u64,
    /// Hex SHA-256 of the whole file.
    pub sha256: String,
}

/// Sequential single-writer for one checkpoint file. Tensors are written
/// in the order given to [`CheckpointWriter::create`], each as any number
/// of byte chunks.
pub struct CheckpointWriter {
    path: PathBuf,
    out: BufWriter<File>,
    hasher: Sha256,
    metas: Vec<TensorMeta>,
    current: usize,
    written: u64,
    total: u64,
}

fn header_json(metas: &[TensorMeta], metadata: &BTreeMap<String, String>) -> Result<String> {
    #[derive(Serialize)]
    struct Entry<'a> {
        dtype: &'a str,
        shape: &'a [usize],
        data_offsets: [u64; 2],
    }
    let mut s = String::from("{");
    let mut first = true;
    if !metadata.is_empty() {
        s.push_str("\"__metadata__\":");
        s.push_str(&serde_json::to_string(metadata)?);
        first = false;
    }
    for m in metas {
        if !first {
            s.push(',');
        }
        first = false;
        s.push_str(&serde_json::to_string(&m.name)?);
        s.push(':');
        s.push_str(&serde_json::to_string(&Entry {
            dtype: m.dtype.as_str(),
            shape: &m.shape,
            data_offsets: [m.byte_offset, m.byte_offset + m.byte_length],
        })?);
    }
    s.push('}');
    // pad so the data section starts 8-byte aligned
    while (8 + s.len()) % 8 != 0 {
        s.push(' ');
    }
    Ok(s)
}

impl CheckpointWriter {
    pub fn create(
        path: impl AsRef<Path>,
        specs: &[TensorSpec],
        metadata: &BTreeMap<String, String>,
    ) -> Result<Self> {
        let mut offset = 0u64;
        let mut metas = Vec::with_capacity(specs.len());
        let mut names = std::collections::HashSet::new();
        for s in specs {
            if !names.insert(s.name.as_str()) {
                return Err(Error::DuplicateName(s.name.clone()));
            }
            let len = s.shape.iter().product::<usize>() as u64 * s.dtype.size() as u64;
            metas.push(TensorMeta {
                name: s.name.clone(),
                dtype: s.dtype,
                shape: s.shape.clone(),
                byte_offset: offset,
                byte_length: len,
            });
            offset += len;
        }
        let header = header_json(&metas, metadata)?;
        let path = path.as_ref().to_path_buf();
        let mut w = Self {
            out: BufWriter::with_capacity(1 << 20, File::create(&path)?),
            path,
            hasher: Sha256::new(),
            metas,
            current: 0,
            written: 0,
            total: 0,
        };
        w.emit(&(header.len() as u64).to_le_bytes())?;
        w.emit(header.as_bytes())?;
        w.skip_empty();
        Ok(w)
    }

    fn emit(&mut self, bytes: &[u8]) -> Result<()> {
        self.out.write_all(bytes)?;
        self.hasher.update(bytes);
        self.total += bytes.len() as u64;
        Ok(())
    }

    fn skip_empty(&mut self) {
        while self.current < self.metas.len() && self.metas[self.current].byte_length == 0 {
            self.current += 1;
        }
    }

    /// Meta of the tensor the next bytes belong to.
    pub fn current_tensor(&self) -> Option<&TensorMeta> {
        self.metas.get(self.current)
    }

    /// Append bytes to the current tensor. A chunk never spans tensors.
    pub fn write(&mut self, bytes: &[u8]) -> Result<()> {
        let Some(meta) = self.metas.get(self.current) else {
            return Err(Error::ShapeMismatch(
                "bytes written after the last tensor".into(),
            ));
        };
        let remaining = meta.byte_length - self.written;
        if bytes.len() as u64 > remaining {
            return Err(Error::ShapeMismatch(format!(
                "tensor {:?} expects {remaining} more bytes, got {}",
                meta.name,
                bytes.len()
            )));
        }
        self.emit(bytes)?;
        self.written += bytes.len() as u64;
        if self.written == self.metas[self.current].byte_length {
            self.current += 1;
            self.written = 0;
            self.skip_empty();
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<WriteSummary> {
        if let Some(meta) = self.metas.get(self.current) {
            return Err(Error::ShapeMismatch(format!(
                "tensor {:?} received {} of {} bytes",
                meta.name, self.written, meta.byte_length
            )));
        }
        self.out.flush()?;
        self.out.get_ref().sync_all()?;
        Ok(WriteSummary {
            path: self.path,
            bytes: self.total,
            sha256: hex::encode(self.hasher.finalize()),
        })
    }
}

/// Copy every tensor of `src` to `dst` through chunks of at most
/// `chunk_bytes`.
pub fn copy_checkpoint(
    src: &Checkpoint,
    dst: impl AsRef<Path>,
    chunk_bytes: usize,
) -> Result<WriteSummary> {
    let specs: Vec<TensorSpec> = src.index().tensors().iter().map(TensorMeta::spec).collect();
    let mut w = CheckpointWriter::create(dst, &specs, src.index().metadata())?;
    for t in src.index().tensors() {
        src.for_each_chunk(t, chunk_bytes, |_, bytes| w.write(bytes))?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Checkpoint;

    fn specs() -> Vec<TensorSpec> {
        vec![
            TensorSpec {
                name: "w.weight".into(),
                dtype: DType::F32,
                shape: vec![2, 3],
            },
            TensorSpec {
                name: "h".into(),
                dtype: DType::BF16,
                shape: vec![3],
            },
        ]
    }

    #[test]
    fn write_then_open() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.safetensors");
        let mut meta = BTreeMap::new();
        meta.insert("model_id".to_string(), "toy".to_string());
        let mut w = CheckpointWriter::create(&p, &specs(), &meta).unwrap();
        w.write(&[1u8; 10]).unwrap();
        w.write(&[2u8; 14]).unwrap();
        w.write(&[0x80, 0x7f, 0x01, 0xff, 0x00, 0x00]).unwrap();
        let summary = w.finish().unwrap();

        let ck = Checkpoint::open(&p).unwrap();
        assert_eq!(ck.index().model_id(), Some("toy"));
        assert_eq!(
            ck.read_tensor_bytes("h").unwrap(),
            vec![0x80, 0x7f, 0x01, 0xff, 0, 0]
        );
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(summary.bytes, bytes.len() as u64);
        assert_eq!(summary.sha256, hex::encode(Sha256::digest(&bytes)));
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        assert_eq!((8 + header_len) % 8, 0);
    }

    #[test]
    fn payload_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.safetensors");
        let mut w = CheckpointWriter::create(&p, &specs(), &BTreeMap::new()).unwrap();
        assert!(matches!(w.write(&[0u8; 25]), Err(Error::ShapeMismatch(_))));
        w.write(&[0u8; 24]).unwrap();
        assert!(matches!(w.finish(), Err(Error::ShapeMismatch(_))));
    }
}
