//! Safetensors-layout checkpoints: header index, channel-to-parameter
//! mapping, positioned chunk reads and a streaming writer.
//!
//! File layout: 8-byte little-endian header length, UTF-8 JSON header
//! mapping tensor name to `{dtype, shape, data_offsets}`, then raw
//! row-major little-endian tensor bytes. Payload is never loaded eagerly;
//! every read goes through [`Checkpoint::read_bytes`] with an explicit range.

mod rules;
mod writer;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::channel::{ChannelId, ChannelSpace, ModuleChannels};
use crate::dtype::DType;
use crate::error::{Error, Result};

pub use rules::{
    layer_of, module_type_of, split_tensor_name, Kind, ModuleRule, RuleTable, TensorRole,
};
pub use writer::{copy_checkpoint, CheckpointWriter, TensorSpec, WriteSummary};

/// Refuse headers above this size; real checkpoints stay far below it.
const MAX_HEADER_LEN: u64 = 256 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Offset relative to the start of the data section.
    pub byte_offset: u64,
    pub byte_length: u64,
}

impl TensorMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn spec(&self) -> TensorSpec {
        TensorSpec {
            name: self.name.clone(),
            dtype: self.dtype,
            shape: self.shape.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModuleKind {
    pub kind: Kind,
    pub channel_axis: usize,
    pub n_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleEntry {
    pub path: String,
    pub kind: ModuleKind,
    /// Index into [`CheckpointIndex::tensors`].
    pub weight: usize,
    pub bias: Option<usize>,
}

/// How the elements of one tensor map onto the channels of its module:
/// element `e` belongs to channel `(e / stride) % n_channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorChannelMap {
    pub module: usize,
    pub stride: usize,
    pub n_channels: usize,
}

impl TensorChannelMap {
    #[inline]
    pub fn channel_of(&self, element: usize) -> usize {
        (element / self.stride) % self.n_channels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SlicePart {
    pub tensor: String,
    pub axis: usize,
    pub index: usize,
    pub element_count: usize,
    #[serde(skip)]
    shape: Vec<usize>,
}

impl SlicePart {
    /// Row-major element indices owned by this part.
    pub fn element_indices(&self) -> Vec<usize> {
        match (self.shape.len(), self.axis) {
            (1, _) => vec![self.index],
            (_, 0) => {
                let inner: usize = self.shape[1..].iter().product();
                (self.index * inner..(self.index + 1) * inner).collect()
            }
            _ => {
                let cols = self.shape[1];
                (0..self.shape[0]).map(|r| r * cols + self.index).collect()
            }
        }
    }
}

/// Parameters owned by one channel: its weight slice plus, when the module
/// has a bias, the matching bias element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChannelSlice {
    pub parts: Vec<SlicePart>,
}

impl ChannelSlice {
    pub fn element_count(&self) -> usize {
        self.parts.iter().map(|p| p.element_count).sum()
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointIndex {
    tensors: Vec<TensorMeta>,
    by_name: HashMap<String, usize>,
    metadata: BTreeMap<String, String>,
    modules: Vec<ModuleEntry>,
    module_by_path: HashMap<String, usize>,
    tensor_maps: Vec<Option<TensorChannelMap>>,
    space: ChannelSpace,
}

impl PartialEq for CheckpointIndex {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors
            && self.metadata == other.metadata
            && self.modules == other.modules
    }
}

impl CheckpointIndex {
    pub fn new(
        tensors: Vec<TensorMeta>,
        metadata: BTreeMap<String, String>,
        rules: &RuleTable,
    ) -> Result<Self> {
        let mut by_name = HashMap::with_capacity(tensors.len());
        for (i, t) in tensors.iter().enumerate() {
            if by_name.insert(t.name.clone(), i).is_some() {
                return Err(Error::DuplicateName(t.name.clone()));
            }
        }

        let mut modules = Vec::new();
        let mut module_by_path = HashMap::new();
        for (i, t) in tensors.iter().enumerate() {
            let Some((path, TensorRole::Weight)) = split_tensor_name(&t.name) else {
                continue;
            };
            let Some(kind) = rules.classify(path) else {
                continue;
            };
            let want_rank = if kind == Kind::Norm { 1 } else { 2 };
            if t.shape.len() != want_rank {
                return Err(Error::MalformedHeader(format!(
                    "tensor {:?} is a {kind:?} weight but has shape {:?}",
                    t.name, t.shape
                )));
            }
            let axis = kind.channel_axis();
            let n_channels = t.shape[axis];
            module_by_path.insert(path.to_string(), modules.len());
            modules.push(ModuleEntry {
                path: path.to_string(),
                kind: ModuleKind {
                    kind,
                    channel_axis: axis,
                    n_channels,
                },
                weight: i,
                bias: None,
            });
        }
        for (i, t) in tensors.iter().enumerate() {
            let Some((path, TensorRole::Bias)) = split_tensor_name(&t.name) else {
                continue;
            };
            let Some(&m) = module_by_path.get(path) else {
                continue;
            };
            let n = modules[m].kind.n_channels;
            if t.shape != [n] {
                return Err(Error::MalformedHeader(format!(
                    "bias {:?} has shape {:?}, module has {n} channels",
                    t.name, t.shape
                )));
            }
            modules[m].bias = Some(i);
        }

        let mut tensor_maps = vec![None; tensors.len()];
        for (m, entry) in modules.iter().enumerate() {
            let w = &tensors[entry.weight];
            let stride = match (w.shape.len(), entry.kind.channel_axis) {
                (1, _) => 1,
                (_, 0) => w.shape[1..].iter().product(),
                _ => 1,
            };
            tensor_maps[entry.weight] = Some(TensorChannelMap {
                module: m,
                stride: stride.max(1),
                n_channels: entry.kind.n_channels,
            });
            if let Some(b) = entry.bias {
                tensor_maps[b] = Some(TensorChannelMap {
                    module: m,
                    stride: 1,
                    n_channels: entry.kind.n_channels,
                });
            }
        }

        let space = ChannelSpace::new(
            modules
                .iter()
                .map(|m| ModuleChannels(m.path.clone(), m.kind.n_channels))
                .collect(),
        )?;

        Ok(Self {
            tensors,
            by_name,
            metadata,
            modules,
            module_by_path,
            tensor_maps,
            space,
        })
    }

    pub fn tensors(&self) -> &[TensorMeta] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorMeta> {
        self.by_name.get(name).map(|&i| &self.tensors[i])
    }

    pub fn tensor_position(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn modules(&self) -> &[ModuleEntry] {
        &self.modules
    }

    pub fn module(&self, path: &str) -> Option<&ModuleEntry> {
        self.module_by_path.get(path).map(|&m| &self.modules[m])
    }

    /// Channel map of tensor `i`, `None` for tensors outside every module.
    pub fn tensor_map(&self, i: usize) -> Option<TensorChannelMap> {
        self.tensor_maps[i]
    }

    /// The channel universe: every channel-mapped module in tensor order.
    pub fn channel_space(&self) -> &ChannelSpace {
        &self.space
    }

    pub fn total_elements(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }

    /// Model identity: `model_id` metadata when present.
    pub fn model_id(&self) -> Option<&str> {
        self.metadata.get("model_id").map(String::as_str)
    }

    pub fn channel_slice(&self, id: &ChannelId) -> Result<ChannelSlice> {
        let entry = self
            .module(&id.module_path)
            .ok_or_else(|| Error::UnknownModule(id.module_path.clone()))?;
        let n = entry.kind.n_channels;
        if id.index >= n {
            return Err(Error::ChannelOutOfRange {
                module: id.module_path.clone(),
                index: id.index,
                n_channels: n,
            });
        }
        let w = &self.tensors[entry.weight];
        let mut parts = vec![SlicePart {
            tensor: w.name.clone(),
            axis: entry.kind.channel_axis,
            index: id.index,
            element_count: w.numel() / n,
            shape: w.shape.clone(),
        }];
        if let Some(b) = entry.bias {
            let b = &self.tensors[b];
            parts.push(SlicePart {
                tensor: b.name.clone(),
                axis: 0,
                index: id.index,
                element_count: 1,
                shape: b.shape.clone(),
            });
        }
        Ok(ChannelSlice { parts })
    }

    /// Parameter elements owned by each channel of module `m`.
    pub fn elements_per_channel(&self, m: usize) -> usize {
        let entry = &self.modules[m];
        let w = self.tensors[entry.weight].numel() / entry.kind.n_channels.max(1);
        w + usize::from(entry.bias.is_some())
    }

    /// Checks that `other` has the same tensors (names, shapes) and module
    /// table. Dtypes may differ.
    pub fn check_compatible(&self, other: &CheckpointIndex) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor count {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for t in &self.tensors {
            let o = other
                .tensor(&t.name)
                .ok_or_else(|| Error::ShapeMismatch(format!("tensor {:?} missing", t.name)))?;
            if o.shape != t.shape {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {:?}: {:?} vs {:?}",
                    t.name, t.shape, o.shape
                )));
            }
        }
        if self.space != other.space {
            return Err(Error::ShapeMismatch("module tables differ".into()));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawTensorEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (u64, u64),
}

/// Header entries in file order, keeping duplicates so they can be rejected.
struct OrderedEntries(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = OrderedEntries;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some(entry) = map.next_entry::<String, serde_json::Value>()? {
                    out.push(entry);
                }
                Ok(OrderedEntries(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// Parse a header JSON into tensor metas (sorted by data offset) and
/// metadata, validating sizes against `data_len`.
pub(crate) fn parse_header(
    header: &[u8],
    data_len: u64,
) -> Result<(Vec<TensorMeta>, BTreeMap<String, String>)> {
    let text = std::str::from_utf8(header)
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let entries: OrderedEntries =
        serde_json::from_str(text.trim_end()).map_err(|e| Error::MalformedHeader(e.to_string()))?;

    let mut metadata = BTreeMap::new();
    let mut tensors = Vec::with_capacity(entries.0.len());
    let mut seen = HashMap::new();
    for (name, value) in entries.0 {
        if seen.insert(name.clone(), ()).is_some() {
            return Err(Error::DuplicateName(name));
        }
        if name == "__metadata__" {
            metadata = serde_json::from_value(value)
                .map_err(|e| Error::MalformedHeader(format!("__metadata__: {e}")))?;
            continue;
        }
        let raw: RawTensorEntry = serde_json::from_value(value)
            .map_err(|e| Error::MalformedHeader(format!("{name}: {e}")))?;
        let dtype = DType::parse(&raw.dtype)?;
        let (start, end) = raw.data_offsets;
        let numel = raw
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::MalformedHeader(format!("{name}: shape overflow")))?;
        let expected = numel * dtype.size() as u64;
        if end < start || end - start != expected {
            return Err(Error::MalformedHeader(format!(
                "{name}: data_offsets [{start}, {end}) hold {} bytes, shape needs {expected}",
                end.saturating_sub(start)
            )));
        }
        if end > data_len {
            return Err(Error::Truncated(format!(
                "{name} ends at {end} but payload has {data_len} bytes"
            )));
        }
        tensors.push(TensorMeta {
            name,
            dtype,
            shape: raw.shape,
            byte_offset: start,
            byte_length: expected,
        });
    }
    tensors.sort_by(|a, b| a.byte_offset.cmp(&b.byte_offset).then(a.name.cmp(&b.name)));
    for w in tensors.windows(2) {
        if w[1].byte_offset < w[0].byte_offset + w[0].byte_length {
            return Err(Error::MalformedHeader(format!(
                "tensors {:?} and {:?} overlap",
                w[0].name, w[1].name
            )));
        }
    }
    Ok((tensors, metadata))
}

/// An opened checkpoint: immutable index plus positioned reads. Safe to
/// share across threads.
#[derive(Debug)]
pub struct Checkpoint {
    path: PathBuf,
    file: File,
    index: CheckpointIndex,
    data_start: u64,
    largest_read: AtomicU64,
}

impl Checkpoint {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::open_with_rules(path, &RuleTable::default())
    }

    pub fn open_with_rules(path: impl AsRef<Path>, rules: &RuleTable) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path)?;
        let file_len = file.metadata()?.len();
        if file_len < 8 {
            return Err(Error::Truncated(format!(
                "{} bytes, need at least the 8-byte header length",
                file_len
            )));
        }
        let mut len_buf = [0u8; 8];
        file.read_exact_at(&mut len_buf, 0)?;
        let header_len = u64::from_le_bytes(len_buf);
        if header_len > MAX_HEADER_LEN {
            return Err(Error::MalformedHeader(format!(
                "header length {header_len} too large"
            )));
        }
        if 8 + header_len > file_len {
            return Err(Error::Truncated(format!(
                "header needs {header_len} bytes, file has {}",
                file_len - 8
            )));
        }
        let mut header = vec![0u8; header_len as usize];
        file.read_exact_at(&mut header, 8)?;
        let data_start = 8 + header_len;
        let (tensors, metadata) = parse_header(&header, file_len - data_start)?;
        let index = CheckpointIndex::new(tensors, metadata, rules)?;
        Ok(Self {
            path,
            file,
            index,
            data_start,
            largest_read: AtomicU64::new(0),
        })
    }

    pub fn index(&self) -> &CheckpointIndex {
        &self.index
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Model identity from metadata, falling back to the file stem.
    pub fn model_id(&self) -> String {
        match self.index.model_id() {
            Some(id) => id.to_string(),
            None => self
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        }
    }

    /// Read `buf.len()` bytes of tensor `t` starting at byte `start` within
    /// the tensor.
    pub fn read_bytes(&self, t: &TensorMeta, start: u64, buf: &mut [u8]) -> Result<()> {
        let end = start + buf.len() as u64;
        if end > t.byte_length {
            return Err(Error::InvalidArgument(format!(
                "read [{start}, {end}) beyond tensor {:?} of {} bytes",
                t.name, t.byte_length
            )));
        }
        self.largest_read
            .fetch_max(buf.len() as u64, Ordering::Relaxed);
        self.file
            .read_exact_at(buf, self.data_start + t.byte_offset + start)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    Error::Truncated(format!("tensor {:?}", t.name))
                } else {
                    Error::Io(e)
                }
            })
    }

    /// Largest single read issued so far, in bytes.
    pub fn largest_read(&self) -> u64 {
        self.largest_read.load(Ordering::Relaxed)
    }

    pub fn read_tensor_bytes(&self, name: &str) -> Result<Vec<u8>> {
        let t = self.tensor_meta(name)?;
        let mut buf = vec![0u8; t.byte_length as usize];
        self.read_bytes(t, 0, &mut buf)?;
        Ok(buf)
    }

    /// Whole tensor widened to f64. Intended for small tensors.
    pub fn read_tensor_f64(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.tensor_meta(name)?;
        let bytes = self.read_tensor_bytes(name)?;
        let mut out = vec![0f64; t.numel()];
        t.dtype.decode_into(&bytes, &mut out);
        Ok(out)
    }

    pub fn read_tensor_f32(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self
            .read_tensor_f64(name)?
            .into_iter()
            .map(|v| v as f32)
            .collect())
    }

    fn tensor_meta(&self, name: &str) -> Result<&TensorMeta> {
        self.index
            .tensor(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no tensor named {name:?}")))
    }

    /// Visit tensor `t` in element-aligned chunks of at most `chunk_bytes`.
    /// The callback gets the first element index and the chunk bytes.
    pub fn for_each_chunk(
        &self,
        t: &TensorMeta,
        chunk_bytes: usize,
        mut f: impl FnMut(usize, &[u8]) -> Result<()>,
    ) -> Result<()> {
        let elem = t.dtype.size();
        let per_chunk = (chunk_bytes / elem).max(1);
        let numel = t.numel();
        let mut buf = vec![0u8; per_chunk.min(numel) * elem];
        let mut start = 0;
        while start < numel {
            let n = per_chunk.min(numel - start);
            let slice = &mut buf[..n * elem];
            self.read_bytes(t, (start * elem) as u64, slice)?;
            f(start, slice)?;
            start += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(dir: &Path, name: &str, header: &str, data: &[u8]) -> PathBuf {
        let p = dir.join(name);
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(data);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn opens_two_tensor_file() {
        let dir = tempfile::tempdir().unwrap();
        let h = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b.weight":{"dtype":"BF16","shape":[1,2],"data_offsets":[8,12]}}"#;
        let p = write_raw(dir.path(), "x.safetensors", h, &[0u8; 12]);
        let ck = Checkpoint::open(&p).unwrap();
        assert_eq!(ck.index().tensors().len(), 2);
        assert_eq!(ck.index().tensor("b.weight").unwrap().dtype, DType::BF16);
        assert_eq!(ck.largest_read(), 0, "open must not read payload");
    }

    #[test]
    fn rejects_duplicate_names() {
        let dir = tempfile::tempdir().unwrap();
        let h = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
        let p = write_raw(dir.path(), "d.safetensors", h, &[0u8; 8]);
        let err = Checkpoint::open(&p).unwrap_err();
        assert!(err.to_string().contains("duplicate name"), "{err}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let h = r#"{"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#;
        let p = write_raw(dir.path(), "t.safetensors", h, &[0u8; 10]);
        assert!(matches!(Checkpoint::open(&p), Err(Error::Truncated(_))));
        let p = dir.path().join("short");
        std::fs::write(&p, [1u8, 0, 0]).unwrap();
        assert!(matches!(Checkpoint::open(&p), Err(Error::Truncated(_))));
    }

    #[test]
    fn rejects_unsupported_dtype_and_bad_json() {
        let dir = tempfile::tempdir().unwrap();
        let h = r#"{"a":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}}"#;
        let p = write_raw(dir.path(), "i.safetensors", h, &[0u8; 8]);
        assert!(matches!(
            Checkpoint::open(&p),
            Err(Error::UnsupportedDtype(_))
        ));
        let p = write_raw(dir.path(), "j.safetensors", "{not json", &[]);
        assert!(matches!(
            Checkpoint::open(&p),
            Err(Error::MalformedHeader(_))
        ));
        let h = r#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#;
        let p = write_raw(dir.path(), "k.safetensors", h, &[0u8; 8]);
        assert!(matches!(
            Checkpoint::open(&p),
            Err(Error::MalformedHeader(_))
        ));
    }

    fn meta(name: &str, shape: &[usize], offset: u64) -> TensorMeta {
        let numel: usize = shape.iter().product();
        TensorMeta {
            name: name.into(),
            dtype: DType::F32,
            shape: shape.to_vec(),
            byte_offset: offset,
            byte_length: numel as u64 * 4,
        }
    }

    fn toy_index() -> CheckpointIndex {
        let tensors = vec![
            meta("model.embed_tokens.weight", &[10, 4], 0),
            meta("model.layers.0.self_attn.q_proj.weight", &[4, 4], 160),
            meta("model.layers.0.self_attn.q_proj.bias", &[4], 224),
            meta("model.layers.0.input_layernorm.weight", &[4], 240),
            meta("model.rotary.inv_freq", &[2], 256),
            meta("lm_head.weight", &[10, 4], 264),
        ];
        CheckpointIndex::new(tensors, BTreeMap::new(), &RuleTable::default()).unwrap()
    }

    #[test]
    fn channel_slice_examples() {
        let idx = toy_index();
        let s = idx
            .channel_slice(&ChannelId::new("model.layers.0.self_attn.q_proj", 3))
            .unwrap();
        assert_eq!(s.parts.len(), 2);
        assert_eq!(
            (s.parts[0].axis, s.parts[0].index, s.parts[0].element_count),
            (0, 3, 4)
        );
        assert_eq!(s.parts[1].tensor, "model.layers.0.self_attn.q_proj.bias");

        let s = idx
            .channel_slice(&ChannelId::new("model.layers.0.input_layernorm", 2))
            .unwrap();
        assert_eq!(s.element_count(), 1);

        let s = idx
            .channel_slice(&ChannelId::new("model.embed_tokens", 1))
            .unwrap();
        assert_eq!((s.parts[0].axis, s.element_count()), (1, 10));
        assert_eq!(
            s.parts[0].element_indices(),
            (0..10).map(|r| r * 4 + 1).collect::<Vec<_>>()
        );

        assert!(matches!(
            idx.channel_slice(&ChannelId::new("lm_head", 10)),
            Err(Error::ChannelOutOfRange { .. })
        ));
        assert!(matches!(
            idx.channel_slice(&ChannelId::new("model.rotary", 0)),
            Err(Error::UnknownModule(_))
        ));
    }

    #[test]
    fn channel_slices_partition_every_module() {
        let idx = toy_index();
        for entry in idx.modules() {
            let mut cover: HashMap<&str, Vec<u32>> = HashMap::new();
            for c in 0..entry.kind.n_channels {
                let s = idx
                    .channel_slice(&ChannelId::new(entry.path.clone(), c))
                    .unwrap();
                for part in &s.parts {
                    let t = idx.tensor(&part.tensor).unwrap();
                    let counts = cover
                        .entry(
                            idx.tensors()[idx.tensor_position(&part.tensor).unwrap()]
                                .name
                                .as_str(),
                        )
                        .or_insert_with(|| vec![0; t.numel()]);
                    for e in part.element_indices() {
                        counts[e] += 1;
                    }
                }
            }
            for (name, counts) in cover {
                assert!(
                    counts.iter().all(|&c| c == 1),
                    "{name} not covered exactly once"
                );
            }
        }
        // the element->channel map agrees with the slices
        for (i, t) in idx.tensors().iter().enumerate() {
            let Some(map) = idx.tensor_map(i) else {
                continue;
            };
            let path = &idx.modules()[map.module].path;
            for e in 0..t.numel() {
                let c = map.channel_of(e);
                let s = idx.channel_slice(&ChannelId::new(path.clone(), c)).unwrap();
                assert!(s
                    .parts
                    .iter()
                    .any(|p| p.tensor == t.name && p.element_indices().contains(&e)));
            }
        }
        assert!(
            idx.tensor_map(4).is_none(),
            "rotary cache is not channel mapped"
        );
    }

    #[test]
    fn rejects_wrong_rank_for_kind() {
        let tensors = vec![meta("model.norm.weight", &[2, 2], 0)];
        assert!(matches!(
            CheckpointIndex::new(tensors, BTreeMap::new(), &RuleTable::default()),
            Err(Error::MalformedHeader(_))
        ));
    }
}
