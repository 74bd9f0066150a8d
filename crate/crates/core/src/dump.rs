//! Activation dumps: per-token, per-channel module outputs for one model on
//! one input set, and the paired reduction to per-channel absolute
//! difference sums.
//!
//! `ACTD` layout: magic, u16 version, u32 header length, header JSON, then
//! `token_count` frames of little-endian values, each frame the
//! concatenation of every module's channel values in `module_table` order.
//!
//! `ACTR` layout: magic, u16 version, u32 header length, header JSON, then
//! one `(f64 sum, u64 count)` record per channel in `module_table` order.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelSpace;
use crate::dtype::DType;
use crate::error::{Error, Result};

pub const DUMP_MAGIC: &[u8; 4] = b"ACTD";
pub const DIFF_MAGIC: &[u8; 4] = b"ACTR";
pub const FORMAT_VERSION: u16 = 1;

const MAX_HEADER_LEN: u32 = 1 << 30;

/// Default bytes of frame data buffered per side while reducing.
pub const DEFAULT_BLOCK_BYTES: usize = 8 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InputSetHash(pub [u8; 32]);

impl InputSetHash {
    /// SHA-256 over the token ids as little-endian u32.
    pub fn of_tokens(tokens: &[u32]) -> Self {
        let mut h = Sha256::new();
        for t in tokens {
            h.update(t.to_le_bytes());
        }
        InputSetHash(h.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::MalformedHash(format!("{s:?}: {e}")))?;
        let arr: [u8; 32] = bytes.try_into().map_err(|b: Vec<u8>| {
            Error::MalformedHash(format!("{} bytes, expected 32", b.len()))
        })?;
        Ok(InputSetHash(arr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenRole {
    Prompt,
    Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleFilter {
    All,
    #[serde(rename = "answer")]
    AnswerOnly,
    #[serde(rename = "prompt")]
    PromptOnly,
}

impl RoleFilter {
    #[inline]
    pub fn accepts(self, role: TokenRole) -> bool {
        match self {
            RoleFilter::All => true,
            RoleFilter::AnswerOnly => role == TokenRole::Answer,
            RoleFilter::PromptOnly => role == TokenRole::Prompt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpHeader {
    pub model_id: String,
    pub input_set_hash: InputSetHash,
    pub module_table: ChannelSpace,
    pub token_count: u64,
    pub token_roles: Vec<TokenRole>,
    pub value_dtype: DType,
}

impl DumpHeader {
    pub fn frame_len(&self) -> usize {
        self.module_table.len()
    }

    fn frame_bytes(&self) -> usize {
        self.frame_len() * self.value_dtype.size()
    }

    fn validate(&self) -> Result<()> {
        if self.token_roles.len() as u64 != self.token_count {
            return Err(Error::MalformedHeader(format!(
                "token_roles has {} entries for {} tokens",
                self.token_roles.len(),
                self.token_count
            )));
        }
        if self.value_dtype == DType::BF16 {
            return Err(Error::UnsupportedDtype("BF16 dump values".into()));
        }
        Ok(())
    }
}

/// On-disk header form: roles packed as a `P`/`A` string.
#[derive(Serialize, Deserialize)]
struct DumpHeaderJson {
    model_id: String,
    input_set_hash: String,
    module_table: ChannelSpace,
    token_count: u64,
    token_roles: String,
    value_dtype: DType,
}

impl From<&DumpHeader> for DumpHeaderJson {
    fn from(h: &DumpHeader) -> Self {
        DumpHeaderJson {
            model_id: h.model_id.clone(),
            input_set_hash: h.input_set_hash.to_hex(),
            module_table: h.module_table.clone(),
            token_count: h.token_count,
            token_roles: h
                .token_roles
                .iter()
                .map(|r| match r {
                    TokenRole::Prompt => 'P',
                    TokenRole::Answer => 'A',
                })
                .collect(),
            value_dtype: h.value_dtype,
        }
    }
}

impl TryFrom<DumpHeaderJson> for DumpHeader {
    type Error = Error;

    fn try_from(j: DumpHeaderJson) -> Result<Self> {
        let token_roles = j
            .token_roles
            .chars()
            .map(|c| match c {
                'P' => Ok(TokenRole::Prompt),
                'A' => Ok(TokenRole::Answer),
                other => Err(Error::MalformedHeader(format!(
                    "unknown token role {other:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        let h = DumpHeader {
            model_id: j.model_id,
            input_set_hash: InputSetHash::from_hex(&j.input_set_hash)?,
            module_table: j.module_table,
            token_count: j.token_count,
            token_roles,
            value_dtype: j.value_dtype,
        };
        h.validate()?;
        Ok(h)
    }
}

fn write_preamble<W: Write>(w: &mut W, magic: &[u8; 4], header: &[u8]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header)?;
    Ok(())
}

fn read_preamble<R: Read>(r: &mut R, magic: &'static [u8; 4]) -> Result<Vec<u8>> {
    let expected = std::str::from_utf8(magic).unwrap_or("?");
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::BadMagic { expected },
        _ => Error::Io(e),
    })?;
    if &m != magic {
        return Err(Error::BadMagic { expected });
    }
    let mut v = [0u8; 2];
    r.read_exact(&mut v).map_err(truncated("version"))?;
    let version = u16::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut l = [0u8; 4];
    r.read_exact(&mut l).map_err(truncated("header length"))?;
    let len = u32::from_le_bytes(l);
    if len > MAX_HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "header length {len} too large"
        )));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header).map_err(truncated("header"))?;
    Ok(header)
}

fn truncated(what: &'static str) -> impl Fn(io::Error) -> Error {
    move |e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    }
}

/// Streaming `ACTD` writer. Frames must arrive in token order.
pub struct DumpWriter<W: Write> {
    out: W,
    header: DumpHeader,
    frames: u64,
    scratch: Vec<u8>,
}

impl<W: Write> DumpWriter<W> {
    pub fn new(mut out: W, header: DumpHeader) -> Result<Self> {
        header.validate()?;
        let json = serde_json::to_vec(&DumpHeaderJson::from(&header))?;
        write_preamble(&mut out, DUMP_MAGIC, &json)?;
        Ok(Self {
            out,
            scratch: Vec::with_capacity(header.frame_bytes()),
            header,
            frames: 0,
        })
    }

    pub fn push_frame(&mut self, values: &[f32]) -> Result<()> {
        let expected = self.header.frame_len();
        if values.len() != expected {
            return Err(Error::FrameLength {
                expected,
                got: values.len(),
            });
        }
        if self.frames == self.header.token_count {
            return Err(Error::InvalidArgument(format!(
                "more than {} frames pushed",
                self.header.token_count
            )));
        }
        self.scratch.clear();
        match self.header.value_dtype {
            DType::F32 => {
                for v in values {
                    self.scratch.extend_from_slice(&v.to_le_bytes());
                }
            }
            _ => {
                for v in values {
                    self.scratch
                        .extend_from_slice(&half::f16::from_f32(*v).to_bits().to_le_bytes());
                }
            }
        }
        self.out.write_all(&self.scratch)?;
        self.frames += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.frames != self.header.token_count {
            return Err(Error::PrematureEnd {
                expected: self.header.token_count,
                got: self.frames,
            });
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_dump<I, F>(path: impl AsRef<Path>, header: DumpHeader, frames: I) -> Result<()>
where
    I: IntoIterator<Item = F>,
    F: AsRef<[f32]>,
{
    let file = BufWriter::new(File::create(path)?);
    let mut w = DumpWriter::new(file, header)?;
    for f in frames {
        w.push_frame(f.as_ref())?;
    }
    w.finish()?
        .into_inner()
        .map_err(|e| Error::Io(e.into_error()))?
        .sync_all()?;
    Ok(())
}

/// Borrowed view of one frame; values are decoded on access.
#[derive(Debug, Clone, Copy)]
pub struct Frame<'a> {
    bytes: &'a [u8],
    dtype: DType,
}

impl Frame<'_> {
    pub fn len(&self) -> usize {
        self.bytes.len() / self.dtype.size()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> f32 {
        self.dtype.decode(self.bytes, i) as f32
    }

    pub fn iter(&self) -> impl Iterator<Item = f32> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.iter().collect()
    }
}

/// Lazy `ACTD` reader holding at most one frame of payload.
pub struct DumpReader<R: Read> {
    input: R,
    header: DumpHeader,
    frame: Vec<u8>,
    next_token: u64,
}

impl<R: Read> DumpReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let json = read_preamble(&mut input, DUMP_MAGIC)?;
        let parsed: DumpHeaderJson =
            serde_json::from_slice(&json).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let header = DumpHeader::try_from(parsed)?;
        Ok(Self {
            frame: vec![0u8; header.frame_bytes()],
            input,
            header,
            next_token: 0,
        })
    }

    pub fn header(&self) -> &DumpHeader {
        &self.header
    }

    /// Bytes of payload buffered by the reader.
    pub fn buffer_bytes(&self) -> usize {
        self.frame.capacity()
    }

    pub fn next_frame(&mut self) -> Result<Option<Frame<'_>>> {
        if self.next_token == self.header.token_count {
            return Ok(None);
        }
        let t = self.next_token;
        self.input
            .read_exact(&mut self.frame)
            .map_err(|e| match e.kind() {
                io::ErrorKind::UnexpectedEof => Error::Truncated(format!("incomplete frame {t}")),
                _ => Error::Io(e),
            })?;
        self.next_token += 1;
        Ok(Some(Frame {
            bytes: &self.frame,
            dtype: self.header.value_dtype,
        }))
    }

    /// Raw bytes of the next frame into `dst` (exactly one frame long).
    fn read_frame_into(&mut self, dst: &mut [u8]) -> Result<()> {
        let t = self.next_token;
        self.input.read_exact(dst).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Truncated(format!("incomplete frame {t}")),
            _ => Error::Io(e),
        })?;
        self.next_token += 1;
        Ok(())
    }
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<DumpReader<BufReader<File>>> {
    DumpReader::new(BufReader::new(File::open(path)?))
}

/// A fully materialized dump, for small inputs and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub header: DumpHeader,
    pub frames: Vec<Vec<f32>>,
}

impl ActivationDump {
    pub fn read<R: Read>(reader: &mut DumpReader<R>) -> Result<Self> {
        let mut frames = Vec::with_capacity(reader.header().token_count as usize);
        while let Some(f) = reader.next_frame()? {
            frames.push(f.to_vec());
        }
        Ok(Self {
            header: reader.header().clone(),
            frames,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = DumpWriter::new(Vec::new(), self.header.clone())?;
        for f in &self.frames {
            w.push_frame(f)?;
        }
        w.finish()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_dump(path, self.header.clone(), &self.frames)
    }
}

/// Per-channel sums of absolute token-level differences between two dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffDump {
    pub model_a: String,
    pub model_b: String,
    pub input_set_hash: InputSetHash,
    pub role_filter: RoleFilter,
    pub module_table: ChannelSpace,
    pub sum_abs_diff: Vec<f64>,
    pub token_count: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct DiffHeaderJson {
    model_a: String,
    model_b: String,
    input_set_hash: String,
    role_filter: RoleFilter,
    module_table: ChannelSpace,
}

impl DiffDump {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<W> {
        let json = serde_json::to_vec(&DiffHeaderJson {
            model_a: self.model_a.clone(),
            model_b: self.model_b.clone(),
            input_set_hash: self.input_set_hash.to_hex(),
            role_filter: self.role_filter,
            module_table: self.module_table.clone(),
        })?;
        write_preamble(&mut w, DIFF_MAGIC, &json)?;
        for (s, c) in self.sum_abs_diff.iter().zip(&self.token_count) {
            w.write_all(&s.to_le_bytes())?;
            w.write_all(&c.to_le_bytes())?;
        }
        w.flush()?;
        Ok(w)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let w = self.write_to(BufWriter::new(File::create(path)?))?;
        w.into_inner()
            .map_err(|e| Error::Io(e.into_error()))?
            .sync_all()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let json = read_preamble(&mut r, DIFF_MAGIC)?;
        let h: DiffHeaderJson =
            serde_json::from_slice(&json).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let n = h.module_table.len();
        let mut sums = Vec::with_capacity(n);
        let mut counts = Vec::with_capacity(n);
        let mut rec = [0u8; 16];
        for i in 0..n {
            r.read_exact(&mut rec).map_err(|e| match e.kind() {
                io::ErrorKind::UnexpectedEof => Error::Truncated(format!("diff record {i}")),
                _ => Error::Io(e),
            })?;
            sums.push(f64::from_le_bytes(rec[..8].try_into().unwrap()));
            counts.push(u64::from_le_bytes(rec[8..].try_into().unwrap()));
        }
        Ok(DiffDump {
            model_a: h.model_a,
            model_b: h.model_b,
            input_set_hash: InputSetHash::from_hex(&h.input_set_hash)?,
            role_filter: h.role_filter,
            module_table: h.module_table,
            sum_abs_diff: sums,
            token_count: counts,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn check_aligned(a: &DumpHeader, b: &DumpHeader) -> Result<()> {
    if a.input_set_hash != b.input_set_hash {
        return Err(Error::HeaderMismatch {
            field: "input_set_hash",
        });
    }
    if a.token_count != b.token_count {
        return Err(Error::HeaderMismatch {
            field: "token_count",
        });
    }
    if a.token_roles != b.token_roles {
        return Err(Error::HeaderMismatch {
            field: "token_roles",
        });
    }
    if a.module_table != b.module_table {
        return Err(Error::HeaderMismatch {
            field: "module_table",
        });
    }
    Ok(())
}

/// Channels per parallel task when accumulating a block.
const CHANNEL_TILE: usize = 2048;

/// Sum `|a - b|` per channel over the tokens accepted by `filter`, in
/// 64-bit floats. Each channel accumulates in token order, so the result
/// does not depend on the worker count.
pub fn reduce_pair<RA: Read, RB: Read>(
    a: &mut DumpReader<RA>,
    b: &mut DumpReader<RB>,
    filter: RoleFilter,
    block_bytes: usize,
) -> Result<DiffDump> {
    check_aligned(a.header(), b.header())?;
    let header = a.header().clone();
    let accepted = header
        .token_roles
        .iter()
        .filter(|&&r| filter.accepts(r))
        .count() as u64;
    if accepted == 0 {
        return Err(Error::EmptyRoleFilter(format!("{filter:?}")));
    }

    let n = header.frame_len();
    let (da, db) = (a.header().value_dtype, b.header().value_dtype);
    let (fa, fb) = (n * da.size(), n * db.size());
    let per_block = (block_bytes / fa.max(fb).max(1)).max(1);
    let mut block_a = vec![0u8; per_block.min(header.token_count as usize) * fa];
    let mut block_b = vec![0u8; per_block.min(header.token_count as usize) * fb];
    let mut sums = vec![0f64; n];

    let mut t = 0usize;
    let total = header.token_count as usize;
    while t < total {
        let take = per_block.min(total - t);
        let mut rows = Vec::with_capacity(take);
        for k in 0..take {
            a.read_frame_into(&mut block_a[k * fa..(k + 1) * fa])?;
            b.read_frame_into(&mut block_b[k * fb..(k + 1) * fb])?;
            if filter.accepts(header.token_roles[t + k]) {
                rows.push(k);
            }
        }
        let (ba, bb) = (&block_a, &block_b);
        sums.par_chunks_mut(CHANNEL_TILE)
            .enumerate()
            .for_each(|(tile, out)| {
                let c0 = tile * CHANNEL_TILE;
                for &k in &rows {
                    let ra = &ba[k * fa..(k + 1) * fa];
                    let rb = &bb[k * fb..(k + 1) * fb];
                    for (j, s) in out.iter_mut().enumerate() {
                        let va = da.decode(ra, c0 + j);
                        let vb = db.decode(rb, c0 + j);
                        *s += (va - vb).abs();
                    }
                }
            });
        t += take;
    }

    Ok(DiffDump {
        model_a: header.model_id.clone(),
        model_b: b.header().model_id.clone(),
        input_set_hash: header.input_set_hash,
        role_filter: filter,
        module_table: header.module_table.clone(),
        sum_abs_diff: sums,
        token_count: vec![accepted; n],
    })
}

/// [`reduce_pair`] over two dump files.
pub fn reduce_pair_files(
    a: impl AsRef<Path>,
    b: impl AsRef<Path>,
    filter: RoleFilter,
) -> Result<DiffDump> {
    let mut ra = read_dump(a)?;
    let mut rb = read_dump(b)?;
    reduce_pair(&mut ra, &mut rb, filter, DEFAULT_BLOCK_BYTES)
}
