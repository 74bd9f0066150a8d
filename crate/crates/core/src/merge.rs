//! Masked task-vector transfer and the Task Arithmetic / TIES / DARE
//! baselines, streamed tensor by tensor.
//!
//! For every channel-mapped element `e` of channel `i`:
//!
//! ```text
//! merged[e] = target[e] + sum_m lambda_m * (source_m[e] - target[e]) * [i in mask_m]
//! ```
//!
//! accumulated in f64 and rounded once into the target dtype. Elements whose
//! accumulated update is exactly zero keep the target's bytes. Tensors
//! outside every module are copied from the target verbatim.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointWriter, TensorChannelMap, TensorMeta, TensorSpec};
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::mask::{coverage, UnifiedMask};
use crate::rng::{name_key, CounterRng};

pub const MANIFEST_VERSION: u32 = 1;

/// Raw bytes read per tensor chunk unless configured otherwise.
pub const DEFAULT_CHUNK_BYTES: usize = 4 << 20;

/// Elements per parallel task inside a chunk.
const PAR_BLOCK: usize = 16 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Act,
    TaskArithmetic,
    Ties,
    Dare,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MethodParams {
    pub ties_trim_fraction: Option<f64>,
    pub dare_drop_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceMask {
    Full,
    Masked(UnifiedMask),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeSource {
    pub checkpoint: PathBuf,
    pub mask: SourceMask,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    pub target: PathBuf,
    pub sources: Vec<MergeSource>,
    pub method: Method,
    pub params: MethodParams,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct MergeOptions {
    pub chunk_bytes: usize,
}

impl Default for MergeOptions {
    fn default() -> Self {
        Self {
            chunk_bytes: DEFAULT_CHUNK_BYTES,
        }
    }
}

impl MergePlan {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.sources {
            let key = fs::canonicalize(&s.checkpoint).unwrap_or_else(|_| s.checkpoint.clone());
            if !seen.insert(key) {
                return Err(Error::InvalidArgument(format!(
                    "source {} appears more than once; union its masks first",
                    s.checkpoint.display()
                )));
            }
            if !s.lambda.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "lambda {} for {} is not finite",
                    s.lambda,
                    s.checkpoint.display()
                )));
            }
        }
        match self.method {
            Method::Ties => {
                let f = self.trim_fraction()?;
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "ties_trim_fraction {f} must be in (0, 1]"
                    )));
                }
            }
            Method::Dare => {
                let p = self.drop_prob()?;
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::InvalidArgument(format!(
                        "dare_drop_prob {p} must be in [0, 1)"
                    )));
                }
            }
            Method::Act | Method::TaskArithmetic => {}
        }
        Ok(())
    }

    fn trim_fraction(&self) -> Result<f64> {
        self.params
            .ties_trim_fraction
            .ok_or_else(|| Error::InvalidArgument("TIES needs ties_trim_fraction".into()))
    }

    fn drop_prob(&self) -> Result<f64> {
        self.params
            .dare_drop_prob
            .ok_or_else(|| Error::InvalidArgument("DARE needs dare_drop_prob".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub checkpoint: String,
    pub model_id: String,
    /// `"full"` or the mask's source model id.
    pub mask: String,
    pub constituent_tags: Vec<String>,
    pub lambda: f64,
    pub transferred_channels: usize,
    pub transferred_param_elements: u64,
    pub channel_fraction: f64,
    pub param_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeManifest {
    pub version: u32,
    pub method: Method,
    pub method_params: MethodParams,
    pub seed: u64,
    pub target: String,
    pub target_model_id: String,
    pub sources: Vec<SourceReport>,
    pub output: String,
    pub output_bytes: u64,
    pub output_sha256: String,
    pub total_param_elements: u64,
    /// Implementation choices that affect the numbers, for auditing.
    pub choices: Vec<String>,
}

impl MergeManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedHeader(format!("manifest: {e}")))
    }
}

/// Manifest location for a merged checkpoint at `out`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Borrowed tensor slice in its stored dtype.
#[derive(Debug, Clone, Copy)]
pub struct SliceRef<'a> {
    pub dtype: DType,
    pub shape: &'a [usize],
    pub bytes: &'a [u8],
}

/// `ability - target`, widened to f64 before subtracting.
pub fn task_vector(target: SliceRef<'_>, ability: SliceRef<'_>) -> Result<Vec<f64>> {
    if target.shape != ability.shape {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            target.shape, ability.shape
        )));
    }
    let n: usize = target.shape.iter().product();
    for s in [&target, &ability] {
        if s.bytes.len() != n * s.dtype.size() {
            return Err(Error::ShapeMismatch(format!(
                "{} bytes for shape {:?} in {}",
                s.bytes.len(),
                s.shape,
                s.dtype.as_str()
            )));
        }
    }
    Ok((0..n)
        .map(|i| ability.dtype.decode(ability.bytes, i) - target.dtype.decode(target.bytes, i))
        .collect())
}

/// Which elements of a tensor a source may change.
#[derive(Debug, Clone)]
pub enum Activity<'a> {
    All,
    Nothing,
    Channels {
        bits: &'a [bool],
        map: TensorChannelMap,
    },
    /// Explicit per-element flags (reference mode).
    Elements(&'a [bool]),
}

impl Activity<'_> {
    #[inline]
    fn is_active(&self, element: usize) -> bool {
        match self {
            Activity::All => true,
            Activity::Nothing => false,
            Activity::Channels { bits, map } => bits[map.channel_of(element)],
            Activity::Elements(flags) => flags[element],
        }
    }

    fn is_nothing(&self) -> bool {
        matches!(self, Activity::Nothing)
    }
}

/// Masked delta `source - target` (zero outside the mask).
fn masked_deltas(t: &[f64], s: &mut [f64], activity: &Activity<'_>, start: usize) {
    s.par_chunks_mut(PAR_BLOCK)
        .zip(t.par_chunks(PAR_BLOCK))
        .enumerate()
        .for_each(|(b, (sb, tb))| {
            let base = start + b * PAR_BLOCK;
            for (k, (sv, tv)) in sb.iter_mut().zip(tb).enumerate() {
                *sv = if activity.is_active(base + k) {
                    *sv - *tv
                } else {
                    0.0
                };
            }
        });
}

/// Keep each delta with probability `1 - p` and rescale kept ones by
/// `1 / (1 - p)`.
fn apply_dare(d: &mut [f64], rng: &CounterRng, start: usize, p: f64) {
    let factor = dare_rescale_factor(p);
    d.par_chunks_mut(PAR_BLOCK).enumerate().for_each(|(b, db)| {
        let base = start + b * PAR_BLOCK;
        for (k, v) in db.iter_mut().enumerate() {
            let keep = rng.unit_at((base + k) as u64) >= p;
            *v = if keep { *v * factor } else { 0.0 };
        }
    });
}

pub fn dare_rescale_factor(p: f64) -> f64 {
    1.0 / (1.0 - p)
}

/// Per-tensor magnitude cut for TIES trimming. Elements above the threshold
/// are kept; among elements equal to it the first `equal_to_keep` (by
/// element index) are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrimState {
    keep_all: bool,
    threshold_bits: u64,
    equal_to_keep: u64,
}

impl TrimState {
    fn apply(&mut self, d: &mut [f64]) {
        if self.keep_all {
            return;
        }
        for v in d {
            let bits = v.abs().to_bits();
            if bits > self.threshold_bits {
                continue;
            }
            if bits == self.threshold_bits && self.equal_to_keep > 0 {
                self.equal_to_keep -= 1;
                continue;
            }
            *v = 0.0;
        }
    }
}

/// Number of elements TIES keeps per tensor.
pub fn trim_keep_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 + 0.5).floor() as usize).clamp(1.min(n), n)
}

const DIGIT_BITS: u32 = 16;

/// Exact k-th largest magnitude per source by a 4-pass MSB radix select
/// over the f64 bit patterns (monotone for non-negative values). `stream`
/// must replay the same deltas on every call.
fn trim_states<F>(n_sources: usize, n: usize, k: usize, mut stream: F) -> Result<Vec<TrimState>>
where
    F: FnMut(&mut dyn FnMut(usize, &[f64])) -> Result<()>,
{
    if k >= n {
        return Ok(vec![
            TrimState {
                keep_all: true,
                threshold_bits: 0,
                equal_to_keep: 0,
            };
            n_sources
        ]);
    }
    let mut prefix = vec![0u64; n_sources];
    let mut rank = vec![k as u64; n_sources];
    let mut hist = vec![0u64; n_sources << DIGIT_BITS];
    for pass in 0..(64 / DIGIT_BITS) {
        let known = pass * DIGIT_BITS;
        let shift = 64 - known - DIGIT_BITS;
        hist.iter_mut().for_each(|h| *h = 0);
        stream(&mut |s, d| {
            let h = &mut hist[s << DIGIT_BITS..(s + 1) << DIGIT_BITS];
            let p = prefix[s];
            for v in d {
                let bits = v.abs().to_bits();
                if known > 0 && (bits >> (64 - known)) != (p >> (64 - known)) {
                    continue;
                }
                h[((bits >> shift) & 0xFFFF) as usize] += 1;
            }
        })?;
        for s in 0..n_sources {
            let h = &hist[s << DIGIT_BITS..(s + 1) << DIGIT_BITS];
            let mut above = 0u64;
            let mut digit = 0usize;
            for dgt in (0..h.len()).rev() {
                if above + h[dgt] >= rank[s] {
                    digit = dgt;
                    break;
                }
                above += h[dgt];
            }
            rank[s] -= above;
            prefix[s] |= (digit as u64) << shift;
        }
    }
    Ok((0..n_sources)
        .map(|s| TrimState {
            keep_all: false,
            threshold_bits: prefix[s],
            equal_to_keep: rank[s],
        })
        .collect())
}

/// Accumulated update per element from the (already masked and
/// transformed) deltas.
fn combine(method: Method, deltas: &[Vec<f64>], lambdas: &[f64], acc: &mut [f64]) {
    acc.par_chunks_mut(PAR_BLOCK)
        .enumerate()
        .for_each(|(b, ab)| {
            let base = b * PAR_BLOCK;
            for (k, a) in ab.iter_mut().enumerate() {
                let e = base + k;
                *a = match method {
                    Method::Ties => {
                        let elected: f64 = deltas.iter().zip(lambdas).map(|(d, l)| l * d[e]).sum();
                        if elected == 0.0 {
                            0.0
                        } else {
                            let mut sum = 0.0;
                            let mut count = 0u32;
                            for (d, l) in deltas.iter().zip(lambdas) {
                                let v = d[e];
                                if v != 0.0 && (v > 0.0) == (elected > 0.0) {
                                    sum += l * v;
                                    count += 1;
                                }
                            }
                            if count == 0 {
                                0.0
                            } else {
                                sum / count as f64
                            }
                        }
                    }
                    _ => {
                        let mut sum = 0.0;
                        for (d, l) in deltas.iter().zip(lambdas) {
                            sum += l * d[e];
                        }
                        sum
                    }
                };
            }
        });
}

fn dare_rng(seed: u64, tensor: &str, source: usize) -> CounterRng {
    CounterRng::new(seed, &[name_key(tensor), source as u64])
}

/// One source in reference mode: full tensor values with its own scale and
/// optional per-element mask.
pub struct ReferenceSource<'a> {
    pub values: &'a [f64],
    pub lambda: f64,
    pub active: Option<&'a [bool]>,
    /// Position in the plan; keys the DARE random stream.
    pub plan_index: usize,
}

/// Merged values of one tensor in f64, without the final dtype rounding.
/// Uses the same kernels as the streaming engine.
pub fn reference_merge(
    method: Method,
    params: MethodParams,
    seed: u64,
    tensor_name: &str,
    target: &[f64],
    sources: &[ReferenceSource<'_>],
) -> Result<Vec<f64>> {
    let n = target.len();
    let mut deltas = Vec::with_capacity(sources.len());
    for s in sources {
        if s.values.len() != n || s.active.is_some_and(|a| a.len() != n) {
            return Err(Error::ShapeMismatch(format!(
                "source length {} vs {n}",
                s.values.len()
            )));
        }
        let mut d = s.values.to_vec();
        let activity = match s.active {
            Some(a) => Activity::Elements(a),
            None => Activity::All,
        };
        masked_deltas(target, &mut d, &activity, 0);
        deltas.push(d);
    }
    transform(
        method,
        params,
        seed,
        tensor_name,
        sources.iter().map(|s| s.plan_index),
        &mut deltas,
        0,
        None,
    )?;
    if method == Method::Ties {
        let k = trim_keep_count(n, params.ties_trim_fraction.unwrap_or(1.0));
        let snapshot = deltas.clone();
        let mut states = trim_states(deltas.len(), n, k, |f| {
            for (s, d) in snapshot.iter().enumerate() {
                f(s, d);
            }
            Ok(())
        })?;
        for (d, st) in deltas.iter_mut().zip(states.iter_mut()) {
            st.apply(d);
        }
    }
    let lambdas: Vec<f64> = sources.iter().map(|s| s.lambda).collect();
    let mut acc = vec![0f64; n];
    combine(method, &deltas, &lambdas, &mut acc);
    Ok(target
        .iter()
        .zip(&acc)
        .map(|(&t, &a)| if a == 0.0 { t } else { t + a })
        .collect())
}

/// Method-specific per-chunk transform (DARE drop-and-rescale). TIES
/// trimming needs tensor-wide state and is applied by the caller.
#[allow(clippy::too_many_arguments)]
fn transform(
    method: Method,
    params: MethodParams,
    seed: u64,
    tensor_name: &str,
    plan_indices: impl Iterator<Item = usize>,
    deltas: &mut [Vec<f64>],
    start: usize,
    len: Option<usize>,
) -> Result<()> {
    if method == Method::Dare {
        let p = params
            .dare_drop_prob
            .ok_or_else(|| Error::InvalidArgument("DARE needs dare_drop_prob".into()))?;
        for (d, idx) in deltas.iter_mut().zip(plan_indices) {
            let d = match len {
                Some(l) => &mut d[..l],
                None => &mut d[..],
            };
            apply_dare(d, &dare_rng(seed, tensor_name, idx), start, p);
        }
    }
    Ok(())
}

/// Per-module channel flags of one source.
enum SourceModules {
    Full,
    Masked(Vec<Option<Vec<bool>>>),
}

impl SourceModules {
    fn activity(&self, map: &TensorChannelMap) -> Activity<'_> {
        match self {
            SourceModules::Full => Activity::All,
            SourceModules::Masked(mods) => match &mods[map.module] {
                Some(bits) => Activity::Channels { bits, map: *map },
                None => Activity::Nothing,
            },
        }
    }
}

fn resolve_mask(mask: &UnifiedMask, target: &Checkpoint) -> Result<SourceModules> {
    let space = target.index().channel_space();
    if mask.total_channel_count != space.len() {
        return Err(Error::UniverseMismatch(format!(
            "mask from {:?} covers a universe of {} channels, target has {}",
            mask.source_model_id,
            mask.total_channel_count,
            space.len()
        )));
    }
    let mut mods: Vec<Option<Vec<bool>>> = vec![None; space.modules().len()];
    for id in &mask.channels {
        let flat = space
            .flat_index(id)
            .map_err(|e| Error::UniverseMismatch(format!("mask channel {id}: {e}")))?;
        let m = space.module_of_flat(flat);
        mods[m].get_or_insert_with(|| vec![false; space.modules()[m].1])[id.index] = true;
    }
    Ok(SourceModules::Masked(mods))
}

struct Buffers {
    traw: Vec<u8>,
    t: Vec<f64>,
    sraw: Vec<u8>,
    deltas: Vec<Vec<f64>>,
    acc: Vec<f64>,
    out: Vec<u8>,
}

/// Streams one tensor chunk by chunk, producing masked deltas for the
/// active sources.
struct TensorJob<'a> {
    target: &'a Checkpoint,
    tmeta: &'a TensorMeta,
    sources: Vec<(&'a Checkpoint, &'a TensorMeta, Activity<'a>)>,
    per_chunk: usize,
}

impl TensorJob<'_> {
    fn for_each_chunk(
        &self,
        bufs: &mut Buffers,
        mut f: impl FnMut(usize, usize, &mut Buffers) -> Result<()>,
    ) -> Result<()> {
        let numel = self.tmeta.numel();
        let tsize = self.tmeta.dtype.size();
        let mut start = 0;
        while start < numel {
            let n = self.per_chunk.min(numel - start);
            self.target.read_bytes(
                self.tmeta,
                (start * tsize) as u64,
                &mut bufs.traw[..n * tsize],
            )?;
            self.tmeta
                .dtype
                .decode_into(&bufs.traw[..n * tsize], &mut bufs.t[..n]);
            for (s, (ck, meta, activity)) in self.sources.iter().enumerate() {
                let ssize = meta.dtype.size();
                ck.read_bytes(meta, (start * ssize) as u64, &mut bufs.sraw[..n * ssize])?;
                let d = &mut bufs.deltas[s][..n];
                meta.dtype.decode_into(&bufs.sraw[..n * ssize], d);
                masked_deltas(&bufs.t[..n], d, activity, start);
            }
            f(start, n, bufs)?;
            start += n;
        }
        Ok(())
    }
}

pub fn merge_act(plan: &MergePlan, out: &Path, opts: MergeOptions) -> Result<MergeManifest> {
    expect_method(plan, Method::Act)?;
    merge(plan, out, opts)
}

pub fn merge_task_arithmetic(
    plan: &MergePlan,
    out: &Path,
    opts: MergeOptions,
) -> Result<MergeManifest> {
    expect_method(plan, Method::TaskArithmetic)?;
    merge(plan, out, opts)
}

pub fn merge_ties(plan: &MergePlan, out: &Path, opts: MergeOptions) -> Result<MergeManifest> {
    expect_method(plan, Method::Ties)?;
    merge(plan, out, opts)
}

pub fn merge_dare(plan: &MergePlan, out: &Path, opts: MergeOptions) -> Result<MergeManifest> {
    expect_method(plan, Method::Dare)?;
    merge(plan, out, opts)
}

fn expect_method(plan: &MergePlan, m: Method) -> Result<()> {
    if plan.method != m {
        return Err(Error::InvalidArgument(format!(
            "plan method is {:?}, expected {m:?}",
            plan.method
        )));
    }
    Ok(())
}

fn method_choices(plan: &MergePlan) -> Vec<String> {
    let mut c = vec![
        "accumulate in f64 after widening; single round-to-nearest-even cast to the target dtype"
            .to_string(),
        "elements with a zero accumulated update keep the target bytes".to_string(),
        "tensors outside the channel map are copied from the target".to_string(),
        "when no source changes any channel the target file is copied verbatim".to_string(),
        "overlapping masks from different sources add their contributions".to_string(),
    ];
    match plan.method {
        Method::Ties => {
            c.push("TIES trims per tensor to round_half_up(fraction * numel) elements by |delta|; ties at the cut keep lower element indices".into());
            c.push("TIES elects the sign of the lambda-weighted sum of trimmed deltas; a zero sum keeps the target value".into());
            c.push(
                "TIES merged delta is the mean of lambda-scaled sign-agreeing trimmed deltas"
                    .into(),
            );
            c.push("channel masks are applied before trimming".into());
        }
        Method::Dare => {
            c.push("DARE keep decision uses a counter-based splitmix64 stream keyed by (seed, tensor name, source index) at the element index".into());
            c.push(
                "DARE rescales kept deltas by 1/(1-p); channel masks are applied before dropping"
                    .into(),
            );
        }
        Method::Act | Method::TaskArithmetic => {}
    }
    c
}

/// Byte-for-byte copy, used when no source changes any channel.
fn copy_verbatim(src: &Path, dst: &Path, chunk_bytes: usize) -> Result<(u64, String)> {
    let mut input = fs::File::open(src)?;
    let mut output = std::io::BufWriter::new(fs::File::create(dst)?);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; chunk_bytes.clamp(4096, 64 << 20)];
    let mut total = 0u64;
    loop {
        let n = input.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        output.write_all(&buf[..n])?;
        total += n as u64;
    }
    output
        .into_inner()
        .map_err(|e| Error::Io(e.into_error()))?
        .sync_all()?;
    Ok((total, hex::encode(hasher.finalize())))
}

/// Run `plan`, writing the merged checkpoint to `out` and its manifest next
/// to it. Peak working memory is a few chunk buffers per active source.
pub fn merge(plan: &MergePlan, out: &Path, opts: MergeOptions) -> Result<MergeManifest> {
    plan.validate()?;
    let target = Checkpoint::open(&plan.target)?;
    let sources: Vec<Checkpoint> = plan
        .sources
        .iter()
        .map(|s| Checkpoint::open(&s.checkpoint))
        .collect::<Result<_>>()?;
    for s in &sources {
        target.index().check_compatible(s.index())?;
    }
    let modules: Vec<SourceModules> = plan
        .sources
        .iter()
        .map(|s| match &s.mask {
            SourceMask::Full => Ok(SourceModules::Full),
            SourceMask::Masked(m) => resolve_mask(m, &target),
        })
        .collect::<Result<_>>()?;

    let tindex = target.index();
    let total_elements = tindex.total_elements();
    let mapped_elements: u64 = tindex
        .modules()
        .iter()
        .enumerate()
        .map(|(m, e)| (tindex.elements_per_channel(m) * e.kind.n_channels) as u64)
        .sum();
    let reports: Vec<SourceReport> = plan
        .sources
        .iter()
        .zip(&sources)
        .map(|(s, ck)| {
            let (mask, tags, channels, elements) = match &s.mask {
                SourceMask::Full => (
                    "full".to_string(),
                    Vec::new(),
                    tindex.channel_space().len(),
                    mapped_elements,
                ),
                SourceMask::Masked(m) => {
                    let c = coverage(m, tindex)?;
                    (
                        m.source_model_id.clone(),
                        m.constituent_tags.clone(),
                        c.channels,
                        c.param_elements,
                    )
                }
            };
            Ok(SourceReport {
                checkpoint: s.checkpoint.display().to_string(),
                model_id: ck.model_id(),
                mask,
                constituent_tags: tags,
                lambda: s.lambda,
                transferred_channels: channels,
                transferred_param_elements: elements,
                channel_fraction: channels as f64 / tindex.channel_space().len().max(1) as f64,
                param_fraction: elements as f64 / total_elements.max(1) as f64,
            })
        })
        .collect::<Result<_>>()?;

    let nothing_active = modules.iter().all(|m| match m {
        SourceModules::Full => tindex.channel_space().is_empty(),
        SourceModules::Masked(mods) => mods.iter().all(Option::is_none),
    });
    let (output_bytes, output_sha256) = if nothing_active {
        copy_verbatim(&plan.target, out, opts.chunk_bytes)?
    } else {
        let specs: Vec<TensorSpec> = tindex.tensors().iter().map(TensorMeta::spec).collect();
        let mut writer = CheckpointWriter::create(out, &specs, tindex.metadata())?;
        let max_elem = std::iter::once(&target)
            .chain(&sources)
            .flat_map(|c| c.index().tensors().iter().map(|t| t.dtype.size()))
            .max()
            .unwrap_or(4);
        let per_chunk = (opts.chunk_bytes / max_elem).max(1);
        let trim = plan.params.ties_trim_fraction.unwrap_or(1.0);

        for (ti, tmeta) in tindex.tensors().iter().enumerate() {
            let job_sources: Vec<(usize, Activity<'_>)> = match tindex.tensor_map(ti) {
                None => Vec::new(),
                Some(map) => modules
                    .iter()
                    .enumerate()
                    .map(|(s, m)| (s, m.activity(&map)))
                    .filter(|(_, a)| !a.is_nothing())
                    .collect(),
            };
            if job_sources.is_empty() || tmeta.numel() == 0 {
                target.for_each_chunk(tmeta, per_chunk * tmeta.dtype.size(), |_, b| {
                    writer.write(b)
                })?;
                continue;
            }

            let plan_indices: Vec<usize> = job_sources.iter().map(|(s, _)| *s).collect();
            let lambdas: Vec<f64> = plan_indices
                .iter()
                .map(|&s| plan.sources[s].lambda)
                .collect();
            let job = TensorJob {
                target: &target,
                tmeta,
                sources: job_sources
                    .into_iter()
                    .map(|(s, a)| {
                        let meta = sources[s].index().tensor(&tmeta.name).expect("compatible");
                        (&sources[s], meta, a)
                    })
                    .collect(),
                per_chunk,
            };
            let cap = per_chunk.min(tmeta.numel());
            let mut bufs = Buffers {
                traw: vec![0u8; cap * tmeta.dtype.size()],
                t: vec![0f64; cap],
                sraw: vec![0u8; cap * max_elem],
                deltas: vec![vec![0f64; cap]; job.sources.len()],
                acc: vec![0f64; cap],
                out: vec![0u8; cap * tmeta.dtype.size()],
            };

            let mut trims = if plan.method == Method::Ties {
                let k = trim_keep_count(tmeta.numel(), trim);
                trim_states(job.sources.len(), tmeta.numel(), k, |f| {
                    job.for_each_chunk(&mut bufs, |_, n, b| {
                        for (s, d) in b.deltas.iter().enumerate() {
                            f(s, &d[..n]);
                        }
                        Ok(())
                    })
                })?
            } else {
                Vec::new()
            };

            let dtype = tmeta.dtype;
            let esize = dtype.size();
            job.for_each_chunk(&mut bufs, |start, n, b| {
                transform(
                    plan.method,
                    plan.params,
                    plan.seed,
                    &tmeta.name,
                    plan_indices.iter().copied(),
                    &mut b.deltas,
                    start,
                    Some(n),
                )?;
                for (d, st) in b.deltas.iter_mut().zip(trims.iter_mut()) {
                    st.apply(&mut d[..n]);
                }
                combine(plan.method, &b.deltas, &lambdas, &mut b.acc[..n]);
                let (t, traw, acc) = (&b.t[..n], &b.traw[..n * esize], &b.acc[..n]);
                b.out[..n * esize]
                    .par_chunks_mut(PAR_BLOCK * esize)
                    .enumerate()
                    .for_each(|(blk, ob)| {
                        let base = blk * PAR_BLOCK;
                        for k in 0..ob.len() / esize {
                            let e = base + k;
                            if acc[e] == 0.0 {
                                ob[k * esize..(k + 1) * esize]
                                    .copy_from_slice(&traw[e * esize..(e + 1) * esize]);
                            } else {
                                dtype.encode(t[e] + acc[e], ob, k);
                            }
                        }
                    });
                writer.write(&b.out[..n * esize])
            })?;
        }

        let summary = writer.finish()?;
        (summary.bytes, summary.sha256)
    };
    let manifest = MergeManifest {
        version: MANIFEST_VERSION,
        method: plan.method,
        method_params: plan.params,
        seed: plan.seed,
        target: plan.target.display().to_string(),
        target_model_id: target.model_id(),
        sources: reports,
        output: out.display().to_string(),
        output_bytes,
        output_sha256,
        total_param_elements: total_elements,
        choices: method_choices(plan),
    };
    manifest.write(manifest_path(out))?;
    Ok(manifest)
}
