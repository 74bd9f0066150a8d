//! Top-p% channel masks, per-model aggregation and overlap statistics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelId;
use crate::checkpoint::CheckpointIndex;
use crate::error::{Error, Result};
use crate::stats::ChannelStatVector;

pub const MASK_VERSION: u32 = 1;

/// `p` is resolved to millionths of a percent before rounding, so the
/// selection count is computed in exact integer arithmetic.
const P_SCALE: u128 = 1_000_000;

fn check_ratio(p: f64) -> Result<()> {
    if !(p.is_finite() && p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "selection ratio p={p} must be in (0, 100]"
        )));
    }
    Ok(())
}

/// `round_half_up(n * p / 100)`, capped at `n`.
pub fn selection_count(n: usize, p: f64) -> Result<usize> {
    check_ratio(p)?;
    let p_units = (p * P_SCALE as f64).round() as u128;
    let denom = 100 * P_SCALE;
    let k = (n as u128 * p_units + denom / 2) / denom;
    Ok((k as usize).min(n))
}

/// Percent ratio whose selection count over `n` channels is exactly `k`.
pub fn ratio_for_count(n: usize, k: usize) -> f64 {
    k as f64 * 100.0 / n as f64
}

/// Read access shared by ability and unified masks.
pub trait ChannelSet {
    /// Channels in canonical order.
    fn channels(&self) -> &[ChannelId];
    fn universe_size(&self) -> usize;
    fn label(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbilityMask {
    pub channels: Vec<ChannelId>,
    pub ability_tag: String,
    pub selection_ratio_p: f64,
    pub source_pair: (String, String),
    pub total_channel_count: usize,
}

impl ChannelSet for AbilityMask {
    fn channels(&self) -> &[ChannelId] {
        &self.channels
    }
    fn universe_size(&self) -> usize {
        self.total_channel_count
    }
    fn label(&self) -> &str {
        &self.ability_tag
    }
}

/// Union of the ability masks sourced from one ability model.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedMask {
    pub channels: Vec<ChannelId>,
    pub source_model_id: String,
    pub constituent_tags: Vec<String>,
    pub total_channel_count: usize,
}

impl ChannelSet for UnifiedMask {
    fn channels(&self) -> &[ChannelId] {
        &self.channels
    }
    fn universe_size(&self) -> usize {
        self.total_channel_count
    }
    fn label(&self) -> &str {
        &self.source_model_id
    }
}

/// Select the `round_half_up(N p / 100)` channels with the largest values,
/// ranked globally. Ties at the boundary go to the smaller `ChannelId`.
pub fn build_mask(stats: &ChannelStatVector, p: f64) -> Result<AbilityMask> {
    check_ratio(p)?;
    if stats.is_empty() {
        return Err(Error::InvalidArgument("statistic vector is empty".into()));
    }
    if let Some(i) = stats.values.iter().position(|v| v.is_nan()) {
        return Err(Error::InvalidArgument(format!(
            "statistic for {} is NaN",
            stats.space.channel_id(i)
        )));
    }
    let n = stats.len();
    let k = selection_count(n, p)?;
    let keys = stats.space.canonical_keys();
    let mut order: Vec<u32> = (0..n as u32).collect();
    let rank = |a: &u32, b: &u32| {
        let (a, b) = (*a as usize, *b as usize);
        stats.values[b]
            .total_cmp(&stats.values[a])
            .then(keys[a].cmp(&keys[b]))
    };
    if k > 0 && k < n {
        order.select_nth_unstable_by(k - 1, rank);
    }
    order.truncate(k);
    order.sort_by_key(|&i| keys[i as usize]);
    Ok(AbilityMask {
        channels: order
            .into_iter()
            .map(|i| stats.space.channel_id(i as usize))
            .collect(),
        ability_tag: stats.ability_tag.clone(),
        selection_ratio_p: p,
        source_pair: stats.pair_id.clone(),
        total_channel_count: n,
    })
}

fn merge_sorted(a: &[ChannelId], b: &[ChannelId]) -> Vec<ChannelId> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i].clone());
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j].clone());
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i].clone());
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

fn intersection_count(a: &[ChannelId], b: &[ChannelId]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Model-level aggregation: set union of masks that share an ability model
/// (the second element of `source_pair`) and universe.
pub fn union_masks(masks: &[AbilityMask]) -> Result<UnifiedMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("union of zero masks".into()))?;
    let mut out = UnifiedMask::from_ability(first);
    for m in &masks[1..] {
        out = out.union(&UnifiedMask::from_ability(m))?;
    }
    Ok(out)
}

impl UnifiedMask {
    pub fn from_ability(m: &AbilityMask) -> Self {
        UnifiedMask {
            channels: m.channels.clone(),
            source_model_id: m.source_pair.1.clone(),
            constituent_tags: vec![m.ability_tag.clone()],
            total_channel_count: m.total_channel_count,
        }
    }

    pub fn union(&self, other: &UnifiedMask) -> Result<UnifiedMask> {
        if self.source_model_id != other.source_model_id {
            return Err(Error::MixedSources(
                self.source_model_id.clone(),
                other.source_model_id.clone(),
            ));
        }
        if self.total_channel_count != other.total_channel_count {
            return Err(Error::UniverseMismatch(format!(
                "{} vs {} channels",
                self.total_channel_count, other.total_channel_count
            )));
        }
        let mut tags = self.constituent_tags.clone();
        for t in &other.constituent_tags {
            if !tags.contains(t) {
                tags.push(t.clone());
            }
        }
        Ok(UnifiedMask {
            channels: merge_sorted(&self.channels, &other.channels),
            source_model_id: self.source_model_id.clone(),
            constituent_tags: tags,
            total_channel_count: self.total_channel_count,
        })
    }

    /// Channel and parameter-element coverage on a concrete checkpoint.
    pub fn coverage(&self, index: &CheckpointIndex) -> Result<Coverage> {
        coverage(self, index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub channels: usize,
    pub channel_fraction: f64,
    /// Weight and bias elements owned by the selected channels.
    pub param_elements: u64,
    /// `param_elements` over every element in the checkpoint.
    pub param_fraction: f64,
}

pub fn coverage(mask: &dyn ChannelSet, index: &CheckpointIndex) -> Result<Coverage> {
    let space = index.channel_space();
    if mask.universe_size() != space.len() {
        return Err(Error::UniverseMismatch(format!(
            "mask universe {} vs checkpoint {} channels",
            mask.universe_size(),
            space.len()
        )));
    }
    let mut elements = 0u64;
    for id in mask.channels() {
        let flat = space.flat_index(id)?;
        elements += index.elements_per_channel(space.module_of_flat(flat)) as u64;
    }
    let total = index.total_elements().max(1);
    Ok(Coverage {
        channels: mask.channels().len(),
        channel_fraction: mask.channels().len() as f64 / space.len().max(1) as f64,
        param_elements: elements,
        param_fraction: elements as f64 / total as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Overlap {
    /// `|a ∩ b| / |a|` in percent; 0 when `a` is empty.
    pub ratio_percent: f64,
    pub count: usize,
    /// `|a ∩ b| / |a ∪ b|` in percent.
    pub jaccard_percent: f64,
}

/// Overlap normalized by the first (row) mask.
pub fn overlap(a: &dyn ChannelSet, b: &dyn ChannelSet) -> Result<Overlap> {
    if a.universe_size() != b.universe_size() {
        return Err(Error::UniverseMismatch(format!(
            "{:?} has {} channels, {:?} has {}",
            a.label(),
            a.universe_size(),
            b.label(),
            b.universe_size()
        )));
    }
    let count = intersection_count(a.channels(), b.channels());
    let (na, nb) = (a.channels().len(), b.channels().len());
    let union = na + nb - count;
    Ok(Overlap {
        ratio_percent: if na == 0 {
            0.0
        } else {
            count as f64 * 100.0 / na as f64
        },
        count,
        jaccard_percent: if union == 0 {
            0.0
        } else {
            count as f64 * 100.0 / union as f64
        },
    })
}

/// Row-normalized square overlap table.
pub fn overlap_matrix(masks: &[&dyn ChannelSet]) -> Result<Vec<Vec<Overlap>>> {
    if masks.len() < 2 {
        return Err(Error::InvalidArgument(
            "overlap matrix needs at least two masks".into(),
        ));
    }
    masks
        .iter()
        .map(|a| masks.iter().map(|b| overlap(*a, *b)).collect())
        .collect()
}

/// Expected overlap ratio (percent) of two independent uniform top-p% masks.
pub fn random_baseline(_universe: usize, p: f64) -> Result<f64> {
    check_ratio(p)?;
    Ok(p)
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Table cell in the `25.3% (4,434)` style.
pub fn format_overlap_cell(o: &Overlap) -> String {
    format!("{:.1}% ({})", o.ratio_percent, thousands(o.count))
}

/// Long CSV: `row,col,ratio,count,jaccard`.
pub fn write_overlap_csv<W: Write>(
    labels: &[String],
    table: &[Vec<Overlap>],
    mut w: W,
) -> Result<W> {
    writeln!(w, "row,col,ratio,count,jaccard")?;
    for (r, row) in table.iter().enumerate() {
        for (c, o) in row.iter().enumerate() {
            writeln!(
                w,
                "{},{},{:.1},{},{:.1}",
                csv_field(&labels[r]),
                csv_field(&labels[c]),
                o.ratio_percent,
                o.count,
                o.jaccard_percent
            )?;
        }
    }
    w.flush()?;
    Ok(w)
}

/// Matrix CSV with formatted `ratio% (count)` cells, rows as base masks.
pub fn write_overlap_table<W: Write>(
    labels: &[String],
    table: &[Vec<Overlap>],
    mut w: W,
) -> Result<W> {
    let header: Vec<String> = labels.iter().map(|l| csv_field(l)).collect();
    writeln!(w, ",{}", header.join(","))?;
    for (r, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .map(|o| format!("\"{}\"", format_overlap_cell(o)))
            .collect();
        writeln!(w, "{},{}", csv_field(&labels[r]), cells.join(","))?;
    }
    w.flush()?;
    Ok(w)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Serialize, Deserialize)]
struct AbilityMaskJson {
    version: u32,
    ability_tag: String,
    p: f64,
    source_pair: (String, String),
    total_channel_count: usize,
    channels: Vec<(String, usize)>,
}

#[derive(Serialize, Deserialize)]
struct UnifiedMaskJson {
    version: u32,
    source_model_id: String,
    constituent_tags: Vec<String>,
    total_channel_count: usize,
    channels: Vec<(String, usize)>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnyMaskJson {
    Ability(AbilityMaskJson),
    Unified(UnifiedMaskJson),
}

/// A mask file of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskFile {
    Ability(AbilityMask),
    Unified(UnifiedMask),
}

impl MaskFile {
    pub fn into_unified(self) -> UnifiedMask {
        match self {
            MaskFile::Ability(m) => UnifiedMask::from_ability(&m),
            MaskFile::Unified(u) => u,
        }
    }

    pub fn as_set(&self) -> &dyn ChannelSet {
        match self {
            MaskFile::Ability(m) => m,
            MaskFile::Unified(u) => u,
        }
    }
}

fn to_pairs(channels: &[ChannelId]) -> Vec<(String, usize)> {
    channels
        .iter()
        .map(|c| (c.module_path.clone(), c.index))
        .collect()
}

fn from_pairs(pairs: Vec<(String, usize)>, universe: usize) -> Result<Vec<ChannelId>> {
    let ids: Vec<ChannelId> = pairs
        .into_iter()
        .map(|(m, i)| ChannelId::new(m, i))
        .collect();
    if ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::MalformedHeader(
            "mask channels are not unique and in canonical order".into(),
        ));
    }
    if ids.len() > universe {
        return Err(Error::MalformedHeader(format!(
            "{} channels exceed the universe of {universe}",
            ids.len()
        )));
    }
    Ok(ids)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, value)?;
    w.write_all(b"\n")?;
    w.into_inner()
        .map_err(|e| Error::Io(e.into_error()))?
        .sync_all()?;
    Ok(())
}

impl AbilityMask {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&AbilityMaskJson {
            version: MASK_VERSION,
            ability_tag: self.ability_tag.clone(),
            p: self.selection_ratio_p,
            source_pair: self.source_pair.clone(),
            total_channel_count: self.total_channel_count,
            channels: to_pairs(&self.channels),
        })?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(
            &AbilityMaskJson {
                version: MASK_VERSION,
                ability_tag: self.ability_tag.clone(),
                p: self.selection_ratio_p,
                source_pair: self.source_pair.clone(),
                total_channel_count: self.total_channel_count,
                channels: to_pairs(&self.channels),
            },
            path.as_ref(),
        )
    }
}

impl UnifiedMask {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(
            &UnifiedMaskJson {
                version: MASK_VERSION,
                source_model_id: self.source_model_id.clone(),
                constituent_tags: self.constituent_tags.clone(),
                total_channel_count: self.total_channel_count,
                channels: to_pairs(&self.channels),
            },
            path.as_ref(),
        )
    }
}

pub fn parse_mask(text: &str) -> Result<MaskFile> {
    let any: AnyMaskJson = serde_json::from_str(text)
        .map_err(|e| Error::MalformedHeader(format!("mask file: {e}")))?;
    match any {
        AnyMaskJson::Ability(j) => {
            if j.version != MASK_VERSION {
                return Err(Error::UnsupportedVersion(j.version as u16));
            }
            check_ratio(j.p)?;
            Ok(MaskFile::Ability(AbilityMask {
                channels: from_pairs(j.channels, j.total_channel_count)?,
                ability_tag: j.ability_tag,
                selection_ratio_p: j.p,
                source_pair: j.source_pair,
                total_channel_count: j.total_channel_count,
            }))
        }
        AnyMaskJson::Unified(j) => {
            if j.version != MASK_VERSION {
                return Err(Error::UnsupportedVersion(j.version as u16));
            }
            Ok(MaskFile::Unified(UnifiedMask {
                channels: from_pairs(j.channels, j.total_channel_count)?,
                source_model_id: j.source_model_id,
                constituent_tags: j.constituent_tags,
                total_channel_count: j.total_channel_count,
            }))
        }
    }
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskFile> {
    let mut text = String::new();
    std::io::Read::read_to_string(&mut BufReader::new(File::open(path)?), &mut text)?;
    parse_mask(&text)
}
