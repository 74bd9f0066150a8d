//! Per-channel statistics (token-averaged activation differences, weight
//! difference norms) and their complementary CDFs.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelId, ChannelSpace};
use crate::checkpoint::{layer_of, module_type_of, Checkpoint, RuleTable};
use crate::dump::DiffDump;
use crate::error::{Error, Result};

pub const STATS_MAGIC: &[u8; 4] = b"ACTS";
const STATS_VERSION: u16 = 1;

/// Number of points in an automatic threshold grid.
pub const AUTO_THRESHOLD_POINTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatKind {
    ActivationDiff,
    WeightL2Diff,
}

/// One non-negative value per channel of a model pair, laid out in
/// `space` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStatVector {
    pub stat_kind: StatKind,
    pub pair_id: (String, String),
    pub ability_tag: String,
    pub space: ChannelSpace,
    pub values: Vec<f64>,
}

impl ChannelStatVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: &ChannelId) -> Result<f64> {
        Ok(self.values[self.space.flat_index(id)?])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ChannelId, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(|(i, &v)| (self.space.channel_id(i), v))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<W> {
        let header = serde_json::to_vec(&StatsHeaderJson {
            stat_kind: self.stat_kind,
            pair_id: self.pair_id.clone(),
            ability_tag: self.ability_tag.clone(),
            module_table: self.space.clone(),
        })?;
        w.write_all(STATS_MAGIC)?;
        w.write_all(&STATS_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
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
        let eof = |what: &'static str| {
            move |e: io::Error| match e.kind() {
                io::ErrorKind::UnexpectedEof => Error::Truncated(what.into()),
                _ => Error::Io(e),
            }
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::BadMagic { expected: "ACTS" })?;
        if &magic != STATS_MAGIC {
            return Err(Error::BadMagic { expected: "ACTS" });
        }
        let mut v = [0u8; 2];
        r.read_exact(&mut v).map_err(eof("version"))?;
        let version = u16::from_le_bytes(v);
        if version != STATS_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut l = [0u8; 4];
        r.read_exact(&mut l).map_err(eof("header length"))?;
        let mut header = vec![0u8; u32::from_le_bytes(l) as usize];
        r.read_exact(&mut header).map_err(eof("header"))?;
        let h: StatsHeaderJson =
            serde_json::from_slice(&header).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let mut values = Vec::with_capacity(h.module_table.len());
        let mut buf = [0u8; 8];
        for _ in 0..h.module_table.len() {
            r.read_exact(&mut buf).map_err(eof("values"))?;
            values.push(f64::from_le_bytes(buf));
        }
        Ok(Self {
            stat_kind: h.stat_kind,
            pair_id: h.pair_id,
            ability_tag: h.ability_tag,
            space: h.module_table,
            values,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[derive(Serialize, Deserialize)]
struct StatsHeaderJson {
    stat_kind: StatKind,
    pair_id: (String, String),
    ability_tag: String,
    module_table: ChannelSpace,
}

/// Token-averaged activation difference per channel.
pub fn activation_stats(diff: &DiffDump, ability_tag: &str) -> Result<ChannelStatVector> {
    let mut values = Vec::with_capacity(diff.sum_abs_diff.len());
    for (i, (&s, &n)) in diff.sum_abs_diff.iter().zip(&diff.token_count).enumerate() {
        if n == 0 {
            return Err(Error::ZeroTokenCount(
                diff.module_table.channel_id(i).to_string(),
            ));
        }
        values.push(s / n as f64);
    }
    Ok(ChannelStatVector {
        stat_kind: StatKind::ActivationDiff,
        pair_id: (diff.model_a.clone(), diff.model_b.clone()),
        ability_tag: ability_tag.to_string(),
        space: diff.module_table.clone(),
        values,
    })
}

/// L2 norm of `ability - target` over each channel's parameter slice
/// (weight slice plus bias element), widened to f64 before subtracting.
pub fn weight_stats(
    target: &Checkpoint,
    ability: &Checkpoint,
    ability_tag: &str,
    chunk_bytes: usize,
) -> Result<ChannelStatVector> {
    let ti = target.index();
    ti.check_compatible(ability.index())?;

    let per_module: Vec<Vec<f64>> = ti
        .modules()
        .par_iter()
        .map(|entry| {
            let mut sq = vec![0f64; entry.kind.n_channels];
            let tensors = std::iter::once(entry.weight).chain(entry.bias);
            for ti_pos in tensors {
                let tm = &ti.tensors()[ti_pos];
                let am = ability
                    .index()
                    .tensor(&tm.name)
                    .expect("checked compatible");
                let map = ti.tensor_map(ti_pos).expect("module tensor is mapped");
                let elem = tm.dtype.size().max(am.dtype.size());
                let per_chunk = (chunk_bytes / elem).max(1);
                let mut tb = vec![0u8; per_chunk.min(tm.numel()) * tm.dtype.size()];
                let mut ab = vec![0u8; per_chunk.min(tm.numel()) * am.dtype.size()];
                let mut start = 0;
                while start < tm.numel() {
                    let n = per_chunk.min(tm.numel() - start);
                    let tbuf = &mut tb[..n * tm.dtype.size()];
                    let abuf = &mut ab[..n * am.dtype.size()];
                    target.read_bytes(tm, (start * tm.dtype.size()) as u64, tbuf)?;
                    ability.read_bytes(am, (start * am.dtype.size()) as u64, abuf)?;
                    for k in 0..n {
                        let d = am.dtype.decode(abuf, k) - tm.dtype.decode(tbuf, k);
                        sq[map.channel_of(start + k)] += d * d;
                    }
                    start += n;
                }
            }
            Ok(sq.into_iter().map(f64::sqrt).collect())
        })
        .collect::<Result<_>>()?;

    Ok(ChannelStatVector {
        stat_kind: StatKind::WeightL2Diff,
        pair_id: (target.model_id(), ability.model_id()),
        ability_tag: ability_tag.to_string(),
        space: ti.channel_space().clone(),
        values: per_module.concat(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grouping {
    Global,
    PerLayer,
    PerModuleType,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Thresholds {
    /// Log-spaced grid between the smallest positive and the largest value.
    Auto(usize),
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CcdfCurve {
    pub grouping: Grouping,
    pub group_key: String,
    pub channel_count: usize,
    /// `(threshold, fraction of channels strictly above it)`.
    pub points: Vec<(f64, f64)>,
}

pub fn auto_thresholds(values: &[f64], points: usize) -> Vec<f64> {
    let lo = values
        .iter()
        .copied()
        .filter(|&v| v > 0.0)
        .fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(0.0, f64::max);
    if !lo.is_finite() || points == 0 {
        return vec![0.0];
    }
    if points == 1 || lo == hi {
        return vec![lo];
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..points)
        .map(|j| {
            if j + 1 == points {
                hi
            } else {
                (llo + (lhi - llo) * j as f64 / (points - 1) as f64).exp()
            }
        })
        .collect()
}

/// Group key of a module path under `grouping`.
pub fn group_key(rules: &RuleTable, grouping: Grouping, module_path: &str) -> String {
    match grouping {
        Grouping::Global => "all".to_string(),
        Grouping::PerLayer => match layer_of(module_path) {
            Some(l) => format!("layer.{l}"),
            None => "non_layer".to_string(),
        },
        Grouping::PerModuleType => module_type_of(rules, module_path),
    }
}

pub fn ccdf(
    stats: &ChannelStatVector,
    grouping: Grouping,
    thresholds: &Thresholds,
) -> Result<Vec<CcdfCurve>> {
    ccdf_with_rules(stats, grouping, thresholds, &RuleTable::default())
}

/// Fraction of channels per group whose statistic strictly exceeds each
/// threshold. Every group is evaluated on the same threshold grid.
pub fn ccdf_with_rules(
    stats: &ChannelStatVector,
    grouping: Grouping,
    thresholds: &Thresholds,
    rules: &RuleTable,
) -> Result<Vec<CcdfCurve>> {
    if stats.is_empty() {
        return Err(Error::EmptyGroup("statistic vector has no channels".into()));
    }
    let grid = match thresholds {
        Thresholds::Auto(n) => auto_thresholds(&stats.values, *n),
        Thresholds::Explicit(t) => t.clone(),
    };

    let mut keys: Vec<String> = Vec::new();
    let mut groups: Vec<Vec<f64>> = Vec::new();
    for (m, mc) in stats.space.iter() {
        if mc.1 == 0 {
            return Err(Error::EmptyGroup(format!(
                "module {:?} has no channels",
                mc.0
            )));
        }
        let key = group_key(rules, grouping, &mc.0);
        let g = match keys.iter().position(|k| *k == key) {
            Some(g) => g,
            None => {
                keys.push(key);
                groups.push(Vec::new());
                groups.len() - 1
            }
        };
        let off = stats.space.module_offset(m);
        groups[g].extend_from_slice(&stats.values[off..off + mc.1]);
    }

    Ok(keys
        .into_iter()
        .zip(groups)
        .map(|(group_key, mut vals)| {
            vals.sort_by(f64::total_cmp);
            let n = vals.len();
            let points = grid
                .iter()
                .map(|&tau| {
                    let at_or_below = vals.partition_point(|&v| v <= tau);
                    (tau, (n - at_or_below) as f64 / n as f64)
                })
                .collect();
            CcdfCurve {
                grouping,
                group_key,
                channel_count: n,
                points,
            }
        })
        .collect())
}

/// CSV with columns `group_key,threshold,fraction`, one block per group.
pub fn write_ccdf_csv<W: Write>(curves: &[CcdfCurve], mut w: W) -> Result<W> {
    writeln!(w, "group_key,threshold,fraction")?;
    for c in curves {
        for (t, f) in &c.points {
            writeln!(w, "{},{},{}", c.group_key, t, f)?;
        }
    }
    w.flush()?;
    Ok(w)
}
