//! Channel identities and the ordered module/channel universe shared by
//! dumps, statistics, masks and checkpoints.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One output channel: `(module path, channel index)`.
///
/// The derived ordering (module path, then index) is the canonical
/// tie-breaker used by every ranking in the crate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChannelId {
    pub module_path: String,
    pub index: usize,
}

impl ChannelId {
    pub fn new(module_path: impl Into<String>, index: usize) -> Self {
        Self {
            module_path: module_path.into(),
            index,
        }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.module_path, self.index)
    }
}

impl std::str::FromStr for ChannelId {
    type Err = Error;

    /// Parses the `path[index]` form produced by `Display`.
    fn from_str(s: &str) -> Result<Self> {
        let bad =
            || Error::InvalidArgument(format!("channel {s:?} is not of the form path[index]"));
        let body = s.strip_suffix(']').ok_or_else(bad)?;
        let (path, idx) = body.rsplit_once('[').ok_or_else(bad)?;
        if path.is_empty() {
            return Err(bad());
        }
        Ok(ChannelId::new(path, idx.parse().map_err(|_| bad())?))
    }
}

/// `(module path, channel count)` as it appears in file headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleChannels(pub String, pub usize);

/// Ordered list of modules with their channel counts. The order fixes the
/// flat layout of per-channel vectors; lookups by path are O(1).
#[derive(Debug, Clone)]
pub struct ChannelSpace {
    modules: Vec<ModuleChannels>,
    offsets: Vec<usize>,
    by_path: HashMap<String, usize>,
    canonical_rank: Vec<u32>,
}

impl PartialEq for ChannelSpace {
    fn eq(&self, other: &Self) -> bool {
        self.modules == other.modules
    }
}

impl Eq for ChannelSpace {}

impl ChannelSpace {
    pub fn new(modules: Vec<ModuleChannels>) -> Result<Self> {
        let mut by_path = HashMap::with_capacity(modules.len());
        let mut offsets = Vec::with_capacity(modules.len() + 1);
        let mut acc = 0usize;
        for (i, m) in modules.iter().enumerate() {
            if by_path.insert(m.0.clone(), i).is_some() {
                return Err(Error::DuplicateName(m.0.clone()));
            }
            offsets.push(acc);
            acc += m.1;
        }
        offsets.push(acc);

        let mut order: Vec<usize> = (0..modules.len()).collect();
        order.sort_by(|&a, &b| modules[a].0.cmp(&modules[b].0));
        let mut canonical_rank = vec![0u32; modules.len()];
        for (rank, &m) in order.iter().enumerate() {
            canonical_rank[m] = rank as u32;
        }

        Ok(Self {
            modules,
            offsets,
            by_path,
            canonical_rank,
        })
    }

    pub fn modules(&self) -> &[ModuleChannels] {
        &self.modules
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn module_index(&self, path: &str) -> Option<usize> {
        self.by_path.get(path).copied()
    }

    /// Flat offset of the first channel of module `m`.
    pub fn module_offset(&self, m: usize) -> usize {
        self.offsets[m]
    }

    pub fn flat_index(&self, id: &ChannelId) -> Result<usize> {
        let m = self
            .module_index(&id.module_path)
            .ok_or_else(|| Error::UnknownModule(id.module_path.clone()))?;
        let n = self.modules[m].1;
        if id.index >= n {
            return Err(Error::ChannelOutOfRange {
                module: id.module_path.clone(),
                index: id.index,
                n_channels: n,
            });
        }
        Ok(self.offsets[m] + id.index)
    }

    /// Module index owning flat channel `flat`.
    pub fn module_of_flat(&self, flat: usize) -> usize {
        // offsets has a trailing total; the owner is the last offset <= flat
        // among non-empty modules
        let mut m = self.offsets.partition_point(|&o| o <= flat) - 1;
        while self.modules[m].1 == 0 {
            m -= 1;
        }
        m
    }

    pub fn channel_id(&self, flat: usize) -> ChannelId {
        let m = self.module_of_flat(flat);
        ChannelId::new(self.modules[m].0.clone(), flat - self.offsets[m])
    }

    /// Key whose natural order equals the canonical `ChannelId` order.
    #[inline]
    pub fn canonical_key(&self, module: usize, index: usize) -> u64 {
        ((self.canonical_rank[module] as u64) << 32) | index as u64
    }

    /// Canonical keys for every flat channel, in flat order.
    pub fn canonical_keys(&self) -> Vec<u64> {
        let mut keys = Vec::with_capacity(self.len());
        for (m, mc) in self.modules.iter().enumerate() {
            keys.extend((0..mc.1).map(|i| self.canonical_key(m, i)));
        }
        keys
    }

    /// Iterate `(module index, module entry)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &ModuleChannels)> {
        self.modules.iter().enumerate()
    }
}

impl Serialize for ChannelSpace {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.modules.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ChannelSpace {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let modules = Vec::<ModuleChannels>::deserialize(d)?;
        ChannelSpace::new(modules).map_err(serde::de::Error::custom)
    }
}
