use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::{json, Value};

use abltx_core::checkpoint::Checkpoint;
use abltx_core::dump::{read_dump, reduce_pair, DiffDump, RoleFilter, TokenRole};
use abltx_core::mask::{
    build_mask, overlap_matrix, read_mask, selection_count, write_overlap_csv, write_overlap_table,
    ChannelSet, MaskFile, UnifiedMask,
};
use abltx_core::merge::{
    manifest_path, merge, MergeManifest, MergeOptions, MergePlan, MergeSource, Method,
    MethodParams, SourceMask,
};
use abltx_core::miniforward::{
    forward_record, perturb_checkpoint, random_tokens, synth_checkpoint, PerturbationPlan,
    SynthSpec,
};
use abltx_core::rng::{name_key, CounterRng};
use abltx_core::stats::{
    activation_stats, ccdf, weight_stats, write_ccdf_csv, ChannelStatVector, Grouping, Thresholds,
};
use abltx_core::{ChannelId, Error, Result};

use crate::args::*;

pub struct Ctx {
    pub chunk_bytes: usize,
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn finish(w: BufWriter<File>) -> Result<()> {
    w.into_inner()
        .map_err(|e| Error::Io(e.into_error()))?
        .sync_all()?;
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<Value> {
    let spec = match &a.spec {
        Some(p) => serde_json::from_str::<SynthSpec>(&fs::read_to_string(p)?)
            .map_err(|e| Error::InvalidArgument(format!("spec {}: {e}", p.display())))?,
        None => SynthSpec {
            n_layers: a.n_layers,
            hidden_dim: a.hidden_dim,
            intermediate_dim: a.intermediate_dim,
            vocab_size: a.vocab_size,
            seed: a.seed,
            token_mixing: a.token_mixing,
            qkv_bias: a.qkv_bias,
        },
    };
    let summary = synth_checkpoint(&spec, &a.out)?;
    let ck = Checkpoint::open(&a.out)?;
    SynthSpec::from_metadata(ck.index().metadata())?;
    Ok(json!({
        "out": path_str(&a.out),
        "bytes": summary.bytes,
        "sha256": summary.sha256,
        "channels": ck.index().channel_space().len(),
    }))
}

/// Sidecar listing the planted channels of a perturbed checkpoint.
pub fn planted_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".planted.json");
    PathBuf::from(s)
}

pub fn perturb(a: &PerturbArgs) -> Result<Value> {
    let base = Checkpoint::open(&a.base)?;
    let space = base.index().channel_space();
    let mut planted: BTreeSet<ChannelId> = BTreeSet::new();
    for c in &a.channels {
        let id: ChannelId = c.parse()?;
        space.flat_index(&id)?;
        planted.insert(id);
    }
    if a.random_count > 0 {
        let eligible: Vec<usize> = (0..space.len())
            .filter(|&f| {
                let m = &space.modules()[space.module_of_flat(f)].0;
                !a.exclude.iter().any(|s| m.ends_with(s.as_str()))
            })
            .collect();
        let want = planted.len() + a.random_count;
        if want > planted.len() + eligible.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot plant {} random channels among {} eligible",
                a.random_count,
                eligible.len()
            )));
        }
        let rng = CounterRng::new(a.seed, &[name_key("plant")]);
        let mut i = 0u64;
        while planted.len() < want {
            let f = eligible[(rng.u64_at(i) % eligible.len() as u64) as usize];
            planted.insert(space.channel_id(f));
            i += 1;
        }
    }
    let plan = PerturbationPlan {
        planted_channels: planted.into_iter().collect(),
        delta_scale: a.delta_scale,
        seed: a.seed,
    };
    let summary = perturb_checkpoint(&base, &plan, &a.out, a.model_id.as_deref())?;
    let sidecar = planted_path(&a.out);
    fs::write(&sidecar, serde_json::to_string_pretty(&plan)? + "\n")?;
    let out = Checkpoint::open(&a.out)?;
    base.index().check_compatible(out.index())?;
    Ok(json!({
        "out": path_str(&a.out),
        "sha256": summary.sha256,
        "planted": plan.planted_channels.len(),
        "planted_file": path_str(&sidecar),
    }))
}

#[derive(Deserialize)]
struct TokenFile {
    tokens: Vec<u32>,
    roles: Option<String>,
}

fn parse_roles(s: &str) -> Result<Vec<TokenRole>> {
    s.chars()
        .map(|c| match c {
            'P' => Ok(TokenRole::Prompt),
            'A' => Ok(TokenRole::Answer),
            other => Err(Error::InvalidArgument(format!(
                "token role {other:?} is not P or A"
            ))),
        })
        .collect()
}

pub fn forward(a: &ForwardArgs) -> Result<Value> {
    let ck = Checkpoint::open(&a.checkpoint)?;
    let (tokens, roles) = match (&a.tokens, a.random_tokens) {
        (Some(p), _) => {
            let f: TokenFile = serde_json::from_str(&fs::read_to_string(p)?)
                .map_err(|e| Error::InvalidArgument(format!("tokens {}: {e}", p.display())))?;
            let roles = match &f.roles {
                Some(r) => parse_roles(r)?,
                None => vec![TokenRole::Answer; f.tokens.len()],
            };
            (f.tokens, roles)
        }
        (None, Some(n)) => {
            let spec = SynthSpec::from_metadata(ck.index().metadata())?;
            let roles = (0..n)
                .map(|i| {
                    if i < a.prompt_tokens {
                        TokenRole::Prompt
                    } else {
                        TokenRole::Answer
                    }
                })
                .collect();
            (random_tokens(spec.vocab_size, n, a.token_seed), roles)
        }
        (None, None) => {
            return Err(Error::InvalidArgument(
                "give --tokens or --random-tokens".into(),
            ));
        }
    };
    let dump = forward_record(&ck, &tokens, &roles)?;
    dump.write(&a.out)?;
    let mut r = read_dump(&a.out)?;
    let mut frames = 0u64;
    while r.next_frame()?.is_some() {
        frames += 1;
    }
    Ok(json!({
        "out": path_str(&a.out),
        "tokens": frames,
        "channels": dump.header.frame_len(),
        "input_set_hash": dump.header.input_set_hash.to_hex(),
    }))
}

pub fn diff(a: &DiffArgs, ctx: &Ctx) -> Result<Value> {
    let filter = match a.roles {
        Roles::Answer => RoleFilter::AnswerOnly,
        Roles::All => RoleFilter::All,
        Roles::Prompt => RoleFilter::PromptOnly,
    };
    let mut ra = read_dump(&a.dump_a)?;
    let mut rb = read_dump(&a.dump_b)?;
    let d = reduce_pair(&mut ra, &mut rb, filter, ctx.chunk_bytes)?;
    d.write(&a.out)?;
    let back = DiffDump::read(&a.out)?;
    Ok(json!({
        "out": path_str(&a.out),
        "channels": back.sum_abs_diff.len(),
        "tokens": back.token_count.first().copied().unwrap_or(0),
    }))
}

fn stat_summary(out: &Path) -> Result<Value> {
    let back = ChannelStatVector::read(out)?;
    let max = back.values.iter().copied().fold(0.0, f64::max);
    Ok(json!({ "out": path_str(out), "channels": back.len(), "max": max }))
}

pub fn stats(a: &StatsArgs) -> Result<Value> {
    let d = DiffDump::read(&a.diff)?;
    activation_stats(&d, &a.ability_tag)?.write(&a.out)?;
    stat_summary(&a.out)
}

pub fn weightdiff(a: &WeightdiffArgs, ctx: &Ctx) -> Result<Value> {
    let t = Checkpoint::open(&a.target)?;
    let b = Checkpoint::open(&a.ability)?;
    weight_stats(&t, &b, &a.ability_tag, ctx.chunk_bytes)?.write(&a.out)?;
    stat_summary(&a.out)
}

pub fn ccdf_cmd(a: &CcdfArgs) -> Result<Value> {
    let s = ChannelStatVector::read(&a.stats)?;
    let grouping = match a.group {
        Group::Global => Grouping::Global,
        Group::Layer => Grouping::PerLayer,
        Group::ModuleType => Grouping::PerModuleType,
    };
    let thresholds = if a.thresholds.is_empty() {
        Thresholds::Auto(a.points)
    } else {
        Thresholds::Explicit(a.thresholds.clone())
    };
    let curves = ccdf(&s, grouping, &thresholds)?;
    finish(write_ccdf_csv(&curves, create(&a.out)?)?)?;
    let rows = fs::read_to_string(&a.out)?
        .lines()
        .count()
        .saturating_sub(1);
    Ok(json!({
        "out": path_str(&a.out),
        "groups": curves.iter().map(|c| c.group_key.clone()).collect::<Vec<_>>(),
        "rows": rows,
    }))
}

pub fn mask(a: &MaskArgs) -> Result<Value> {
    let s = ChannelStatVector::read(&a.stats)?;
    let m = build_mask(&s, a.p)?;
    m.write(&a.out)?;
    let back = read_mask(&a.out)?;
    Ok(json!({
        "out": path_str(&a.out),
        "channels": back.as_set().channels().len(),
        "expected": selection_count(s.len(), a.p)?,
        "total_channels": s.len(),
    }))
}

pub fn union(a: &UnionArgs) -> Result<Value> {
    let mut acc: Option<UnifiedMask> = None;
    for p in &a.masks {
        let m = read_mask(p)?.into_unified();
        acc = Some(match acc {
            None => m,
            Some(prev) => prev.union(&m)?,
        });
    }
    let u = acc.expect("at least one mask is required by the parser");
    u.write(&a.out)?;
    let back = read_mask(&a.out)?;
    Ok(json!({
        "out": path_str(&a.out),
        "source_model_id": u.source_model_id,
        "constituent_tags": u.constituent_tags,
        "channels": back.as_set().channels().len(),
    }))
}

pub fn overlap(a: &OverlapArgs) -> Result<Value> {
    let masks: Vec<MaskFile> = a.masks.iter().map(read_mask).collect::<Result<_>>()?;
    let labels: Vec<String> = if a.labels.is_empty() {
        masks
            .iter()
            .map(|m| m.as_set().label().to_string())
            .collect()
    } else if a.labels.len() == masks.len() {
        a.labels.clone()
    } else {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} masks",
            a.labels.len(),
            masks.len()
        )));
    };
    let sets: Vec<&dyn ChannelSet> = masks.iter().map(|m| m.as_set()).collect();
    let table = overlap_matrix(&sets)?;
    finish(write_overlap_csv(&labels, &table, create(&a.out)?)?)?;
    if let Some(t) = &a.table {
        finish(write_overlap_table(&labels, &table, create(t)?)?)?;
    }
    let rows = fs::read_to_string(&a.out)?
        .lines()
        .count()
        .saturating_sub(1);
    Ok(json!({ "out": path_str(&a.out), "rows": rows, "labels": labels }))
}

/// Parses `<checkpoint>:<mask|full>[:<lambda>]`, splitting from the right
/// so checkpoint paths may contain colons.
pub fn parse_source(spec: &str, default_lambda: f64) -> Result<MergeSource> {
    let bad = || {
        Error::InvalidArgument(format!(
            "source {spec:?} is not <checkpoint>:<mask|full>[:<lambda>]"
        ))
    };
    let (rest, last) = spec.rsplit_once(':').ok_or_else(bad)?;
    let (ckpt, mask, lambda) = match last.parse::<f64>() {
        Ok(l) => {
            let (ckpt, mask) = rest.rsplit_once(':').ok_or_else(bad)?;
            (ckpt, mask, l)
        }
        Err(_) => (rest, last, default_lambda),
    };
    if ckpt.is_empty() || mask.is_empty() {
        return Err(bad());
    }
    let mask = if mask == "full" {
        SourceMask::Full
    } else {
        SourceMask::Masked(read_mask(mask)?.into_unified())
    };
    Ok(MergeSource {
        checkpoint: PathBuf::from(ckpt),
        mask,
        lambda,
    })
}

pub fn merge_cmd(a: &MergeArgs, ctx: &Ctx) -> Result<Value> {
    let sources = a
        .sources
        .iter()
        .map(|s| parse_source(s, a.lambda))
        .collect::<Result<Vec<_>>>()?;
    let (method, params) = match a.method {
        MethodArg::Act => (Method::Act, MethodParams::default()),
        MethodArg::Ta => (Method::TaskArithmetic, MethodParams::default()),
        MethodArg::Ties => (
            Method::Ties,
            MethodParams {
                ties_trim_fraction: Some(a.trim_fraction),
                dare_drop_prob: None,
            },
        ),
        MethodArg::Dare => (
            Method::Dare,
            MethodParams {
                ties_trim_fraction: None,
                dare_drop_prob: Some(a.drop_prob),
            },
        ),
    };
    let plan = MergePlan {
        target: a.target.clone(),
        sources,
        method,
        params,
        seed: a.seed,
    };
    let manifest = merge(
        &plan,
        &a.out,
        MergeOptions {
            chunk_bytes: ctx.chunk_bytes,
        },
    )?;
    let mpath = manifest_path(&a.out);
    let back = MergeManifest::read(&mpath)?;
    let ck = Checkpoint::open(&a.out)?;
    let size = fs::metadata(ck.path())?.len();
    if size != back.output_bytes || back != manifest {
        return Err(Error::MalformedHeader(format!(
            "merged output {} does not match its manifest",
            a.out.display()
        )));
    }
    Ok(json!({
        "out": path_str(&a.out),
        "manifest": path_str(&mpath),
        "sha256": manifest.output_sha256,
        "lambdas": manifest.sources.iter().map(|s| s.lambda).collect::<Vec<_>>(),
    }))
}

pub fn recovery(a: &RecoveryArgs) -> Result<Value> {
    let mask = read_mask(&a.mask)?;
    let selected: BTreeSet<&ChannelId> = mask.as_set().channels().iter().collect();
    let plan: PerturbationPlan = serde_json::from_str(&fs::read_to_string(&a.planted)?)
        .map_err(|e| Error::InvalidArgument(format!("planted {}: {e}", a.planted.display())))?;
    let stats = a.stats.as_ref().map(ChannelStatVector::read).transpose()?;
    let mut effective = Vec::new();
    for c in &plan.planted_channels {
        let keep = match &stats {
            Some(s) => s.get(c)? > 0.0,
            None => true,
        };
        if keep {
            effective.push(c);
        }
    }
    let missed: Vec<String> = effective
        .iter()
        .filter(|c| !selected.contains(*c))
        .map(|c| c.to_string())
        .collect();
    let recovered = effective.len() - missed.len();
    let report = json!({
        "planted": plan.planted_channels.len(),
        "effective": effective.len(),
        "recovered": recovered,
        "recovery_rate": if effective.is_empty() { 1.0 } else { recovered as f64 / effective.len() as f64 },
        "mask_channels": selected.len(),
        "missed": missed,
    });
    if let Some(out) = &a.out {
        let mut w = create(out)?;
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.write_all(b"\n")?;
        finish(w)?;
        serde_json::from_str::<Value>(&fs::read_to_string(out)?)?;
    }
    Ok(report)
}
