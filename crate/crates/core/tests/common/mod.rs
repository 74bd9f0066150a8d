#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use abltx_core::checkpoint::{Checkpoint, CheckpointWriter, TensorSpec, WriteSummary};
use abltx_core::dtype::DType;
use abltx_core::rng::{name_key, CounterRng};

/// Decoder-like tensor layout: `layers` blocks of q/k/v/o plus gate/up/down
/// and two norms, an embedding, a final norm, a head and one unmapped
/// tensor. `dtype_of` picks each tensor's dtype.
pub fn layout(
    layers: usize,
    d: usize,
    f: usize,
    vocab: usize,
    dtype_of: impl Fn(&str) -> DType,
) -> Vec<TensorSpec> {
    let mut v: Vec<(String, Vec<usize>)> =
        vec![("model.embed_tokens.weight".into(), vec![vocab, d])];
    for l in 0..layers {
        let p = format!("model.layers.{l}");
        v.push((format!("{p}.input_layernorm.weight"), vec![d]));
        for proj in ["q_proj", "k_proj", "v_proj"] {
            v.push((format!("{p}.self_attn.{proj}.weight"), vec![d, d]));
            v.push((format!("{p}.self_attn.{proj}.bias"), vec![d]));
        }
        v.push((format!("{p}.self_attn.o_proj.weight"), vec![d, d]));
        v.push((format!("{p}.post_attention_layernorm.weight"), vec![d]));
        v.push((format!("{p}.mlp.gate_proj.weight"), vec![f, d]));
        v.push((format!("{p}.mlp.up_proj.weight"), vec![f, d]));
        v.push((format!("{p}.mlp.down_proj.weight"), vec![d, f]));
    }
    v.push(("model.norm.weight".into(), vec![d]));
    v.push(("lm_head.weight".into(), vec![vocab, d]));
    v.push(("model.rotary_emb.inv_freq".into(), vec![d / 2]));
    v.into_iter()
        .map(|(name, shape)| TensorSpec {
            dtype: dtype_of(&name),
            name,
            shape,
        })
        .collect()
}

/// Value of element `e` of tensor `name` for a random checkpoint.
pub fn random_value(seed: u64, name: &str, e: usize) -> f64 {
    let u = CounterRng::new(seed, &[name_key(name)]).unit_at(e as u64);
    (u - 0.5) * 0.25
}

/// Writes a checkpoint whose values are `value(name, element)`, streamed
/// in chunks.
pub fn write_checkpoint(
    path: &Path,
    specs: &[TensorSpec],
    model_id: &str,
    value: impl Fn(&str, usize) -> f64,
) -> WriteSummary {
    let meta = BTreeMap::from([("model_id".to_string(), model_id.to_string())]);
    let mut w = CheckpointWriter::create(path, specs, &meta).unwrap();
    let chunk = 1 << 20;
    for s in specs {
        let n: usize = s.shape.iter().product();
        let mut start = 0;
        let mut buf = Vec::new();
        while start < n {
            let m = chunk.min(n - start);
            buf.resize(m * s.dtype.size(), 0);
            for k in 0..m {
                s.dtype.encode(value(&s.name, start + k), &mut buf, k);
            }
            w.write(&buf).unwrap();
            start += m;
        }
    }
    w.finish().unwrap()
}

/// Writes a checkpoint whose values come from a generator built once per
/// tensor, for fixtures too large for a per-element name lookup.
pub fn write_checkpoint_with<F: Fn(usize) -> f64>(
    path: &Path,
    specs: &[TensorSpec],
    model_id: &str,
    per_tensor: impl Fn(&TensorSpec) -> F,
) -> WriteSummary {
    let meta = BTreeMap::from([("model_id".to_string(), model_id.to_string())]);
    let mut w = CheckpointWriter::create(path, specs, &meta).unwrap();
    let chunk = 1 << 20;
    let mut buf = Vec::new();
    for s in specs {
        let value = per_tensor(s);
        let n: usize = s.shape.iter().product();
        let mut start = 0;
        while start < n {
            let m = chunk.min(n - start);
            buf.resize(m * s.dtype.size(), 0);
            for k in 0..m {
                s.dtype.encode(value(start + k), &mut buf, k);
            }
            w.write(&buf).unwrap();
            start += m;
        }
    }
    w.finish().unwrap()
}

/// Same values as [`random_value`], generated per tensor.
pub fn random_checkpoint(
    path: &Path,
    specs: &[TensorSpec],
    model_id: &str,
    seed: u64,
) -> WriteSummary {
    write_checkpoint_with(path, specs, model_id, |s| {
        let rng = CounterRng::new(seed, &[name_key(&s.name)]);
        move |e| (rng.unit_at(e as u64) - 0.5) * 0.25
    })
}

/// BF16 for q_proj and the embedding, F16 for up_proj and norms, F32
/// elsewhere.
pub fn mixed_dtype(name: &str) -> DType {
    if name.contains("q_proj") || name.contains("embed") {
        DType::BF16
    } else if name.contains("up_proj") || name.ends_with("norm.weight") {
        DType::F16
    } else {
        DType::F32
    }
}

pub fn file_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

/// Raw bytes of every element in a channel slice, in slice order.
pub fn slice_bytes(ck: &Checkpoint, id: &abltx_core::ChannelId) -> Vec<u8> {
    let slice = ck.index().channel_slice(id).unwrap();
    let mut out = Vec::new();
    for part in slice.parts {
        let t = ck.index().tensor(&part.tensor).unwrap();
        let bytes = ck.read_tensor_bytes(&part.tensor).unwrap();
        let size = t.dtype.size();
        for e in part.element_indices() {
            out.extend_from_slice(&bytes[e * size..(e + 1) * size]);
        }
    }
    out
}
