//! Miniature decoder-style network for closed-loop tests: synthetic
//! checkpoints, planted perturbations and genuine activation dumps.
//!
//! Per token, with RMS norms `n(x) = x / sqrt(mean(x^2) + 1e-6) * w`:
//!
//! ```text
//! x = embed[token]
//! per layer:
//!   h = input_layernorm(x);  q, k, v = Wq h, Wk h, Wv h
//!   a = sigmoid(q.k / sqrt(d)) * v        (no token mixing, the default)
//!   x = x + o_proj(a)
//!   h = post_attention_layernorm(x)
//!   x = x + down_proj(silu(gate_proj(h)) * up_proj(h))
//! logits = lm_head(norm(x))
//! ```
//!
//! With `token_mixing` the gate is replaced by causal softmax attention.
//! Dot products and norms accumulate in f64; every recorded vector is
//! rounded to f32. Each trainable module's output is recorded (for the
//! MLP, `gate_proj` and `up_proj` before the nonlinearity).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelId;
use crate::checkpoint::{Checkpoint, CheckpointIndex, CheckpointWriter, TensorSpec, WriteSummary};
use crate::dtype::DType;
use crate::dump::{ActivationDump, DumpHeader, InputSetHash, TokenRole};
use crate::error::{Error, Result};
use crate::rng::{name_key, CounterRng};

pub const RMS_EPS: f64 = 1e-6;
pub const SPEC_METADATA_KEY: &str = "synth_spec";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub intermediate_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub token_mixing: bool,
    #[serde(default)]
    pub qkv_bias: bool,
}

impl SynthSpec {
    pub fn new(
        n_layers: usize,
        hidden_dim: usize,
        intermediate_dim: usize,
        vocab_size: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_layers,
            hidden_dim,
            intermediate_dim,
            vocab_size,
            seed,
            token_mixing: false,
            qkv_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.hidden_dim == 0
            || self.intermediate_dim == 0
            || self.vocab_size == 0
        {
            return Err(Error::InvalidArgument(format!(
                "all synth dimensions must be at least 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Tensors in file order.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let (d, f, v) = (self.hidden_dim, self.intermediate_dim, self.vocab_size);
        let t = |name: String, shape: Vec<usize>| TensorSpec {
            name,
            dtype: DType::F32,
            shape,
        };
        let mut out = vec![t("model.embed_tokens.weight".into(), vec![v, d])];
        for l in 0..self.n_layers {
            let p = format!("model.layers.{l}");
            out.push(t(format!("{p}.input_layernorm.weight"), vec![d]));
            for proj in ["q_proj", "k_proj", "v_proj"] {
                out.push(t(format!("{p}.self_attn.{proj}.weight"), vec![d, d]));
                if self.qkv_bias {
                    out.push(t(format!("{p}.self_attn.{proj}.bias"), vec![d]));
                }
            }
            out.push(t(format!("{p}.self_attn.o_proj.weight"), vec![d, d]));
            out.push(t(format!("{p}.post_attention_layernorm.weight"), vec![d]));
            out.push(t(format!("{p}.mlp.gate_proj.weight"), vec![f, d]));
            out.push(t(format!("{p}.mlp.up_proj.weight"), vec![f, d]));
            out.push(t(format!("{p}.mlp.down_proj.weight"), vec![d, f]));
        }
        out.push(t("model.norm.weight".into(), vec![d]));
        out.push(t("lm_head.weight".into(), vec![v, d]));
        out
    }

    pub fn metadata(&self, model_id: &str) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("model_id".to_string(), model_id.to_string()),
            (
                SPEC_METADATA_KEY.to_string(),
                serde_json::to_string(self).expect("plain struct serializes"),
            ),
        ])
    }

    pub fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        let text = meta.get(SPEC_METADATA_KEY).ok_or_else(|| {
            Error::InvalidArgument(format!("checkpoint has no {SPEC_METADATA_KEY:?} metadata"))
        })?;
        let spec: SynthSpec = serde_json::from_str(text)
            .map_err(|e| Error::MalformedHeader(format!("{SPEC_METADATA_KEY}: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

fn init_values(spec: &SynthSpec, index: usize, t: &TensorSpec) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let n: usize = t.shape.iter().product();
    let name = t.name.as_str();
    if name.ends_with("norm.weight") {
        (0..n)
            .map(|_| 1.0 + rng.random_range(-0.1f32..0.1))
            .collect()
    } else if name.ends_with(".bias") {
        (0..n).map(|_| rng.random_range(-0.1f32..0.1)).collect()
    } else if name.starts_with("model.embed_tokens") {
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    } else {
        // uniform with unit-variance outputs for unit-variance inputs
        let a = (3.0 / t.shape[1] as f32).sqrt();
        (0..n).map(|_| rng.random_range(-a..a)).collect()
    }
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes a seeded synthetic checkpoint; identical specs give identical
/// files.
pub fn synth_checkpoint(spec: &SynthSpec, path: impl AsRef<Path>) -> Result<WriteSummary> {
    spec.validate()?;
    let specs = spec.tensor_specs();
    let model_id = format!("synth-{}", spec.seed);
    let mut w = CheckpointWriter::create(path, &specs, &spec.metadata(&model_id))?;
    for (i, t) in specs.iter().enumerate() {
        w.write(&f32_bytes(&init_values(spec, i, t)))?;
    }
    w.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPlan {
    pub planted_channels: Vec<ChannelId>,
    pub delta_scale: f64,
    pub seed: u64,
}

/// Noise added to element `e` of `tensor` in a planted slice of
/// `slice_len` elements: a seeded random sign times
/// `delta_scale / sqrt(slice_len)`, so every planted slice moves by exactly
/// `delta_scale` in L2 norm.
pub fn perturbation_noise(
    plan: &PerturbationPlan,
    tensor: &str,
    element: usize,
    slice_len: usize,
) -> f64 {
    let u = CounterRng::new(plan.seed, &[name_key(tensor)]).u64_at(element as u64);
    let sign = if u >> 63 == 0 { 1.0 } else { -1.0 };
    sign * plan.delta_scale / (slice_len as f64).sqrt()
}

/// Copies `base` to `out`, adding noise to exactly the planted channel
/// slices. Every other byte, the metadata included, is kept; the output's
/// `model_id` is replaced when `model_id` is given.
pub fn perturb_checkpoint(
    base: &Checkpoint,
    plan: &PerturbationPlan,
    out: impl AsRef<Path>,
    model_id: Option<&str>,
) -> Result<WriteSummary> {
    let index = base.index();
    let mut touched: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
    for id in &plan.planted_channels {
        let slice = index.channel_slice(id)?;
        let len = slice.element_count();
        for part in slice.parts {
            let entry = touched.entry(part.tensor.clone()).or_default();
            entry.extend(part.element_indices().into_iter().map(|e| (e, len)));
        }
    }
    let mut metadata = index.metadata().clone();
    if let Some(id) = model_id {
        metadata.insert("model_id".to_string(), id.to_string());
    }
    let specs: Vec<TensorSpec> = index.tensors().iter().map(|t| t.spec()).collect();
    let mut w = CheckpointWriter::create(out, &specs, &metadata)?;
    for t in index.tensors() {
        match touched.get_mut(&t.name) {
            None => base.for_each_chunk(t, 4 << 20, |_, b| w.write(b))?,
            Some(elements) => {
                elements.sort_unstable();
                elements.dedup();
                let mut bytes = base.read_tensor_bytes(&t.name)?;
                for &(e, len) in elements.iter() {
                    let v = t.dtype.decode(&bytes, e) + perturbation_noise(plan, &t.name, e, len);
                    t.dtype.encode(v, &mut bytes, e);
                }
                w.write(&bytes)?;
            }
        }
    }
    w.finish()
}

struct Layer {
    input_norm: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    q_bias: Option<Vec<f32>>,
    k_bias: Option<Vec<f32>>,
    v_bias: Option<Vec<f32>>,
    o: Vec<f32>,
    post_norm: Vec<f32>,
    gate: Vec<f32>,
    up: Vec<f32>,
    down: Vec<f32>,
}

/// Weights of a synthetic model, loaded once for repeated forward passes.
pub struct MiniModel {
    pub spec: SynthSpec,
    model_id: String,
    index: CheckpointIndex,
    embed: Vec<f32>,
    layers: Vec<Layer>,
    final_norm: Vec<f32>,
    lm_head: Vec<f32>,
}

fn linear(w: &[f32], bias: Option<&[f32]>, x: &[f32]) -> Vec<f32> {
    let n_in = x.len();
    w.chunks_exact(n_in)
        .enumerate()
        .map(|(i, row)| {
            let mut s = 0f64;
            for (a, b) in row.iter().zip(x) {
                s += *a as f64 * *b as f64;
            }
            if let Some(b) = bias {
                s += b[i] as f64;
            }
            s as f32
        })
        .collect()
}

fn rms_norm(x: &[f32], w: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / x.len() as f64;
    let scale = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter()
        .zip(w)
        .map(|(v, g)| (*v as f64 * scale * *g as f64) as f32)
        .collect()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MiniModel {
    pub fn load(ck: &Checkpoint) -> Result<Self> {
        let spec = SynthSpec::from_metadata(ck.index().metadata())?;
        let want = spec.tensor_specs();
        let have: Vec<TensorSpec> = ck.index().tensors().iter().map(|t| t.spec()).collect();
        let same_layout = want.len() == have.len()
            && want
                .iter()
                .zip(&have)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape);
        if !same_layout {
            return Err(Error::ShapeMismatch(
                "checkpoint tensors do not match its synth spec".into(),
            ));
        }
        let get = |name: &str| ck.read_tensor_f32(name);
        let opt = |name: String| -> Result<Option<Vec<f32>>> {
            if spec.qkv_bias {
                get(&name).map(Some)
            } else {
                Ok(None)
            }
        };
        let mut layers = Vec::with_capacity(spec.n_layers);
        for l in 0..spec.n_layers {
            let p = format!("model.layers.{l}");
            layers.push(Layer {
                input_norm: get(&format!("{p}.input_layernorm.weight"))?,
                q: get(&format!("{p}.self_attn.q_proj.weight"))?,
                k: get(&format!("{p}.self_attn.k_proj.weight"))?,
                v: get(&format!("{p}.self_attn.v_proj.weight"))?,
                q_bias: opt(format!("{p}.self_attn.q_proj.bias"))?,
                k_bias: opt(format!("{p}.self_attn.k_proj.bias"))?,
                v_bias: opt(format!("{p}.self_attn.v_proj.bias"))?,
                o: get(&format!("{p}.self_attn.o_proj.weight"))?,
                post_norm: get(&format!("{p}.post_attention_layernorm.weight"))?,
                gate: get(&format!("{p}.mlp.gate_proj.weight"))?,
                up: get(&format!("{p}.mlp.up_proj.weight"))?,
                down: get(&format!("{p}.mlp.down_proj.weight"))?,
            });
        }
        Ok(Self {
            spec,
            model_id: ck.model_id(),
            index: ck.index().clone(),
            embed: get("model.embed_tokens.weight")?,
            layers,
            final_norm: get("model.norm.weight")?,
            lm_head: get("lm_head.weight")?,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// Recorded outputs per token, laid out in the checkpoint's channel
    /// space order.
    pub fn forward(&self, tokens: &[u32]) -> Result<Vec<Vec<f32>>> {
        let d = self.spec.hidden_dim;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.spec.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocab size {}",
                self.spec.vocab_size
            )));
        }
        let space = self.index.channel_space();
        let width = space.len();
        let mut frames = vec![vec![0f32; width]; tokens.len()];
        let offset = |path: &str| -> usize {
            let m = space.module_index(path).expect("module of synth layout");
            space.module_offset(m)
        };
        let record = |frames: &mut Vec<Vec<f32>>, path: &str, per_token: &[Vec<f32>]| {
            let o = offset(path);
            for (f, v) in frames.iter_mut().zip(per_token) {
                f[o..o + v.len()].copy_from_slice(v);
            }
        };

        let mut x: Vec<Vec<f32>> = tokens
            .iter()
            .map(|&t| self.embed[t as usize * d..(t as usize + 1) * d].to_vec())
            .collect();
        record(&mut frames, "model.embed_tokens", &x);

        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("model.layers.{l}");
            let h: Vec<Vec<f32>> = x.iter().map(|v| rms_norm(v, &layer.input_norm)).collect();
            record(&mut frames, &format!("{p}.input_layernorm"), &h);
            let q: Vec<Vec<f32>> = h
                .iter()
                .map(|v| linear(&layer.q, layer.q_bias.as_deref(), v))
                .collect();
            let k: Vec<Vec<f32>> = h
                .iter()
                .map(|v| linear(&layer.k, layer.k_bias.as_deref(), v))
                .collect();
            let vv: Vec<Vec<f32>> = h
                .iter()
                .map(|v| linear(&layer.v, layer.v_bias.as_deref(), v))
                .collect();
            record(&mut frames, &format!("{p}.self_attn.q_proj"), &q);
            record(&mut frames, &format!("{p}.self_attn.k_proj"), &k);
            record(&mut frames, &format!("{p}.self_attn.v_proj"), &vv);
            let inv_sqrt_d = 1.0 / (d as f64).sqrt();
            let attn: Vec<Vec<f32>> = if self.spec.token_mixing {
                (0..tokens.len())
                    .map(|t| {
                        let scores: Vec<f64> =
                            (0..=t).map(|s| dot(&q[t], &k[s]) * inv_sqrt_d).collect();
                        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                        let z: f64 = w.iter().sum();
                        (0..d)
                            .map(|j| {
                                ((0..=t).map(|s| w[s] * vv[s][j] as f64).sum::<f64>() / z) as f32
                            })
                            .collect()
                    })
                    .collect()
            } else {
                (0..tokens.len())
                    .map(|t| {
                        let g = sigmoid(dot(&q[t], &k[t]) * inv_sqrt_d);
                        vv[t].iter().map(|v| (g * *v as f64) as f32).collect()
                    })
                    .collect()
            };
            let o: Vec<Vec<f32>> = attn.iter().map(|v| linear(&layer.o, None, v)).collect();
            record(&mut frames, &format!("{p}.self_attn.o_proj"), &o);
            for (xt, ot) in x.iter_mut().zip(&o) {
                xt.iter_mut().zip(ot).for_each(|(a, b)| *a += b);
            }
            let h2: Vec<Vec<f32>> = x.iter().map(|v| rms_norm(v, &layer.post_norm)).collect();
            record(&mut frames, &format!("{p}.post_attention_layernorm"), &h2);
            let gate: Vec<Vec<f32>> = h2.iter().map(|v| linear(&layer.gate, None, v)).collect();
            let up: Vec<Vec<f32>> = h2.iter().map(|v| linear(&layer.up, None, v)).collect();
            record(&mut frames, &format!("{p}.mlp.gate_proj"), &gate);
            record(&mut frames, &format!("{p}.mlp.up_proj"), &up);
            let down: Vec<Vec<f32>> = gate
                .iter()
                .zip(&up)
                .map(|(g, u)| {
                    let m: Vec<f32> = g
                        .iter()
                        .zip(u)
                        .map(|(g, u)| (*g as f64 * sigmoid(*g as f64) * *u as f64) as f32)
                        .collect();
                    linear(&layer.down, None, &m)
                })
                .collect();
            record(&mut frames, &format!("{p}.mlp.down_proj"), &down);
            for (xt, dt) in x.iter_mut().zip(&down) {
                xt.iter_mut().zip(dt).for_each(|(a, b)| *a += b);
            }
        }
        let n: Vec<Vec<f32>> = x.iter().map(|v| rms_norm(v, &self.final_norm)).collect();
        record(&mut frames, "model.norm", &n);
        let logits: Vec<Vec<f32>> = n.iter().map(|v| linear(&self.lm_head, None, v)).collect();
        record(&mut frames, "lm_head", &logits);
        Ok(frames)
    }

    pub fn record(&self, tokens: &[u32], roles: &[TokenRole]) -> Result<ActivationDump> {
        if roles.len() != tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "{} roles for {} tokens",
                roles.len(),
                tokens.len()
            )));
        }
        let frames = self.forward(tokens)?;
        Ok(ActivationDump {
            header: DumpHeader {
                model_id: self.model_id.clone(),
                input_set_hash: InputSetHash::of_tokens(tokens),
                module_table: self.index.channel_space().clone(),
                token_count: tokens.len() as u64,
                token_roles: roles.to_vec(),
                value_dtype: DType::F32,
            },
            frames,
        })
    }
}

/// Runs the forward pass and returns the dump of every module's outputs.
pub fn forward_record(
    ck: &Checkpoint,
    tokens: &[u32],
    roles: &[TokenRole],
) -> Result<ActivationDump> {
    MiniModel::load(ck)?.record(tokens, roles)
}

/// Deterministic pseudo-random token ids.
pub fn random_tokens(vocab_size: usize, count: usize, seed: u64) -> Vec<u32> {
    let rng = CounterRng::new(seed, &[name_key("tokens")]);
    (0..count)
        .map(|i| (rng.u64_at(i as u64) % vocab_size as u64) as u32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_table_by_construction() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.safetensors");
        synth_checkpoint(&SynthSpec::new(2, 16, 24, 64, 3), &p).unwrap();
        let ck = Checkpoint::open(&p).unwrap();
        let paths: Vec<&str> = ck
            .index()
            .modules()
            .iter()
            .map(|m| m.path.as_str())
            .collect();
        assert_eq!(paths.len(), 1 + 2 * 9 + 2);
        assert_eq!(paths[0], "model.embed_tokens");
        assert_eq!(paths[paths.len() - 1], "lm_head");
        assert_eq!(
            ck.index().channel_space().len(),
            16 + 2 * (7 * 16 + 2 * 24) + 16 + 64
        );
    }

    #[test]
    fn rejects_out_of_range_token() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.safetensors");
        synth_checkpoint(&SynthSpec::new(1, 4, 4, 8, 0), &p).unwrap();
        let ck = Checkpoint::open(&p).unwrap();
        let err = forward_record(&ck, &[8], &[TokenRole::Answer]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn perturbation_touches_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("b.safetensors");
        let pert = dir.path().join("p.safetensors");
        synth_checkpoint(&SynthSpec::new(1, 8, 8, 16, 1), &base).unwrap();
        let b = Checkpoint::open(&base).unwrap();
        let plan = PerturbationPlan {
            planted_channels: vec![ChannelId::new("model.layers.0.mlp.up_proj", 3)],
            delta_scale: 0.5,
            seed: 4,
        };
        perturb_checkpoint(&b, &plan, &pert, None).unwrap();
        let p = Checkpoint::open(&pert).unwrap();
        for t in b.index().tensors() {
            let x = b.read_tensor_f32(&t.name).unwrap();
            let y = p.read_tensor_f32(&t.name).unwrap();
            let differ: Vec<usize> = (0..x.len()).filter(|&i| x[i] != y[i]).collect();
            if t.name == "model.layers.0.mlp.up_proj.weight" {
                assert_eq!(differ, (24..32).collect::<Vec<_>>());
            } else {
                assert!(differ.is_empty(), "{}", t.name);
            }
        }
    }
}
