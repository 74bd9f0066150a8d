mod common;

use std::collections::BTreeMap;

use abltx_core::checkpoint::{Checkpoint, CheckpointWriter};
use abltx_core::dump::{reduce_pair_files, RoleFilter, TokenRole};
use abltx_core::mask::UnifiedMask;
use abltx_core::merge::{
    merge, MergeOptions, MergePlan, MergeSource, Method, MethodParams, SourceMask,
};
use abltx_core::miniforward::{
    forward_record, perturb_checkpoint, random_tokens, synth_checkpoint, MiniModel,
    PerturbationPlan, SynthSpec,
};
use abltx_core::stats::{activation_stats, weight_stats};
use abltx_core::ChannelId;

/// Straight-line f64 evaluation of the synthetic network, one token at a
/// time, reading weights by name.
fn reference_forward(ck: &Checkpoint, spec: &SynthSpec, token: u32) -> BTreeMap<String, Vec<f64>> {
    let w = |n: &str| ck.read_tensor_f64(&format!("{n}.weight")).unwrap();
    let b = |n: &str| -> Option<Vec<f64>> {
        ck.index()
            .tensor(&format!("{n}.bias"))
            .map(|_| ck.read_tensor_f64(&format!("{n}.bias")).unwrap())
    };
    let d = spec.hidden_dim;
    let matvec = |m: &[f64], bias: Option<Vec<f64>>, x: &[f64]| -> Vec<f64> {
        let rows = m.len() / x.len();
        (0..rows)
            .map(|r| {
                let mut s = 0.0;
                for c in 0..x.len() {
                    s += m[r * x.len() + c] * x[c];
                }
                s + bias.as_ref().map_or(0.0, |b| b[r])
            })
            .collect()
    };
    let norm = |x: &[f64], g: &[f64]| -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        x.iter()
            .zip(g)
            .map(|(v, g)| v / (ms + 1e-6).sqrt() * g)
            .collect()
    };
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());

    let mut out = BTreeMap::new();
    let e = w("model.embed_tokens");
    let mut x: Vec<f64> = e[token as usize * d..(token as usize + 1) * d].to_vec();
    out.insert("model.embed_tokens".to_string(), x.clone());
    for l in 0..spec.n_layers {
        let p = format!("model.layers.{l}");
        let h = norm(&x, &w(&format!("{p}.input_layernorm")));
        let q = matvec(
            &w(&format!("{p}.self_attn.q_proj")),
            b(&format!("{p}.self_attn.q_proj")),
            &h,
        );
        let k = matvec(
            &w(&format!("{p}.self_attn.k_proj")),
            b(&format!("{p}.self_attn.k_proj")),
            &h,
        );
        let v = matvec(
            &w(&format!("{p}.self_attn.v_proj")),
            b(&format!("{p}.self_attn.v_proj")),
            &h,
        );
        let g = sig(q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt());
        let a: Vec<f64> = v.iter().map(|v| g * v).collect();
        let o = matvec(&w(&format!("{p}.self_attn.o_proj")), None, &a);
        for i in 0..d {
            x[i] += o[i];
        }
        let h2 = norm(&x, &w(&format!("{p}.post_attention_layernorm")));
        let gate = matvec(&w(&format!("{p}.mlp.gate_proj")), None, &h2);
        let up = matvec(&w(&format!("{p}.mlp.up_proj")), None, &h2);
        let m: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g * sig(*g) * u).collect();
        let down = matvec(&w(&format!("{p}.mlp.down_proj")), None, &m);
        for i in 0..d {
            x[i] += down[i];
        }
        out.insert(format!("{p}.input_layernorm"), h);
        out.insert(format!("{p}.self_attn.q_proj"), q);
        out.insert(format!("{p}.self_attn.k_proj"), k);
        out.insert(format!("{p}.self_attn.v_proj"), v);
        out.insert(format!("{p}.self_attn.o_proj"), o);
        out.insert(format!("{p}.post_attention_layernorm"), h2);
        out.insert(format!("{p}.mlp.gate_proj"), gate);
        out.insert(format!("{p}.mlp.up_proj"), up);
        out.insert(format!("{p}.mlp.down_proj"), down);
    }
    let n = norm(&x, &w("model.norm"));
    out.insert("lm_head".to_string(), matvec(&w("lm_head"), None, &n));
    out.insert("model.norm".to_string(), n);
    out
}

/// `rel` bounds the error relative to the larger of the element and its
/// module's RMS output; f32 rounding compounds with depth.
fn check_against_reference(spec: SynthSpec, tokens: &[u32], rel: f64) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.safetensors");
    synth_checkpoint(&spec, &p).unwrap();
    let ck = Checkpoint::open(&p).unwrap();
    let roles = vec![TokenRole::Answer; tokens.len()];
    let dump = forward_record(&ck, tokens, &roles).unwrap();
    let space = &dump.header.module_table;
    for (t, &tok) in tokens.iter().enumerate() {
        let reference = reference_forward(&ck, &spec, tok);
        assert_eq!(reference.len(), space.modules().len());
        for (m, mc) in space.iter() {
            let want = &reference[&mc.0];
            let off = space.module_offset(m);
            let got = &dump.frames[t][off..off + mc.1];
            let rms = (want.iter().map(|v| v * v).sum::<f64>() / want.len() as f64).sqrt();
            for (g, w) in got.iter().zip(want) {
                let tol = rel * w.abs().max(rms);
                assert!((*g as f64 - w).abs() <= tol, "{}: {g} vs {w}", mc.0);
            }
        }
    }
}

#[test]
fn tiny_model_matches_scalar_reference() {
    check_against_reference(SynthSpec::new(1, 4, 4, 8, 11), &[3, 5], 1e-6);
}

#[test]
fn random_specs_match_scalar_reference() {
    for seed in 0..8u64 {
        let mut spec = SynthSpec::new(
            1 + seed as usize % 3,
            3 + seed as usize,
            5 + 2 * seed as usize,
            16,
            seed,
        );
        spec.qkv_bias = seed % 2 == 1;
        check_against_reference(spec, &random_tokens(16, 6, seed), 1e-5);
    }
}

#[test]
fn zero_weights_give_zero_linear_outputs() {
    let spec = SynthSpec::new(2, 8, 12, 16, 0);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("z.safetensors");
    let specs = spec.tensor_specs();
    let mut w = CheckpointWriter::create(&p, &specs, &spec.metadata("zero")).unwrap();
    for s in &specs {
        w.write(&vec![0u8; s.shape.iter().product::<usize>() * 4])
            .unwrap();
    }
    w.finish().unwrap();
    let ck = Checkpoint::open(&p).unwrap();
    let dump = forward_record(&ck, &[1, 2, 3], &[TokenRole::Answer; 3]).unwrap();
    let space = &dump.header.module_table;
    for (m, mc) in space.iter() {
        if mc.0.ends_with("_proj") || mc.0 == "lm_head" {
            let off = space.module_offset(m);
            assert!(
                dump.frames
                    .iter()
                    .all(|f| f[off..off + mc.1].iter().all(|&v| v == 0.0)),
                "{}",
                mc.0
            );
        }
    }
}

#[test]
fn forward_is_deterministic_and_hashes_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.safetensors");
    synth_checkpoint(&SynthSpec::new(2, 8, 8, 32, 5), &p).unwrap();
    let ck = Checkpoint::open(&p).unwrap();
    let toks = random_tokens(32, 20, 1);
    let roles = vec![TokenRole::Answer; 20];
    let a = forward_record(&ck, &toks, &roles).unwrap();
    let b = forward_record(&ck, &toks, &roles).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    let c = forward_record(&ck, &random_tokens(32, 20, 2), &roles).unwrap();
    assert_ne!(a.header.input_set_hash, c.header.input_set_hash);
}

#[test]
fn token_mixing_variant_differs_only_after_first_token() {
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a"), dir.path().join("b"));
    let mut spec = SynthSpec::new(1, 8, 8, 32, 5);
    synth_checkpoint(&spec, &p1).unwrap();
    spec.token_mixing = true;
    synth_checkpoint(&spec, &p2).unwrap();
    let toks = [4u32, 9, 17];
    let roles = [TokenRole::Answer; 3];
    let a = forward_record(&Checkpoint::open(&p1).unwrap(), &toks, &roles).unwrap();
    let b = forward_record(&Checkpoint::open(&p2).unwrap(), &toks, &roles).unwrap();
    // with one visible token softmax attention returns v, the gate scales it
    assert_ne!(a.frames[1], b.frames[1]);
    let space = &a.header.module_table;
    let q = space.module_offset(
        space
            .module_index("model.layers.0.self_attn.q_proj")
            .unwrap(),
    );
    assert_eq!(a.frames[0][..q + 8], b.frames[0][..q + 8]);
}

#[test]
fn synth_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let s = SynthSpec::new(2, 16, 24, 64, 7);
    let a = synth_checkpoint(&s, dir.path().join("a")).unwrap();
    let b = synth_checkpoint(&s, dir.path().join("b")).unwrap();
    let c = synth_checkpoint(&SynthSpec { seed: 8, ..s }, dir.path().join("c")).unwrap();
    assert_eq!(a.sha256, b.sha256);
    assert_ne!(a.sha256, c.sha256);
}

fn planted_pair(dir: &std::path::Path, planted: &[ChannelId]) -> (Checkpoint, Checkpoint) {
    let (b, p) = (dir.join("base"), dir.join("pert"));
    let mut spec = SynthSpec::new(2, 16, 24, 64, 3);
    spec.qkv_bias = true;
    synth_checkpoint(&spec, &b).unwrap();
    let base = Checkpoint::open(&b).unwrap();
    let plan = PerturbationPlan {
        planted_channels: planted.to_vec(),
        delta_scale: 0.5,
        seed: 9,
    };
    perturb_checkpoint(&base, &plan, &p, Some("ability")).unwrap();
    (base, Checkpoint::open(&p).unwrap())
}

#[test]
fn empty_plan_is_a_byte_copy() {
    let dir = tempfile::tempdir().unwrap();
    let (base, pert) = planted_pair(dir.path(), &[]);
    let _ = pert;
    let again = dir.path().join("copy");
    perturb_checkpoint(
        &base,
        &PerturbationPlan {
            planted_channels: vec![],
            delta_scale: 1.0,
            seed: 0,
        },
        &again,
        None,
    )
    .unwrap();
    assert_eq!(common::file_bytes(base.path()), common::file_bytes(&again));
}

#[test]
fn weight_stats_nonzero_exactly_on_planted() {
    let planted = vec![
        ChannelId::new("model.layers.0.self_attn.k_proj", 2),
        ChannelId::new("model.layers.1.mlp.gate_proj", 20),
        ChannelId::new("model.norm", 5),
        ChannelId::new("model.embed_tokens", 7),
    ];
    let dir = tempfile::tempdir().unwrap();
    let (base, pert) = planted_pair(dir.path(), &planted);
    let s = weight_stats(&base, &pert, "t", 1 << 12).unwrap();
    for (id, v) in s.iter() {
        if planted.contains(&id) {
            // every slice moves by delta_scale in L2 norm, up to f32 rounding
            assert!((v - 0.5).abs() < 1e-5, "{id}: {v}");
        } else {
            assert_eq!(v, 0.0, "{id}");
        }
    }
}

#[test]
fn planted_channels_carry_top_activation_differences() {
    let planted = vec![
        ChannelId::new("model.layers.0.self_attn.q_proj", 1),
        ChannelId::new("model.layers.0.mlp.up_proj", 9),
        ChannelId::new("model.layers.1.self_attn.v_proj", 4),
        ChannelId::new("lm_head", 30),
    ];
    let dir = tempfile::tempdir().unwrap();
    let (base, pert) = planted_pair(dir.path(), &planted);
    let toks = random_tokens(64, 128, 4);
    let roles = vec![TokenRole::Answer; 128];
    let (a, b) = (dir.path().join("a.actd"), dir.path().join("b.actd"));
    forward_record(&base, &toks, &roles)
        .unwrap()
        .write(&a)
        .unwrap();
    forward_record(&pert, &toks, &roles)
        .unwrap()
        .write(&b)
        .unwrap();
    let stats =
        activation_stats(&reduce_pair_files(&a, &b, RoleFilter::All).unwrap(), "t").unwrap();
    let mut ranked: Vec<(ChannelId, f64)> = stats.iter().collect();
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1));
    let top: Vec<&ChannelId> = ranked[..planted.len()].iter().map(|(c, _)| c).collect();
    for p in &planted {
        assert!(top.contains(&p), "{p} not in {top:?}");
    }
}

#[test]
fn full_transfer_reproduces_planted_outputs() {
    let planted = vec![
        ChannelId::new("model.layers.0.self_attn.q_proj", 1),
        ChannelId::new("model.layers.1.mlp.up_proj", 9),
        ChannelId::new("model.layers.1.post_attention_layernorm", 3),
    ];
    let dir = tempfile::tempdir().unwrap();
    let (base, pert) = planted_pair(dir.path(), &planted);
    let mask = UnifiedMask {
        channels: planted.clone(),
        source_model_id: "ability".into(),
        constituent_tags: vec!["t".into()],
        total_channel_count: base.index().channel_space().len(),
    };
    let out = dir.path().join("merged");
    merge(
        &MergePlan {
            target: base.path().to_path_buf(),
            sources: vec![MergeSource {
                checkpoint: pert.path().to_path_buf(),
                mask: SourceMask::Masked(mask),
                lambda: 1.0,
            }],
            method: Method::Act,
            params: MethodParams::default(),
            seed: 0,
        },
        &out,
        MergeOptions::default(),
    )
    .unwrap();
    let merged = MiniModel::load(&Checkpoint::open(&out).unwrap()).unwrap();
    let ability = MiniModel::load(&pert).unwrap();
    let toks = random_tokens(64, 16, 8);
    assert_eq!(
        merged.forward(&toks).unwrap(),
        ability.forward(&toks).unwrap()
    );
}
