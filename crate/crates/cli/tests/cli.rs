use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use abltx_core::channel::{ChannelSpace, ModuleChannels};
use abltx_core::checkpoint::Checkpoint;
use abltx_core::dtype::DType;
use abltx_core::dump::{write_dump, DumpHeader, InputSetHash, TokenRole};
use abltx_core::mask::UnifiedMask;
use abltx_core::stats::{ChannelStatVector, StatKind};
use serde_json::Value;

fn abltx(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_abltx"));
    cmd.current_dir(dir)
        .args(args)
        .arg("--log-level")
        .arg("warn");
    for (k, _) in std::env::vars() {
        if k.starts_with("ABLTX_") {
            cmd.env_remove(k);
        }
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

/// Runs a command that must succeed and returns its JSON summary.
fn ok(dir: &Path, args: &[&str]) -> Value {
    ok_env(dir, args, &[])
}

fn ok_env(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Value {
    let out = abltx(dir, args, env);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        stdout.lines().count(),
        1,
        "stdout must be one JSON line: {stdout}"
    );
    serde_json::from_str(&stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = abltx(dir, args, &[]);
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn small_synth(dir: &Path, out: &str, seed: &str) -> Value {
    ok(
        dir,
        &[
            "synth",
            "--n-layers",
            "1",
            "--hidden-dim",
            "16",
            "--intermediate-dim",
            "24",
            "--vocab-size",
            "32",
            "--seed",
            seed,
            "--out",
            out,
        ],
    )
}

fn read_ck(path: &Path) -> Checkpoint {
    Checkpoint::open(path).unwrap()
}

fn same_file(a: &Path, b: &Path) -> bool {
    fs::read(a).unwrap() == fs::read(b).unwrap()
}

#[test]
fn usage_errors_exit_two_and_io_errors_exit_three() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(fails(d.path(), &["frobnicate"]).0, 2);
    assert_eq!(fails(d.path(), &["mask", "--p", "1"]).0, 2);
    let (code, err) = fails(
        d.path(),
        &["mask", "--stats", "missing.acts", "--out", "m.json"],
    );
    assert_eq!(code, 3, "{err}");
    fs::write(d.path().join("junk.acts"), b"not a stats file").unwrap();
    assert_eq!(
        fails(
            d.path(),
            &["mask", "--stats", "junk.acts", "--out", "m.json"]
        )
        .0,
        2
    );
}

#[test]
fn synth_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let a = small_synth(d.path(), "a.safetensors", "7");
    let b = small_synth(d.path(), "b.safetensors", "7");
    let c = small_synth(d.path(), "c.safetensors", "8");
    assert_eq!(a["sha256"], b["sha256"]);
    assert_ne!(a["sha256"], c["sha256"]);
    assert!(same_file(
        &d.path().join("a.safetensors"),
        &d.path().join("b.safetensors")
    ));
}

#[test]
fn config_precedence_is_flag_then_env_then_file() {
    let d = tempfile::tempdir().unwrap();
    let reference: Vec<Value> = ["1", "2", "3"]
        .iter()
        .map(|s| small_synth(d.path(), &format!("ref{s}"), s)["sha256"].clone())
        .collect();
    let cfg = d.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"log_level": "warn", "synth": {"seed": 1, "n_layers": 1, "hidden_dim": 16,
            "intermediate_dim": 24, "vocab_size": 32}}"#,
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let from_file = ok(d.path(), &["synth", "--config", cfg, "--out", "f"]);
    assert_eq!(from_file["sha256"], reference[0]);
    let from_env = ok_env(
        d.path(),
        &["synth", "--config", cfg, "--out", "e"],
        &[("ABLTX_SEED", "2")],
    );
    assert_eq!(from_env["sha256"], reference[1]);
    let from_flag = ok_env(
        d.path(),
        &["synth", "--config", cfg, "--seed", "3", "--out", "c"],
        &[("ABLTX_SEED", "2")],
    );
    assert_eq!(from_flag["sha256"], reference[2]);
    fs::write(d.path().join("bad.json"), r#"{"synth": {"sed": 1}}"#).unwrap();
    assert_eq!(
        fails(d.path(), &["synth", "--config", "bad.json", "--out", "x"]).0,
        2
    );
}

fn tokens_file(dir: &Path, name: &str, tokens: &[u32], roles: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(
        &p,
        serde_json::json!({ "tokens": tokens, "roles": roles }).to_string(),
    )
    .unwrap();
    p
}

#[test]
fn diff_rejects_misaligned_dumps_and_empty_role_filters() {
    let d = tempfile::tempdir().unwrap();
    small_synth(d.path(), "m", "0");
    tokens_file(d.path(), "t1.json", &[1, 2, 3, 4], "PPAA");
    tokens_file(d.path(), "t2.json", &[1, 2, 3, 5], "PPAA");
    tokens_file(d.path(), "tp.json", &[1, 2, 3, 4], "PPPP");
    for (t, o) in [
        ("t1.json", "a.actd"),
        ("t2.json", "b.actd"),
        ("tp.json", "p.actd"),
    ] {
        ok(
            d.path(),
            &["forward", "--checkpoint", "m", "--tokens", t, "--out", o],
        );
    }
    let (code, err) = fails(
        d.path(),
        &[
            "diff", "--dump-a", "a.actd", "--dump-b", "b.actd", "--out", "x",
        ],
    );
    assert_eq!(code, 2);
    assert!(err.contains("input_set_hash"), "{err}");
    let (code, err) = fails(
        d.path(),
        &[
            "diff", "--dump-a", "p.actd", "--dump-b", "p.actd", "--out", "x",
        ],
    );
    assert_eq!(code, 2);
    assert!(err.contains("empty role filter"), "{err}");
    let all = ok(
        d.path(),
        &[
            "diff", "--dump-a", "p.actd", "--dump-b", "p.actd", "--roles", "all", "--out", "x",
        ],
    );
    assert_eq!(all["tokens"], 4);
}

#[test]
fn mask_count_on_large_universe() {
    let d = tempfile::tempdir().unwrap();
    let n = 1_750_500;
    let modules: Vec<ModuleChannels> = (0..50)
        .map(|i| ModuleChannels(format!("model.layers.{i}.mlp.up_proj"), n / 50))
        .collect();
    let s = ChannelStatVector {
        stat_kind: StatKind::ActivationDiff,
        pair_id: ("a".into(), "b".into()),
        ability_tag: "math".into(),
        space: ChannelSpace::new(modules).unwrap(),
        values: (0..n).map(|i| ((i * 7919) % n) as f64).collect(),
    };
    s.write(d.path().join("s.acts")).unwrap();
    let v = ok(
        d.path(),
        &["mask", "--stats", "s.acts", "--p", "1", "--out", "m.json"],
    );
    assert_eq!(v["channels"], 17_505);
    assert_eq!(v["total_channels"], n);
    let v = ok(
        d.path(),
        &[
            "overlap", "--mask", "m.json", "--mask", "m.json", "--out", "o.csv",
        ],
    );
    assert_eq!(v["rows"], 4);
    let csv = fs::read_to_string(d.path().join("o.csv")).unwrap();
    assert!(
        csv.lines().skip(1).all(|l| l.contains("100.0,17505")),
        "{csv}"
    );
}

#[test]
fn ccdf_groups_by_layer() {
    let d = tempfile::tempdir().unwrap();
    ok(
        d.path(),
        &[
            "synth",
            "--hidden-dim",
            "16",
            "--intermediate-dim",
            "24",
            "--vocab-size",
            "32",
            "--out",
            "a",
        ],
    );
    ok(
        d.path(),
        &[
            "perturb",
            "--base",
            "a",
            "--random-count",
            "8",
            "--seed",
            "1",
            "--out",
            "b",
        ],
    );
    ok(
        d.path(),
        &[
            "weightdiff",
            "--target",
            "a",
            "--ability",
            "b",
            "--ability-tag",
            "t",
            "--out",
            "w.acts",
        ],
    );
    let v = ok(
        d.path(),
        &[
            "ccdf",
            "--stats",
            "w.acts",
            "--group",
            "layer",
            "--thresholds",
            "0,0.1,1",
            "--out",
            "c.csv",
        ],
    );
    let groups: Vec<String> = serde_json::from_value(v["groups"].clone()).unwrap();
    assert_eq!(groups, ["non_layer", "layer.0", "layer.1"]);
    assert_eq!(v["rows"], 3 * groups.len());
}

#[test]
fn merge_full_and_empty_masks_and_lambda_sweep() {
    let d = tempfile::tempdir().unwrap();
    small_synth(d.path(), "t", "1");
    small_synth(d.path(), "s", "2");
    ok(
        d.path(),
        &[
            "merge", "--target", "t", "--source", "s:full:1", "--out", "m1",
        ],
    );
    let (m1, s) = (read_ck(&d.path().join("m1")), read_ck(&d.path().join("s")));
    for t in s.index().tensors() {
        assert_eq!(
            m1.read_tensor_bytes(&t.name).unwrap(),
            s.read_tensor_bytes(&t.name).unwrap()
        );
    }

    let empty = UnifiedMask {
        channels: vec![],
        source_model_id: "synth-2".into(),
        constituent_tags: vec!["none".into()],
        total_channel_count: s.index().channel_space().len(),
    };
    empty.write(d.path().join("empty.json")).unwrap();
    let e = ok(
        d.path(),
        &[
            "merge",
            "--target",
            "t",
            "--source",
            "s:empty.json",
            "--out",
            "m0",
        ],
    );
    assert!(same_file(&d.path().join("m0"), &d.path().join("t")));
    assert_eq!(e["sha256"], small_synth(d.path(), "t2", "1")["sha256"]);

    for i in 1..=9 {
        let l = format!("0.{i}");
        let v = ok(
            d.path(),
            &[
                "merge",
                "--target",
                "t",
                "--source",
                "s:full",
                "--lambda",
                &l,
                "--out",
                &format!("sweep{i}"),
            ],
        );
        assert_eq!(v["lambdas"][0].as_f64().unwrap(), l.parse::<f64>().unwrap());
    }
    let manifests = fs::read_dir(d.path())
        .unwrap()
        .filter(|e| {
            let n = e.as_ref().unwrap().file_name().into_string().unwrap();
            n.starts_with("sweep") && n.ends_with(".manifest.json")
        })
        .count();
    assert_eq!(manifests, 9);
}

#[test]
fn tutorial_pipeline_recovers_planted_channels() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["synth", "--seed", "3", "--out", "base.safetensors"]);
    ok(
        p,
        &[
            "perturb",
            "--base",
            "base.safetensors",
            "--random-count",
            "32",
            "--exclude",
            "o_proj",
            "--exclude",
            "down_proj",
            "--exclude",
            "embed_tokens",
            "--delta-scale",
            "1",
            "--seed",
            "5",
            "--out",
            "ability.safetensors",
        ],
    );
    for (m, o) in [
        ("base.safetensors", "base.actd"),
        ("ability.safetensors", "ability.actd"),
    ] {
        ok(
            p,
            &[
                "forward",
                "--checkpoint",
                m,
                "--random-tokens",
                "256",
                "--token-seed",
                "9",
                "--out",
                o,
            ],
        );
    }
    ok(
        p,
        &[
            "diff",
            "--dump-a",
            "base.actd",
            "--dump-b",
            "ability.actd",
            "--out",
            "d.actr",
        ],
    );
    let s = ok(
        p,
        &[
            "stats",
            "--diff",
            "d.actr",
            "--ability-tag",
            "planted",
            "--out",
            "s.acts",
        ],
    );
    let n = s["channels"].as_u64().unwrap() as f64;
    let ratio = format!("{}", 32.0 * 100.0 / n);
    let m = ok(
        p,
        &[
            "mask",
            "--stats",
            "s.acts",
            "--p",
            &ratio,
            "--out",
            "mask.json",
        ],
    );
    assert_eq!(m["channels"], 32);
    let r = ok(
        p,
        &[
            "recovery",
            "--mask",
            "mask.json",
            "--planted",
            "ability.safetensors.planted.json",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(r["recovered"], 32, "{r}");
    let merged = ok(
        p,
        &[
            "merge",
            "--target",
            "base.safetensors",
            "--source",
            "ability.safetensors:mask.json:1",
            "--out",
            "merged",
        ],
    );
    assert!(merged["manifest"]
        .as_str()
        .unwrap()
        .ends_with("merged.manifest.json"));
}

#[test]
fn handwritten_dumps_round_trip_through_the_cli() {
    let d = tempfile::tempdir().unwrap();
    let space = ChannelSpace::new(vec![
        ModuleChannels("m.a".into(), 3),
        ModuleChannels("m.b".into(), 2),
    ])
    .unwrap();
    let header = |id: &str| DumpHeader {
        model_id: id.into(),
        input_set_hash: InputSetHash::of_tokens(&[1, 2]),
        module_table: space.clone(),
        token_count: 2,
        token_roles: vec![TokenRole::Prompt, TokenRole::Answer],
        value_dtype: DType::F32,
    };
    let fa: Vec<Vec<f32>> = vec![vec![9.0; 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]];
    let fb: Vec<Vec<f32>> = vec![vec![0.0; 5], vec![1.5, 2.0, 1.0, 4.0, 9.0]];
    write_dump(
        d.path().join("a"),
        header("a"),
        fa.iter().map(|v| v.as_slice()),
    )
    .unwrap();
    write_dump(
        d.path().join("b"),
        header("b"),
        fb.iter().map(|v| v.as_slice()),
    )
    .unwrap();
    ok(
        d.path(),
        &["diff", "--dump-a", "a", "--dump-b", "b", "--out", "r"],
    );
    ok(
        d.path(),
        &["stats", "--diff", "r", "--ability-tag", "x", "--out", "s"],
    );
    let s = ChannelStatVector::read(d.path().join("s")).unwrap();
    assert_eq!(s.values, vec![0.5, 0.0, 2.0, 0.0, 4.0]);
}
