//! Exercises the binary end to end over a miniature run, the way a user
//! would drive it.

use std::path::Path;
use std::process::{Command, Output};

fn vvo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vvo"))
        .args(args)
        .output()
        .expect("binary should run")
}

fn ok(args: &[&str]) -> String {
    let out = vvo(args);
    assert!(
        out.status.success(),
        "vvo {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_tiny_config(path: &Path) {
    let text = "\
data.samples = 6\n\
data.eval_count = 2\n\
data.height = 16\n\
data.width = 16\n\
data.min_objects = 1\n\
data.max_objects = 2\n\
data.min_size = 5.0\n\
data.max_size = 9.0\n\
enc.channels = 8\n\
vq.num_codes = 16\n\
vq.template_dim = 8\n\
vq.steps = 10\n\
vq.batch = 2\n\
vq.epoch_len = 5\n\
agg.slots = 3\n\
agg.slot_dim = 16\n\
agg.iterations = 2\n\
agg.mlp_hidden = 16\n\
dec.width = 16\n\
dec.heads = 2\n\
dec.blocks = 1\n\
dec.hidden = 16\n\
dec.time_dim = 8\n\
train.steps = 3\n\
train.batch = 2\n\
train.eval_every = 0\n";
    std::fs::write(path, text).unwrap();
}

#[test]
fn full_cli_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    write_tiny_config(&cfg);
    let cfg = cfg.to_str().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    let out = ok(&["gen-data", "--config", cfg, "--out", &p("data")]);
    assert!(out.contains("6 samples"), "{out}");

    ok(&["pretrain-vq", "--config", cfg, "--data", &p("data"), "--out", &p("pre")]);
    ok(&[
        "train",
        "--config",
        cfg,
        "--data",
        &p("data"),
        "--pretrain",
        &p("pre"),
        "--out",
        &p("ckpt"),
    ]);

    let eval = |json: &str| {
        ok(&[
            "eval",
            "--config",
            cfg,
            "--data",
            &p("data"),
            "--ckpt",
            &p("ckpt"),
            "--json",
            &p(json),
            "--masks-out",
            &p("masks"),
        ])
    };
    eval("a.json");
    eval("b.json");
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    let b = std::fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b, "evaluation must be byte-deterministic");
    assert!(String::from_utf8(a).unwrap().contains("\"ari\""));

    let out = ok(&["plot", "--masks", &p("masks"), "--out", &p("panels")]);
    assert!(out.contains("2 panels"), "{out}");

    ok(&["analyze", "--which", "bias", "--json", &p("bias.json"), "--svg", &p("bias.svg")]);
    let bias = std::fs::read_to_string(dir.path().join("bias.json")).unwrap();
    assert!(bias.contains("mean_residual_shared"), "{bias}");
    let svg = std::fs::read_to_string(dir.path().join("bias.svg")).unwrap();
    assert!(svg.starts_with("<svg "));
}

#[test]
fn config_lists_schema_and_overrides_apply() {
    let listing = ok(&["config"]);
    assert!(listing.contains("train.steps"));
    assert!(listing.contains("vq.num_codes"));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&[
        "gen-data",
        "--set",
        "data.samples=3",
        "--set",
        "data.eval_count=1",
        "--set",
        "data.height=16",
        "--set",
        "data.width=16",
        "--set",
        "agg.slots=3",
        "--out",
        out.to_str().unwrap(),
    ]);
    let meta = std::fs::read_to_string(out.join("meta.txt")).unwrap();
    assert!(meta.contains("data.samples = 3"), "{meta}");

    let bad = vvo(&["gen-data", "--set", "data.samples", "--out", "/tmp/never"]);
    assert!(!bad.status.success());
    let bad = vvo(&["analyze", "--which", "entropy", "--json", "/tmp/never.json"]);
    assert!(!bad.status.success());
}
