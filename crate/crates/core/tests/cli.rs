#![cfg(feature = "cli")]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use insect_fm::training::TrainConfig;
use insect_fm::EncoderConfig;
use serde_json::Value;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_insect-fm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let o = bin(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    /// A 4×6 corpus and a training config small enough for a few seconds of steps.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut c = TrainConfig::desk();
        c.model = EncoderConfig {
            d: 16,
            heads: 2,
            image_layers: 1,
            text_layers: 1,
            decoder_layers: 1,
            ..EncoderConfig::desk()
        };
        c.schedule.steps = 10;
        c.schedule.batch_size = 8;
        c.run.checkpoint_every = 4;
        fs::write(dir.path().join("tiny.toml"), c.to_toml().unwrap()).unwrap();
        let f = Fixture { dir };
        ok(&["gen-corpus", "--classes", "4", "--per-class", "6", "--seed", "3", "--out", s(&f.corpus())]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn corpus(&self) -> PathBuf {
        self.path("corpus.jsonl")
    }

    fn pretrain(&self, out: &str) -> Value {
        ok(&[
            "pretrain",
            "--corpus",
            s(&self.corpus()),
            "--config",
            s(&self.path("tiny.toml")),
            "--out",
            s(&self.path(out)),
            "--log-every",
            "0",
        ])
    }
}

#[test]
fn gen_corpus_and_stats_are_deterministic() {
    let f = Fixture::new();
    let again = f.path("again.jsonl");
    ok(&["gen-corpus", "--classes", "4", "--per-class", "6", "--seed", "3", "--out", s(&again)]);
    assert_eq!(fs::read(f.corpus()).unwrap(), fs::read(&again).unwrap());
    let a = ok(&["stats", "--corpus", s(&f.corpus())]);
    assert_eq!(a, ok(&["stats", "--corpus", s(&again)]));
    assert_eq!(a["records"], 24);
    assert_eq!(a["levels"]["species"]["classes"], 4);
}

#[test]
fn pretrain_is_deterministic_and_resumable() {
    let f = Fixture::new();
    let a = f.pretrain("a");
    f.pretrain("b");
    assert_eq!(a["steps"], 10);
    let read = |run: &str, file: &str| fs::read(f.path(run).join(file)).unwrap();
    assert_eq!(read("a", "final"), read("b", "final"));
    assert_eq!(read("a", "metrics.jsonl"), read("b", "metrics.jsonl"));
    assert_eq!(read("a", "metrics.jsonl").iter().filter(|&&c| c == b'\n').count(), 10);
    assert!(f.path("a").join("step-4").exists() && f.path("a").join("step-8").exists());

    // Resume mid-run in a copy of the output directory.
    let c = f.path("c");
    fs::create_dir(&c).unwrap();
    for file in ["config.toml", "metrics.jsonl", "step-4"] {
        fs::copy(f.path("a").join(file), c.join(file)).unwrap();
    }
    ok(&["pretrain", "--corpus", s(&f.corpus()), "--out", s(&c), "--resume", s(&c.join("step-4")), "--log-every", "0"]);
    assert_eq!(read("a", "final"), read("c", "final"));
    assert_eq!(read("a", "metrics.jsonl"), read("c", "metrics.jsonl"));

    let o = bin(&[
        "pretrain", "--corpus", s(&f.corpus()), "--out", s(&c), "--resume", s(&c.join("step-4")), "--steps", "3",
    ]);
    assert_eq!(o.status.code(), Some(1));

    let i = ok(&["inspect", "--ckpt", s(&f.path("a"))]);
    assert_eq!(i, ok(&["inspect", "--ckpt", s(&f.path("a").join("final"))]));
    assert_eq!(i["step"], 10);
    assert_eq!(i["vocab_size"].as_u64().unwrap() as usize, i["tensors"]["param/text.tok"][0].as_u64().unwrap() as usize);
}

#[test]
fn evaluation_commands_are_deterministic() {
    let f = Fixture::new();
    f.pretrain("run");
    let ckpt = f.path("run");
    let corpus = f.corpus();
    let probe = |extra: &[&str]| {
        let mut args = vec!["probe", "--corpus", s(&corpus), "--steps", "20"];
        args.extend_from_slice(extra);
        ok(&args)
    };
    let a = probe(&["--ckpt", s(&ckpt)]);
    assert_eq!(a, probe(&["--ckpt", s(&ckpt)]));
    assert_eq!(a["protocol"], "linear_probe");
    let tiny = f.path("tiny.toml");
    let r = probe(&["--random-init", "--config", s(&tiny), "--seed", "5"]);
    assert_eq!(r, probe(&["--random-init", "--config", s(&tiny), "--seed", "5"]));

    let results = f.path("zs.json");
    let zs = ok(&["zeroshot", "--ckpt", s(&ckpt), "--corpus", s(&f.corpus()), "--results", s(&results)]);
    assert_eq!(zs, ok(&["zeroshot", "--ckpt", s(&ckpt), "--corpus", s(&f.corpus())]));
    let written: Value = serde_json::from_str(&fs::read_to_string(&results).unwrap()).unwrap();
    assert_eq!(written, zs);
    let control = ok(&["zeroshot", "--ckpt", s(&ckpt), "--corpus", s(&f.corpus()), "--identical-descriptions"]);
    assert_eq!(control["top1"], 0.25);
    assert_eq!(control["identical_descriptions"], true);
    let genus = ok(&["zeroshot", "--ckpt", s(&ckpt), "--corpus", s(&f.corpus()), "--level", "genus"]);
    assert_eq!(genus["level"], "genus");
}

#[test]
fn gradcheck_passes_and_repeats() {
    let a = ok(&["gradcheck", "--per-tensor", "2", "--seed", "1"]);
    assert_eq!(a, ok(&["gradcheck", "--per-tensor", "2", "--seed", "1"]));
    assert_eq!(a["pass"], true);
    assert!(a["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert_eq!(a["losses"].as_object().unwrap().len(), 4);
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    assert_eq!(bin(&["pretrain", "--bogus"]).status.code(), Some(2));
    assert_eq!(bin(&["probe", "--corpus", "x"]).status.code(), Some(2));
    assert_eq!(bin(&["probe", "--corpus", "x", "--ckpt", "y", "--random-init"]).status.code(), Some(2));
    assert_eq!(bin(&["stats", "--corpus", "x", "--level", "order"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let o = bin(&["stats", "--corpus", s(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("missing.jsonl"));

    let bad = dir.path().join("bad");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let o = bin(&["inspect", "--ckpt", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "checkpoint");
}

#[test]
fn help_documents_every_flag() {
    let common = ["--seed", "--threads", "--config"];
    let cases: [(&str, &[&str]); 7] = [
        ("gen-corpus", &["--classes", "--per-class", "--out"]),
        ("stats", &["--corpus"]),
        (
            "pretrain",
            &["--corpus", "--out", "--resume", "--steps", "--lr", "--batch-size", "--relevance-only", "--log-every"],
        ),
        ("gradcheck", &["--per-tensor"]),
        ("probe", &["--ckpt", "--random-init", "--corpus", "--level", "--steps", "--probe-lr", "--results"]),
        ("zeroshot", &["--ckpt", "--random-init", "--corpus", "--level", "--identical-descriptions", "--results"]),
        ("inspect", &["--ckpt"]),
    ];
    let top = String::from_utf8(bin(&["--help"]).stdout).unwrap();
    for (sub, flags) in cases {
        assert!(top.contains(sub), "{sub} missing from top-level help");
        let o = bin(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0));
        let help = String::from_utf8(o.stdout).unwrap();
        for flag in common.iter().chain(flags) {
            assert!(help.contains(flag), "{sub} help lacks {flag}");
        }
    }
}
