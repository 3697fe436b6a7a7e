use std::path::Path;
use std::process::{Command, Output};

fn mmkg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmkg"))
        .current_dir(dir)
        .args(args)
        .env_remove("RUST_BACKTRACE")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mmkg(dir, args);
    assert!(
        out.status.success(),
        "mmkg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn toy_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth-corpus", "--out", "corpus", "--articles", "4"]);
    fn with<'a>(rest: &[&'a str]) -> Vec<&'a str> {
        [&["--config", "corpus/config.toml"][..], rest].concat()
    }

    assert!(ok(d, &with(&["kb", "validate", "corpus/kb.jsonl"])).starts_with("200 entries"));
    ok(
        d,
        &with(&[
            "train-matcher",
            "--kb",
            "corpus/kb.jsonl",
            "--out",
            "matcher.ckpt",
            "--log",
            "m.jsonl",
        ]),
    );
    assert_eq!(lines(&d.join("m.jsonl")).len(), 51);

    ok(
        d,
        &with(&[
            "build-graph",
            "--data",
            "corpus",
            "--matcher",
            "matcher.ckpt",
            "--out",
            "graphs",
            "--subgraphs",
        ]),
    );
    let tsv = std::fs::read_to_string(d.join("graphs/stats.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 9);
    assert!(tsv.starts_with("image_id\tnodes_head"));

    let printed = ok(
        d,
        &[
            "match",
            "--graph-text",
            "graphs/img000_0.text.json",
            "--graph-image",
            "graphs/img000_0.image.json",
            "--matcher",
            "matcher.ckpt",
            "--out",
            "merged.json",
        ],
    );
    let merged: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("merged.json")).unwrap()).unwrap();
    let built: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("graphs/img000_0.graph.json")).unwrap()).unwrap();
    assert_eq!(merged, built);
    let cross = built["edges"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["kind"] == "CROSS_MODAL")
        .count();
    assert_eq!(printed.lines().count(), cross);

    ok(
        d,
        &with(&[
            "train-captioner",
            "--data",
            "corpus",
            "--graphs",
            "graphs",
            "--matcher",
            "matcher.ckpt",
            "--seed",
            "1",
            "--out",
            "cap.ckpt",
            "--log",
            "c.jsonl",
        ]),
    );
    assert_eq!(lines(&d.join("c.jsonl")).len(), 60);
    ok(
        d,
        &[
            "generate",
            "--ckpt",
            "cap.ckpt",
            "--data",
            "corpus",
            "--graphs",
            "graphs",
            "--beam",
            "3",
            "--out",
            "hyps.jsonl",
        ],
    );
    assert_eq!(lines(&d.join("hyps.jsonl")).len(), 8);

    ok(
        d,
        &[
            "evaluate",
            "--hyps",
            "hyps.jsonl",
            "--refs",
            "corpus/captions.jsonl",
            "--entities",
            "corpus/entities.jsonl",
            "--report",
            "report.json",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    for key in [
        "bleu4",
        "rouge_l",
        "cider_d",
        "entity_precision",
        "entity_recall",
        "entity_f1",
    ] {
        assert!(report[key].is_f64(), "{key} missing from {report}");
    }
    assert!(report["entity_f1"].as_f64().unwrap() >= 0.9, "{report}");

    let masked = ok(
        d,
        &[
            "evaluate",
            "--hyps",
            "hyps.jsonl",
            "--refs",
            "corpus/captions.jsonl",
            "--entities",
            "corpus/entities.jsonl",
            "--mode",
            "entity-masked",
        ],
    );
    let masked: serde_json::Value = serde_json::from_str(&masked).unwrap();
    assert!(masked.get("entity_f1").is_none());
}

#[test]
fn graphless_model_generates_without_graphs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth-corpus", "--out", "corpus", "--articles", "2"]);
    ok(
        d,
        &[
            "--config",
            "corpus/config.toml",
            "train-matcher",
            "--kb",
            "corpus/kb.jsonl",
            "--epochs",
            "2",
            "--out",
            "m.ckpt",
        ],
    );
    ok(
        d,
        &[
            "--config",
            "corpus/config.toml",
            "train-captioner",
            "--data",
            "corpus",
            "--matcher",
            "m.ckpt",
            "--ablation",
            "no-graph",
            "--epochs",
            "1",
            "--out",
            "ng.ckpt",
        ],
    );
    ok(
        d,
        &[
            "generate",
            "--ckpt",
            "ng.ckpt",
            "--data",
            "corpus",
            "--max-len",
            "5",
            "--out",
            "h.jsonl",
        ],
    );
    assert_eq!(lines(&d.join("h.jsonl")).len(), 4);

    ok(
        d,
        &[
            "--config",
            "corpus/config.toml",
            "train-captioner",
            "--data",
            "corpus",
            "--matcher",
            "m.ckpt",
            "--epochs",
            "1",
            "--out",
            "full.ckpt",
        ],
    );
    let out = mmkg(
        d,
        &[
            "generate",
            "--ckpt",
            "full.ckpt",
            "--data",
            "corpus",
            "--out",
            "h.jsonl",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--graphs"));
}

#[test]
fn printed_config_loads_back() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for (flags, file) in [
        (&["--print-config"][..], "a.toml"),
        (&["--print-config", "--desk", "--config-format", "json"][..], "b.json"),
    ] {
        let text = ok(d, flags);
        std::fs::write(d.join(file), &text).unwrap();
        let format = if file.ends_with("json") { "json" } else { "toml" };
        assert_eq!(
            ok(d, &["--config", file, "--print-config", "--config-format", format]),
            text
        );
    }
    let defaults = ok(d, &["--print-config"]);
    assert!(defaults.contains("warmup_steps = 4000"));
    assert!(defaults.contains("clip_norm = 0.1"));

    // partial files keep the remaining defaults
    std::fs::write(d.join("p.toml"), "[graph]\nthreshold = 0.5\n").unwrap();
    let partial = ok(d, &["--config", "p.toml", "--print-config"]);
    assert!(partial.contains("threshold = 0.5") && partial.contains("max_faces = 4"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "kb",
            "synth",
            "--out",
            "kb.jsonl",
            "--entities",
            "5",
            "--dim-e",
            "3",
            "--dim-v",
            "2",
        ],
    );
    assert!(ok(d, &["kb", "validate", "kb.jsonl", "--dim-e", "3", "--dim-v", "2"]).starts_with("5 entries"));

    let out = mmkg(d, &["kb", "validate", "kb.jsonl", "--dim-e", "4", "--dim-v", "2"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 1") && err.contains("expected 4"), "{err}");

    assert!(!mmkg(d, &["kb", "validate", "missing.jsonl"]).status.success());
    assert!(!mmkg(d, &[]).status.success());
    std::fs::write(d.join("bad.toml"), "[graph\n").unwrap();
    assert!(!mmkg(d, &["--config", "bad.toml", "--print-config"]).status.success());
}
