use std::path::Path;
use std::process::{Command, Output};

fn csgan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csgan"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn error_code(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr);
    err.lines()
        .find_map(|l| l.strip_prefix("error_code="))
        .unwrap_or_else(|| panic!("no error_code line in {err}"))
        .to_string()
}

const TINY: &str = r#"{
  "synth": {"n_sentences": 60},
  "model": {"n_layers": 1, "hidden": 16, "n_heads": 2, "ff_dim": 32},
  "stage1": {"pretrain_iters": 3, "total_iters": 3, "batch_size": 8},
  "stage2": {"total_iters": 3, "batch_size": 8},
  "eval": {"max_sentences": 20, "batch_size": 10},
  "max_len": 16
}"#;

fn synth_tiny(dir: &Path) {
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();
    ok(&csgan(
        &[
            "--config",
            "tiny.json",
            "synth",
            "--seed",
            "7",
            "--out",
            "data",
        ],
        dir,
    ));
    ok(&csgan(
        &[
            "vocab",
            "--matrix",
            "data/matrix.txt",
            "--embedded",
            "data/embedded.txt",
            "--cs",
            "data/real_cs.txt",
            "--out",
            "data/vocab.txt",
        ],
        dir,
    ));
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&csgan(
            &["synth", "--seed", "7", "--n-sentences", "50", "--out", out],
            dir.path(),
        ));
    }
    for f in ["matrix.txt", "embedded.txt", "real_cs.txt"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f}");
    }
    assert!(dir.path().join("a/synth_manifest.json").exists());
}

#[test]
fn stage2_without_init_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = csgan(
        &[
            "train", "--stage", "2", "--seed", "1", "--vocab", "v.txt", "--out", "o",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_code(&out), "MISSING_STAGE1_INIT");
}

#[test]
fn seed_is_mandatory() {
    let dir = tempfile::tempdir().unwrap();
    let out = csgan(&["synth", "--out", "d"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_code(&out), "MISSING_SEED");
    let out = csgan(
        &["train", "--stage", "1", "--vocab", "v.txt", "--out", "o"],
        dir.path(),
    );
    assert_eq!(error_code(&out), "MISSING_SEED");
}

#[test]
fn bad_config_and_usage_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.json"),
        r#"{"stage1": {"learning_rate": 1}}"#,
    )
    .unwrap();
    let out = csgan(
        &["--config", "bad.json", "synth", "--seed", "1", "--out", "d"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_code(&out), "BAD_CONFIG");

    let out = csgan(&["train", "--stage", "3"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_code(&out), "USAGE");

    let out = csgan(
        &[
            "evaluate", "--vocab", "nope.txt", "--corpus", "c.txt", "--out", "r.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_code(&out), "MISSING_INPUT");
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    synth_tiny(dir.path());
    let out = csgan(
        &[
            "--config",
            "tiny.json",
            "train",
            "--stage",
            "1",
            "--seed",
            "1",
            "--vocab",
            "data/vocab.txt",
            "--matrix",
            "data/matrix.txt",
            "--embedded",
            "data/embedded.txt",
            "--out",
            "run",
            "--lr-gen",
            "1e30",
            "--lr-disc",
            "1e30",
            "--pretrain-iters",
            "20",
            "--iters",
            "20",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(error_code(&out), "DIVERGED");
}

#[test]
fn full_command_sequence_produces_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_tiny(d);
    let c = ["--config", "tiny.json"];
    let run = |args: &[&str]| {
        let all: Vec<&str> = c.iter().chain(args).copied().collect();
        ok(&csgan(&all, d));
    };
    run(&[
        "pretrain",
        "--seed",
        "1",
        "--vocab",
        "data/vocab.txt",
        "--matrix",
        "data/matrix.txt",
        "--embedded",
        "data/embedded.txt",
        "--out",
        "run",
    ]);
    run(&[
        "train",
        "--stage",
        "1",
        "--init",
        "run/pretrain.ckpt",
        "--seed",
        "1",
        "--vocab",
        "data/vocab.txt",
        "--matrix",
        "data/matrix.txt",
        "--embedded",
        "data/embedded.txt",
        "--out",
        "run",
    ]);
    run(&[
        "negatives",
        "--checkpoint",
        "run/stage1.ckpt",
        "--vocab",
        "data/vocab.txt",
        "--matrix",
        "data/matrix.txt",
        "--out",
        "data/negatives.txt",
    ]);
    run(&[
        "train",
        "--stage",
        "2",
        "--init",
        "run/stage1.ckpt",
        "--seed",
        "1",
        "--vocab",
        "data/vocab.txt",
        "--negatives",
        "data/negatives.txt",
        "--real-cs",
        "data/real_cs.txt",
        "--out",
        "run",
    ]);
    for src in ["negatives", "matrix", "embedded"] {
        let out = format!("gen/from_{src}.txt");
        run(&[
            "generate",
            "--checkpoint",
            "run/stage2.ckpt",
            "--vocab",
            "data/vocab.txt",
            "--source",
            src,
            "--style",
            "l_n",
            "--data-dir",
            "data",
            "--out",
            &out,
        ]);
    }
    run(&[
        "evaluate",
        "--vocab",
        "data/vocab.txt",
        "--corpus",
        "data/real_cs.txt",
        "--name",
        "real_cs",
        "--out",
        "eval/real_cs.json",
        "--format",
        "json",
    ]);
    run(&[
        "report",
        "--vocab",
        "data/vocab.txt",
        "--reference",
        "data/real_cs.txt",
        "--candidate",
        "stage1=data/negatives.txt",
        "--candidate",
        "stage2_from_negatives=gen/from_negatives.txt",
        "--candidate",
        "from_matrix=gen/from_matrix.txt",
        "--candidate",
        "from_embedded=gen/from_embedded.txt",
        "--out",
        "report",
    ]);

    let report = std::fs::read_to_string(d.join("report/report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(
        lines[0],
        "corpus,m_index,lang_entropy,i_index,burstiness,n_tokens,n_switches,n_spans"
    );
    assert_eq!(lines.len(), 6);
    let names: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "real_cs",
            "stage1",
            "stage2_from_negatives",
            "from_matrix",
            "from_embedded"
        ]
    );
    assert!(std::fs::read_to_string(d.join("report/comparison.csv"))
        .unwrap()
        .contains("distance_m_index"));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/stage2_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["stage"], 2);
    assert!(manifest["corpus_hashes"]["real_cs"].is_string());
    assert_eq!(manifest["config"]["run"]["stage2"]["total_iters"], 3);
    for m in [
        "run/pretrain_manifest.json",
        "run/stage1_manifest.json",
        "data/negatives.txt.manifest.json",
        "gen/from_matrix.txt.manifest.json",
        "eval/real_cs.json.manifest.json",
        "report/report_manifest.json",
    ] {
        assert!(d.join(m).exists(), "{m}");
    }
}
