use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use chunkalign::harness::{from_tsv, BenchReport, MetricsReport};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chunkalign"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn chunkalign")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = r#"
[run]
dataset = "data.jsonl"
dataset_size = 40

[model]
encoder_dim = 16
ff_dim = 32
predictor_dim = 16
joiner_dim = 16

[task]
min_tokens = 3
max_tokens = 6

[train]
steps = 20
batch_size = 2
eval_every = 10

[decode]
beam = 2
"#;

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), CONFIG).unwrap();

    let said = ok(
        &["generate", "--config", "run.toml", "--out", "data.jsonl"],
        dir,
    );
    assert!(said.contains("32 train, 4 dev, 4 test"), "{said}");
    let first = fs::read(dir.join("data.jsonl")).unwrap();
    ok(
        &["generate", "--config", "run.toml", "--out", "again.jsonl"],
        dir,
    );
    assert_eq!(first, fs::read(dir.join("again.jsonl")).unwrap());

    ok(&["train", "--config", "run.toml", "--out", "chunk"], dir);
    for f in ["model.ckpt", "train_log.jsonl", "config.toml"] {
        assert!(dir.join("chunk").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(dir.join("chunk/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 20);

    // The logged config alone reproduces the checkpoint.
    ok(
        &["train", "--config", "chunk/config.toml", "--out", "replay"],
        dir,
    );
    assert_eq!(
        fs::read(dir.join("chunk/model.ckpt")).unwrap(),
        fs::read(dir.join("replay/model.ckpt")).unwrap()
    );

    ok(
        &[
            "train",
            "--config",
            "run.toml",
            "--arch",
            "transducer",
            "--seed",
            "3",
            "--out",
            "trans",
        ],
        dir,
    );

    ok(
        &[
            "eval",
            "--config",
            "run.toml",
            "--checkpoint",
            "chunk/model.ckpt",
            "--out",
            "ev",
        ],
        dir,
    );
    let metrics: MetricsReport =
        serde_json::from_str(&fs::read_to_string(dir.join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.utterances, 4);
    assert_eq!(metrics.beam, 2);
    assert_eq!(metrics.loss_curve.len(), 20);
    assert_eq!(
        fs::read_to_string(dir.join("ev/decodes.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    // Parallel decoding keeps the records in order.
    ok(
        &[
            "eval",
            "--config",
            "run.toml",
            "--checkpoint",
            "chunk/model.ckpt",
            "--jobs",
            "3",
            "--out",
            "ev3",
        ],
        dir,
    );
    let strip = |p: &str| -> Vec<(String, Vec<usize>)> {
        fs::read_to_string(dir.join(p))
            .unwrap()
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                (
                    v["id"].as_str().unwrap().to_string(),
                    serde_json::from_value(v["hypothesis"].clone()).unwrap(),
                )
            })
            .collect()
    };
    assert_eq!(strip("ev/decodes.jsonl"), strip("ev3/decodes.jsonl"));

    let table = ok(
        &[
            "bench",
            "--config",
            "run.toml",
            "--checkpoint",
            "chunk/model.ckpt",
            "--checkpoint",
            "trans/model.ckpt",
            "--beam",
            "1",
            "--out",
            "bench",
        ],
        dir,
    );
    assert!(
        table.contains("chunkwise") && table.contains("transducer"),
        "{table}"
    );
    let report =
        BenchReport::from_json(&fs::read_to_string(dir.join("bench/bench.json")).unwrap()).unwrap();
    assert_eq!(report.entries.len(), 2);
    assert_eq!(report.ratios.len(), 1);
    assert_eq!(
        BenchReport::from_json(&report.to_json().unwrap()).unwrap(),
        report
    );

    ok(
        &[
            "inspect-attention",
            "--config",
            "run.toml",
            "--checkpoint",
            "chunk/model.ckpt",
            "--layer",
            "1",
            "--out",
            "att",
        ],
        dir,
    );
    let mut tsv = 0;
    for entry in fs::read_dir(dir.join("att")).unwrap() {
        let path = entry.unwrap().path();
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => {
                tsv += 1;
                let m = from_tsv(&fs::read_to_string(&path).unwrap()).unwrap();
                let (rows, cols) = m.dims2().unwrap();
                assert_eq!(rows, cols);
                for q in 0..rows {
                    let s: f64 = (0..cols).map(|k| m.get2(q, k)).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
            Some("pgm") => assert!(fs::read(&path).unwrap().starts_with(b"P5\n")),
            _ => {}
        }
    }
    assert_eq!(tsv, 2);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let code = |args: &[&str]| run(args, dir).status.code();

    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&[]), Some(1));
    assert_eq!(code(&["train", "--bogus"]), Some(1));
    assert_eq!(code(&["train", "--arch", "lstm"]), Some(1));

    fs::write(dir.join("bad.toml"), "[decode]\ntau = 1.5\n").unwrap();
    assert_eq!(code(&["train", "--config", "bad.toml"]), Some(1));

    assert_eq!(code(&["train", "--config", "missing.toml"]), Some(2));
    fs::write(
        dir.join("data.toml"),
        "[run]\ndataset = \"nowhere.jsonl\"\n",
    )
    .unwrap();
    assert_eq!(code(&["train", "--config", "data.toml"]), Some(2));
    fs::write(dir.join("junk.ckpt"), "not a checkpoint").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", "junk.ckpt"]), Some(2));

    fs::write(
        dir.join("wild.toml"),
        "[run]\ndataset_size = 20\n[train]\nsteps = 50\nlearning_rate = 1e300\nwarmup_steps = 1\nclip_norm = 0.0\n",
    )
    .unwrap();
    assert_eq!(code(&["train", "--config", "wild.toml"]), Some(3));
}
