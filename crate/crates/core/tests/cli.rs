use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gtn");

fn gtn(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn gtn")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = gtn(&[
        "synth",
        "--out",
        s(&data),
        "--seed",
        "3",
        "--channels",
        "3",
        "--min-len",
        "5",
        "--max-len",
        "8",
        "--train-per-class",
        "6",
        "--test-per-class",
        "3",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    data
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    fs::write(
        &path,
        r#"{"d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 16, "d_tower": 8, "batch_size": 4}"#,
    )
    .unwrap();
    path
}

fn train(data: &Path, cfg: &Path, out: &Path, variant: &str) -> Output {
    gtn(&[
        "train",
        "--dataset",
        s(data),
        "--config",
        s(cfg),
        "--variant",
        variant,
        "--seed",
        "7",
        "--epochs",
        "3",
        "--out",
        s(out),
        "--quiet",
    ])
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(gtn(&["train"]).status.code(), Some(1));
    assert_eq!(gtn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        gtn(&["train", "--dataset", "x", "--variant", "nope"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(gtn(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gtn(&[
        "train",
        "--dataset",
        s(&dir.path().join("absent")),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn train_writes_a_complete_reproducible_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let res = train(&data, &cfg, out, "gated");
        assert!(
            res.status.success(),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
    }
    for f in ["config.json", "log.csv", "best.ckpt", "report.json"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    for f in ["log.csv", "best.ckpt", "report.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let config: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("config.json")).unwrap()).unwrap();
    for key in [
        "lr",
        "dropout",
        "plateau_patience",
        "use_causal_mask_step",
        "use_causal_mask_channel",
        "seed",
        "epochs",
        "d_model",
    ] {
        assert!(!config[key].is_null(), "{key} missing from config.json");
    }
    assert_eq!(config["d_model"], 8);
    assert_eq!(config["lr"], 0.0001);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["variant"], "gated");
    assert!(report["test_accuracy"].is_f64() && report["epoch"].is_u64());
    let log = fs::read_to_string(a.join("log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,train_acc,test_acc,lr\n"));
    assert_eq!(log.lines().count(), 4);

    // the stored config alone reproduces the run
    let c = dir.path().join("c");
    let res = gtn(&[
        "train",
        "--dataset",
        s(&data),
        "--config",
        s(&a.join("config.json")),
        "--out",
        s(&c),
        "-q",
    ]);
    assert!(res.status.success());
    assert_eq!(
        fs::read(a.join("report.json")).unwrap(),
        fs::read(c.join("report.json")).unwrap()
    );
}

#[test]
fn ablation_cells_equal_individual_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = small_config(dir.path());
    let ab = dir.path().join("ablate");
    let res = gtn(&[
        "ablate",
        "--dataset",
        s(&data),
        "--config",
        s(&cfg),
        "--seed",
        "7",
        "--epochs",
        "3",
        "--out",
        s(&ab),
        "-q",
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let table = fs::read_to_string(ab.join("ablation.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "dataset,step,step+mask,channel,channel+mask,concat,gated"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 7);
    assert_eq!(row[0], "synthetic");

    for (i, (variant, slug)) in [("step+mask", "step_mask"), ("gated", "gated")]
        .iter()
        .enumerate()
    {
        let single = dir.path().join(format!("single{i}"));
        assert!(train(&data, &cfg, &single, variant).status.success());
        let cell = ab.join("synthetic").join(slug);
        for f in ["report.json", "log.csv", "best.ckpt"] {
            assert_eq!(
                fs::read(cell.join(f)).unwrap(),
                fs::read(single.join(f)).unwrap(),
                "{variant} {f}"
            );
        }
    }
}

#[test]
fn inspect_exports_and_validates_sample_ids() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    assert!(train(&data, &cfg, &run, "gated").status.success());
    let ckpt = run.join("best.ckpt");

    let bad = gtn(&[
        "inspect",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&data),
        "--sample-id",
        "99",
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_ne!(bad.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("0..=5"));

    let (i1, i2) = (dir.path().join("i1"), dir.path().join("i2"));
    for out in [&i1, &i2] {
        let res = gtn(&[
            "inspect",
            "--checkpoint",
            s(&ckpt),
            "--dataset",
            s(&data),
            "--sample-id",
            "2",
            "--out",
            s(out),
        ]);
        assert!(
            res.status.success(),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
    }
    let sample = i1.join("sample_2");
    for f in [
        "attention_step_layer0_mean.csv",
        "attention_channel_layer0_mean.csv",
        "distance_channel_dtw.csv",
        "distance_step_euclid.csv",
        "manifest.json",
    ] {
        assert!(sample.join(f).is_file(), "{f}");
        assert_eq!(
            fs::read(sample.join(f)).unwrap(),
            fs::read(i2.join("sample_2").join(f)).unwrap()
        );
    }
    for f in [
        "gate_stats.csv",
        "gate_stats.json",
        "embeddings.csv",
        "features.csv",
    ] {
        assert!(i1.join(f).is_file(), "{f}");
        assert_eq!(fs::read(i1.join(f)).unwrap(), fs::read(i2.join(f)).unwrap());
    }

    let other = dir.path().join("other");
    let res = gtn(&["synth", "--out", s(&other), "--channels", "5"]);
    assert!(res.status.success());
    let res = gtn(&[
        "inspect",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&other),
        "--sample-id",
        "0",
        "--out",
        s(&dir.path().join("y")),
    ]);
    assert_eq!(res.status.code(), Some(1));
}
