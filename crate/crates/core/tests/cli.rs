use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cardiseg(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cardiseg"));
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.arg("--out").arg(out).args(args).env("CARDISEG_THREADS", "1").output().unwrap()
}

const TINY: &str = r#"{
    "dataset": {
        "train": {"kind": "synthetic", "seed": 4, "spec": {"distribution": "A", "n_patients": 8, "slices": 2,
                  "image_size": [30, 42], "spacing": [2.4, 3.2]}},
        "unseen": {"kind": "synthetic", "seed": 5, "spec": {"distribution": "B", "n_patients": 5, "slices": 2,
                   "image_size": [30, 42], "spacing": [2.4, 3.2], "id_prefix": "b"}}
    },
    "model": {"input_size": [32, 32], "base_channels": 4},
    "train": {"batch_size": 4, "max_epochs": 2},
    "experiment": {"name": "tiny", "folds": 2,
                   "finetune": {"n_schedule": [1, 3], "continue_epochs": 1}}
}"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, TINY).unwrap();
    path
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = cardiseg(&["crossval"], Some(&missing), dir.path());
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"batch_size": "eight"}}"#).unwrap();
    let o = cardiseg(&["train"], Some(&bad), dir.path());
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("train.batch_size"), "{stderr}");
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["one", "two"] {
        let o = cardiseg(&["--seed", "3", "synth", "--distribution", "b", "--patients", "2"], None, &dir.path().join(out));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (one, two) = (files(&dir.path().join("one")), files(&dir.path().join("two")));
    assert!(!one.is_empty());
    assert_eq!(one, two);
}

#[test]
fn nifti_dataset_trains_through_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = cardiseg(&["synth", "--patients", "4", "--format", "nifti"], None, &data);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(files(&data).iter().any(|(p, _)| p.extension().is_some_and(|e| e == "nii")));

    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"dataset": {"train": {"kind": "manifest", "path": "data/manifest.json", "cohort": "A"}, "unseen": null},
            "model": {"input_size": [32, 32], "base_channels": 4},
            "train": {"batch_size": 4, "max_epochs": 1},
            "experiment": {"name": "nii", "folds": 2}}"#,
    )
    .unwrap();
    let o = cardiseg(&["crossval"], Some(&config), &dir.path().join("runs"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("runs/nii/gap_report.json").is_file());
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("runs");
    let run = |args: &[&str]| {
        let o = cardiseg(args, Some(&config), &out);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["crossval"]);
    let exp = out.join("tiny");
    for f in ["gap_report.json", "gap_report.csv", "fold_metrics.csv", "fold_0/metrics.json", "fold_1/checkpoint.bin"] {
        assert!(exp.join(f).is_file(), "{f}");
    }

    run(&["train"]);
    let ckpt = exp.join("train/checkpoint.bin");
    assert!(ckpt.is_file());
    run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--unseen"]);
    assert!(std::fs::read_dir(&exp).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with("eval_")));

    run(&["finetune"]);
    for f in ["sweep_curves.csv", "improvement.csv", "finetune.json", "method3_n003/metrics.json"] {
        assert!(exp.join(f).is_file(), "{f}");
    }
    run(&["report"]);
    for f in ["boxplot.svg", "sweep_method1.svg", "delta_method2.svg"] {
        let text = std::fs::read_to_string(exp.join(f)).unwrap();
        assert!(text.starts_with("<svg") || text.starts_with("<?xml"), "{f}");
    }
}
