//! End-to-end command-line tests on a miniature phantom.

use std::path::Path;
use std::process::{Command, Output};

fn relvox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relvox")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "phantom": {
            "subjects": 12,
            "extents": [16, 16, 16],
            "contrasts": 3,
            "tract_radius": 2.0,
            "effect_sizes": [0.45, -0.4, 0.3],
            "lesion_count": 1,
            "lesion_radius": 1.5,
            "lesion_intensity": 0.3,
            "noise_sigma": 0.03,
            "severe_fraction": 0.5,
            "severity_gap": 1.0,
            "follow_up_fraction": 0.25,
            "test_fraction": 0.25,
            "seed": 7
        },
        "network": {
            "paths": 3,
            "input_extents": [16, 16, 16],
            "init_filters": 8,
            "dense_blocks": 2,
            "layers_per_block": 2,
            "growth": 2,
            "bottleneck": 4,
            "hidden_width": 8,
            "attention_width": 4,
            "age_divisor": 100.0
        },
        "train": {
            "learning_rate": 1e-3,
            "epochs": 0,
            "folds": 2,
            "batch_size": 4,
            "seed": 7,
            "augment": { "flips": false, "rotate90": false, "noise_sigma": 0.0, "affine": false }
        },
        "eval": {
            "quantiles": [0.4],
            "reference_quantile": 0.4,
            "ig_steps": 2,
            "permutations": 50,
            "scenarios": [3, 9],
            "pool": "val-test",
            "seed": 7
        }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.display().to_string()
}

#[test]
fn full_pipeline_on_tiny_phantom() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    let data2 = tmp.path().join("data2");

    // gen-phantom twice: identical artifacts
    let out = relvox(&["gen-phantom", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "gen-phantom: {}", String::from_utf8_lossy(&out.stderr));
    let out = relvox(&["gen-phantom", "--config", &cfg, "--out", data2.to_str().unwrap()]);
    assert!(out.status.success());
    for name in ["manifest.json", "sub000_tp0_c0.vol", "sub000_tract.vol"] {
        let a = std::fs::read(data.join(name)).unwrap();
        let b = std::fs::read(data2.join(name)).unwrap();
        assert_eq!(a, b, "{} differs between identical runs", name);
    }
    assert!(data.join("resolved-config.json").is_file());
    assert!(data.join("summary.json").is_file());

    // train with epochs = 0: initial-weight checkpoints plus one metrics row per fold
    let tdir = tmp.path().join("train");
    let out = relvox(&["train", "--config", &cfg, "--data", data.to_str().unwrap(), "--out", tdir.to_str().unwrap()]);
    assert!(out.status.success(), "train: {}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(tdir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "header + one row per fold:\n{}", metrics);
    assert!(tdir.join("fold_0.ckpt").is_file() && tdir.join("fold_1.ckpt").is_file());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tdir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["best_fold"].is_u64());

    // scenarios: curves, report, masks
    let sdir = tmp.path().join("scen");
    let out = relvox(&[
        "scenarios",
        "--config",
        &cfg,
        "--data",
        data.to_str().unwrap(),
        "--train-dir",
        tdir.to_str().unwrap(),
        "--out",
        sdir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "scenarios: {}", String::from_utf8_lossy(&out.stderr));
    let curves = std::fs::read_to_string(sdir.join("curves.csv")).unwrap();
    assert!(curves.starts_with("scenario,quantile,auc\n"));
    assert!(curves.lines().any(|l| l.starts_with("3,")));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sdir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["scenarios"].as_array().unwrap().len(), 2);
    assert!(sdir.join("masks/scenario_03.pgm").is_file());

    // report: markdown + montage
    let rdir = tmp.path().join("report");
    let out = relvox(&["report", "--run", sdir.to_str().unwrap(), "--out", rdir.to_str().unwrap()]);
    assert!(out.status.success(), "report: {}", String::from_utf8_lossy(&out.stderr));
    let md = std::fs::read_to_string(rdir.join("summary.md")).unwrap();
    assert!(md.contains("Ranking by AUC drop"));
    assert!(rdir.join("montage.pgm").is_file());

    // explain one subject, one scenario
    let edir = tmp.path().join("explain");
    let subject = {
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap())
                .unwrap();
        // the pool is val+test; pick the first test subject for a stable hit
        manifest["test_subjects"][0].as_u64().unwrap().to_string()
    };
    let out = relvox(&[
        "explain",
        "--config",
        &cfg,
        "--data",
        data.to_str().unwrap(),
        "--train-dir",
        tdir.to_str().unwrap(),
        "--out",
        edir.to_str().unwrap(),
        "--scenario",
        "3",
        "--subject",
        &subject,
    ]);
    assert!(out.status.success(), "explain: {}", String::from_utf8_lossy(&out.stderr));
    let entries: Vec<_> = std::fs::read_dir(&edir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    assert!(entries.iter().any(|n| n.ends_with("_c0.vol")), "{:?}", entries);
    assert!(entries.iter().any(|n| n.ends_with("_combined.vol")));
    let sidecar = entries.iter().find(|n| n.ends_with(".json") && n.starts_with("sub")).unwrap();
    let sc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(edir.join(sidecar)).unwrap()).unwrap();
    assert!(sc["conservation_residual"].is_number());
    assert!(sc["age_relevance"].is_number());
}

#[test]
fn config_errors_use_exit_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"phantom": {"subjects": 4}, "no_such_section": 1}"#).unwrap();
    let out = relvox(&[
        "gen-phantom",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[E_CONFIG]:"), "stderr: {}", err);
}

#[test]
fn data_errors_use_exit_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = relvox(&[
        "train",
        "--data",
        tmp.path().join("missing").to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[E_DATA]:"), "stderr: {}", err);
}
