use std::path::Path;
use std::process::{Command, Output};

use steerlab_core::shapeworld::load_external_triplets;
use steerlab_lab::runs::{parse_sweep_csv, sweep_csv, SteerRecord};
use steerlab_lab::ExperimentConfig;

fn steerlab(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steerlab"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A config small enough for a full pipeline in seconds.
fn tiny(dir: &Path) -> std::path::PathBuf {
    let mut cfg = ExperimentConfig {
        out_dir: dir.join("run"),
        seed: 3,
        ..ExperimentConfig::default()
    };
    cfg.dataset.n_images = 60;
    cfg.dataset.train_triplets = 100;
    cfg.dataset.val_triplets = 40;
    cfg.teacher.epochs = 3;
    cfg.teacher.triplets_per_epoch = 64;
    cfg.generator.epochs = 2;
    cfg.generator.hidden = 32;
    cfg.generator.time_dim = 8;
    cfg.sweep.seeds = 3;
    cfg.sweep.values = vec![0.0, 2.5];
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = steerlab(&["gen-data", "--val-fraction", "1.5"], &cfg);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("val_fraction"));

    let out = steerlab(&["report"], &cfg);
    assert_eq!(code(&out), 2);

    let out = steerlab(&["sweep", "--values", "2.5"], &cfg);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let bad = dir.path().join("bad");
    std::fs::create_dir_all(&bad).unwrap();
    std::fs::write(bad.join("sweep.csv"), "value,seed\n1,2\n").unwrap();
    let out = steerlab(&["report", bad.to_str().unwrap()], &cfg);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_checkpoint_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = steerlab(&["steer"], &cfg);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("checkpoint not found"), "{}", stderr(&out));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run = dir.path().join("run");
    let ok = |args: &[&str]| {
        let out = steerlab(args, &cfg);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
        String::from_utf8(out.stdout).unwrap()
    };

    let csv = dir.path().join("val.csv");
    ok(&["gen-data", "--export-triplets", csv.to_str().unwrap()]);
    let manifest = std::fs::read(run.join("data/manifest.json")).unwrap();
    ok(&["gen-data"]);
    assert_eq!(std::fs::read(run.join("data/manifest.json")).unwrap(), manifest);
    assert_eq!(load_external_triplets(&csv).unwrap().triplets.len(), 40);

    let printed = ok(&["train-teacher"]);
    assert!(printed.contains("teacher val accuracy"));
    let curve = std::fs::read_to_string(run.join("models/teacher_loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 3);
    ok(&["train-gen", "--paradigm", "ddim"]);
    let curve = std::fs::read_to_string(run.join("models/ddim_loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 2);
    assert!(!run.join("models").read_dir().unwrap().any(|e| {
        e.unwrap().file_name().to_string_lossy().contains(".tmp")
    }));

    let printed = ok(&["steer", "--alpha", "0", "--seeds", "0,1"]);
    assert!(printed.contains("gain 0.0%"), "{printed}");
    for run_id in 0..2 {
        let path = run.join(format!("steer/ddim/run{run_id}/summary.json"));
        let rec: SteerRecord = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
        assert_eq!(rec.relative_gain, 0.0);
        assert_eq!(rec.final_hpe_distance, rec.control_hpe_distance);
        assert!(run.join(format!("steer/ddim/run{run_id}/final.ppm")).exists());
    }

    ok(&["sweep"]);
    let sweep_dir = run.join("sweep/alpha_ddim");
    let text = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 3);
    let rows = parse_sweep_csv(&text, Path::new("sweep.csv")).unwrap();
    assert_eq!(sweep_csv(&rows), text);
    assert!(std::fs::read_to_string(sweep_dir.join("sweep.svg")).unwrap().contains("<polyline"));

    let report = dir.path().join("report");
    let out = steerlab(
        &[
            "report",
            "--to",
            report.to_str().unwrap(),
            run.join("steer/ddim").to_str().unwrap(),
            sweep_dir.to_str().unwrap(),
        ],
        &cfg,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let md = std::fs::read_to_string(report.join("report.md")).unwrap();
    assert_eq!(md.lines().filter(|l| l.starts_with("| ddim |")).count(), 2);
    let bundle: serde_json::Value = serde_json::from_slice(&std::fs::read(report.join("report.json")).unwrap()).unwrap();
    for p in bundle["sweeps"][0]["points"].as_array().unwrap() {
        let v = p["value"].as_f64().unwrap();
        let ds: Vec<f64> = rows.iter().filter(|r| r.value == v).map(|r| r.final_hpe_distance).collect();
        let hand = ds.iter().sum::<f64>() / ds.len() as f64;
        assert!((p["mean"].as_f64().unwrap() - hand).abs() < 1e-12);
    }
}
