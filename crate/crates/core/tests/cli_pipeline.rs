use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;
use updraft::cli::{run, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION};
use updraft::grid_io::{write_grid, write_terrain, Grid3D, HeightDatum, TerrainGrid};

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn small_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "scenes": 8,
        "synth": {"ny": 48, "nx": 48, "nz": 6},
        "prepare": {"patch": [16, 16], "n_train": 24, "n_val": 8, "n_test": 8},
        "model": {"depth": 1, "base_filters": 4},
        "train": {"max_epochs": 2, "batch_size": 8, "patience": 2},
        "timeit": {"batch_size": 4, "n_batches": 3, "patch": 16}
    });
    let path = dir.join("run.json");
    fs::write(&path, cfg.to_string()).unwrap();
    s(&path)
}

fn pipeline(root: &Path) {
    let cfg = small_config(root);
    let o = |sub: &str| s(&root.join(sub));
    assert_eq!(run(["updraft", "--config", &cfg, "--seed", "7", "--out", &o("synth"), "synth"]), EXIT_OK);
    let scenes = o("synth/scenes");
    assert_eq!(run(["updraft", "--config", &cfg, "--seed", "7", "--out", &o("data"), "prepare", "--scenes-dir", &scenes]), EXIT_OK);
    assert_eq!(run(["updraft", "--config", &cfg, "--seed", "7", "--out", &o("model"), "train", "--data", &o("data")]), EXIT_OK);
    let ckpt = o("model/model.ckpt");
    assert_eq!(
        run([
            "updraft",
            "--config",
            &cfg,
            "--out",
            &o("pred"),
            "predict",
            "--model",
            &ckpt,
            "--data",
            &o("data"),
            "--quantiles",
            "0.5,0.8"
        ]),
        EXIT_OK
    );
    assert_eq!(run(["updraft", "--config", &cfg, "--out", &o("eval"), "evaluate", "--pred", &o("pred")]), EXIT_OK);
}

#[test]
fn pipeline_runs_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());

    for name in ["synth_7_refl.zgrid", "synth_7_w.zgrid", "synth_14_w.zgrid"] {
        let pa = fs::read(a.path().join("synth/scenes").join(name)).unwrap();
        let pb = fs::read(b.path().join("synth/scenes").join(name)).unwrap();
        assert_eq!(pa, pb, "{name}");
    }
    for file in ["data/train.json", "model/history.json", "model/model.ckpt", "eval/report.json", "eval/series.csv"] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }

    let report: Value = serde_json::from_slice(&fs::read(a.path().join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 8 * 256);
    assert!(report["pitd"].is_number());
    assert!(a.path().join("pred/pred/00000_quantiles.zgrid").exists());
    for cmd in ["synth", "prepare", "train", "predict", "evaluate"] {
        let dir = match cmd {
            "synth" => "synth",
            "prepare" => "data",
            "train" => "model",
            "predict" => "pred",
            _ => "eval",
        };
        let resolved: Value = serde_json::from_slice(&fs::read(a.path().join(dir).join(format!("{cmd}.resolved.json"))).unwrap()).unwrap();
        assert_eq!(resolved["command"], cmd);
    }

    let timings = s(&a.path().join("timeit"));
    let cfg = s(&a.path().join("run.json"));
    let ckpt = s(&a.path().join("model/model.ckpt"));
    assert_eq!(run(["updraft", "--config", &cfg, "--out", &timings, "timeit", "--model", &ckpt]), EXIT_OK);
    let t: Value = serde_json::from_slice(&fs::read(a.path().join("timeit/timings.json")).unwrap()).unwrap();
    assert_eq!(t["timings_ms"].as_array().unwrap().len(), 3);
}

#[test]
fn evaluate_identical_grids_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f32> = (0..64).map(|i| (i % 20) as f32).collect();
    let ys: Vec<f64> = (0..8).map(f64::from).collect();
    let g = Grid3D::from_2d("w", "m/s", ys.clone(), ys, values).unwrap();
    let path = dir.path().join("w.zgrid");
    write_grid(&g, &path).unwrap();
    let out = s(&dir.path().join("eval"));
    assert_eq!(run(["updraft", "--out", &out, "evaluate", "--truth", &s(&path), "--median", &s(&path)]), EXIT_OK);
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["rmse"], 0.0);
    assert_eq!(report["iou"]["5"], 1.0);
    assert_eq!(report["iou"]["15"], 1.0);
}

#[test]
fn regrid_to_agl_block_mean() {
    let dir = tempfile::tempdir().unwrap();
    let ys = vec![0.0, 1.0];
    let xs = vec![0.0, 1.0];
    let mut values = Vec::new();
    for z in [2.0f32, 2.5, 3.0] {
        values.extend([z; 4]);
    }
    let g = Grid3D::new("refl", "dBZ", vec![2.0, 2.5, 3.0], ys.clone(), xs.clone(), HeightDatum::Msl, values).unwrap();
    let input = dir.path().join("msl.zgrid");
    write_grid(&g, &input).unwrap();
    let terrain = dir.path().join("terrain.zgrid");
    write_terrain(&TerrainGrid::flat(ys, xs, 1.5).unwrap(), &terrain).unwrap();
    let out = dir.path().join("agl");
    let code = run([
        "updraft",
        "--out",
        &s(&out),
        "regrid",
        "--in",
        &s(&input),
        "--terrain",
        &s(&terrain),
        "--levels",
        "0.5:1.5:3",
        "--block-mean",
        "2",
    ]);
    assert_eq!(code, EXIT_OK);
    let r = updraft::read_grid(out.join("msl.zgrid")).unwrap();
    assert_eq!(r.height_datum, HeightDatum::Agl);
    assert_eq!(r.z_coords, vec![0.5, 1.0, 1.5]);
    assert_eq!(r.values, vec![2.0, 2.5, 3.0]);
    // overwriting the input is refused
    assert_eq!(run(["updraft", "--out", &s(dir.path()), "regrid", "--in", &s(&input)]), EXIT_VALIDATION);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_updraft");
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| Command::new(bin).args(args).current_dir(dir.path()).output().unwrap().status.code().unwrap();
    assert_eq!(code(&["nonsense"]), EXIT_USAGE);
    assert_eq!(code(&["train", "--data", "missing"]), EXIT_VALIDATION);
    assert_eq!(code(&["--config", "nope.json", "synth"]), EXIT_VALIDATION);
    fs::write(dir.path().join("bad.json"), r#"{"train": {"batch_size": 0}}"#).unwrap();
    fs::create_dir_all(dir.path().join("d")).unwrap();
    assert_eq!(code(&["synth", "--scenes", "0"]), EXIT_VALIDATION);
    assert_eq!(code(&["--seed", "1", "--out", "o", "synth", "--scenes", "1", "--ny", "8", "--nx", "8", "--nz", "2"]), 0);
    assert!(dir.path().join("o/scenes/synth_1_refl.zgrid").exists());
    assert_eq!(code(&["--out", "p", "predict", "--model", "o/x.ckpt", "--data", "d", "--quantiles", "1.5"]), EXIT_VALIDATION);
}
