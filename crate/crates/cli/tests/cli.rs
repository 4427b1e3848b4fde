use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cvreg_core::io::{read_volume, write_volume};
use cvreg_core::synth::make_phantom;
use cvreg_core::{DisplacementField, FeatureProviderConfig, Volume, VolumeKind};

fn cvreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvreg")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &Path, name: &str, vol: &Volume) -> PathBuf {
    let path = dir.join(name);
    write_volume(&path, vol).unwrap();
    path
}

fn cube_labels(dims: [usize; 3], lo: usize, hi: usize) -> Volume {
    Volume::from_fn(dims, [1.0; 3], 1, VolumeKind::LabelMap, |_, x, y, z| {
        if [x, y, z].iter().all(|&c| (lo..hi).contains(&c)) {
            1.0
        } else {
            0.0
        }
    })
    .unwrap()
}

#[test]
fn register_self_echoes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let (img, _) = make_phantom([40, 40, 40], 1).unwrap();
    let input = write(dir.path(), "img.cvr", &img);
    let (field, warped, report) = (dir.path().join("u.cvr"), dir.path().join("w.cvr"), dir.path().join("r.json"));
    let out = cvreg(&[
        "register", "--fixed", p(&input), "--moving", p(&input), "--out-field", p(&field), "--out-warped", p(&warped),
        "--report", p(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["config"]["levels"], 3);
    assert_eq!(json["config"]["radii"], serde_json::json!([2, 3, 3]));
    assert_eq!(json["config"]["solver"]["schedule"], serde_json::json!([0.003, 0.01, 0.03, 0.1, 0.3, 1.0]));
    assert_eq!(json["config"]["instance_opt"]["learning_rate"], 0.05);
    assert_eq!(json["config"]["instance_opt"]["iterations"], 50);
    assert_eq!(json["effective_capture_radius"], 34);
    assert!(json["max_abs_displacement"].as_f64().unwrap() < 0.5);
    let w = read_volume(&warped).unwrap();
    let mean = w.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.num_voxels() as f64;
    assert!(mean < 0.5, "{mean}");
}

#[test]
fn register_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.cvr", &make_phantom([32, 32, 32], 1).unwrap().0);
    let b = write(dir.path(), "b.cvr", &make_phantom([32, 32, 24], 1).unwrap().0);
    let u = dir.path().join("u.cvr");
    let out = cvreg(&["register", "--fixed", p(&a), "--moving", p(&b), "--out-field", p(&u)]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("dimension mismatch"), "{}", stderr(&out));
    let out = cvreg(&["register", "--fixed", p(&a), "--moving", p(&a), "--out-field", p(&u), "--radii", "1,2"]);
    assert_eq!(code(&out), 2);
    let out = cvreg(&["register", "--fixed", p(&a), "--moving", p(&a), "--out-field", p(&u), "--schedule", "1,0.5"]);
    assert_eq!(code(&out), 2);
    let out = cvreg(&["register", "--fixed", p(&a), "--moving", "missing.cvr", "--out-field", p(&u)]);
    assert_eq!(code(&out), 3);
    let out = cvreg(&["register", "--fixed", p(&a)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn warp_zero_and_constant_fields() {
    let dir = tempfile::tempdir().unwrap();
    let (img, labels) = make_phantom([20, 20, 20], 2).unwrap();
    let input = write(dir.path(), "img.cvr", &img);
    let lab = write(dir.path(), "lab.cvr", &labels);
    let zero = write(dir.path(), "zero.cvr", DisplacementField::zeros([20; 3], [1.0; 3]).volume());
    let out_path = dir.path().join("out.cvr");
    assert_eq!(code(&cvreg(&["warp", "--in", p(&input), "--field", p(&zero), "--out", p(&out_path)])), 0);
    assert_eq!(read_volume(&out_path).unwrap(), read_volume(&input).unwrap());

    let shift = write(dir.path(), "shift.cvr", DisplacementField::constant([20; 3], [1.0; 3], [2.0, 0.0, -1.0]).volume());
    assert_eq!(code(&cvreg(&["warp", "--in", p(&lab), "--field", p(&shift), "--out", p(&out_path), "--label"])), 0);
    let w = read_volume(&out_path).unwrap();
    assert_eq!(w.kind(), VolumeKind::LabelMap);
    for (x, y, z) in [(3, 4, 5), (10, 10, 10), (17, 2, 9)] {
        assert_eq!(w.get(0, x, y, z), labels.get(0, x + 2, y, z - 1));
    }
    let out = cvreg(&["warp", "--in", p(&input), "--field", "missing.cvr", "--out", p(&out_path)]);
    assert_eq!(code(&out), 3);
}

#[test]
fn eval_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let dims = [10, 10, 10];
    let a = write(dir.path(), "a.cvr", &cube_labels(dims, 2, 6));
    // The same cube moved half its width along x: |A∩B| = |A|/2.
    let shifted = Volume::from_fn(dims, [1.0; 3], 1, VolumeKind::LabelMap, |_, x, y, z| {
        if (4..8).contains(&x) && (2..6).contains(&y) && (2..6).contains(&z) {
            1.0
        } else {
            0.0
        }
    })
    .unwrap();
    let b = write(dir.path(), "b.cvr", &shifted);
    let zero = write(dir.path(), "zero.cvr", DisplacementField::zeros(dims, [1.0; 3]).volume());

    let out = cvreg(&["eval", "--labels-a", p(&a), "--labels-b", p(&a), "--field", p(&zero)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["mean_dice"], 1.0);
    assert_eq!(json["sdlogj"], 0.0);

    let out = cvreg(&["eval", "--labels-a", p(&a), "--labels-b", p(&b)]);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["dice"]["1"], 0.5);
    assert!(json["sdlogj"].is_null());
}

#[test]
fn landscape_csv_and_axis_check() {
    let dir = tempfile::tempdir().unwrap();
    let (img, _) = make_phantom([24, 24, 24], 3).unwrap();
    let input = write(dir.path(), "img.cvr", &img);
    let csv = dir.path().join("l.csv");
    let out = cvreg(&["landscape", "--image", p(&input), "--provider", "intensity", "--out-csv", p(&csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 625);
    let best = rows.iter().max_by(|a, b| a[2].total_cmp(&b[2])).unwrap();
    assert_eq!((best[0], best[1]), (0.0, 0.0));
    let out = cvreg(&["landscape", "--image", p(&input), "--axes", "2,2", "--out-csv", p(&csv)]);
    assert_eq!(code(&out), 2);
    let out = cvreg(&["landscape", "--image", p(&input), "--range", "-60,50", "--out-csv", p(&csv)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = format!("{}/a_", dir.path().display());
    let b = format!("{}/b_", dir.path().display());
    for prefix in [&a, &b] {
        let out = cvreg(&["synth", "--dims", "24,20,16", "--seed", "4", "--magnitude", "3", "--sigma", "3", "--out-prefix", prefix]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for name in ["image", "labels", "field", "warped_image", "warped_labels"] {
        let x = std::fs::read(format!("{a}{name}.cvr")).unwrap();
        assert_eq!(x, std::fs::read(format!("{b}{name}.cvr")).unwrap(), "{name}");
    }
    let field = DisplacementField::from_volume(read_volume(format!("{a}field.cvr")).unwrap()).unwrap();
    assert!((field.max_norm() - 3.0).abs() < 1e-5);
    let out = cvreg(&["synth", "--dims", "16", "--magnitude", "500", "--sigma", "1", "--out-prefix", &a]);
    assert_eq!(code(&out), 4);
}

#[test]
fn features_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (img, _) = make_phantom([20, 18, 16], 6).unwrap();
    let input = write(dir.path(), "img.cvr", &img);
    let out_path = dir.path().join("f.cvr");
    assert_eq!(code(&cvreg(&["features", "--in", p(&input), "--out", p(&out_path)])), 0);
    let stored = read_volume(&out_path).unwrap();
    let loaded = read_volume(&input).unwrap();
    let direct = FeatureProviderConfig::default().extract(&loaded).unwrap();
    assert_eq!(stored.channels(), 6);
    assert!(stored.data().iter().zip(direct.volume().data()).all(|(a, b)| *a == (*b as f32) as f64));

    let flat = write(dir.path(), "flat.cvr", &Volume::zeros([8, 8, 8], [1.0; 3], 1, VolumeKind::ScalarImage).unwrap());
    let out = cvreg(&["features", "--in", p(&flat), "--provider", "intensity", "--out", p(&out_path)]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("constant image"), "{}", stderr(&out));
}
