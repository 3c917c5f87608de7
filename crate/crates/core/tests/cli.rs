use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use atdn::dataio::write_pose_file;
use atdn::geometry::{Pose, Trajectory};
use nalgebra::Vector3;

fn atdn(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_atdn"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_traj(path: &Path, poses: Vec<Pose>) {
    let mut f = fs::File::create(path).unwrap();
    write_pose_file(&Trajectory::from_poses(poses).unwrap(), &mut f).unwrap();
}

#[test]
fn missing_pose_file_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = atdn(dir.path(), "seed = 3\n", &["train-vo"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("paths.poses"), "{}", stderr(&out));
}

#[test]
fn every_config_error_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = atdn(dir.path(), "seed = 1\nvo.lr_max = fast\nmap.batch = -4\nthis line is broken\n", &["eval"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for key in ["vo.lr_max", "map.batch", "line 4"] {
        assert!(err.contains(key), "missing {key} in {err}");
    }
}

#[test]
fn seed_is_mandatory() {
    let dir = tempfile::tempdir().unwrap();
    let out = atdn(dir.path(), "", &["eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("seed"));
}

#[test]
fn unknown_key_warns_but_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = atdn(dir.path(), "seed = 1\nsynth.frames = 12\nfuture.knob = 3\n", &["synth"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("future.knob"));
    assert!(dir.path().join("out/data/poses.txt").exists());
}

#[test]
fn eval_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("out/data");
    fs::create_dir_all(&data).unwrap();
    let gt: Vec<Pose> = (0..150).map(|k| Pose::from_translation(Vector3::new(0.0, 0.0, k as f64))).collect();
    let est: Vec<Pose> = (0..150)
        .map(|k| Pose::yaw(1e-4 * k as f64, Vector3::new(0.01 * k as f64, 0.0, 1.02 * k as f64)))
        .collect();
    write_traj(&data.join("poses.txt"), gt);
    write_traj(&dir.path().join("out/pred_poses.txt"), est);
    let config = "seed = 9\neval.lengths = 10,20,40\n";
    let read = || {
        let out = atdn(dir.path(), config, &["--quiet", "eval"]);
        assert!(out.status.success(), "{}", stderr(&out));
        (
            fs::read(dir.path().join("out/eval.txt")).unwrap(),
            fs::read(dir.path().join("out/eval_lengths.csv")).unwrap(),
        )
    };
    let first = read();
    assert_eq!(first, read());
    let text = String::from_utf8(first.0).unwrap();
    assert!(text.contains("lengths=10,20,40"));
}
