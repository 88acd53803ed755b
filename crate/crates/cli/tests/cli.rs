use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rgbdi-flow"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, args: &[&str]) {
    let mut all = vec!["simulate", "--out", s(dir)];
    all.extend_from_slice(args);
    let out = run(&all);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn data_files(root: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "config.toml" {
                files.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    files.sort();
    files
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir.join("depth"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    v.sort();
    v
}

#[test]
fn orbit_has_thirty_frames_and_imu_at_200_hz() {
    let tmp = TempDir::new().unwrap();
    let seq = tmp.path().join("seq");
    simulate(&seq, &["--trajectory", "orbit", "--length", "30", "--seed", "1"]);
    assert_eq!(pngs(&seq).len(), 30);
    let imu = fs::read_to_string(seq.join("imu.csv")).unwrap();
    let samples = imu.lines().filter(|l| !l.starts_with('#') && !l.starts_with('t')).count();
    assert!((190..=200).contains(&samples), "{samples} IMU samples");
}

#[test]
fn same_seed_gives_identical_files() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    simulate(&a, &["--seed", "7", "--length", "12", "--depth-noise", "0.5"]);
    simulate(&b, &["--seed", "7", "--length", "12", "--depth-noise", "0.5"]);
    let files = data_files(&a);
    assert_eq!(files, data_files(&b));
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{}", f.display());
    }
    let c = tmp.path().join("c");
    simulate(&c, &["--seed", "8", "--length", "12", "--depth-noise", "0.5"]);
    assert_ne!(fs::read(a.join("imu.csv")).unwrap(), fs::read(c.join("imu.csv")).unwrap());
}

#[test]
fn static_camera_renders_identical_frames() {
    let tmp = TempDir::new().unwrap();
    let seq = tmp.path().join("seq");
    simulate(&seq, &["--trajectory", "static", "--length", "5"]);
    let frames: Vec<Vec<u8>> = pngs(&seq).iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(frames.len(), 5);
    assert!(frames.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn visual_only_never_reads_imu() {
    let tmp = TempDir::new().unwrap();
    let seq = tmp.path().join("seq");
    simulate(&seq, &["--length", "10", "--seed", "2"]);
    fs::write(seq.join("imu.csv"), "this is not an IMU file\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(&["run", s(&seq), "--frames", "2", "--imu", "off", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(out_dir.join("metrics.txt")).unwrap();
    assert!(metrics.contains("theta_g_mean = -"));
    let out = run(&["run", s(&seq), "--frames", "2", "--imu", "on", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn runs_are_reproducible_and_reportable() {
    let tmp = TempDir::new().unwrap();
    let seq = tmp.path().join("seq");
    simulate(&seq, &["--length", "14", "--seed", "3"]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (dir, workers) in [(&a, "1"), (&b, "3")] {
        let out = run(&["run", s(&seq), "--frames", "3", "--marginalize", "on", "--workers", workers, "--out", s(dir)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["metrics.txt", "subsequences.csv", "states/0000.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rep = run(&["report", s(&a)]);
    assert_eq!(code(&rep), 0);
    let printed = String::from_utf8(rep.stdout).unwrap();
    let written = fs::read_to_string(a.join("metrics.txt")).unwrap();
    let key = |t: &str| t.lines().find(|l| l.starts_with("rmse_v_mean")).unwrap().to_string();
    assert_eq!(key(&printed), key(&written));
}

#[test]
fn input_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing");
    assert_eq!(code(&run(&["run", s(&missing)])), 2);
    let seq = tmp.path().join("seq");
    simulate(&seq, &["--length", "8"]);
    assert_eq!(code(&run(&["run", s(&seq), "--frames", "6"])), 2);
    assert_eq!(code(&run(&["run", s(&seq), "--frames", "2", "--marginalize", "on"])), 2);
    assert_eq!(code(&run(&["run", s(&seq), "--stride", "0"])), 2);
    assert_eq!(code(&run(&["run", s(&seq), "--imu", "maybe"])), 2);
    assert_eq!(code(&run(&["simulate", "--trajectory", "spiral"])), 2);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "framez = 3\n").unwrap();
    assert_eq!(code(&run(&["--config", s(&bad), "run", s(&seq)])), 2);
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let seq = tmp.path().join("seq");
    simulate(&seq, &["--length", "12"]);
    let out_dir = tmp.path().join("out");
    let cfg = tmp.path().join("cfg.toml");
    fs::write(
        &cfg,
        format!("data = {:?}\nout = {:?}\nframes = 4\nstride = 5\nimu = false\n", s(&seq), s(&out_dir)),
    )
    .unwrap();
    let out = run(&["run", "--config", s(&cfg), "--frames", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let echo = fs::read_to_string(out_dir.join("config.toml")).unwrap();
    for line in ["frames = 2", "stride = 5", "imu = false"] {
        assert!(echo.lines().any(|l| l == line), "missing `{line}` in\n{echo}");
    }
}

#[test]
fn single_plane_is_degenerate_everywhere() {
    let tmp = TempDir::new().unwrap();
    let scene = tmp.path().join("wall.txt");
    fs::write(&scene, "plane 0 0 1 200\n").unwrap();
    let seq = tmp.path().join("seq");
    simulate(&seq, &["--scene", s(&scene), "--length", "8", "--seed", "4"]);
    let out_dir = tmp.path().join("out");
    let out = run(&["run", s(&seq), "--frames", "2", "--imu", "off", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!fs::read_to_string(out_dir.join("degenerate.txt")).unwrap().is_empty());
}

#[test]
fn static_sequence_has_zero_flow_field() {
    let tmp = TempDir::new().unwrap();
    let seq = tmp.path().join("seq");
    simulate(&seq, &["--trajectory", "static", "--length", "6"]);
    let out_dir = tmp.path().join("ff");
    let out = run(&["flowfield", s(&seq), "--frames", "2", "--imu", "off", "--index", "5", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("flowfield.csv")).unwrap();
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(v[3].abs() < 1e-6 && v[4].abs() < 1e-6 && v[5].abs() < 1e-6, "{line}");
        rows += 1;
    }
    assert!(rows > 1000);
    assert_eq!(code(&run(&["flowfield", s(&seq), "--index", "0"])), 2);
}
