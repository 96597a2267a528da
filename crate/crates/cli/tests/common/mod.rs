#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn c3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c3d"))
        .args(args)
        .output()
        .expect("running c3d")
}

/// Runs c3d, panicking with stderr on failure, and returns stdout.
pub fn c3d_ok(args: &[&str]) -> String {
    let out = c3d(args);
    assert!(
        out.status.success(),
        "c3d {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Value of a `key=value` line.
pub fn field(stdout: &str, key: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {stdout}"))
        .parse()
        .unwrap()
}

/// Binary PLY with x,y,z,h,s,v and optional nx,ny,nz,residual rows.
pub fn write_ply(path: &Path, rows: &[Vec<f32>], with_normals: bool) {
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", rows.len());
    let mut props = vec!["x", "y", "z", "h", "s", "v"];
    if with_normals {
        props.extend(["nx", "ny", "nz", "residual"]);
    }
    for p in &props {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    let mut bytes = header.into_bytes();
    for r in rows {
        assert_eq!(r.len(), props.len());
        for v in r {
            bytes.extend(v.to_le_bytes());
        }
    }
    fs::write(path, bytes).unwrap();
}

pub const PLANE_SCENE: &str = r#"
[[primitive]]
type = "plane"
point = [0.0, 0.0, 5.0]
normal = [0.0, 0.0, -1.0]
extent = 1000.0
hsv = [0.0, 0.0, 1.0]
"#;

/// 3x3 plane at z = 5 with one LIDAR point colocated with the center pixel.
pub fn single_pair_fixture(dir: &Path) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let calib = dir.join("calib3.toml");
    fs::write(&calib, "fx = 3.0\nfy = 3.0\ncx = 1.0\ncy = 1.0\nwidth = 3\nheight = 3\n").unwrap();
    let scene = dir.join("plane.toml");
    fs::write(&scene, PLANE_SCENE).unwrap();
    let out = dir.join("plane");
    c3d_ok(&[
        "synth",
        "--scene",
        scene.to_str().unwrap(),
        "--calib",
        calib.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    write_ply(
        &out.join("single.ply"),
        &[vec![0.0, 0.0, 5.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0]],
        true,
    );
    out
}

/// Paths of the files synth writes, as strings.
pub struct Synth {
    pub dir: PathBuf,
}

impl Synth {
    pub fn path(&self, name: &str) -> String {
        self.dir.join(name).to_str().unwrap().to_string()
    }

    pub fn inputs(&self, depth: &str, cloud: &str) -> Vec<String> {
        vec![
            "--depth".into(),
            self.path(depth),
            "--hsv".into(),
            self.path("hsv.png"),
            "--cloud".into(),
            self.path(cloud),
            "--calib".into(),
            self.path("calib.toml"),
        ]
    }
}

pub fn synth_preset(dir: &Path, preset: &str, seed: u64) -> Synth {
    let out = dir.join(format!("{preset}-{seed}"));
    c3d_ok(&[
        "synth",
        "--preset",
        preset,
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]);
    Synth { dir: out }
}

pub fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}
