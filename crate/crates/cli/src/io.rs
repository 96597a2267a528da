//! File formats: TOML calibration and scenes, 16-bit PNG depth and HSV
//! images, binary little-endian PLY clouds.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context, Result};
use c3d::datagen::{Corruption, LidarSpec, Scene};
use c3d::{CameraIntrinsics, DepthMap, HsvImage, NormalEstimate, PointCloud, Vec3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Stored PNG value per meter of depth.
pub const DEPTH_SCALE: f64 = 256.0;
const HSV_SCALE: f64 = 65535.0;

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).with_context(|| format!("serializing {}", path.display()))?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_calib(path: &Path) -> Result<CameraIntrinsics> {
    let k: CameraIntrinsics = read_toml(path)?;
    k.validate().with_context(|| format!("validating {}", path.display()))?;
    Ok(k)
}

/// Scene description: primitives plus optional LIDAR pattern and corruption
/// of the initial depth map.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    #[serde(flatten)]
    pub scene: Scene,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lidar: Option<LidarSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corruption: Option<Corruption>,
}

pub fn read_scene(path: &Path) -> Result<SceneFile> {
    let file: SceneFile = read_toml(path)?;
    file.scene
        .validate()
        .with_context(|| format!("validating {}", path.display()))?;
    Ok(file)
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, samples: &[u16]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder.write_header()?;
    let bytes: Vec<u8> = samples.iter().flat_map(|s| s.to_be_bytes()).collect();
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

fn read_png(path: &Path, color: png::ColorType) -> Result<(usize, usize, Vec<u16>)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().with_context(|| format!("decoding {}", path.display()))?;
    let info = reader.info();
    let (width, height) = (info.width as usize, info.height as usize);
    ensure!(
        info.bit_depth == png::BitDepth::Sixteen && info.color_type == color,
        "{}: expected a 16-bit {:?} PNG, found {:?}-bit {:?}",
        path.display(),
        color,
        info.bit_depth as u8,
        info.color_type
    );
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| anyhow!("{}: image too large", path.display()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf)?;
    let samples = buf[..frame.buffer_size()]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((width, height, samples))
}

/// KITTI convention: stored = round(depth * 256), 0 marks invalid pixels.
pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    let max = u16::MAX as f64 / DEPTH_SCALE;
    let mut samples = Vec::with_capacity(depth.depths().len());
    for (i, d) in depth.depths().iter().enumerate() {
        if !depth.is_valid(i) {
            samples.push(0);
            continue;
        }
        ensure!(*d <= max, "depth {d} m exceeds the 16-bit PNG range of {max} m");
        samples.push(((d * DEPTH_SCALE).round() as u16).max(1));
    }
    write_png(path, depth.width(), depth.height(), png::ColorType::Grayscale, &samples)
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let (w, h, samples) = read_png(path, png::ColorType::Grayscale)?;
    let depths = samples.iter().map(|s| *s as f64 / DEPTH_SCALE).collect();
    Ok(DepthMap::from_depths(w, h, depths)?)
}

/// HSV channels stored as 16-bit RGB, value = round(c * 65535).
pub fn write_hsv_png(path: &Path, hsv: &HsvImage) -> Result<()> {
    let samples: Vec<u16> = hsv
        .data()
        .iter()
        .flat_map(|c| c.iter().map(|v| (v.clamp(0.0, 1.0) * HSV_SCALE).round() as u16).collect::<Vec<_>>())
        .collect();
    write_png(path, hsv.width(), hsv.height(), png::ColorType::Rgb, &samples)
}

pub fn read_hsv_png(path: &Path) -> Result<HsvImage> {
    let (w, h, samples) = read_png(path, png::ColorType::Rgb)?;
    let data = samples
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) / HSV_SCALE)
        .collect();
    Ok(HsvImage::new(w, h, data)?)
}

const NORMAL_PROPS: [&str; 4] = ["nx", "ny", "nz", "residual"];

/// Binary little-endian PLY with float32 `x y z h s v` and, when the cloud
/// has normals, `nx ny nz residual`. Invalid normals are written as zeros.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let hsv = cloud
        .hsv
        .as_ref()
        .ok_or_else(|| anyhow!("PLY output needs per-point hsv"))?;
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "ply\nformat binary_little_endian 1.0\nelement vertex {}", cloud.len())?;
    let mut props = vec!["x", "y", "z", "h", "s", "v"];
    if cloud.normals.is_some() {
        props.extend(NORMAL_PROPS);
    }
    for p in &props {
        writeln!(w, "property float {p}")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..cloud.len() {
        let mut row = vec![cloud.points[i].x, cloud.points[i].y, cloud.points[i].z, hsv[i].x, hsv[i].y, hsv[i].z];
        if let Some(normals) = &cloud.normals {
            let n = &normals[i];
            if n.valid {
                row.extend([n.normal.x, n.normal.y, n.normal.z, n.residual]);
            } else {
                row.extend([0.0; 4]);
            }
        }
        for v in row {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy)]
enum Scalar {
    F32,
    F64,
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut line_no = 0;
    loop {
        line.clear();
        line_no += 1;
        ensure!(r.read_line(&mut line)? > 0, "{}: header ends before end_header", path.display());
        let words: Vec<&str> = line.split_whitespace().collect();
        let ctx = |msg: &str| anyhow!("{}:{line_no}: {msg}", path.display());
        match words.as_slice() {
            ["ply"] if line_no == 1 => {}
            _ if line_no == 1 => return Err(ctx("not a PLY file")),
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(ctx(&format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| ctx("bad vertex count"))?);
            }
            ["element", other, ..] => return Err(ctx(&format!("unsupported element {other}"))),
            ["property", ty, name] => {
                let scalar = match *ty {
                    "float" | "float32" => Scalar::F32,
                    "double" | "float64" => Scalar::F64,
                    _ => return Err(ctx(&format!("unsupported property type {ty}"))),
                };
                props.push((name.to_string(), scalar));
            }
            ["end_header"] => break,
            _ => return Err(ctx(&format!("unexpected header line {:?}", line.trim_end()))),
        }
    }
    let count = count.ok_or_else(|| anyhow!("{}: missing vertex element", path.display()))?;
    let col = |name: &str| props.iter().position(|(p, _)| p == name);
    let need = |name: &str| col(name).ok_or_else(|| anyhow!("{}: missing property {name}", path.display()));
    let xyz = [need("x")?, need("y")?, need("z")?];
    let hsv_cols = ["h", "s", "v"].map(col);
    let normal_cols = NORMAL_PROPS.map(col);
    ensure!(
        hsv_cols.iter().all(Option::is_some) || hsv_cols.iter().all(Option::is_none),
        "{}: h, s, v must appear together",
        path.display()
    );
    ensure!(
        normal_cols.iter().all(Option::is_some) || normal_cols.iter().all(Option::is_none),
        "{}: nx, ny, nz, residual must appear together",
        path.display()
    );

    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let stride: usize = props
        .iter()
        .map(|(_, s)| match s {
            Scalar::F32 => 4,
            Scalar::F64 => 8,
        })
        .sum();
    ensure!(
        body.len() == stride * count,
        "{}: expected {} bytes of vertex data, found {}",
        path.display(),
        stride * count,
        body.len()
    );
    let mut rows = Vec::with_capacity(count);
    for chunk in body.chunks_exact(stride.max(1)).take(count) {
        let mut values = Vec::with_capacity(props.len());
        let mut at = 0;
        for (_, s) in &props {
            match s {
                Scalar::F32 => {
                    values.push(f32::from_le_bytes(chunk[at..at + 4].try_into()?) as f64);
                    at += 4;
                }
                Scalar::F64 => {
                    values.push(f64::from_le_bytes(chunk[at..at + 8].try_into()?));
                    at += 8;
                }
            }
        }
        rows.push(values);
    }
    let v3 = |row: &[f64], c: [usize; 3]| Vec3::new(row[c[0]], row[c[1]], row[c[2]]);
    let mut cloud = PointCloud::from_points(rows.iter().map(|r| v3(r, xyz)).collect());
    if let [Some(h), Some(s), Some(v)] = hsv_cols {
        cloud = cloud.with_hsv(rows.iter().map(|r| v3(r, [h, s, v])).collect())?;
    }
    if let [Some(x), Some(y), Some(z), Some(res)] = normal_cols {
        let normals = rows
            .iter()
            .map(|r| {
                let n = v3(r, [x, y, z]);
                if n == Vec3::zeros() {
                    NormalEstimate::invalid()
                } else {
                    NormalEstimate::new(n.normalize(), r[res])
                }
            })
            .collect();
        cloud = cloud.with_normals(normals)?;
    }
    cloud.validate().with_context(|| format!("validating {}", path.display()))?;
    Ok(cloud)
}

/// Serializes records with a header row.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating directory {}", path.display()))
}

pub fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("input file {} does not exist", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let mut depth = DepthMap::from_depths(3, 2, vec![5.0, 1.5, 0.0, 80.0, 10.25, 3.0 / 256.0]).unwrap();
        depth.invalidate(1, 2);
        write_depth_png(&path, &depth).unwrap();
        let back = read_depth_png(&path).unwrap();
        assert_eq!(back, depth.clone());
        assert!(write_depth_png(&path, &DepthMap::filled(1, 1, 300.0).unwrap()).is_err());
    }

    #[test]
    fn hsv_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let q = |v: f64| (v * HSV_SCALE).round() / HSV_SCALE;
        let img = HsvImage::new(2, 1, vec![Vec3::new(q(0.1), 0.0, 1.0), Vec3::new(q(0.7), q(0.3), q(0.5))]).unwrap();
        write_hsv_png(&path, &img).unwrap();
        assert_eq!(read_hsv_png(&path).unwrap(), img);
        assert!(read_depth_png(&path).is_err());
    }

    #[test]
    fn ply_roundtrip_with_normals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let cloud = PointCloud::from_points(vec![Vec3::new(0.5, -1.25, 5.0), Vec3::new(0.0, 0.0, 2.0)])
            .with_hsv(vec![Vec3::new(0.25, 0.5, 1.0), Vec3::zeros()])
            .unwrap()
            .with_normals(vec![NormalEstimate::new(Vec3::new(0.0, 0.0, -1.0), 0.125), NormalEstimate::invalid()])
            .unwrap();
        write_ply(&path, &cloud).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.points, cloud.points);
        assert_eq!(back.hsv, cloud.hsv);
        let normals = back.normals.unwrap();
        assert_eq!(normals[0], NormalEstimate::new(Vec3::new(0.0, 0.0, -1.0), 0.125));
        assert!(!normals[1].valid);
    }

    #[test]
    fn ply_errors_carry_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        fs::write(&path, "ply\nformat ascii 1.0\nend_header\n").unwrap();
        let msg = format!("{:#}", read_ply(&path).unwrap_err());
        assert!(msg.contains(":2:") && msg.contains("ascii"), "{msg}");
        fs::write(
            &path,
            "ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n",
        )
        .unwrap();
        assert!(format!("{:#}", read_ply(&path).unwrap_err()).contains("missing property z"));
    }

    #[test]
    fn calib_missing_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.toml");
        fs::write(&path, "fx = 40.0\nfy = 40.0\ncx = 31.5\nwidth = 64\nheight = 48\n").unwrap();
        let msg = format!("{:#}", read_calib(&path).unwrap_err());
        assert!(msg.contains("cy"), "{msg}");
    }

    #[test]
    fn scene_file_parses() {
        let text = r#"
[[primitive]]
type = "plane"
point = [0, 0, 5]
normal = [0, 0, -1]
extent = 100
hsv = [0.1, 0.2, 0.3]

[[primitive]]
type = "box"
center = [0, 1, 6]
half_extents = [0.5, 0.5, 0.5]
hsv = [0.5, 0.5, 0.5]
reflective = true

[corruption]
noise_std = 0.5
holes = [{ row = 1, col = 2, height = 3, width = 4, mode = "offset", meters = 1.0 }]
"#;
        let file: SceneFile = toml::from_str(text).unwrap();
        assert_eq!(file.scene.primitives.len(), 2);
        assert!(file.scene.primitives[1].reflective);
        assert_eq!(file.corruption.as_ref().unwrap().holes[0].width, 4);
        let again: SceneFile = toml::from_str(&toml::to_string(&file).unwrap()).unwrap();
        assert_eq!(again, file);
    }
}
