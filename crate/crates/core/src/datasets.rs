//! On-disk sequences in a TUM-style layout:
//!
//! ```text
//! calib.txt        fx fy cx cy width height depth_scale
//! depth.txt        t filename          (one line per frame)
//! depth/<t>.png    16-bit depth, value / depth_scale = meters
//! imu.csv          t, wx, wy, wz, ax, ay, az   (s, rad/s, cm/s²)
//! groundtruth.txt  t px py pz qx qy qz qw     (meters, camera to world)
//! reference.txt    optional: `gravity gx gy gz`, `bias_gyro x y z`, `bias_accel x y z`
//! ```

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::estimator::{FrameState, WindowState};
use crate::geom::{GravityDir, Pose, TimedPose};
use crate::imu::{format_imu_csv, read_imu_csv, ImuBias, ImuSample};
use crate::rangeflow::{DepthFrame, Intrinsics};
use crate::sim::fit_spline;

/// TUM depth scale: PNG value 5000 is one meter.
pub const TUM_DEPTH_SCALE: f64 = 5000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub intrinsics: Intrinsics,
    /// PNG units per meter.
    pub depth_scale: f64,
}

/// Ground-truth quantities that only simulated data usually provides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    /// World gravity, cm/s².
    pub gravity: Option<Vector3<f64>>,
    pub bias: Option<ImuBias>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBundle {
    pub frames: Vec<DepthFrame>,
    pub imu: Vec<ImuSample>,
    pub groundtruth: Option<Vec<TimedPose>>,
    pub calibration: Calibration,
    pub reference: Reference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    /// Read `imu.csv` if present.
    pub load_imu: bool,
    /// Depth stores the euclidean ray length instead of z; converted on load.
    pub euclidean_depth: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            load_imu: true,
            euclidean_depth: false,
        }
    }
}

/// Whitespace-separated numeric rows with `#` comments, paired with their
/// 1-based line numbers.
fn numeric_rows(text: &str, path: &Path) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|e| Error::parse(path, n + 1, format!("`{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push((n + 1, vals));
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_calibration(text: &str, path: &Path) -> Result<Calibration> {
    let rows = numeric_rows(text, path)?;
    let (line, v) = rows.first().ok_or_else(|| Error::parse(path, 1, "empty calibration"))?;
    if v.len() != 7 {
        return Err(Error::parse(path, *line, format!("expected 7 values, found {}", v.len())));
    }
    let dims_ok = v[4] >= 1.0 && v[5] >= 1.0 && v[4].fract() == 0.0 && v[5].fract() == 0.0;
    if !dims_ok || !(v[6] > 0.0) {
        return Err(Error::parse(path, *line, "invalid image size or depth scale"));
    }
    let intrinsics = Intrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize)
        .map_err(|e| Error::parse(path, *line, e.to_string()))?;
    Ok(Calibration {
        intrinsics,
        depth_scale: v[6],
    })
}

pub fn format_calibration(c: &Calibration) -> String {
    let k = &c.intrinsics;
    format!(
        "# fx fy cx cy width height depth_scale\n{} {} {} {} {} {} {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height, c.depth_scale
    )
}

/// `t filename` lines; timestamps strictly increasing.
pub fn parse_depth_index(text: &str, path: &Path) -> Result<Vec<(f64, String)>> {
    let mut out: Vec<(f64, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(t), Some(file), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::parse(path, n + 1, "expected `timestamp filename`"));
        };
        let t: f64 = t.parse().map_err(|e| Error::parse(path, n + 1, format!("`{t}`: {e}")))?;
        if let Some((prev, _)) = out.last() {
            if !(t > *prev) {
                return Err(Error::parse(path, n + 1, format!("timestamp {t} not after {prev}")));
            }
        }
        out.push((t, file.to_string()));
    }
    Ok(out)
}

/// `t px py pz qx qy qz qw` with positions in meters; returned in cm.
pub fn parse_groundtruth(text: &str, path: &Path) -> Result<Vec<TimedPose>> {
    let mut out: Vec<TimedPose> = Vec::new();
    for (line, v) in numeric_rows(text, path)? {
        if v.len() != 8 {
            return Err(Error::parse(path, line, format!("expected 8 values, found {}", v.len())));
        }
        if let Some(prev) = out.last() {
            if !(v[0] > prev.timestamp) {
                return Err(Error::parse(path, line, format!("timestamp {} not after {}", v[0], prev.timestamp)));
            }
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 0.0) {
            return Err(Error::parse(path, line, "zero quaternion"));
        }
        let rotation = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
        out.push(TimedPose {
            timestamp: v[0],
            pose: Pose::new(rotation, Vector3::new(v[1], v[2], v[3]) * 100.0),
        });
    }
    Ok(out)
}

pub fn format_groundtruth(poses: &[TimedPose]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for p in poses {
        let q = UnitQuaternion::from_rotation_matrix(&p.pose.rotation);
        let t = p.pose.translation / 100.0;
        s += &format!(
            "{:.9} {:.9e} {:.9e} {:.9e} {:.12} {:.12} {:.12} {:.12}\n",
            p.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        );
    }
    s
}

pub fn parse_reference(text: &str, path: &Path) -> Result<Reference> {
    let mut r = Reference {
        gravity: None,
        bias: None,
    };
    let mut bias = ImuBias::zero();
    let mut have_bias = false;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let key = it.next().unwrap_or("");
        let vals = it
            .map(|t| t.parse::<f64>().map_err(|e| Error::parse(path, n + 1, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 3 {
            return Err(Error::parse(path, n + 1, "expected a key and three values"));
        }
        let v = Vector3::new(vals[0], vals[1], vals[2]);
        match key {
            "gravity" => r.gravity = Some(v),
            "bias_gyro" => {
                bias.gyro = v;
                have_bias = true;
            }
            "bias_accel" => {
                bias.accel = v;
                have_bias = true;
            }
            other => return Err(Error::parse(path, n + 1, format!("unknown key `{other}`"))),
        }
    }
    if have_bias {
        r.bias = Some(bias);
    }
    Ok(r)
}

pub fn format_reference(r: &Reference) -> String {
    let mut s = String::new();
    if let Some(g) = r.gravity {
        s += &format!("gravity {:e} {:e} {:e}\n", g.x, g.y, g.z);
    }
    if let Some(b) = r.bias {
        s += &format!("bias_gyro {:e} {:e} {:e}\n", b.gyro.x, b.gyro.y, b.gyro.z);
        s += &format!("bias_accel {:e} {:e} {:e}\n", b.accel.x, b.accel.y, b.accel.z);
    }
    s
}

/// Reads a 16-bit grayscale PNG as depth in cm.
pub fn read_depth_png(path: &Path, timestamp: f64, calib: &Calibration) -> Result<DepthFrame> {
    let img_err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| img_err(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(img_err(format!("expected 16-bit grayscale, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let k = &calib.intrinsics;
    if (w, h) != (k.width, k.height) {
        return Err(img_err(format!("image is {w}x{h}, calibration says {}x{}", k.width, k.height)));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| img_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    let depth = buf
        .chunks_exact(2)
        .take(w * h)
        .map(|b| png_to_cm(u16::from_be_bytes([b[0], b[1]]), calib.depth_scale))
        .collect();
    DepthFrame::new(timestamp, *k, depth)
}

fn png_to_cm(value: u16, scale: f64) -> f64 {
    value as f64 / scale * 100.0
}

fn cm_to_png(z: f64, scale: f64) -> u16 {
    (z / 100.0 * scale).round().clamp(0.0, u16::MAX as f64) as u16
}

/// Rounds depth to what a 16-bit PNG at `scale` can store, so export and
/// reload give back identical values.
pub fn quantize_depth(frame: &DepthFrame, scale: f64) -> DepthFrame {
    let depth = frame.depth().iter().map(|&z| png_to_cm(cm_to_png(z, scale), scale)).collect();
    DepthFrame::new(frame.timestamp, frame.intrinsics, depth).expect("quantized depth is valid")
}

pub fn write_depth_png(path: &Path, frame: &DepthFrame, scale: f64) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), frame.width() as u32, frame.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let img_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(img_err)?;
    let data: Vec<u8> = frame
        .depth()
        .iter()
        .flat_map(|&z| cm_to_png(z, scale).to_be_bytes())
        .collect();
    writer.write_image_data(&data).map_err(img_err)?;
    writer.finish().map_err(img_err)
}

/// Converts euclidean ray length to z-depth in place.
fn ray_length_to_z(frame: &DepthFrame) -> Result<DepthFrame> {
    let k = frame.intrinsics;
    let mut out = Vec::with_capacity(frame.depth().len());
    for v in 0..k.height {
        for u in 0..k.width {
            let x = (u as f64 - k.cx) / k.fx;
            let y = (v as f64 - k.cy) / k.fy;
            out.push(frame.at(u, v) / (1.0 + x * x + y * y).sqrt());
        }
    }
    DepthFrame::new(frame.timestamp, k, out)
}

pub fn load_sequence(root: &Path, opts: &LoadOptions) -> Result<SequenceBundle> {
    let calib_path = root.join("calib.txt");
    let calibration = parse_calibration(&read_text(&calib_path)?, &calib_path)?;
    let index_path = root.join("depth.txt");
    let index = parse_depth_index(&read_text(&index_path)?, &index_path)?;
    if index.is_empty() {
        return Err(Error::parse(&index_path, 0, "no frames listed"));
    }
    let frames = index
        .iter()
        .map(|(t, file)| {
            let frame = read_depth_png(&root.join(file), *t, &calibration)?;
            if opts.euclidean_depth {
                ray_length_to_z(&frame)
            } else {
                Ok(frame)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let imu_path = root.join("imu.csv");
    let imu = if opts.load_imu && imu_path.exists() {
        read_imu_csv(&imu_path)?
    } else {
        Vec::new()
    };
    let gt_path = root.join("groundtruth.txt");
    let groundtruth = if gt_path.exists() {
        Some(parse_groundtruth(&read_text(&gt_path)?, &gt_path)?)
    } else {
        None
    };
    let ref_path = root.join("reference.txt");
    let reference = if ref_path.exists() {
        parse_reference(&read_text(&ref_path)?, &ref_path)?
    } else {
        Reference {
            gravity: None,
            bias: None,
        }
    };
    Ok(SequenceBundle {
        frames,
        imu,
        groundtruth,
        calibration,
        reference,
    })
}

/// Writes a bundle in the layout above; depth is quantized by the PNG
/// format.
pub fn export_sequence(root: &Path, bundle: &SequenceBundle) -> Result<()> {
    let depth_dir = root.join("depth");
    fs::create_dir_all(&depth_dir).map_err(|e| Error::io(&depth_dir, e))?;
    let write = |p: PathBuf, s: String| fs::write(&p, s).map_err(|e| Error::io(&p, e));
    write(root.join("calib.txt"), format_calibration(&bundle.calibration))?;
    let mut index = String::from("# timestamp filename\n");
    for f in &bundle.frames {
        let name = format!("depth/{:.9}.png", f.timestamp);
        write_depth_png(&root.join(&name), f, bundle.calibration.depth_scale)?;
        index += &format!("{:.9} {}\n", f.timestamp, name);
    }
    write(root.join("depth.txt"), index)?;
    if !bundle.imu.is_empty() {
        write(root.join("imu.csv"), format_imu_csv(&bundle.imu))?;
    }
    if let Some(gt) = &bundle.groundtruth {
        write(root.join("groundtruth.txt"), format_groundtruth(gt))?;
    }
    if bundle.reference.gravity.is_some() || bundle.reference.bias.is_some() {
        write(root.join("reference.txt"), format_reference(&bundle.reference))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Association {
    /// `(index in first list, index in second list)`, sorted by the first.
    pub pairs: Vec<(usize, usize)>,
    /// Entries of the first list left without a partner.
    pub dropped: usize,
}

/// One-to-one timestamp matching: candidate pairs closer than `max_dt`
/// are taken greedily in order of increasing time difference.
pub fn associate(a: &[f64], b: &[f64], max_dt: f64) -> Association {
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &t) in a.iter().enumerate() {
        let lo = b.partition_point(|&x| x < t - max_dt);
        for (j, &u) in b.iter().enumerate().skip(lo) {
            if u > t + max_dt {
                break;
            }
            let d = (u - t).abs();
            if d <= max_dt {
                cand.push((d, i, j));
            }
        }
    }
    cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut pairs = Vec::new();
    for (_, i, j) in cand {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    Association {
        dropped: a.len() - pairs.len(),
        pairs,
    }
}

/// Reference window states at `frame_times`: body-frame velocities from a
/// spline through the ground truth, gravity in the first frame's camera
/// frame and the true bias (zero when unknown).
pub fn gt_window_states(
    gt: &[TimedPose],
    frame_times: &[f64],
    gravity: &Vector3<f64>,
    bias: Option<&ImuBias>,
) -> Result<WindowState> {
    if frame_times.is_empty() {
        return Err(Error::Empty("frame times"));
    }
    let spline = fit_spline(gt)?;
    for &t in frame_times {
        if t < spline.start() - 1e-9 || t > spline.end() + 1e-9 {
            return Err(Error::InvalidInput(format!("ground truth does not cover t = {t}")));
        }
    }
    let r0 = spline.rotation(frame_times[0]);
    let g = GravityDir::from_vector(&(r0.inverse() * gravity))
        .ok_or_else(|| Error::InvalidInput("zero gravity vector".into()))?;
    Ok(WindowState {
        frames: frame_times
            .iter()
            .map(|&t| FrameState {
                timestamp: t,
                lin_vel: spline.body_velocity(t),
                ang_vel: spline.angular_velocity(t),
            })
            .collect(),
        gravity: g,
        bias: bias.copied().unwrap_or_default(),
        orientations: frame_times.iter().map(|&t| r0.inverse() * spline.rotation(t)).collect(),
    })
}
