//! Sequence ingestion and export: KITTI-style cloud/pose files, detection
//! lists, calibration, PGM/PPM images, PLY export and the frame manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, ManifestError, Result};
use crate::geometry::{orthonormality_drift, CameraModel, Mat3, PointCloud, RigidTransform, Vec3};
use crate::imaging::{to_gray, GrayImage};
use crate::synthesis::Provenance;
use crate::tracking2d::BBox;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn parse_floats(path: &Path, line_no: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, line_no, format!("not a finite number: {f:?}")))
        })
        .collect()
}

/// Lines that carry data, with 1-based line numbers. Blank lines and `#`
/// comments are skipped.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn read_cloud_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cloud_bin(&bytes).ok_or_else(|| Error::MalformedLength {
        path: path.to_path_buf(),
        len: bytes.len() as u64,
    })
}

/// Decodes `(x, y, z, intensity)` little-endian f32 records. `None` when the
/// length is not a multiple of 16.
pub fn parse_cloud_bin(bytes: &[u8]) -> Option<PointCloud> {
    if bytes.len() % 16 != 0 {
        return None;
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(16) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        points.push(Vec3::new(f(0) as f64, f(1) as f64, f(2) as f64));
        intensity.push(f(3));
    }
    Some(PointCloud {
        points,
        intensity: Some(intensity),
    })
}

pub fn encode_cloud_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points.iter().enumerate() {
        let inten = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p.x as f32, p.y as f32, p.z as f32, inten] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_cloud_bin(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cloud_bin(cloud)).map_err(|e| Error::io(path, e))
}

/// One world-from-sensor transform per line, 12 row-major scalars.
pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<RigidTransform>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (no, line) in data_lines(&text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 12 {
            return Err(Error::parse(path, no, format!("expected 12 fields, found {}", fields.len())));
        }
        let v: [f64; 12] = parse_floats(path, no, &fields)?.try_into().unwrap();
        let m = Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        if orthonormality_drift(&m) > 0.1 || m.determinant() <= 0.0 {
            return Err(Error::parse(path, no, "rotation block is not close to a rotation"));
        }
        out.push(RigidTransform::from_row_major_3x4(&v, 1e-6));
    }
    Ok(out)
}

pub fn write_poses(poses: &[RigidTransform], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for p in poses {
        let line: Vec<String> = p.to_row_major_3x4().iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", line.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `frame_id class_id score x_min y_min x_max y_max` per line, grouped by
/// frame with file order kept.
pub fn read_detections(path: impl AsRef<Path>) -> Result<BTreeMap<usize, Vec<BBox>>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut out: BTreeMap<usize, Vec<BBox>> = BTreeMap::new();
    let mut last_frame = 0usize;
    for (no, line) in data_lines(&text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::parse(path, no, format!("expected 7 fields, found {}", fields.len())));
        }
        let frame: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(path, no, format!("bad frame id {:?}", fields[0])))?;
        let class_id: i32 = fields[1]
            .parse()
            .map_err(|_| Error::parse(path, no, format!("bad class id {:?}", fields[1])))?;
        if frame < last_frame {
            return Err(Error::parse(path, no, "frame ids must be non-decreasing"));
        }
        last_frame = frame;
        let v = parse_floats(path, no, &fields[2..])?;
        let b = BBox {
            x_min: v[1],
            y_min: v[2],
            x_max: v[3],
            y_max: v[4],
            class_id,
            score: v[0],
        };
        b.validate().map_err(|e| Error::parse(path, no, e.to_string()))?;
        out.entry(frame).or_default().push(b);
    }
    Ok(out)
}

pub fn write_detections(dets: &BTreeMap<usize, Vec<BBox>>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for (frame, boxes) in dets {
        for b in boxes {
            writeln!(w, "{frame} {} {} {} {} {} {}", b.class_id, b.score, b.x_min, b.y_min, b.x_max, b.y_max)
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fixed track palette, cycled by track id. Pure green is kept out of it so
/// overlays can use it for virtual measurements.
pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 190],
    [0, 128, 128],
    [170, 110, 40],
    [128, 0, 0],
    [0, 0, 128],
];
pub const STATIC_COLOR: [u8; 3] = [0, 0, 0];
pub const VIRTUAL_COLOR: [u8; 3] = [0, 255, 0];

pub fn provenance_color(p: &Provenance) -> [u8; 3] {
    match p {
        Provenance::Static => STATIC_COLOR,
        Provenance::Track(id) => PALETTE[(*id % PALETTE.len() as u64) as usize],
    }
}

/// Binary little-endian PLY. With provenance, each vertex carries an RGB
/// color from [`provenance_color`].
pub fn write_cloud_ply(cloud: &PointCloud, provenance: Option<&[Provenance]>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(p) = provenance {
        if p.len() != cloud.len() {
            return Err(Error::DimensionMismatch(format!("{} labels for {} points", p.len(), cloud.len())));
        }
    }
    let mut w = create(path)?;
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        cloud.len()
    );
    if provenance.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str("end_header\n");
    let io = |e| Error::io(path, e);
    w.write_all(header.as_bytes()).map_err(io)?;
    for (i, p) in cloud.points.iter().enumerate() {
        for v in [p.x as f32, p.y as f32, p.z as f32] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        if let Some(prov) = provenance {
            w.write_all(&provenance_color(&prov[i])).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads back what [`write_cloud_ply`] produces (float xyz, optional uchar
/// rgb).
pub fn read_cloud_ply(path: impl AsRef<Path>) -> Result<(PointCloud, Option<Vec<[u8; 3]>>)> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut n = None;
    let mut props = Vec::new();
    let mut line_no = 0;
    loop {
        let mut line = String::new();
        line_no += 1;
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::parse(path, line_no, "unterminated header"));
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["ply"] | ["comment", ..] => {}
            ["format", fmt, _] if *fmt == "binary_little_endian" => {}
            ["format", ..] => return Err(Error::parse(path, line_no, "only binary_little_endian is supported")),
            ["element", "vertex", k] => n = k.parse::<usize>().ok(),
            ["property", ty, name] => props.push((ty.to_string(), name.to_string())),
            ["end_header"] => break,
            _ => return Err(Error::parse(path, line_no, format!("unsupported header line {:?}", line.trim()))),
        }
    }
    let n = n.ok_or_else(|| Error::parse(path, line_no, "missing vertex count"))?;
    let xyz = [("float", "x"), ("float", "y"), ("float", "z")];
    let rgb = [("uchar", "red"), ("uchar", "green"), ("uchar", "blue")];
    let names: Vec<(&str, &str)> = props.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let has_rgb = if names == xyz {
        false
    } else if names.len() == 6 && names[..3] == xyz && names[3..] == rgb {
        true
    } else {
        return Err(Error::parse(path, line_no, "unsupported vertex layout"));
    };
    let stride = 12 + if has_rgb { 3 } else { 0 };
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != n * stride {
        return Err(Error::SizeMismatch {
            expected: n * stride,
            actual: body.len(),
        });
    }
    let mut points = Vec::with_capacity(n);
    let mut colors = Vec::new();
    for rec in body.chunks_exact(stride) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        points.push(Vec3::new(f(0), f(1), f(2)));
        if has_rgb {
            colors.push([rec[12], rec[13], rec[14]]);
        }
    }
    Ok((PointCloud::new(points), has_rgb.then_some(colors)))
}

/// One integer label per line: −1 for static points, track id otherwise.
pub fn write_labels(provenance: &[Provenance], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for p in provenance {
        writeln!(w, "{}", p.as_label()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<i64>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    data_lines(&text)
        .map(|(no, l)| l.parse().map_err(|_| Error::parse(path, no, format!("bad label {l:?}"))))
        .collect()
}

/// Loads a PGM or PPM file as intensities in [0, 1].
pub fn read_gray_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(buf) => GrayImage::new(w, h, buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        other => to_gray(&other.to_rgb8().into_raw(), w, h),
    }
}

/// 8-bit binary PGM.
pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    write!(w, "P5\n{} {}\n255\n", img.width(), img.height()).map_err(io)?;
    w.write_all(&img.to_u8()).map_err(io)?;
    w.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub camera: CameraModel,
    pub t_lidar_to_cam: RigidTransform,
}

/// Calibration text file:
///
/// ```text
/// K: fx 0 cx 0 fy cy 0 0 1      (or a KITTI-style P2: 3x4 projection)
/// Tr: 12 row-major scalars       (LIDAR to camera)
/// size: width height
/// ```
pub fn read_calibration(path: impl AsRef<Path>) -> Result<Calibration> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut k: Option<Mat3> = None;
    let mut p2: Option<Mat3> = None;
    let mut tr: Option<RigidTransform> = None;
    let mut size: Option<(u32, u32)> = None;
    for (no, line) in data_lines(&text) {
        let (key, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::parse(path, no, "expected `key: values`"))?;
        let fields: Vec<&str> = rest.split_whitespace().collect();
        match key.trim() {
            "K" => {
                let v = parse_floats(path, no, &fields)?;
                if v.len() != 9 {
                    return Err(Error::parse(path, no, "K needs 9 values"));
                }
                k = Some(Mat3::from_row_slice(&v));
            }
            "P2" => {
                let v = parse_floats(path, no, &fields)?;
                if v.len() != 12 {
                    return Err(Error::parse(path, no, "P2 needs 12 values"));
                }
                p2 = Some(Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]));
            }
            "Tr" | "Tr_velo_to_cam" => {
                let v = parse_floats(path, no, &fields)?;
                let v: [f64; 12] = v.try_into().map_err(|_| Error::parse(path, no, "Tr needs 12 values"))?;
                tr = Some(RigidTransform::from_row_major_3x4(&v, 1e-6));
            }
            "size" => {
                let wh: Vec<u32> = fields.iter().filter_map(|f| f.parse().ok()).collect();
                if wh.len() != 2 || fields.len() != 2 {
                    return Err(Error::parse(path, no, "size needs `width height`"));
                }
                size = Some((wh[0], wh[1]));
            }
            // Other KITTI keys (P0, R0_rect, ...) are not needed.
            _ => {}
        }
    }
    let k = k.or(p2).ok_or_else(|| Error::Config(format!("{}: no intrinsics (K or P2)", path.display())))?;
    let tr = tr.ok_or_else(|| Error::Config(format!("{}: no LIDAR-to-camera transform (Tr)", path.display())))?;
    let (w, h) = size.ok_or_else(|| Error::Config(format!("{}: no image size", path.display())))?;
    Ok(Calibration {
        camera: CameraModel::from_matrix(k, w, h)?,
        t_lidar_to_cam: tr,
    })
}

pub fn write_calibration(calib: &Calibration, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let k = &calib.camera.intrinsic;
    let kv: Vec<String> = (0..3).flat_map(|r| (0..3).map(move |c| format!("{:e}", k[(r, c)]))).collect();
    let tv: Vec<String> = calib.t_lidar_to_cam.to_row_major_3x4().iter().map(|v| format!("{v:e}")).collect();
    writeln!(w, "K: {}", kv.join(" ")).map_err(io)?;
    writeln!(w, "Tr: {}", tv.join(" ")).map_err(io)?;
    writeln!(w, "size: {} {}", calib.camera.width, calib.camera.height).map_err(io)?;
    w.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub timestamp: f64,
    pub image_path: PathBuf,
    pub cloud_path: Option<PathBuf>,
    pub pose_index: usize,
}

/// Raw manifest contents. Relative paths are resolved against the manifest's
/// directory.
///
/// ```text
/// # comment
/// calib calib.txt
/// poses poses.txt
/// detections detections.txt      (optional)
/// 0.000 image_0/000000.pgm velodyne/000000.bin 0
/// 0.033 image_0/000001.pgm - 1
/// ```
///
/// Detection frame ids index the frame lines, starting at 0.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub calib: Option<PathBuf>,
    pub poses: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub frames: Vec<FrameRecord>,
}

pub fn parse_manifest(text: &str, base: &Path, path_for_errors: &Path) -> Result<Manifest> {
    let mut m = Manifest::default();
    let resolve = |p: &str| base.join(p);
    for (no, line) in data_lines(text) {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["calib", p] => {
                if m.calib.is_some() {
                    return Err(ManifestError::DuplicateCalibration.into());
                }
                m.calib = Some(resolve(p));
            }
            ["poses", p] => m.poses = Some(resolve(p)),
            ["detections", p] => m.detections = Some(resolve(p)),
            [ts, img, cloud, pose] => {
                let timestamp: f64 = ts
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| Error::parse(path_for_errors, no, format!("bad timestamp {ts:?}")))?;
                let pose_index = pose
                    .parse()
                    .map_err(|_| Error::parse(path_for_errors, no, format!("bad pose index {pose:?}")))?;
                m.frames.push(FrameRecord {
                    timestamp,
                    image_path: resolve(img),
                    cloud_path: (*cloud != "-").then(|| resolve(cloud)),
                    pose_index,
                });
            }
            _ => return Err(Error::parse(path_for_errors, no, format!("unrecognized line {line:?}"))),
        }
    }
    Ok(m)
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_text(path)?;
        parse_manifest(&text, path.parent().unwrap_or(Path::new(".")), path)
    }

    /// Structural checks that need no other file.
    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.calib.is_none() {
            return Err(ManifestError::MissingCalibration);
        }
        if self.poses.is_none() {
            return Err(ManifestError::MissingPoses);
        }
        if self.frames.is_empty() {
            return Err(ManifestError::NoFrames);
        }
        for (i, w) in self.frames.windows(2).enumerate() {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(ManifestError::NonMonotoneTimestamp(i + 1));
            }
        }
        Ok(())
    }

    /// Writes the manifest with paths relative to `path`'s directory where
    /// possible.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut w = create(path)?;
        let io = |e| Error::io(path, e);
        for (key, p) in [("calib", &self.calib), ("poses", &self.poses), ("detections", &self.detections)] {
            if let Some(p) = p {
                writeln!(w, "{key} {}", rel(p)).map_err(io)?;
            }
        }
        for f in &self.frames {
            let cloud = f.cloud_path.as_deref().map_or("-".to_string(), rel);
            writeln!(w, "{:.6} {} {} {}", f.timestamp, rel(&f.image_path), cloud, f.pose_index).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFrame {
    pub timestamp: f64,
    pub image_path: PathBuf,
    pub cloud_path: Option<PathBuf>,
    /// World-from-camera pose.
    pub ego_pose: RigidTransform,
    pub detections: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub calibration: Calibration,
    pub frames: Vec<SequenceFrame>,
}

/// Reads and validates a manifest together with its calibration, poses and
/// detections. Frame images and clouds are loaded lazily by the caller.
pub fn load_sequence(manifest_path: impl AsRef<Path>) -> Result<Sequence> {
    let m = Manifest::read(manifest_path)?;
    m.validate()?;
    let calibration = read_calibration(m.calib.as_ref().unwrap())?;
    let poses = read_poses(m.poses.as_ref().unwrap())?;
    let mut dets = match &m.detections {
        Some(p) => read_detections(p)?,
        None => BTreeMap::new(),
    };
    let mut frames = Vec::with_capacity(m.frames.len());
    for (i, f) in m.frames.into_iter().enumerate() {
        let ego_pose = *poses.get(f.pose_index).ok_or(ManifestError::PoseIndex {
            frame: i,
            index: f.pose_index,
            available: poses.len(),
        })?;
        frames.push(SequenceFrame {
            timestamp: f.timestamp,
            image_path: f.image_path,
            cloud_path: f.cloud_path,
            ego_pose,
            detections: dets.remove(&i).unwrap_or_default(),
        });
    }
    if let Some((&frame, _)) = dets.iter().next() {
        log::warn!("detections reference frame {frame}, beyond the {} manifest frames", frames.len());
    }
    Ok(Sequence { calibration, frames })
}
