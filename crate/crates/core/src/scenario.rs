//! Synthetic driving scenes with exact ground truth: a flat ground plane,
//! textured boxes with per-frame rigid motion, a ray-cast spinning LIDAR and
//! a ray-traced camera.
//!
//! World frame is z-up with the ground at z = 0. The LIDAR frame is x
//! forward, y left, z up; the camera frame is x right, y down, z forward.
//! All motion is specified per camera frame.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose, invert, project, CameraModel, Mat3, PointCloud, RigidTransform, Vec3};
use crate::imaging::GrayImage;
use crate::io::{self, Calibration, FrameRecord, Manifest};
use crate::tracking2d::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Camera center in the LIDAR frame, meters.
    #[serde(default = "default_camera_offset")]
    pub offset: [f64; 3],
}

fn default_camera_offset() -> [f64; 3] {
    [0.27, 0.0, -0.08]
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            fx: 721.5,
            fy: 721.5,
            cx: 609.6,
            cy: 172.9,
            width: 1242,
            height: 375,
            offset: default_camera_offset(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarSpec {
    pub rings: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    pub azimuth_steps: usize,
    pub max_range: f64,
    /// Mounting height above the ground, meters.
    pub height: f64,
    /// Standard deviation of additive range noise, meters.
    pub range_noise: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            rings: 64,
            fov_up_deg: 2.0,
            fov_down_deg: -24.8,
            azimuth_steps: 1800,
            max_range: 100.0,
            height: 1.73,
            range_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EgoSpec {
    /// World x, y and heading (radians) at frame 0.
    pub start: [f64; 3],
    /// World-frame velocity, meters per frame.
    pub velocity: [f64; 2],
    /// Heading change per frame, radians.
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    /// Length (x), width (y) and height (z) in the box frame, meters.
    pub size: [f64; 3],
    /// World x, y of the box center at frame 0.
    pub position: [f64; 2],
    #[serde(default)]
    pub yaw: f64,
    /// Gap between the ground and the box bottom.
    #[serde(default = "default_clearance")]
    pub clearance: f64,
    /// World-frame velocity, meters per frame.
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default)]
    pub yaw_rate: f64,
}

fn default_clearance() -> f64 {
    0.3
}

impl BoxSpec {
    pub fn car(x: f64, y: f64) -> Self {
        Self {
            size: [4.2, 1.8, 1.5],
            position: [x, y],
            yaw: 0.0,
            clearance: default_clearance(),
            velocity: [0.0, 0.0],
            yaw_rate: 0.0,
        }
    }

    pub fn moving(mut self, vx: f64, vy: f64) -> Self {
        self.velocity = [vx, vy];
        self
    }

    pub fn is_moving(&self) -> bool {
        self.velocity != [0.0, 0.0] || self.yaw_rate != 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub seed: u64,
    pub frames: usize,
    /// Camera frames per LIDAR frame.
    #[serde(default = "default_rate_ratio")]
    pub rate_ratio: usize,
    #[serde(default = "default_fps")]
    pub camera_fps: f64,
    #[serde(default)]
    pub camera: CameraSpec,
    #[serde(default)]
    pub lidar: LidarSpec,
    #[serde(default)]
    pub ego: EgoSpec,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    /// Samples per pixel along each image axis.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
}

fn default_rate_ratio() -> usize {
    3
}
fn default_fps() -> f64 {
    30.0
}
fn default_supersample() -> usize {
    2
}

impl ScenarioConfig {
    fn base(frames: usize, boxes: Vec<BoxSpec>) -> Self {
        Self {
            seed: 0,
            frames,
            rate_ratio: default_rate_ratio(),
            camera_fps: default_fps(),
            camera: CameraSpec::default(),
            lidar: LidarSpec::default(),
            ego: EgoSpec {
                velocity: [0.3, 0.0],
                ..Default::default()
            },
            boxes,
            supersample: default_supersample(),
        }
    }

    /// Ten frames, ego driving forward, two cars overtaking in the
    /// neighboring lanes and two parked cars.
    pub fn two_movers() -> Self {
        Self::base(
            10,
            vec![
                BoxSpec::car(11.0, 3.6).moving(0.55, 0.0),
                BoxSpec::car(14.0, -3.8).moving(0.7, 0.0),
                BoxSpec::car(21.0, -0.5),
                BoxSpec::car(17.0, -11.0),
            ],
        )
    }

    /// Same layout as [`Self::two_movers`] with every box parked.
    pub fn static_scene() -> Self {
        let mut s = Self::two_movers();
        for b in &mut s.boxes {
            b.velocity = [0.0, 0.0];
        }
        s
    }

    /// One box drifting sideways across the view at 0.5 m per frame.
    pub fn lateral() -> Self {
        let mut s = Self::base(4, vec![BoxSpec::car(12.0, -1.0).moving(0.0, 0.5)]);
        s.ego.velocity = [0.0, 0.0];
        s
    }

    /// Five cars around a ~120k-point sweep.
    pub fn five_cars() -> Self {
        let mut s = Self::base(
            4,
            vec![
                BoxSpec::car(10.0, 3.6).moving(0.5, 0.0),
                BoxSpec::car(13.0, -3.8).moving(0.6, 0.0),
                BoxSpec::car(21.0, -0.3).moving(0.4, 0.0),
                BoxSpec::car(16.0, 10.0),
                BoxSpec::car(18.0, -11.0).moving(0.3, 0.0),
            ],
        );
        s.lidar.azimuth_steps = 2048;
        s.lidar.max_range = 120.0;
        s
    }

    /// A 16-ring sensor with moving cars at several distances, so object
    /// clusters range from a handful to a few hundred points.
    pub fn sparse_far() -> Self {
        let mut s = Self::base(
            7,
            vec![
                BoxSpec::car(9.0, 3.6).moving(0.5, 0.0),
                BoxSpec::car(11.0, -3.8).moving(0.6, 0.0),
                BoxSpec::car(38.0, 3.0).moving(0.5, 0.0),
                BoxSpec::car(44.0, -3.5).moving(0.6, 0.0),
                BoxSpec::car(52.0, 0.5).moving(0.5, 0.0),
            ],
        );
        s.lidar = LidarSpec {
            rings: 16,
            fov_up_deg: 15.0,
            fov_down_deg: -15.0,
            azimuth_steps: 900,
            ..LidarSpec::default()
        };
        s
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "two-movers" => Self::two_movers(),
            "static" => Self::static_scene(),
            "lateral" => Self::lateral(),
            "five-cars" => Self::five_cars(),
            "sparse-far" => Self::sparse_far(),
            _ => return None,
        })
    }

    pub const PRESETS: [&'static str; 5] = ["two-movers", "static", "lateral", "five-cars", "sparse-far"];

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 {
            return bad("scenario needs at least one frame".into());
        }
        if self.rate_ratio == 0 {
            return bad("rate_ratio must be positive".into());
        }
        if !(self.camera_fps > 0.0) {
            return bad("camera_fps must be positive".into());
        }
        if self.supersample == 0 || self.supersample > 8 {
            return bad(format!("supersample {} outside 1..=8", self.supersample));
        }
        let l = &self.lidar;
        if l.rings < 2 || l.azimuth_steps < 8 || !(l.fov_up_deg > l.fov_down_deg) || !(l.max_range > 0.0) || !(l.height > 0.0) {
            return bad("invalid lidar spec".into());
        }
        if !(l.range_noise >= 0.0) {
            return bad("range_noise must be non-negative".into());
        }
        self.camera_model()?;
        for (k, b) in self.boxes.iter().enumerate() {
            if b.size.iter().any(|s| !(*s > 0.0)) || !(b.clearance >= 0.0) {
                return bad(format!("box {k}: sizes must be positive and clearance non-negative"));
            }
            let finite = b.position.iter().chain(&b.velocity).chain([&b.yaw, &b.yaw_rate]).all(|v| v.is_finite());
            if !finite {
                return bad(format!("box {k}: non-finite motion"));
            }
        }
        Ok(())
    }

    pub fn camera_model(&self) -> Result<CameraModel> {
        let c = &self.camera;
        CameraModel::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn is_lidar_frame(&self, frame: usize) -> bool {
        frame % self.rate_ratio == 0
    }

    /// Latest LIDAR frame at or before `frame`.
    pub fn anchor_of(&self, frame: usize) -> usize {
        frame - frame % self.rate_ratio
    }
}

/// Which surface a ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Ground,
    Box { index: usize, face: usize },
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    surface: Surface,
    /// Hit point in the surface's own frame (world for the ground).
    local: Vec3,
}

/// Ground label in scan label lists.
pub const GROUND_LABEL: i64 = -1;

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    camera: CameraModel,
    t_lidar_to_cam: RigidTransform,
    phases: Vec<[f64; 4]>,
}

const WAVELENGTHS: [f64; 4] = [0.21, 0.33, 0.47, 0.71];
const ORIENTATIONS: [f64; 4] = [0.3, 1.4, 2.3, 2.9];
const FACE_GAIN: [f64; 6] = [0.85, 1.0, 0.75, 0.95, 0.9, 1.05];

/// Smooth, aperiodic-looking intensity pattern in [0.14, 0.86].
fn pattern(u: f64, v: f64, scale: f64, phase: &[f64; 4]) -> f64 {
    let mut s = 0.0;
    for k in 0..4 {
        let (sn, cs) = ORIENTATIONS[k].sin_cos();
        s += (2.0 * PI * (u * cs + v * sn) / (WAVELENGTHS[k] * scale) + phase[k]).sin();
    }
    0.5 + 0.09 * s
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let camera = config.camera_model()?;
        let r = Mat3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let c = Vec3::from(config.camera.offset);
        let t_lidar_to_cam = RigidTransform::new(r, -(r * c));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let uni = rand_distr::Uniform::new(0.0, 2.0 * PI).unwrap();
        let phases = (0..=config.boxes.len()).map(|_| std::array::from_fn(|_| uni.sample(&mut rng))).collect();
        Ok(Self {
            config,
            camera,
            t_lidar_to_cam,
            phases,
        })
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn t_lidar_to_cam(&self) -> &RigidTransform {
        &self.t_lidar_to_cam
    }

    pub fn calibration(&self) -> Calibration {
        Calibration {
            camera: self.camera,
            t_lidar_to_cam: self.t_lidar_to_cam,
        }
    }

    /// World-from-LIDAR at `frame`.
    pub fn lidar_pose(&self, frame: usize) -> RigidTransform {
        let e = &self.config.ego;
        let f = frame as f64;
        let mut t = RigidTransform::rot_z(e.start[2] + e.yaw_rate * f);
        t.translation = Vec3::new(e.start[0] + e.velocity[0] * f, e.start[1] + e.velocity[1] * f, self.config.lidar.height);
        t
    }

    /// World-from-camera at `frame`.
    pub fn camera_pose(&self, frame: usize) -> RigidTransform {
        compose(&self.lidar_pose(frame), &invert(&self.t_lidar_to_cam))
    }

    /// World-from-box at `frame`. The box frame has its origin at the bottom
    /// face center.
    pub fn box_pose(&self, index: usize, frame: usize) -> RigidTransform {
        let b = &self.config.boxes[index];
        let f = frame as f64;
        let mut t = RigidTransform::rot_z(b.yaw + b.yaw_rate * f);
        t.translation = Vec3::new(b.position[0] + b.velocity[0] * f, b.position[1] + b.velocity[1] * f, b.clearance);
        t
    }

    fn cast(&self, origin: &Vec3, dir: &Vec3, frame: usize, max_t: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if dir.z < -1e-12 {
            let t = -origin.z / dir.z;
            if t > 0.0 && t <= max_t {
                best = Some(Hit {
                    t,
                    surface: Surface::Ground,
                    local: origin + dir * t,
                });
            }
        }
        for (k, b) in self.config.boxes.iter().enumerate() {
            let pose = self.box_pose(k, frame);
            let rt = pose.rotation.transpose();
            let o = rt * (origin - pose.translation);
            let d = rt * dir;
            let lo = [-b.size[0] / 2.0, -b.size[1] / 2.0, 0.0];
            let hi = [b.size[0] / 2.0, b.size[1] / 2.0, b.size[2]];
            let (mut t0, mut t1, mut face) = (0.0f64, best.map_or(max_t, |h| h.t), usize::MAX);
            let mut hit = true;
            for a in 0..3 {
                if d[a].abs() < 1e-15 {
                    if o[a] < lo[a] || o[a] > hi[a] {
                        hit = false;
                        break;
                    }
                    continue;
                }
                let inv = 1.0 / d[a];
                let (mut ta, mut tb) = ((lo[a] - o[a]) * inv, (hi[a] - o[a]) * inv);
                // Entering through the low face when moving in +a.
                let mut fa = 2 * a;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                    fa = 2 * a + 1;
                }
                if ta > t0 {
                    t0 = ta;
                    face = fa;
                }
                t1 = t1.min(tb);
                if t0 > t1 {
                    hit = false;
                    break;
                }
            }
            // Rays starting inside a box are ignored.
            if hit && face != usize::MAX {
                best = Some(Hit {
                    t: t0,
                    surface: Surface::Box { index: k, face },
                    local: o + d * t0,
                });
            }
        }
        best
    }

    fn shade(&self, hit: &Hit) -> f64 {
        match hit.surface {
            Surface::Ground => pattern(hit.local.x, hit.local.y, 3.0, &self.phases[self.config.boxes.len()]),
            Surface::Box { index, face } => {
                let p = &hit.local;
                let (u, v) = match face / 2 {
                    0 => (p.y, p.z),
                    1 => (p.x, p.z),
                    _ => (p.x, p.y),
                };
                let off = face as f64 * 1.7;
                (pattern(u + off, v - off, 1.0, &self.phases[index]) * FACE_GAIN[face]).clamp(0.0, 1.0)
            }
        }
    }

    /// Ray-cast sweep at `frame`, in the LIDAR frame, ring-major order.
    /// Labels give the box index of each point or [`GROUND_LABEL`].
    pub fn lidar_scan(&self, frame: usize) -> (PointCloud, Vec<i64>) {
        let l = &self.config.lidar;
        let pose = self.lidar_pose(frame);
        let noise = (l.range_noise > 0.0).then(|| Normal::new(0.0, l.range_noise).unwrap());
        let rows = crate::par::map_range(l.rings, |r| {
            let elev = (l.fov_down_deg + (l.fov_up_deg - l.fov_down_deg) * r as f64 / (l.rings - 1) as f64).to_radians();
            let mut rng = ChaCha8Rng::seed_from_u64(crate::pose::object_seed(self.config.seed ^ frame as u64, r as u64));
            let mut out = Vec::new();
            for j in 0..l.azimuth_steps {
                let az = 2.0 * PI * j as f64 / l.azimuth_steps as f64;
                let d_l = Vec3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
                let d_w = pose.rotation * d_l;
                if let Some(hit) = self.cast(&pose.translation, &d_w, frame, l.max_range) {
                    let range = hit.t + noise.map_or(0.0, |n| n.sample(&mut rng));
                    let label = match hit.surface {
                        Surface::Ground => GROUND_LABEL,
                        Surface::Box { index, .. } => index as i64,
                    };
                    out.push((d_l * range, self.shade(&hit) as f32, label));
                }
            }
            out
        });
        let flat: Vec<(Vec3, f32, i64)> = rows.into_iter().flatten().collect();
        let cloud = PointCloud {
            points: flat.iter().map(|x| x.0).collect(),
            intensity: Some(flat.iter().map(|x| x.1).collect()),
        };
        (cloud, flat.iter().map(|x| x.2).collect())
    }

    /// Ray-traced grayscale camera image at `frame`.
    pub fn render(&self, frame: usize) -> GrayImage {
        let (w, h) = (self.camera.width as usize, self.camera.height as usize);
        let pose = self.camera_pose(frame);
        let kinv = self.camera.intrinsic.try_inverse().expect("valid intrinsics");
        let s = self.config.supersample;
        let max_t = 4.0 * self.config.lidar.max_range;
        let rows = crate::par::map_range(h, |y| {
            (0..w)
                .map(|x| {
                    let mut acc = 0.0;
                    for sy in 0..s {
                        for sx in 0..s {
                            let u = x as f64 + (sx as f64 + 0.5) / s as f64 - 0.5;
                            let v = y as f64 + (sy as f64 + 0.5) / s as f64 - 0.5;
                            let d = pose.rotation * (kinv * Vec3::new(u, v, 1.0));
                            acc += match self.cast(&pose.translation, &d, frame, max_t) {
                                Some(hit) => self.shade(&hit),
                                None => 0.8,
                            };
                        }
                    }
                    (acc / (s * s) as f64) as f32
                })
                .collect::<Vec<f32>>()
        });
        GrayImage::new(w, h, rows.into_iter().flatten().collect()).expect("sized image")
    }

    fn box_corners(&self, index: usize, frame: usize) -> [Vec3; 8] {
        let b = &self.config.boxes[index];
        let pose = self.box_pose(index, frame);
        std::array::from_fn(|i| {
            let x = if i & 1 == 0 { -b.size[0] / 2.0 } else { b.size[0] / 2.0 };
            let y = if i & 2 == 0 { -b.size[1] / 2.0 } else { b.size[1] / 2.0 };
            let z = if i & 4 == 0 { 0.0 } else { b.size[2] };
            pose.apply(&Vec3::new(x, y, z))
        })
    }

    /// Exact detections at `frame`: the image-clipped hull of each box's
    /// projected corners, for boxes entirely in front of the camera.
    pub fn detections(&self, frame: usize) -> Vec<(usize, BBox)> {
        let cam_from_world = invert(&self.camera_pose(frame));
        let (w, h) = (self.camera.width as f64, self.camera.height as f64);
        let mut out = Vec::new();
        for k in 0..self.config.boxes.len() {
            let px: Option<Vec<_>> = self
                .box_corners(k, frame)
                .iter()
                .map(|c| {
                    let p = cam_from_world.apply(c);
                    if p.z < 0.5 {
                        None
                    } else {
                        project(&p, &self.camera)
                    }
                })
                .collect();
            let Some(px) = px else { continue };
            let x_min = px.iter().map(|p| p.u).fold(f64::INFINITY, f64::min).max(0.0);
            let x_max = px.iter().map(|p| p.u).fold(f64::NEG_INFINITY, f64::max).min(w);
            let y_min = px.iter().map(|p| p.v).fold(f64::INFINITY, f64::min).max(0.0);
            let y_max = px.iter().map(|p| p.v).fold(f64::NEG_INFINITY, f64::max).min(h);
            if x_max - x_min >= 2.0 && y_max - y_min >= 2.0 {
                let mut b = BBox::new(x_min, y_min, x_max, y_max);
                b.class_id = 1;
                out.push((k, b));
            }
        }
        out
    }

    /// True motion of box `index` between `anchor` and `frame`, expressed in
    /// the anchor LIDAR frame.
    pub fn true_object_motion(&self, index: usize, anchor: usize, frame: usize) -> RigidTransform {
        let la = self.lidar_pose(anchor);
        let m = compose(&self.box_pose(index, frame), &invert(&self.box_pose(index, anchor)));
        compose(&invert(&la), &compose(&m, &la))
    }

    /// Anchor-LIDAR to `frame`-LIDAR transform for the static world.
    pub fn true_static_transform(&self, anchor: usize, frame: usize) -> RigidTransform {
        compose(&invert(&self.lidar_pose(frame)), &self.lidar_pose(anchor))
    }

    /// Anchor-LIDAR to `frame`-LIDAR transform for points of box `index`.
    pub fn true_dynamic_transform(&self, index: usize, anchor: usize, frame: usize) -> RigidTransform {
        compose(&self.true_static_transform(anchor, frame), &self.true_object_motion(index, anchor, frame))
    }

    /// The anchor sweep moved to `frame` with the exact per-label transforms.
    pub fn ground_truth_virtual(&self, anchor_cloud: &PointCloud, labels: &[i64], anchor: usize, frame: usize) -> PointCloud {
        let ts = self.true_static_transform(anchor, frame);
        let td: Vec<RigidTransform> = (0..self.config.boxes.len())
            .map(|k| self.true_dynamic_transform(k, anchor, frame))
            .collect();
        let points = anchor_cloud
            .points
            .iter()
            .zip(labels)
            .map(|(p, &l)| if l < 0 { ts.apply(p) } else { td[l as usize].apply(p) })
            .collect();
        PointCloud {
            points,
            intensity: anchor_cloud.intensity.clone(),
        }
    }

    /// Renders the whole sequence into `dir`; see [`write_dataset`].
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<SynthSummary> {
        write_dataset(self, dir.as_ref())
    }
}

/// Ground-truth motion of one box at one camera-only frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMotion {
    pub frame: usize,
    pub anchor: usize,
    #[serde(rename = "box")]
    pub box_index: usize,
    pub moving: bool,
    /// Row-major 3×4 object motion in the anchor LIDAR frame.
    pub t_mov: [f64; 12],
    /// Centroid of the box's anchor points, anchor LIDAR frame.
    pub centroid: Option<[f64; 3]>,
    pub anchor_points: usize,
    /// Distance the centroid moves between anchor and frame.
    pub displacement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub lidar_frames: Vec<usize>,
    pub camera_only_frames: Vec<usize>,
    pub motions: Vec<GroundTruthMotion>,
}

pub fn frame_name(frame: usize) -> String {
    format!("{frame:06}")
}

/// Writes a complete sequence:
///
/// ```text
/// manifest.txt calib.txt poses.txt detections.txt scenario.toml
/// image/<frame>.pgm        every frame
/// velodyne/<frame>.bin     LIDAR frames
/// labels/<frame>.txt       box index (or -1) per LIDAR point
/// gt_virtual/<frame>.bin   camera-only frames
/// gt_motions.json
/// ```
pub fn write_dataset(s: &Scenario, dir: &Path) -> Result<SynthSummary> {
    let mk = |p: PathBuf| fs_err(std::fs::create_dir_all(&p), &p).map(|_| p);
    let dir = mk(dir.to_path_buf())?;
    let img_dir = mk(dir.join("image"))?;
    let velo_dir = mk(dir.join("velodyne"))?;
    let label_dir = mk(dir.join("labels"))?;
    let gt_dir = mk(dir.join("gt_virtual"))?;

    let cfg = &s.config;
    io::write_calibration(&s.calibration(), dir.join("calib.txt"))?;
    let poses: Vec<RigidTransform> = (0..cfg.frames).map(|f| s.camera_pose(f)).collect();
    io::write_poses(&poses, dir.join("poses.txt"))?;
    let scenario_toml = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    fs_err(std::fs::write(dir.join("scenario.toml"), scenario_toml), &dir.join("scenario.toml"))?;

    let mut dets = BTreeMap::new();
    let mut frames = Vec::new();
    let mut summary = SynthSummary {
        manifest: dir.join("manifest.txt"),
        lidar_frames: Vec::new(),
        camera_only_frames: Vec::new(),
        motions: Vec::new(),
    };
    let mut anchor: Option<(usize, PointCloud, Vec<i64>)> = None;
    for f in 0..cfg.frames {
        let name = frame_name(f);
        let img_path = img_dir.join(format!("{name}.pgm"));
        io::write_pgm(&s.render(f), &img_path)?;
        let boxes: Vec<BBox> = s.detections(f).into_iter().map(|(_, b)| b).collect();
        if !boxes.is_empty() {
            dets.insert(f, boxes);
        }
        let mut cloud_path = None;
        if cfg.is_lidar_frame(f) {
            let (cloud, labels) = s.lidar_scan(f);
            let p = velo_dir.join(format!("{name}.bin"));
            io::write_cloud_bin(&cloud, &p)?;
            write_i64_lines(&labels, &label_dir.join(format!("{name}.txt")))?;
            cloud_path = Some(p);
            summary.lidar_frames.push(f);
            anchor = Some((f, cloud, labels));
        } else if let Some((a, cloud, labels)) = &anchor {
            io::write_cloud_bin(&s.ground_truth_virtual(cloud, labels, *a, f), gt_dir.join(format!("{name}.bin")))?;
            summary.camera_only_frames.push(f);
            for k in 0..cfg.boxes.len() {
                let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k as i64).collect();
                let centroid = (!members.is_empty()).then(|| cloud.select(&members).centroid().unwrap());
                let t = s.true_object_motion(k, *a, f);
                summary.motions.push(GroundTruthMotion {
                    frame: f,
                    anchor: *a,
                    box_index: k,
                    moving: cfg.boxes[k].is_moving(),
                    t_mov: t.to_row_major_3x4(),
                    centroid: centroid.map(|c| [c.x, c.y, c.z]),
                    anchor_points: members.len(),
                    displacement: centroid.map(|c| (t.apply(&c) - c).norm()),
                });
            }
        }
        frames.push(FrameRecord {
            timestamp: f as f64 / cfg.camera_fps,
            image_path: img_path,
            cloud_path,
            pose_index: f,
        });
    }
    io::write_detections(&dets, dir.join("detections.txt"))?;
    let gt = serde_json::to_string_pretty(&summary.motions)?;
    fs_err(std::fs::write(dir.join("gt_motions.json"), gt), &dir.join("gt_motions.json"))?;
    Manifest {
        calib: Some(dir.join("calib.txt")),
        poses: Some(dir.join("poses.txt")),
        detections: Some(dir.join("detections.txt")),
        frames,
    }
    .write(&summary.manifest)?;
    Ok(summary)
}

fn fs_err<T>(r: std::io::Result<T>, p: &Path) -> Result<T> {
    r.map_err(|e| Error::io(p, e))
}

fn write_i64_lines(v: &[i64], path: &Path) -> Result<()> {
    let mut s = String::with_capacity(v.len() * 3);
    for x in v {
        s.push_str(&x.to_string());
        s.push('\n');
    }
    fs_err(std::fs::write(path, s), path)
}

pub fn read_ground_truth_motions(path: impl AsRef<Path>) -> Result<Vec<GroundTruthMotion>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
