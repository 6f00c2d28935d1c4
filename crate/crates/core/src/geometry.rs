//! Rigid transforms, pinhole projection and point-cloud containers.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Per-entry drift of RᵀR − I above which a rotation is re-orthonormalized.
const ORTHO_DRIFT: f64 = 1e-9;

/// A proper rigid motion `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Mat3::identity(), t)
    }

    /// Rotation of `angle` radians about `axis` (need not be unit) plus `t`.
    pub fn from_axis_angle(axis: Vec3, angle: f64, t: Vec3) -> Self {
        let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self::new(*r.matrix(), t)
    }

    /// Rotation from a rotation vector (axis scaled by angle).
    pub fn from_rotation_vector(w: Vec3, t: Vec3) -> Self {
        Self::new(*Rotation3::new(w).matrix(), t)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::z(), angle, Vec3::zeros())
    }

    /// Builds a transform from a row-major 3×4 `[R|t]`, re-orthonormalizing R
    /// when its drift exceeds `tol`.
    pub fn from_row_major_3x4(v: &[f64; 12], tol: f64) -> Self {
        let r = Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Vec3::new(v[3], v[7], v[11]);
        let mut out = Self::new(r, t);
        if orthonormality_drift(&out.rotation) > tol {
            out.rotation = nearest_rotation(&out.rotation);
        }
        out
    }

    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.rotation.iter().all(|x| x.is_finite())
            && self.translation.iter().all(|x| x.is_finite())
            && orthonormality_drift(&self.rotation) <= tol
            && self.rotation.determinant() > 0.0
    }
}

/// `a ∘ b`: applies `b` first, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    let mut rotation = a.rotation * b.rotation;
    if orthonormality_drift(&rotation) > ORTHO_DRIFT {
        rotation = nearest_rotation(&rotation);
    }
    RigidTransform {
        rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    let rt = t.rotation.transpose();
    RigidTransform {
        rotation: rt,
        translation: -(rt * t.translation),
    }
}

/// Largest absolute entry of RᵀR − I.
pub fn orthonormality_drift(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).amax()
}

/// Orthogonal polar factor of `m`, forced to determinant +1.
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}

/// Angle between two rotations, in radians.
pub fn rotation_distance(a: &Mat3, b: &Mat3) -> f64 {
    let c = (((a.transpose() * b).trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    c.acos()
}

/// Pinhole intrinsics plus image size. Lens distortion is assumed removed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub intrinsic: Mat3,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        Ok(Self {
            intrinsic: Mat3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0),
            width,
            height,
        })
    }

    /// Accepts a full 3×3 K, checking the upper-triangular pinhole layout.
    pub fn from_matrix(k: Mat3, width: u32, height: u32) -> Result<Self> {
        let layout_ok = k[(2, 2)] == 1.0 && k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
        if !layout_ok {
            return Err(Error::InvalidArgument(
                "intrinsic matrix must be upper triangular with K[2][2] = 1".into(),
            ));
        }
        let mut cam = Self::new(k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)], width, height)?;
        cam.intrinsic[(0, 1)] = k[(0, 1)];
        Ok(cam)
    }

    #[inline]
    pub fn fx(&self) -> f64 {
        self.intrinsic[(0, 0)]
    }
    #[inline]
    pub fn fy(&self) -> f64 {
        self.intrinsic[(1, 1)]
    }
    #[inline]
    pub fn cx(&self) -> f64 {
        self.intrinsic[(0, 2)]
    }
    #[inline]
    pub fn cy(&self) -> f64 {
        self.intrinsic[(1, 2)]
    }
    #[inline]
    pub fn skew(&self) -> f64 {
        self.intrinsic[(0, 1)]
    }

    #[inline]
    pub fn contains(&self, px: &Pixel) -> bool {
        px.u >= 0.0 && px.v >= 0.0 && px.u < self.width as f64 && px.v < self.height as f64
    }

    /// Pixel to normalized image coordinates (K⁻¹ applied).
    #[inline]
    pub fn normalize(&self, px: &Pixel) -> (f64, f64) {
        let y = (px.v - self.cy()) / self.fy();
        let x = (px.u - self.cx() - self.skew() * y) / self.fx();
        (x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn dist(&self, o: &Pixel) -> f64 {
        ((self.u - o.u).powi(2) + (self.v - o.v).powi(2)).sqrt()
    }
}

/// Pinhole projection of a camera-frame point; `None` when it is not in
/// front of the camera.
#[inline]
pub fn project(p: &Vec3, cam: &CameraModel) -> Option<Pixel> {
    if p.z <= 0.0 {
        return None;
    }
    let x = p.x / p.z;
    let y = p.y / p.z;
    Some(Pixel {
        u: cam.fx() * x + cam.skew() * y + cam.cx(),
        v: cam.fy() * y + cam.cy(),
    })
}

/// Ordered 3D points with optional per-point intensity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub intensity: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self {
            points,
            intensity: None,
        }
    }

    pub fn with_intensity(points: Vec<Vec3>, intensity: Vec<f32>) -> Result<Self> {
        let c = Self {
            points,
            intensity: Some(intensity),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = &self.intensity {
            if i.len() != self.points.len() {
                return Err(Error::SizeMismatch {
                    expected: self.points.len(),
                    actual: i.len(),
                });
            }
        }
        if let Some(k) = self.points.iter().position(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidArgument(format!("point {k} is not finite")));
        }
        Ok(())
    }

    /// Sub-cloud of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            intensity: self
                .intensity
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect()),
        }
    }

    pub fn filter(&self, mut keep: impl FnMut(usize, &Vec3) -> bool) -> PointCloud {
        let idx: Vec<usize> = self
            .points
            .iter()
            .enumerate()
            .filter(|(i, p)| keep(*i, p))
            .map(|(i, _)| i)
            .collect();
        self.select(&idx)
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let s: Vec3 = self.points.iter().sum();
        Some(s / self.points.len() as f64)
    }
}

pub fn transform_points(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
        intensity: cloud.intensity.clone(),
    }
}

/// Projects every point of `cloud` through `t_world_to_cam` and `cam`,
/// keeping those in front of the camera that land inside the image.
/// Returned indices are strictly increasing.
pub fn project_cloud(
    cloud: &PointCloud,
    t_world_to_cam: &RigidTransform,
    cam: &CameraModel,
) -> Vec<(usize, Pixel)> {
    crate::par::flat_map_chunks(&cloud.points, 8192, |start, chunk| {
        chunk
            .iter()
            .enumerate()
            .filter_map(|(k, p)| {
                let px = project(&t_world_to_cam.apply(p), cam)?;
                cam.contains(&px).then_some((start + k, px))
            })
            .collect()
    })
}
