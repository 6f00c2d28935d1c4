//! Virtual LIDAR frame generation from the anchor cloud and per-partition
//! rigid transforms.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{project_cloud, CameraModel, PointCloud, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Provenance {
    Static,
    Track(u64),
}

impl Provenance {
    /// Integer label used in label files: −1 for static points.
    pub fn as_label(&self) -> i64 {
        match self {
            Provenance::Static => -1,
            Provenance::Track(id) => *id as i64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FrameSynthesisPlan<'a> {
    pub source_cloud: &'a PointCloud,
    pub object_memberships: BTreeMap<u64, Vec<usize>>,
    pub t_static: RigidTransform,
    pub t_dynamic: BTreeMap<u64, RigidTransform>,
}

impl FrameSynthesisPlan<'_> {
    /// Owner of every source point, checking that memberships are disjoint,
    /// in range and backed by a transform.
    pub fn owners(&self) -> Result<Vec<Provenance>> {
        let n = self.source_cloud.len();
        let mut owner = vec![Provenance::Static; n];
        for (&id, idx) in &self.object_memberships {
            if !self.t_dynamic.contains_key(&id) {
                return Err(Error::InvalidPlan(format!("track {id} has points but no transform")));
            }
            for &i in idx {
                if i >= n {
                    return Err(Error::InvalidPlan(format!("track {id}: index {i} out of range ({n} points)")));
                }
                if let Provenance::Track(other) = owner[i] {
                    return Err(Error::InvalidPlan(format!("point {i} claimed by tracks {other} and {id}")));
                }
                owner[i] = Provenance::Track(id);
            }
        }
        Ok(owner)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedFrame {
    pub cloud: PointCloud,
    pub provenance: Vec<Provenance>,
}

/// Moves object points with their dynamic transform and everything else with
/// the static one. Order and intensities follow the source.
pub fn synthesize_frame(plan: &FrameSynthesisPlan) -> Result<SynthesizedFrame> {
    let owners = plan.owners()?;
    let src = &plan.source_cloud.points;
    let points = crate::par::flat_map_chunks(&owners, 8192, |start, chunk| {
        chunk
            .iter()
            .enumerate()
            .map(|(k, o)| {
                let t = match o {
                    Provenance::Static => &plan.t_static,
                    Provenance::Track(id) => &plan.t_dynamic[id],
                };
                t.apply(&src[start + k])
            })
            .collect()
    });
    Ok(SynthesizedFrame {
        cloud: PointCloud {
            points,
            intensity: plan.source_cloud.intensity.clone(),
        },
        provenance: owners,
    })
}

/// Indices of points visible in the camera image with positive depth.
pub fn fov_indices(cloud: &PointCloud, t_lidar_to_cam: &RigidTransform, cam: &CameraModel) -> Vec<usize> {
    project_cloud(cloud, t_lidar_to_cam, cam).into_iter().map(|(i, _)| i).collect()
}

pub fn restrict_to_camera_fov(cloud: &PointCloud, t_lidar_to_cam: &RigidTransform, cam: &CameraModel) -> PointCloud {
    cloud.select(&fov_indices(cloud, t_lidar_to_cam, cam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, transform_points, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
        let pts = (0..n)
            .map(|_| Vec3::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(-2.0..3.0)))
            .collect();
        let inten = (0..n).map(|_| rng.random_range(0.0f32..1.0)).collect();
        PointCloud::with_intensity(pts, inten).unwrap()
    }

    fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        RigidTransform::from_rotation_vector(
            Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
            Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0)),
        )
    }

    #[test]
    fn identity_plan_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 50);
        let plan = FrameSynthesisPlan {
            source_cloud: &cloud,
            object_memberships: BTreeMap::new(),
            t_static: RigidTransform::identity(),
            t_dynamic: BTreeMap::new(),
        };
        let out = synthesize_frame(&plan).unwrap();
        assert_eq!(out.cloud, cloud);
        assert!(out.provenance.iter().all(|p| *p == Provenance::Static));
    }

    #[test]
    fn single_object_owning_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 30);
        let shift = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 1.0));
        let plan = FrameSynthesisPlan {
            source_cloud: &cloud,
            object_memberships: BTreeMap::from([(4, (0..30).collect())]),
            t_static: random_transform(&mut rng),
            t_dynamic: BTreeMap::from([(4, shift)]),
        };
        let out = synthesize_frame(&plan).unwrap();
        for (a, b) in cloud.points.iter().zip(&out.cloud.points) {
            assert_eq!(*b, a + Vec3::new(0.0, 0.0, 1.0));
        }
        assert!(out.provenance.iter().all(|p| *p == Provenance::Track(4)));
    }

    #[test]
    fn partition_oracle_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = random_cloud(&mut rng, 1000);
        let obj: Vec<usize> = (200..300).collect();
        let ts = random_transform(&mut rng);
        let td = random_transform(&mut rng);
        let plan = FrameSynthesisPlan {
            source_cloud: &cloud,
            object_memberships: BTreeMap::from([(0, obj.clone())]),
            t_static: ts,
            t_dynamic: BTreeMap::from([(0, td)]),
        };
        let out = synthesize_frame(&plan).unwrap();
        let stat: Vec<usize> = (0..1000).filter(|i| !(200..300).contains(i)).collect();
        let moved_static = transform_points(&cloud.select(&stat), &ts);
        let moved_obj = transform_points(&cloud.select(&obj), &td);
        for (k, &i) in stat.iter().enumerate() {
            assert_eq!(out.cloud.points[i], moved_static.points[k]);
        }
        for (k, &i) in obj.iter().enumerate() {
            assert_eq!(out.cloud.points[i], moved_obj.points[k]);
        }
        assert_eq!(out.cloud.intensity, cloud.intensity);
        // Rigidity inside the object partition.
        for a in obj.iter().step_by(7) {
            for b in obj.iter().step_by(11) {
                let d0 = (cloud.points[*a] - cloud.points[*b]).norm();
                let d1 = (out.cloud.points[*a] - out.cloud.points[*b]).norm();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_plans_rejected() {
        let cloud = PointCloud::new(vec![Vec3::zeros(); 10]);
        let base = |m: BTreeMap<u64, Vec<usize>>, t: BTreeMap<u64, RigidTransform>| FrameSynthesisPlan {
            source_cloud: &cloud,
            object_memberships: m,
            t_static: RigidTransform::identity(),
            t_dynamic: t,
        };
        let id = RigidTransform::identity();
        let overlap = base(BTreeMap::from([(0, vec![1, 2]), (1, vec![2, 3])]), BTreeMap::from([(0, id), (1, id)]));
        assert!(matches!(synthesize_frame(&overlap), Err(Error::InvalidPlan(_))));
        let range = base(BTreeMap::from([(0, vec![10])]), BTreeMap::from([(0, id)]));
        assert!(matches!(synthesize_frame(&range), Err(Error::InvalidPlan(_))));
        let missing = base(BTreeMap::from([(0, vec![1])]), BTreeMap::new());
        assert!(matches!(synthesize_frame(&missing), Err(Error::InvalidPlan(_))));
    }

    #[test]
    fn fov_cases() {
        let huge = CameraModel::new(1.0, 1.0, 1e6, 1e6, 2_000_000, 2_000_000).unwrap();
        let pts = vec![Vec3::new(0.0, 0.0, 5.0), Vec3::new(30.0, -20.0, 1.0), Vec3::new(0.0, 0.0, -1.0)];
        let cloud = PointCloud::new(pts);
        let out = restrict_to_camera_fov(&cloud, &RigidTransform::identity(), &huge);
        assert_eq!(out.len(), 2);

        let cam = CameraModel::new(400.0, 400.0, 320.0, 240.0, 640, 480).unwrap();
        let behind = PointCloud::new(vec![Vec3::new(0.0, 0.0, -5.0)]);
        assert!(restrict_to_camera_fov(&behind, &RigidTransform::identity(), &cam).is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = random_cloud(&mut rng, 400);
        let t = random_transform(&mut rng);
        let got = restrict_to_camera_fov(&cloud, &t, &cam);
        let oracle = cloud.filter(|_, p| project(&t.apply(p), &cam).is_some_and(|px| cam.contains(&px)));
        assert_eq!(got, oracle);
    }
}
