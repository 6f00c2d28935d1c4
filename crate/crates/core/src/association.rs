//! Binding 2D tracks to LIDAR points: MSAC ground fit, frustum selection,
//! Euclidean clustering and cluster election.

use std::collections::{HashMap, VecDeque};

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, CameraModel, Mat3, PointCloud, RigidTransform, Vec3};
use crate::tracking2d::BBox;

/// `{p : normal·p + offset = 0}` with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    pub fn from_points(a: &Vec3, b: &Vec3, c: &Vec3) -> Option<Plane> {
        let n = (b - a).cross(&(c - a));
        let scale = (b - a).norm() * (c - a).norm();
        let len = n.norm();
        if !(len > 1e-9 * scale.max(1e-300)) {
            return None;
        }
        let normal = n / len;
        Some(Plane {
            normal,
            offset: -normal.dot(a),
        })
    }

    #[inline]
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }

    /// Flips the plane so its normal has a non-negative component along `up`.
    pub fn oriented(self, up: &Vec3) -> Plane {
        if self.normal.dot(up) < 0.0 {
            Plane {
                normal: -self.normal,
                offset: -self.offset,
            }
        } else {
            self
        }
    }
}

/// Total-least-squares plane through `points`.
pub fn fit_plane_least_squares(points: impl Iterator<Item = Vec3> + Clone) -> Option<Plane> {
    let n = points.clone().count();
    if n < 3 {
        return None;
    }
    let centroid: Vec3 = points.clone().sum::<Vec3>() / n as f64;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (k, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let normal = eig.eigenvectors.column(k).into_owned().normalize();
    if !normal.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(Plane {
        normal,
        offset: -normal.dot(&centroid),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsacParams {
    pub threshold: f64,
    pub iters: usize,
}

impl Default for MsacParams {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            iters: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroundFit {
    pub plane: Plane,
    pub inliers: Vec<usize>,
    /// MSAC cost of the refined plane.
    pub cost: f64,
}

const SCORE_BLOCK: usize = 4096;

/// Most points used to score one plane hypothesis.
const SCORE_POINTS: usize = 16384;

/// Truncated-quadratic cost `Σ min(d², thr²)`. Blocks are summed in a fixed
/// order. Sequential scoring stops once the running total exceeds `bound`;
/// such hypotheses are never the best, so the result does not depend on it.
pub fn msac_cost(points: &[Vec3], plane: &Plane, threshold: f64, bound: f64) -> f64 {
    let t2 = threshold * threshold;
    let block = |r: std::ops::Range<usize>| {
        points[r]
            .iter()
            .map(|p| {
                let d = plane.signed_distance(p);
                (d * d).min(t2)
            })
            .sum::<f64>()
    };
    if crate::par::is_parallel() && points.len() > 4 * SCORE_BLOCK {
        return crate::par::sum_blocks(points.len(), SCORE_BLOCK, block);
    }
    let mut acc = 0.0;
    let mut start = 0;
    while start < points.len() {
        let end = (start + SCORE_BLOCK).min(points.len());
        acc += block(start..end);
        if acc > bound {
            return f64::INFINITY;
        }
        start = end;
    }
    acc
}

/// MSAC plane fit with least-squares refinement over the winning inliers.
/// The normal is oriented toward +z (sensor up).
pub fn fit_ground_msac(cloud: &PointCloud, params: &MsacParams, seed: u64) -> Result<GroundFit> {
    let pts = &cloud.points;
    if pts.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "plane fit needs at least 3 points, got {}",
            pts.len()
        )));
    }
    if !(params.threshold > 0.0) {
        return Err(Error::InvalidArgument("msac threshold must be positive".into()));
    }
    // Hypotheses are scored on an evenly strided subset of large sweeps; the
    // winner is refined and reported on every point.
    let stride = pts.len().div_ceil(SCORE_POINTS).max(1);
    let scored: Vec<Vec3> = pts.iter().step_by(stride).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Plane, f64)> = None;
    for _ in 0..params.iters {
        let i = rng.random_range(0..pts.len());
        let j = rng.random_range(0..pts.len());
        let k = rng.random_range(0..pts.len());
        if i == j || j == k || i == k {
            continue;
        }
        let Some(plane) = Plane::from_points(&pts[i], &pts[j], &pts[k]) else {
            continue;
        };
        let bound = best.map_or(f64::INFINITY, |b| b.1);
        let cost = msac_cost(&scored, &plane, params.threshold, bound);
        if cost < bound {
            best = Some((plane, cost));
        }
    }
    let (hyp, _) = best.ok_or(Error::NoPlane(params.iters))?;
    let hyp_inliers = inliers_of(pts, &hyp, params.threshold);
    let refined = fit_plane_least_squares(hyp_inliers.iter().map(|&i| pts[i])).unwrap_or(hyp);
    let plane = refined.oriented(&Vec3::z());
    let inliers = inliers_of(pts, &plane, params.threshold);
    let cost = msac_cost(pts, &plane, params.threshold, f64::INFINITY);
    Ok(GroundFit {
        plane,
        inliers,
        cost,
    })
}

fn inliers_of(pts: &[Vec3], plane: &Plane, threshold: f64) -> Vec<usize> {
    crate::par::flat_map_chunks(pts, 8192, |start, chunk| {
        chunk
            .iter()
            .enumerate()
            .filter(|(_, p)| plane.signed_distance(p).abs() <= threshold)
            .map(|(k, _)| start + k)
            .collect()
    })
}

/// Indices of points whose projection lands strictly inside `bbox` with
/// positive camera depth.
pub fn frustum_select(cloud: &PointCloud, bbox: &BBox, t_lidar_to_cam: &RigidTransform, cam: &CameraModel) -> Vec<usize> {
    crate::par::flat_map_chunks(&cloud.points, 8192, |start, chunk| {
        chunk
            .iter()
            .enumerate()
            .filter_map(|(k, p)| {
                let px = project(&t_lidar_to_cam.apply(p), cam)?;
                bbox.contains_strict(px.u, px.v).then_some(start + k)
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Sorted, unique, nonempty.
    pub indices: Vec<usize>,
    pub centroid: Vec3,
}

impl Cluster {
    pub fn from_indices(cloud: &PointCloud, mut indices: Vec<usize>) -> Cluster {
        indices.sort_unstable();
        indices.dedup();
        let centroid = indices.iter().map(|&i| cloud.points[i]).sum::<Vec3>() / indices.len().max(1) as f64;
        Cluster { indices, centroid }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterParams {
    pub tolerance: f64,
    pub min_size: usize,
    pub election: ElectionPolicy,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            tolerance: 0.7,
            min_size: 5,
            election: ElectionPolicy::Largest,
        }
    }
}

/// Connected components of the `tolerance`-radius neighborhood graph over
/// `indices`, using a hash grid with cell edge `tolerance`.
pub fn euclidean_cluster(cloud: &PointCloud, indices: &[usize], tolerance: f64, min_size: usize) -> Result<Vec<Cluster>> {
    if !(tolerance > 0.0) || !tolerance.is_finite() {
        return Err(Error::InvalidArgument(format!("cluster tolerance must be positive, got {tolerance}")));
    }
    let mut sel: Vec<usize> = indices.to_vec();
    sel.sort_unstable();
    sel.dedup();
    let cell_of = |p: &Vec3| {
        (
            (p.x / tolerance).floor() as i64,
            (p.y / tolerance).floor() as i64,
            (p.z / tolerance).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::with_capacity(sel.len());
    for (slot, &i) in sel.iter().enumerate() {
        grid.entry(cell_of(&cloud.points[i])).or_default().push(slot);
    }
    let tol2 = tolerance * tolerance;
    let mut visited = vec![false; sel.len()];
    let mut clusters = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..sel.len() {
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        queue.push_back(seed);
        let mut members = Vec::new();
        while let Some(s) = queue.pop_front() {
            members.push(sel[s]);
            let p = cloud.points[sel[s]];
            let (cx, cy, cz) = cell_of(&p);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                            continue;
                        };
                        for &o in bucket {
                            if !visited[o] && (cloud.points[sel[o]] - p).norm_squared() <= tol2 {
                                visited[o] = true;
                                queue.push_back(o);
                            }
                        }
                    }
                }
            }
        }
        if members.len() >= min_size.max(1) {
            clusters.push(Cluster::from_indices(cloud, members));
        }
    }
    clusters.sort_by(|a, b| b.len().cmp(&a.len()).then(a.indices[0].cmp(&b.indices[0])));
    Ok(clusters)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ElectionPolicy {
    /// Most points; nearer centroid breaks ties.
    Largest,
    /// Nearest centroid; more points breaks ties.
    Nearest,
}

pub fn elect_object_cluster(clusters: &[Cluster], policy: ElectionPolicy) -> Option<&Cluster> {
    let dist = |c: &Cluster| c.centroid.norm();
    clusters.iter().reduce(|best, c| {
        let better = match policy {
            ElectionPolicy::Largest => c.len() > best.len() || (c.len() == best.len() && dist(c) < dist(best)),
            ElectionPolicy::Nearest => dist(c) < dist(best) || (dist(c) == dist(best) && c.len() > best.len()),
        };
        if better {
            c
        } else {
            best
        }
    })
}

#[derive(Debug, Clone, Copy)]
pub struct AssociationParams {
    pub ground_threshold: f64,
    pub cluster: ClusterParams,
}

/// Frustum selection, ground removal, clustering and election for one box.
pub fn object_points_for_track(
    cloud: &PointCloud,
    bbox: &BBox,
    ground: &Plane,
    t_lidar_to_cam: &RigidTransform,
    cam: &CameraModel,
    params: &AssociationParams,
) -> Result<Vec<usize>> {
    let frustum: Vec<usize> = frustum_select(cloud, bbox, t_lidar_to_cam, cam)
        .into_iter()
        .filter(|&i| ground.signed_distance(&cloud.points[i]).abs() > params.ground_threshold)
        .collect();
    let clusters = euclidean_cluster(cloud, &frustum, params.cluster.tolerance, params.cluster.min_size)?;
    Ok(elect_object_cluster(&clusters, params.cluster.election)
        .map(|c| c.indices.clone())
        .unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pixel;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn grid_plane(n_side: usize, z: f64) -> Vec<Vec3> {
        let mut v = Vec::new();
        for i in 0..n_side {
            for j in 0..n_side {
                v.push(Vec3::new(i as f64 * 0.5 - 2.0, j as f64 * 0.5 - 2.0, z));
            }
        }
        v
    }

    #[test]
    fn plane_with_outliers() {
        let mut pts = grid_plane(10, 0.0);
        let mut r = rng(3);
        for _ in 0..10 {
            pts.push(Vec3::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), 5.0));
        }
        let cloud = PointCloud::new(pts);
        let fit = fit_ground_msac(&cloud, &MsacParams::default(), 1).unwrap();
        assert!((fit.plane.normal - Vec3::z()).norm() < 1e-9);
        assert!(fit.plane.offset.abs() < 1e-9);
        assert_eq!(fit.inliers, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn coplanar_cloud_has_zero_cost() {
        let tilt = RigidTransform::from_axis_angle(Vec3::new(1.0, 0.3, 0.0), 0.2, Vec3::new(0.0, 0.0, -1.7));
        let cloud = PointCloud::new(grid_plane(8, 0.0).iter().map(|p| tilt.apply(p)).collect());
        let fit = fit_ground_msac(&cloud, &MsacParams::default(), 9).unwrap();
        assert_eq!(fit.inliers.len(), 64);
        assert!(fit.cost < 1e-20);
        assert!(fit.plane.normal.z > 0.0);
    }

    #[test]
    fn parallel_planes_match_exhaustive_search() {
        let mut r = rng(11);
        let mut pts = Vec::new();
        for _ in 0..24 {
            pts.push(Vec3::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), 0.0));
        }
        for _ in 0..6 {
            pts.push(Vec3::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), 1.5));
        }
        let cloud = PointCloud::new(pts.clone());
        let thr = 0.2;
        // Exhaustive minimal-sample oracle.
        let mut best = (f64::INFINITY, None);
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                for k in j + 1..pts.len() {
                    if let Some(pl) = Plane::from_points(&pts[i], &pts[j], &pts[k]) {
                        let c: f64 = pts.iter().map(|p| pl.signed_distance(p).powi(2).min(thr * thr)).sum();
                        if c < best.0 {
                            best = (c, Some(pl));
                        }
                    }
                }
            }
        }
        let oracle = best.1.unwrap().oriented(&Vec3::z());
        let oracle_inliers: Vec<usize> = (0..pts.len()).filter(|&i| oracle.signed_distance(&pts[i]).abs() <= thr).collect();
        let fit = fit_ground_msac(&cloud, &MsacParams { threshold: thr, iters: 200 }, 5).unwrap();
        assert_eq!(fit.inliers, oracle_inliers);
        assert_eq!(fit.inliers, (0..24).collect::<Vec<_>>());
    }

    #[test]
    fn msac_needs_three_points() {
        let c = PointCloud::new(vec![Vec3::zeros(), Vec3::x()]);
        assert!(fit_ground_msac(&c, &MsacParams::default(), 0).is_err());
    }

    #[test]
    fn collinear_cloud_has_no_plane() {
        let c = PointCloud::new((0..20).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect());
        assert!(matches!(fit_ground_msac(&c, &MsacParams::default(), 0), Err(Error::NoPlane(_))));
    }

    #[test]
    fn noiseless_plane_recovery() {
        let mut r = rng(21);
        let n = Vec3::new(0.05, -0.03, 1.0).normalize();
        let offset = 1.73;
        let basis_u = n.cross(&Vec3::x()).normalize();
        let basis_v = n.cross(&basis_u);
        let pts: Vec<Vec3> = (0..500)
            .map(|_| basis_u * r.random_range(-20.0..20.0) + basis_v * r.random_range(-20.0..20.0) - n * offset)
            .collect();
        let fit = fit_ground_msac(&PointCloud::new(pts), &MsacParams::default(), 3).unwrap();
        assert!(fit.plane.normal.angle(&n).to_degrees() < 0.5);
        assert!((fit.plane.offset - offset).abs() < 1e-3);
    }

    fn camera() -> CameraModel {
        CameraModel::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn frustum_whole_image_and_empty_box() {
        let cam = camera();
        let pts = vec![
            Vec3::new(0.0, 0.0, 5.0),
            Vec3::new(1.0, -1.0, 8.0),
            Vec3::new(0.0, 0.0, -3.0),
            Vec3::new(100.0, 0.0, 1.0),
        ];
        let cloud = PointCloud::new(pts);
        let all = frustum_select(&cloud, &BBox::new(0.0, 0.0, 640.0, 480.0), &RigidTransform::identity(), &cam);
        assert_eq!(all, vec![0, 1]);
        let tiny = frustum_select(&cloud, &BBox::new(10.0, 10.0, 10.5, 10.5), &RigidTransform::identity(), &cam);
        assert!(tiny.is_empty());
    }

    #[test]
    fn frustum_box_object_matches_projection_loop() {
        let cam = camera();
        let mut r = rng(4);
        let mut pts = Vec::new();
        // Box surface samples around (1, 0, 10).
        for _ in 0..200 {
            pts.push(Vec3::new(1.0 + r.random_range(-1.0..1.0), r.random_range(-0.5..0.5), 10.0 + r.random_range(-1.5..1.5)));
        }
        let n_box = pts.len();
        for _ in 0..200 {
            pts.push(Vec3::new(r.random_range(-20.0..-5.0), r.random_range(-3.0..3.0), r.random_range(5.0..30.0)));
        }
        let cloud = PointCloud::new(pts);
        let pixels: Vec<Pixel> = cloud.points[..n_box].iter().map(|p| project(p, &cam).unwrap()).collect();
        let pad = 1e-6;
        let bbox = BBox::new(
            pixels.iter().map(|p| p.u).fold(f64::INFINITY, f64::min) - pad,
            pixels.iter().map(|p| p.v).fold(f64::INFINITY, f64::min) - pad,
            pixels.iter().map(|p| p.u).fold(f64::NEG_INFINITY, f64::max) + pad,
            pixels.iter().map(|p| p.v).fold(f64::NEG_INFINITY, f64::max) + pad,
        );
        let got = frustum_select(&cloud, &bbox, &RigidTransform::identity(), &cam);
        let oracle: Vec<usize> = (0..cloud.len())
            .filter(|&i| project(&cloud.points[i], &cam).is_some_and(|p| bbox.contains_strict(p.u, p.v)))
            .collect();
        assert_eq!(got, oracle);
        assert_eq!(got, (0..n_box).collect::<Vec<_>>());
    }

    fn blob(r: &mut ChaCha8Rng, center: Vec3, n: usize, radius: f64) -> Vec<Vec3> {
        (0..n)
            .map(|_| center + Vec3::new(r.random_range(-radius..radius), r.random_range(-radius..radius), r.random_range(-radius..radius)))
            .collect()
    }

    #[test]
    fn two_blobs() {
        let mut r = rng(8);
        let mut pts = blob(&mut r, Vec3::zeros(), 50, 0.5);
        pts.extend(blob(&mut r, Vec3::new(10.0, 0.0, 0.0), 50, 0.5));
        let cloud = PointCloud::new(pts);
        let idx: Vec<usize> = (0..100).collect();
        let cl = euclidean_cluster(&cloud, &idx, 0.5, 1).unwrap();
        assert_eq!(cl.len(), 2);
        assert_eq!(cl[0].indices, (0..50).collect::<Vec<_>>());
        assert_eq!(cl[1].indices, (50..100).collect::<Vec<_>>());
    }

    #[test]
    fn singleton_and_chain() {
        let one = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0)]);
        let cl = euclidean_cluster(&one, &[0], 0.5, 1).unwrap();
        assert_eq!(cl.len(), 1);
        assert_eq!(cl[0].centroid, Vec3::new(1.0, 2.0, 3.0));

        let chain = PointCloud::new((0..20).map(|i| Vec3::new(0.4 * i as f64, 0.0, 0.0)).collect());
        let idx: Vec<usize> = (0..20).collect();
        assert_eq!(euclidean_cluster(&chain, &idx, 0.5, 2).unwrap().len(), 1);
        assert!(euclidean_cluster(&chain, &idx, 0.3, 2).unwrap().is_empty());
        assert!(euclidean_cluster(&chain, &idx, 0.0, 2).is_err());
    }

    #[test]
    fn election_rules() {
        let c = |n: usize, depth: f64| Cluster {
            indices: (0..n).collect(),
            centroid: Vec3::new(depth, 0.0, 0.0),
        };
        assert!(elect_object_cluster(&[], ElectionPolicy::Largest).is_none());
        let single = [c(10, 5.0)];
        assert_eq!(elect_object_cluster(&single, ElectionPolicy::Largest), Some(&single[0]));
        let sizes = [c(120, 20.0), c(40, 5.0)];
        assert_eq!(elect_object_cluster(&sizes, ElectionPolicy::Largest).unwrap().len(), 120);
        let tie = [c(50, 15.0), c(50, 8.0)];
        assert_eq!(elect_object_cluster(&tie, ElectionPolicy::Largest).unwrap().centroid.x, 8.0);
        assert_eq!(elect_object_cluster(&sizes, ElectionPolicy::Nearest).unwrap().len(), 40);
    }

    /// Ground grid in LIDAR coordinates (x forward, z up) plus a car blob.
    fn scene(r: &mut ChaCha8Rng) -> (PointCloud, std::ops::Range<usize>, std::ops::Range<usize>) {
        let mut pts = Vec::new();
        for i in 0..120 {
            for j in 0..60 {
                pts.push(Vec3::new(3.0 + i as f64 * 0.25, -7.5 + j as f64 * 0.25, -1.7 + r.random_range(-0.03..0.03)));
            }
        }
        let car = pts.len()..pts.len() + 300;
        for _ in 0..300 {
            pts.push(Vec3::new(15.0 + r.random_range(-2.0..2.0), 2.0 + r.random_range(-0.9..0.9), -1.2 + r.random_range(0.0..1.2)));
        }
        let far = pts.len()..pts.len() + 120;
        for _ in 0..120 {
            pts.push(Vec3::new(25.0 + r.random_range(-1.5..1.5), 2.7 + r.random_range(-0.8..0.8), -1.2 + r.random_range(0.0..1.0)));
        }
        (PointCloud::new(pts), car, far)
    }

    fn lidar_to_cam() -> RigidTransform {
        // Camera: x right, y down, z forward.
        let r = Mat3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        RigidTransform::new(r, Vec3::zeros())
    }

    fn bbox_of(cloud: &PointCloud, idx: std::ops::Range<usize>, t: &RigidTransform, cam: &CameraModel) -> BBox {
        let px: Vec<Pixel> = idx.map(|i| project(&t.apply(&cloud.points[i]), cam).unwrap()).collect();
        BBox::new(
            px.iter().map(|p| p.u).fold(f64::INFINITY, f64::min) - 0.5,
            px.iter().map(|p| p.v).fold(f64::INFINITY, f64::min) - 0.5,
            px.iter().map(|p| p.u).fold(f64::NEG_INFINITY, f64::max) + 0.5,
            px.iter().map(|p| p.v).fold(f64::NEG_INFINITY, f64::max) + 0.5,
        )
    }

    #[test]
    fn car_above_ground_and_occlusion() {
        let mut r = rng(31);
        let (cloud, car, far) = scene(&mut r);
        let cam = camera();
        let t = lidar_to_cam();
        let ground = fit_ground_msac(&cloud, &MsacParams::default(), 2).unwrap();
        let params = AssociationParams {
            ground_threshold: 0.2,
            cluster: ClusterParams::default(),
        };
        let bbox = bbox_of(&cloud, car.clone(), &t, &cam);
        let got = object_points_for_track(&cloud, &bbox, &ground.plane, &t, &cam, &params).unwrap();
        let mut expect: Vec<usize> = car.clone().filter(|&i| ground.plane.signed_distance(&cloud.points[i]).abs() > 0.2).collect();
        expect.sort();
        assert_eq!(got, expect);

        // The partially hidden far vehicle falls inside the near one's box;
        // only the larger, nearer cluster is returned.
        let far_box = bbox_of(&cloud, far.clone(), &t, &cam);
        let union = BBox::new(
            bbox.x_min.min(far_box.x_min),
            bbox.y_min.min(far_box.y_min),
            bbox.x_max.max(far_box.x_max),
            bbox.y_max.max(far_box.y_max),
        );
        let got = object_points_for_track(&cloud, &union, &ground.plane, &t, &cam, &params).unwrap();
        assert_eq!(got, expect);

        // Pure ground frustum.
        let road = BBox::new(300.0, 400.0, 340.0, 470.0);
        assert!(object_points_for_track(&cloud, &road, &ground.plane, &t, &cam, &params).unwrap().is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn union_find_partition(pts: &[Vec3], tol: f64) -> Vec<Vec<usize>> {
            let n = pts.len();
            let mut parent: Vec<usize> = (0..n).collect();
            fn find(p: &mut Vec<usize>, x: usize) -> usize {
                if p[x] != x {
                    let r = find(p, p[x]);
                    p[x] = r;
                }
                p[x]
            }
            for i in 0..n {
                for j in i + 1..n {
                    if (pts[i] - pts[j]).norm() <= tol {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                        parent[a] = b;
                    }
                }
            }
            let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
            for i in 0..n {
                let r = find(&mut parent, i);
                groups.entry(r).or_default().push(i);
            }
            let mut v: Vec<Vec<usize>> = groups.into_values().collect();
            v.sort();
            v
        }

        proptest! {
            #[test]
            fn clustering_matches_union_find(pts in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 1..=12), tol in 0.2f64..1.5) {
                let pts: Vec<Vec3> = pts.into_iter().map(Vec3::from).collect();
                let cloud = PointCloud::new(pts.clone());
                let idx: Vec<usize> = (0..pts.len()).collect();
                let mut got: Vec<Vec<usize>> = euclidean_cluster(&cloud, &idx, tol, 1).unwrap().into_iter().map(|c| c.indices).collect();
                got.sort();
                prop_assert_eq!(got, union_find_partition(&pts, tol));
            }

            #[test]
            fn clustering_invariant_to_order(pts in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..80), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                let cloud = PointCloud::new(pts.into_iter().map(Vec3::from).collect());
                let idx: Vec<usize> = (0..cloud.len()).collect();
                let mut shuffled = idx.clone();
                shuffled.shuffle(&mut rng(seed));
                let a = euclidean_cluster(&cloud, &idx, 0.8, 2).unwrap();
                let b = euclidean_cluster(&cloud, &shuffled, 0.8, 2).unwrap();
                prop_assert_eq!(&a, &b);
                let mut seen = std::collections::HashSet::new();
                for c in &a {
                    for &i in &c.indices {
                        prop_assert!(seen.insert(i));
                    }
                }
            }

            #[test]
            fn frustum_monotone_in_box(pts in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 0..150),
                                       x0 in 0.0f64..600.0, y0 in 0.0f64..440.0, w in 1.0f64..300.0, h in 1.0f64..300.0) {
                let cam = camera();
                let cloud = PointCloud::new(pts.into_iter().map(Vec3::from).collect());
                let whole = frustum_select(&cloud, &BBox::new(-1.0, -1.0, 641.0, 481.0), &RigidTransform::identity(), &cam);
                let sub_box = BBox::new(x0, y0, (x0 + w).min(640.0), (y0 + h).min(480.0));
                let sub = frustum_select(&cloud, &sub_box, &RigidTransform::identity(), &cam);
                prop_assert!(sub.iter().all(|i| whole.contains(i)));
            }
        }
    }
}
