//! Per-object virtual camera pose from 3D–2D correspondences (DLT PnP inside
//! MLESAC) and the derived object, static and dynamic transforms.

use nalgebra::{DMatrix, Matrix3x4, Matrix6, Rotation3, Vector4, Vector6};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose, invert, nearest_rotation, CameraModel, Pixel, RigidTransform, Vec3};

/// Minimal sample size of the linear solver.
pub const MIN_CORRESPONDENCES: usize = 6;

/// Design matrices with a larger condition number are rank deficient.
const MAX_CONDITION: f64 = 1e12;

const GN_MAX_ITERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub world: Vec3,
    pub pixel: Pixel,
}

impl Correspondence {
    pub fn new(world: Vec3, pixel: Pixel) -> Self {
        Self { world, pixel }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub transform: RigidTransform,
    pub inlier_indices: Vec<usize>,
    pub mean_reprojection_error: f64,
}

/// Pixel distance between the observed and reprojected point; infinite
/// behind the camera.
#[inline]
pub fn reprojection_error(t: &RigidTransform, c: &Correspondence, cam: &CameraModel) -> f64 {
    match crate::geometry::project(&t.apply(&c.world), cam) {
        Some(px) => px.dist(&c.pixel),
        None => f64::INFINITY,
    }
}

/// Linear PnP followed by Gauss-Newton on the reprojection error.
pub fn pnp_dlt(corrs: &[Correspondence], cam: &CameraModel) -> Result<RigidTransform> {
    let init = dlt_linear(corrs, cam)?;
    Ok(refine_gauss_newton(init, corrs, cam, GN_MAX_ITERS))
}

/// Solves for `[R|t]` minimizing the algebraic error in normalized image
/// coordinates, then projects onto SO(3).
pub fn dlt_linear(corrs: &[Correspondence], cam: &CameraModel) -> Result<RigidTransform> {
    let n = corrs.len();
    if n < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientCorrespondences {
            needed: MIN_CORRESPONDENCES,
            got: n,
        });
    }
    // Condition the 3D points: zero mean, mean distance √3.
    let centroid: Vec3 = corrs.iter().map(|c| c.world).sum::<Vec3>() / n as f64;
    let spread = corrs.iter().map(|c| (c.world - centroid).norm()).sum::<f64>() / n as f64;
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::Degenerate("all 3D points coincide".into()));
    }
    let s = 3f64.sqrt() / spread;

    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (k, c) in corrs.iter().enumerate() {
        let (x, y) = cam.normalize(&c.pixel);
        let p = (c.world - centroid) * s;
        let h = [p.x, p.y, p.z, 1.0];
        for j in 0..4 {
            a[(2 * k, j)] = -h[j];
            a[(2 * k, 8 + j)] = x * h[j];
            a[(2 * k + 1, 4 + j)] = -h[j];
            a[(2 * k + 1, 8 + j)] = y * h[j];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.as_ref().ok_or_else(|| Error::Degenerate("svd failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    if order.len() < 12 {
        return Err(Error::Degenerate("design matrix has fewer than 12 rows".into()));
    }
    let s_max = svd.singular_values[order[0]];
    let s_second_min = svd.singular_values[order[10]];
    if !(s_second_min > 0.0) || s_max / s_second_min > MAX_CONDITION {
        return Err(Error::Degenerate(format!(
            "design matrix condition number {:.3e} exceeds {MAX_CONDITION:.0e}",
            s_max / s_second_min
        )));
    }
    let v = vt.row(order[11]);
    let mut pn = Matrix3x4::<f64>::zeros();
    for r in 0..3 {
        for cidx in 0..4 {
            pn[(r, cidx)] = v[4 * r + cidx];
        }
    }
    // Points must land in front of the camera.
    let depth_sum: f64 = corrs
        .iter()
        .map(|c| {
            let p = (c.world - centroid) * s;
            pn.row(2).dot(&Vector4::new(p.x, p.y, p.z, 1.0).transpose())
        })
        .sum();
    if depth_sum < 0.0 {
        pn = -pn;
    }
    // Undo the conditioning: P = Pn · [sI, −s·c; 0, 1].
    let m = pn.fixed_view::<3, 3>(0, 0) * s;
    let p4 = pn.column(3) - m * centroid;
    let sv = m.svd(false, false).singular_values;
    let scale = sv.iter().sum::<f64>() / 3.0;
    if !(scale > 0.0) {
        return Err(Error::Degenerate("vanishing rotation block".into()));
    }
    let rotation = nearest_rotation(&m);
    Ok(RigidTransform::new(rotation, p4 / scale))
}

/// Levenberg-damped Gauss-Newton on pixel reprojection error with a left
/// SE(3) perturbation.
pub fn refine_gauss_newton(init: RigidTransform, corrs: &[Correspondence], cam: &CameraModel, max_iters: usize) -> RigidTransform {
    let (fx, fy, skew) = (cam.fx(), cam.fy(), cam.skew());
    let cost_of = |t: &RigidTransform| -> f64 {
        corrs
            .iter()
            .map(|c| {
                let e = reprojection_error(t, c, cam);
                if e.is_finite() {
                    e * e
                } else {
                    1e12
                }
            })
            .sum()
    };
    let mut pose = init;
    let mut cost = cost_of(&pose);
    let mut lambda = 1e-6;
    for _ in 0..max_iters {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for c in corrs {
            let xc = pose.apply(&c.world);
            if xc.z <= 1e-9 {
                continue;
            }
            let iz = 1.0 / xc.z;
            let u = fx * xc.x * iz + skew * xc.y * iz + cam.cx();
            let v = fy * xc.y * iz + cam.cy();
            let r = [u - c.pixel.u, v - c.pixel.v];
            // d(u,v)/d(Xc)
            let jp = [
                [fx * iz, skew * iz, -(fx * xc.x + skew * xc.y) * iz * iz],
                [0.0, fy * iz, -fy * xc.y * iz * iz],
            ];
            // d(Xc)/d(ω, v) = [−[Xc]×, I]
            let skew_x = [[0.0, xc.z, -xc.y], [-xc.z, 0.0, xc.x], [xc.y, -xc.x, 0.0]];
            for row in 0..2 {
                let mut j = Vector6::<f64>::zeros();
                for k in 0..3 {
                    j[k] = (0..3).map(|m| jp[row][m] * skew_x[m][k]).sum();
                    j[3 + k] = jp[row][k];
                }
                h += j * j.transpose();
                g += j * r[row];
            }
        }
        let mut improved = false;
        for _ in 0..6 {
            let mut hd = h;
            for d in 0..6 {
                hd[(d, d)] += lambda * h[(d, d)].max(1e-12);
            }
            let Some(chol) = hd.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = chol.solve(&(-g));
            let w = Vec3::new(delta[0], delta[1], delta[2]);
            let dr = Rotation3::new(w);
            let cand = RigidTransform::new(
                nearest_if_needed(dr.matrix() * pose.rotation),
                dr * pose.translation + Vec3::new(delta[3], delta[4], delta[5]),
            );
            let cand_cost = cost_of(&cand);
            if cand_cost <= cost {
                let converged = delta.norm() < 1e-12 || (cost - cand_cost) <= 1e-15 * cost.max(1e-300);
                pose = cand;
                cost = cand_cost;
                lambda = (lambda * 0.1).max(1e-12);
                improved = !converged;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    pose
}

fn nearest_if_needed(r: crate::geometry::Mat3) -> crate::geometry::Mat3 {
    if crate::geometry::orthonormality_drift(&r) > 1e-12 {
        nearest_rotation(&r)
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlesacParams {
    /// Inlier noise standard deviation, pixels.
    pub sigma: f64,
    pub iters: usize,
    /// EM steps for the inlier mixing coefficient.
    pub em_steps: usize,
    /// Probability of having drawn one all-inlier sample before stopping.
    pub confidence: f64,
}

impl Default for MlesacParams {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            iters: 500,
            em_steps: 5,
            confidence: 0.999,
        }
    }
}

/// Gauss-Newton steps when fitting a minimal sample from the prior.
const PRIOR_GN_ITERS: usize = 8;

/// Inlier gate as a multiple of sigma.
pub const INLIER_GATE: f64 = 1.96;

/// Negative log-likelihood of reprojection errors under a Gaussian inlier /
/// uniform outlier mixture, with the mixing weight fitted by EM.
/// Returns `(nll, gamma)`.
pub fn mlesac_score(errors: &[f64], sigma: f64, outlier_area: f64, em_steps: usize) -> (f64, f64) {
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let p_out = 1.0 / outlier_area;
    let dens: Vec<f64> = errors
        .iter()
        .map(|e| if e.is_finite() { norm * (-e * e * inv2s2).exp() } else { 0.0 })
        .collect();
    let mut gamma = 0.5;
    for _ in 0..em_steps {
        let mut acc = 0.0;
        for &d in &dens {
            let pi = gamma * d;
            acc += pi / (pi + (1.0 - gamma) * p_out);
        }
        gamma = (acc / dens.len() as f64).clamp(1e-6, 1.0 - 1e-6);
    }
    let nll = -dens.iter().map(|&d| (gamma * d + (1.0 - gamma) * p_out).ln()).sum::<f64>();
    (nll, gamma)
}

/// Seed for an independent per-object stream.
pub fn object_seed(seed: u64, object_id: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(object_id))
}

/// Robust PnP: minimal 6-point DLT hypotheses scored by MLESAC, refined on
/// the consensus set. Stops early once the confidence bound is met.
pub fn mlesac_pnp(corrs: &[Correspondence], cam: &CameraModel, params: &MlesacParams, seed: u64) -> Result<PoseEstimate> {
    mlesac_pnp_with_prior(corrs, cam, params, seed, None)
}

/// [`mlesac_pnp`] with an approximate pose. The prior is scored as a
/// hypothesis of its own, and samples the DLT cannot solve (coplanar
/// points, typically a single visible face) are fitted by Gauss-Newton
/// started from it.
pub fn mlesac_pnp_with_prior(
    corrs: &[Correspondence],
    cam: &CameraModel,
    params: &MlesacParams,
    seed: u64,
    prior: Option<&RigidTransform>,
) -> Result<PoseEstimate> {
    let n = corrs.len();
    if n < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientCorrespondences {
            needed: MIN_CORRESPONDENCES,
            got: n,
        });
    }
    if !(params.sigma > 0.0) {
        return Err(Error::InvalidArgument("mlesac sigma must be positive".into()));
    }
    let gate = INLIER_GATE * params.sigma;
    let area = cam.width as f64 * cam.height as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, RigidTransform)> = None;
    let mut errors = vec![0.0; n];
    let mut sample = Vec::with_capacity(MIN_CORRESPONDENCES);
    let mut needed = params.iters;
    let mut consider = |hyp: RigidTransform, errors: &mut [f64], needed: &mut usize| {
        for (e, c) in errors.iter_mut().zip(corrs) {
            *e = reprojection_error(&hyp, c, cam);
        }
        let (nll, _) = mlesac_score(errors, params.sigma, area, params.em_steps);
        if best.as_ref().is_none_or(|b| nll < b.0) {
            best = Some((nll, hyp));
            let w = errors.iter().filter(|&&e| e <= gate).count() as f64 / n as f64;
            *needed = adaptive_iterations(w, params.confidence);
        }
    };
    if let Some(p) = prior {
        consider(*p, &mut errors, &mut needed);
    }
    let mut it = 0;
    while it < needed.min(params.iters) {
        it += 1;
        sample.clear();
        sample.extend(index::sample(&mut rng, n, MIN_CORRESPONDENCES).iter().map(|i| corrs[i]));
        let hyp = match (pnp_dlt(&sample, cam), prior) {
            (Ok(h), _) => h,
            (Err(_), Some(p)) => refine_gauss_newton(*p, &sample, cam, PRIOR_GN_ITERS),
            (Err(_), None) => continue,
        };
        consider(hyp, &mut errors, &mut needed);
    }
    let (_, hyp) = best.ok_or(Error::NoConsensus {
        inliers: 0,
        needed: MIN_CORRESPONDENCES,
    })?;
    let inliers_of = |t: &RigidTransform| -> Vec<usize> {
        (0..n).filter(|&i| reprojection_error(t, &corrs[i], cam) <= gate).collect()
    };
    let inliers = inliers_of(&hyp);
    if inliers.len() < MIN_CORRESPONDENCES {
        return Err(Error::NoConsensus {
            inliers: inliers.len(),
            needed: MIN_CORRESPONDENCES,
        });
    }
    let subset: Vec<Correspondence> = inliers.iter().map(|&i| corrs[i]).collect();
    let mean_err = |t: &RigidTransform, s: &[Correspondence]| s.iter().map(|c| reprojection_error(t, c, cam)).sum::<f64>() / s.len() as f64;
    // Fresh linear solve on the consensus set vs. the hypothesis polished on it.
    let polished = refine_gauss_newton(hyp, &subset, cam, GN_MAX_ITERS);
    let mut pose = match pnp_dlt(&subset, cam) {
        Ok(t) if mean_err(&t, &subset) < mean_err(&polished, &subset) => t,
        _ => polished,
    };
    let mut final_inliers = inliers_of(&pose);
    if final_inliers.len() >= MIN_CORRESPONDENCES && final_inliers != inliers {
        let subset: Vec<Correspondence> = final_inliers.iter().map(|&i| corrs[i]).collect();
        pose = refine_gauss_newton(pose, &subset, cam, GN_MAX_ITERS);
        final_inliers = inliers_of(&pose);
    }
    if final_inliers.len() < MIN_CORRESPONDENCES {
        return Err(Error::NoConsensus {
            inliers: final_inliers.len(),
            needed: MIN_CORRESPONDENCES,
        });
    }
    let mean_reprojection_error =
        final_inliers.iter().map(|&i| reprojection_error(&pose, &corrs[i], cam)).sum::<f64>() / final_inliers.len() as f64;
    Ok(PoseEstimate {
        transform: pose,
        inlier_indices: final_inliers,
        mean_reprojection_error,
    })
}

/// Samples needed to draw one all-inlier minimal set with `confidence`.
fn adaptive_iterations(inlier_ratio: f64, confidence: f64) -> usize {
    let p_good = inlier_ratio.powi(MIN_CORRESPONDENCES as i32);
    if p_good >= 1.0 - 1e-12 {
        return 1;
    }
    if p_good <= 1e-12 {
        return usize::MAX;
    }
    let k = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    k.ceil().max(1.0) as usize
}

/// Object motion in the anchor LIDAR frame: `T_t⁻¹ ∘ T_{t,i}`.
pub fn object_motion(t_ti: &RigidTransform, t_t: &RigidTransform) -> RigidTransform {
    compose(&invert(t_t), t_ti)
}

/// Anchor-to-current LIDAR transform for static points: `T_{L,C}⁻¹ ∘ T_t`.
pub fn static_transform(t_t: &RigidTransform, t_lc: &RigidTransform) -> RigidTransform {
    compose(&invert(t_lc), t_t)
}

/// Anchor-to-current LIDAR transform for one object: `T_{L,C}⁻¹ ∘ T_{t,i}`.
pub fn dynamic_transform(t_ti: &RigidTransform, t_lc: &RigidTransform) -> RigidTransform {
    compose(&invert(t_lc), t_ti)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionLabel {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionThresholds {
    pub translation: f64,
    pub rotation_deg: f64,
    /// Pixels. An object is static when the ego-motion-only pose reprojects
    /// its inliers at most this much worse, on average, than the fitted pose.
    pub reprojection_px: f64,
}

impl Default for MotionThresholds {
    fn default() -> Self {
        Self {
            translation: 0.05,
            rotation_deg: 0.5,
            reprojection_px: 0.5,
        }
    }
}

pub fn classify_motion(t_mov: &RigidTransform, thr: &MotionThresholds) -> MotionLabel {
    if t_mov.translation.norm() > thr.translation || t_mov.angle().to_degrees() > thr.rotation_deg {
        MotionLabel::Dynamic
    } else {
        MotionLabel::Static
    }
}

/// Image-space static test: does `static_pose` explain the inliers of `est`
/// almost as well as the estimate itself? Small or single-face objects can
/// leave the fitted rotation loose while still pinning the pixels.
pub fn explained_by_static(
    static_pose: &RigidTransform,
    est: &PoseEstimate,
    corrs: &[Correspondence],
    cam: &CameraModel,
    thr: &MotionThresholds,
) -> bool {
    if est.inlier_indices.is_empty() {
        return false;
    }
    let mean = est.inlier_indices.iter().map(|&i| reprojection_error(static_pose, &corrs[i], cam)).sum::<f64>()
        / est.inlier_indices.len() as f64;
    mean <= est.mean_reprojection_error + thr.reprojection_px
}
