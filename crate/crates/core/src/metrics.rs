//! Point-set evaluation: Chamfer distance, auction-approximated Earth
//! Mover's Distance, depth error, evaluation protocols and outlier fences.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::association::Plane;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, PointCloud, RigidTransform, Vec3};
use crate::kdtree::KdTree;

/// Seed used by [`chamfer`] when it has to equalize cloud sizes.
pub const DEFAULT_SEED: u64 = 0x5EED;

/// `k` indices drawn uniformly without replacement from `0..n`, ascending.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Downsamples the denser cloud so both have `min(|a|, |b|)` points.
pub fn equalize<'a>(a: &'a PointCloud, b: &'a PointCloud, seed: u64) -> (std::borrow::Cow<'a, PointCloud>, std::borrow::Cow<'a, PointCloud>) {
    use std::borrow::Cow;
    let n = a.len().min(b.len());
    let shrink = |c: &'a PointCloud, s: u64| {
        if c.len() > n {
            Cow::Owned(c.select(&sample_indices(c.len(), n, s)))
        } else {
            Cow::Borrowed(c)
        }
    };
    (shrink(a, seed), shrink(b, seed.wrapping_add(1)))
}

/// Squared nearest-neighbor distance from every point of `from` to `to`.
pub fn nn_sq_distances(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    let tree = KdTree::build(to);
    crate::par::flat_map_chunks(from, 1024, |_, chunk| {
        chunk.iter().map(|p| tree.nearest(p).map_or(f64::INFINITY, |(_, d)| d)).collect()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChamferTerms {
    /// For each point of `a`, squared distance to its nearest point of `b`.
    pub a_to_b: Vec<f64>,
    pub b_to_a: Vec<f64>,
}

impl ChamferTerms {
    pub fn value(&self) -> f64 {
        mean(&self.a_to_b) + mean(&self.b_to_a)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Chamfer terms on equal-size clouds (no resampling).
pub fn chamfer_terms(a: &PointCloud, b: &PointCloud) -> Result<ChamferTerms> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(ChamferTerms {
        a_to_b: nn_sq_distances(&a.points, &b.points),
        b_to_a: nn_sq_distances(&b.points, &a.points),
    })
}

/// Symmetric mean squared nearest-neighbor distance, in m². The denser
/// cloud is first randomly downsampled to the size of the other.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_seeded(a, b, DEFAULT_SEED)
}

pub fn chamfer_seeded(a: &PointCloud, b: &PointCloud, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let (a, b) = equalize(a, b, seed);
    Ok(chamfer_terms(&a, &b)?.value())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmdResult {
    /// Mean squared distance over matched pairs, in m².
    pub emd: f64,
    /// `assignment[i]` is the point of `b` matched to point `i` of `a`.
    pub assignment: Vec<usize>,
    /// Squared distance of each matched pair, indexed like `a`.
    pub pair_costs: Vec<f64>,
    /// Final auction epsilon; the summed cost is within `N·epsilon` of the
    /// optimal assignment.
    pub epsilon_final: f64,
}

/// EMD via the auction algorithm with ε-scaling.
///
/// `epsilon` scales the final ε relative to `max_cost / (N + 1)`; 1.0 gives
/// the standard bound, smaller values tighten it.
pub fn emd_auction(a: &PointCloud, b: &PointCloud, epsilon: f64) -> Result<f64> {
    Ok(emd_auction_detailed(a, b, epsilon)?.emd)
}

pub fn emd_auction_detailed(a: &PointCloud, b: &PointCloud, epsilon: f64) -> Result<EmdResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if a.len() != b.len() {
        return Err(Error::SizeMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let n = a.len();
    let (pa, pb) = (&a.points, &b.points);
    let cost = |i: usize, j: usize| (pa[i] - pb[j]).norm_squared();
    let max_cost = crate::par::map_range(n, |i| (0..n).map(|j| cost(i, j)).fold(0.0, f64::max))
        .into_iter()
        .fold(0.0, f64::max);
    if max_cost == 0.0 {
        return Ok(EmdResult {
            emd: 0.0,
            assignment: (0..n).collect(),
            pair_costs: vec![0.0; n],
            epsilon_final: 0.0,
        });
    }
    let eps_final = epsilon * max_cost / (n as f64 + 1.0);
    let mut prices = vec![0.0f64; n];
    let mut eps = max_cost / 2.0;
    let assignment = loop {
        let assign = auction_phase(n, &cost, &mut prices, eps);
        if eps <= eps_final {
            break assign;
        }
        eps = (eps / 4.0).max(eps_final);
    };
    let pair_costs: Vec<f64> = assignment.iter().enumerate().map(|(i, &j)| cost(i, j)).collect();
    Ok(EmdResult {
        emd: pair_costs.iter().sum::<f64>() / n as f64,
        assignment,
        pair_costs,
        epsilon_final: eps_final,
    })
}

/// One Jacobi auction run at fixed `eps`. Every unassigned person bids in
/// parallel; each object goes to its highest bidder (lowest index on ties).
fn auction_phase(n: usize, cost: &(impl Fn(usize, usize) -> f64 + Sync), prices: &mut [f64], eps: f64) -> Vec<usize> {
    const NONE: usize = usize::MAX;
    let mut person_obj = vec![NONE; n];
    let mut obj_person = vec![NONE; n];
    let mut unassigned: Vec<usize> = (0..n).collect();
    while !unassigned.is_empty() {
        let p: &[f64] = prices;
        let bids: Vec<(usize, f64)> = crate::par::map(&unassigned, |&i| {
            // Maximize value = −cost − price.
            let (mut best_j, mut best_v, mut second_v) = (0usize, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for j in 0..n {
                let v = -cost(i, j) - p[j];
                if v > best_v {
                    second_v = best_v;
                    best_v = v;
                    best_j = j;
                } else if v > second_v {
                    second_v = v;
                }
            }
            let incr = if second_v.is_finite() { best_v - second_v + eps } else { eps };
            (best_j, p[best_j] + incr)
        });
        // Resolve: highest bid per object.
        let mut winner: Vec<(usize, f64)> = Vec::new();
        let mut slot = std::collections::HashMap::<usize, usize>::new();
        for (k, &(j, price)) in bids.iter().enumerate() {
            let person = unassigned[k];
            match slot.get(&j) {
                Some(&s) if winner[s].1 >= price => {}
                Some(&s) => winner[s] = (person, price),
                None => {
                    slot.insert(j, winner.len());
                    winner.push((person, price));
                }
            }
        }
        let mut next = Vec::new();
        let mut objs: Vec<(&usize, &usize)> = slot.iter().collect();
        objs.sort_unstable();
        for (&j, &s) in objs {
            let (person, price) = winner[s];
            prices[j] = price;
            if obj_person[j] != NONE {
                let prev = obj_person[j];
                person_obj[prev] = NONE;
                next.push(prev);
            }
            obj_person[j] = person;
            person_obj[person] = j;
        }
        for &i in &unassigned {
            if person_obj[i] == NONE {
                next.push(i);
            }
        }
        next.sort_unstable();
        next.dedup();
        unassigned = next;
    }
    person_obj
}

/// `100·|estimated − true| / true`.
pub fn depth_error_percent(estimated: f64, truth: f64) -> Result<f64> {
    if !(truth > 0.0) {
        return Err(Error::InvalidArgument(format!("true depth must be positive, got {truth}")));
    }
    Ok(100.0 * (estimated - truth).abs() / truth)
}

/// Axis-aligned crop; infinite bounds leave that side open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl CropBox {
    /// The vehicle-evaluation crop `[−32,32]×[−8,8]×[−∞,2]` m.
    pub fn vehicle() -> Self {
        Self {
            min: [-32.0, -8.0, f64::NEG_INFINITY],
            max: [32.0, 8.0, 2.0],
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            let (a, b) = (self.min[k], self.max[k]);
            if !(a < b) {
                return Err(Error::InvalidArgument(format!("crop axis {k}: min {a} must be below max {b}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_points: Option<usize>,
    pub remove_ground: bool,
    /// Points within this distance of (or below) the ground plane are ground.
    pub ground_threshold: f64,
    pub seed: u64,
    /// With a camera given: restrict to its field of view before (true) or
    /// after (false) downsampling.
    pub fov_before_downsample: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            crop: None,
            target_points: Some(16384),
            remove_ground: false,
            ground_threshold: 0.2,
            seed: DEFAULT_SEED,
            fov_before_downsample: true,
        }
    }
}

impl EvalProtocol {
    /// Whole-frame protocol: 16384 points. This is the default.
    pub fn full_frame() -> Self {
        Self::default()
    }

    /// Every point, no crop or downsampling. A missing `target_points` in a
    /// config file means 16384, so this is only reachable from code or the
    /// CLI's `--protocol none`.
    pub fn unrestricted() -> Self {
        Self {
            target_points: None,
            ..Default::default()
        }
    }

    /// Vehicle protocol: no ground, cropped, 2048 points.
    pub fn vehicle() -> Self {
        Self {
            crop: Some(CropBox::vehicle()),
            target_points: Some(2048),
            remove_ground: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_points == Some(0) {
            return Err(Error::InvalidArgument("target_points must be positive".into()));
        }
        if let Some(c) = &self.crop {
            c.validate()?;
        }
        Ok(())
    }
}

/// Indices surviving the protocol, in source order: ground removal, crop,
/// then seeded downsampling (with optional FOV restriction before or after).
pub fn protocol_indices(
    cloud: &PointCloud,
    protocol: &EvalProtocol,
    ground: Option<&Plane>,
    fov: Option<(&RigidTransform, &CameraModel)>,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cloud.len())
        .filter(|&i| {
            let p = &cloud.points[i];
            let off_ground = match (protocol.remove_ground, ground) {
                (true, Some(g)) => g.signed_distance(p) > protocol.ground_threshold,
                _ => true,
            };
            off_ground && protocol.crop.is_none_or(|c| c.contains(p))
        })
        .collect();
    let restrict = |idx: Vec<usize>| -> Vec<usize> {
        match fov {
            Some((t, cam)) => idx
                .into_iter()
                .filter(|&i| crate::geometry::project(&t.apply(&cloud.points[i]), cam).is_some_and(|px| cam.contains(&px)))
                .collect(),
            None => idx,
        }
    };
    if protocol.fov_before_downsample {
        idx = restrict(idx);
    }
    if let Some(k) = protocol.target_points {
        if idx.len() > k {
            idx = sample_indices(idx.len(), k, protocol.seed).into_iter().map(|s| idx[s]).collect();
        }
    }
    if !protocol.fov_before_downsample {
        idx = restrict(idx);
    }
    idx
}

pub fn apply_protocol(cloud: &PointCloud, protocol: &EvalProtocol, ground: Option<&Plane>) -> PointCloud {
    cloud.select(&protocol_indices(cloud, protocol, ground, None))
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Flags values above the upper Tukey fence `Q3 + 1.5·IQR`.
pub fn outlier_mask(errors: &[f64]) -> Vec<bool> {
    if errors.is_empty() {
        return Vec::new();
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile(&sorted, 0.25);
    let q3 = quantile(&sorted, 0.75);
    let fence = q3 + 1.5 * (q3 - q1);
    errors.iter().map(|&e| e > fence).collect()
}

fn masked_mean(values: &[f64], mask: &[bool]) -> f64 {
    let (s, n) = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| !m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "cd_m2")]
    pub cd: f64,
    #[serde(rename = "emd_m2")]
    pub emd: f64,
    #[serde(rename = "cd_wo_outliers_m2")]
    pub cd_without_outliers: f64,
    #[serde(rename = "emd_wo_outliers_m2")]
    pub emd_without_outliers: f64,
    /// Point counts of (estimate, reference) after the protocol.
    pub n_points: [usize; 2],
    pub n_outliers: usize,
    #[serde(skip)]
    pub outlier_mask: Option<Vec<bool>>,
}

/// CD and EMD between an estimate and a reference that already went through
/// the protocol. Sizes are equalized by seeded downsampling first.
pub fn evaluate_clouds(estimate: &PointCloud, reference: &PointCloud, emd_epsilon: f64, seed: u64) -> Result<MetricReport> {
    let (a, b) = equalize(estimate, reference, seed);
    let terms = chamfer_terms(&a, &b)?;
    let emd = emd_auction_detailed(&a, &b, emd_epsilon)?;
    let mask = outlier_mask(&emd.pair_costs);
    let mask_ab = outlier_mask(&terms.a_to_b);
    let mask_ba = outlier_mask(&terms.b_to_a);
    Ok(MetricReport {
        cd: terms.value(),
        emd: emd.emd,
        cd_without_outliers: masked_mean(&terms.a_to_b, &mask_ab) + masked_mean(&terms.b_to_a, &mask_ba),
        emd_without_outliers: masked_mean(&emd.pair_costs, &mask),
        n_points: [a.len(), b.len()],
        n_outliers: mask.iter().filter(|&&m| m).count(),
        outlier_mask: Some(mask),
    })
}
