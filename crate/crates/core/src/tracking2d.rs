//! Detection ingestion helpers, IoU, Hungarian assignment and the
//! frame-to-frame object tracker.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::TrackedPoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_id: i32,
    pub score: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            class_id: 0,
            score: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max, self.score]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.x_min < self.x_max) || !(self.y_min < self.y_max) {
            return Err(Error::InvalidArgument(format!("degenerate box {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidArgument(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    /// Strict interior test.
    #[inline]
    pub fn contains_strict(&self, u: f64, v: f64) -> bool {
        u > self.x_min && u < self.x_max && v > self.y_min && v < self.y_max
    }

    pub fn intersects_image(&self, width: u32, height: u32) -> bool {
        self.x_max > 0.0 && self.y_max > 0.0 && self.x_min < width as f64 && self.y_min < height as f64
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Minimum-cost assignment on a rectangular cost matrix given as rows.
///
/// Returns `min(rows, cols)` pairs sorted by row. Shortest augmenting paths
/// with potentials, O(n²m). Among equal-cost columns the lowest index wins.
pub fn hungarian_assign(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    let rows = cost.len();
    if rows == 0 {
        return Ok(Vec::new());
    }
    let cols = cost[0].len();
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::DimensionMismatch("cost matrix rows differ in length".into()));
    }
    if cols == 0 {
        return Ok(Vec::new());
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
    }
    if rows <= cols {
        Ok(assign_rows(rows, cols, |i, j| cost[i][j]))
    } else {
        let mut pairs: Vec<(usize, usize)> = assign_rows(cols, rows, |i, j| cost[j][i])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// Core solver for `n <= m`: every row is assigned.
fn assign_rows(n: usize, m: usize, c: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub track_id: u64,
    pub bbox_history: Vec<(usize, BBox)>,
    pub cluster_indices: Vec<usize>,
    pub tracked_pixels: Vec<TrackedPoint>,
    pub age: u32,
    pub missed: u32,
}

impl ObjectTrack {
    pub fn last_frame(&self) -> usize {
        self.bbox_history.last().map(|(f, _)| *f).unwrap_or(0)
    }

    pub fn last_bbox(&self) -> &BBox {
        &self.bbox_history.last().expect("track history is never empty").1
    }

    /// Box observed exactly at `frame`, if any.
    pub fn bbox_at(&self, frame: usize) -> Option<&BBox> {
        self.bbox_history.iter().rev().find(|(f, _)| *f == frame).map(|(_, b)| b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerParams {
    pub iou_gate: f64,
    pub max_missed: u32,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self {
            iou_gate: 0.3,
            max_missed: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackUpdate {
    /// `(track_id, detection index)` for continued tracks.
    pub matched: Vec<(u64, usize)>,
    /// `(track_id, detection index)` for tracks born this frame.
    pub born: Vec<(u64, usize)>,
    pub terminated: Vec<u64>,
}

/// Owns the live tracks and the id counter.
#[derive(Debug, Clone, Default)]
pub struct Tracker {
    pub params: TrackerParams,
    tracks: Vec<ObjectTrack>,
    next_id: u64,
}

impl Tracker {
    pub fn new(params: TrackerParams) -> Self {
        Self {
            params,
            tracks: Vec::new(),
            next_id: 0,
        }
    }

    pub fn tracks(&self) -> &[ObjectTrack] {
        &self.tracks
    }

    pub fn tracks_mut(&mut self) -> &mut [ObjectTrack] {
        &mut self.tracks
    }

    pub fn get(&self, id: u64) -> Option<&ObjectTrack> {
        self.tracks.iter().find(|t| t.track_id == id)
    }

    pub fn update(&mut self, detections: &[BBox], frame: usize) -> Result<TrackUpdate> {
        let p = self.params;
        update_tracks(&mut self.tracks, &mut self.next_id, detections, frame, p.iou_gate, p.max_missed)
    }
}

/// Associates `detections` at `frame` with `tracks` using 1 − IoU costs.
pub fn update_tracks(
    tracks: &mut Vec<ObjectTrack>,
    next_id: &mut u64,
    detections: &[BBox],
    frame: usize,
    iou_gate: f64,
    max_missed: u32,
) -> Result<TrackUpdate> {
    if let Some(t) = tracks.iter().find(|t| t.last_frame() >= frame) {
        return Err(Error::InvalidArgument(format!(
            "frame {frame} is not after track {} (last frame {})",
            t.track_id,
            t.last_frame()
        )));
    }
    let mut report = TrackUpdate::default();
    let cost: Vec<Vec<f64>> = tracks
        .iter()
        .map(|t| detections.iter().map(|d| 1.0 - iou(t.last_bbox(), d)).collect())
        .collect();
    let pairs = if tracks.is_empty() || detections.is_empty() {
        Vec::new()
    } else {
        hungarian_assign(&cost)?
    };

    let mut det_taken = vec![false; detections.len()];
    let mut track_hit = vec![false; tracks.len()];
    for (ti, di) in pairs {
        if 1.0 - cost[ti][di] < iou_gate {
            continue;
        }
        let t = &mut tracks[ti];
        t.bbox_history.push((frame, detections[di]));
        t.age += 1;
        t.missed = 0;
        det_taken[di] = true;
        track_hit[ti] = true;
        report.matched.push((t.track_id, di));
    }
    for (t, hit) in tracks.iter_mut().zip(&track_hit) {
        if !hit {
            t.missed += 1;
        }
    }
    tracks.retain(|t| {
        let dead = t.missed > max_missed;
        if dead {
            report.terminated.push(t.track_id);
        }
        !dead
    });
    for (di, det) in detections.iter().enumerate() {
        if det_taken[di] {
            continue;
        }
        let id = *next_id;
        *next_id += 1;
        tracks.push(ObjectTrack {
            track_id: id,
            bbox_history: vec![(frame, *det)],
            cluster_indices: Vec::new(),
            tracked_pixels: Vec::new(),
            age: 1,
            missed: 0,
        });
        report.born.push((id, di));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive minimum over all injections of rows into columns
    /// (or columns into rows when there are fewer columns).
    pub(crate) fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        let rows = cost.len();
        let cols = cost[0].len();
        fn rec(cost: &[Vec<f64>], r: usize, used: &mut Vec<bool>, transpose: bool, acc: f64, best: &mut f64) {
            let (n, m) = if transpose { (cost[0].len(), cost.len()) } else { (cost.len(), cost[0].len()) };
            if r == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..m {
                if !used[j] {
                    used[j] = true;
                    let c = if transpose { cost[j][r] } else { cost[r][j] };
                    rec(cost, r + 1, used, transpose, acc + c, best);
                    used[j] = false;
                }
            }
        }
        let transpose = rows > cols;
        let mut best = f64::INFINITY;
        let m = rows.max(cols);
        rec(cost, 0, &mut vec![false; m], transpose, 0.0, &mut best);
        best
    }

    fn total(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(i, j)| cost[i][j]).sum()
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn hungarian_examples() {
        let eye: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| if i == j { 0.0 } else { 1.0 }).collect()).collect();
        assert_eq!(hungarian_assign(&eye).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);

        let c = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let m = hungarian_assign(&c).unwrap();
        assert_eq!(m, vec![(0, 1), (1, 0), (2, 2)]);
        assert_eq!(total(&c, &m), 5.0);
        assert_eq!(brute_force_min(&c), 5.0);

        let r = vec![vec![3.0, 1.0, 7.0], vec![2.0, 8.0, 1.5]];
        let m = hungarian_assign(&r).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(total(&r, &m), brute_force_min(&r));

        assert!(hungarian_assign(&[]).unwrap().is_empty());
        assert!(hungarian_assign(&[vec![]]).unwrap().is_empty());
        assert!(hungarian_assign(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn tall_matrix_is_transposed() {
        let c = vec![vec![5.0, 1.0], vec![1.0, 5.0], vec![0.5, 0.7]];
        let m = hungarian_assign(&c).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(total(&c, &m), brute_force_min(&c));
    }

    #[test]
    fn cold_start_spawns_tracks() {
        let mut tr = Tracker::new(TrackerParams::default());
        let dets = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(50.0, 50.0, 60.0, 60.0)];
        let rep = tr.update(&dets, 0).unwrap();
        assert_eq!(rep.born, vec![(0, 0), (1, 1)]);
        assert_eq!(tr.tracks().len(), 2);
    }

    #[test]
    fn high_iou_match_increments_age() {
        let mut tr = Tracker::new(TrackerParams::default());
        tr.update(&[BBox::new(0.0, 0.0, 10.0, 10.0)], 0).unwrap();
        // IoU of a 0.5 px horizontal shift: 95/105 ≈ 0.905.
        let rep = tr.update(&[BBox::new(0.5, 0.0, 10.5, 10.0)], 1).unwrap();
        assert_eq!(rep.matched, vec![(0, 0)]);
        assert_eq!(tr.tracks()[0].age, 2);
        assert!(rep.born.is_empty());
    }

    #[test]
    fn crossed_ious_follow_best_matching() {
        // Track boxes and detections laid out on a line so that the pairwise
        // IoUs are (t0,d1)=0.8, (t0,d0)=0.2, (t1,d0)=0.7, (t1,d1)=0.1 up to
        // the geometry; we take the IoU matrix as measured and compare with
        // the permutation oracle.
        let t0 = BBox::new(0.0, 0.0, 10.0, 10.0);
        let t1 = BBox::new(20.0, 0.0, 30.0, 10.0);
        let d0 = BBox::new(18.0, 0.0, 28.0, 10.0);
        let d1 = BBox::new(1.0, 0.0, 11.0, 10.0);
        let mut tr = Tracker::new(TrackerParams::default());
        tr.update(&[t0, t1], 0).unwrap();
        let rep = tr.update(&[d0, d1], 1).unwrap();
        let cost: Vec<Vec<f64>> = [t0, t1].iter().map(|t| [d0, d1].iter().map(|d| 1.0 - iou(t, d)).collect()).collect();
        let m = hungarian_assign(&cost).unwrap();
        assert_eq!(total(&cost, &m), brute_force_min(&cost));
        let mut matched = rep.matched.clone();
        matched.sort();
        assert_eq!(matched, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn crossed_iou_matrix_from_values() {
        let cost = vec![vec![1.0 - 0.2, 1.0 - 0.8], vec![1.0 - 0.7, 1.0 - 0.1]];
        let m = hungarian_assign(&cost).unwrap();
        assert_eq!(m, vec![(0, 1), (1, 0)]);
        assert!((total(&cost, &m) - brute_force_min(&cost)).abs() < 1e-12);
    }

    #[test]
    fn missed_tracks_terminate_and_ids_are_not_reused() {
        let mut tr = Tracker::new(TrackerParams { iou_gate: 0.3, max_missed: 2 });
        tr.update(&[BBox::new(0.0, 0.0, 10.0, 10.0)], 0).unwrap();
        for f in 1..=2 {
            let rep = tr.update(&[], f).unwrap();
            assert!(rep.terminated.is_empty());
        }
        let rep = tr.update(&[], 3).unwrap();
        assert_eq!(rep.terminated, vec![0]);
        let rep = tr.update(&[BBox::new(0.0, 0.0, 10.0, 10.0)], 4).unwrap();
        assert_eq!(rep.born, vec![(1, 0)]);
    }

    #[test]
    fn low_iou_is_gated() {
        let mut tr = Tracker::new(TrackerParams::default());
        tr.update(&[BBox::new(0.0, 0.0, 10.0, 10.0)], 0).unwrap();
        let rep = tr.update(&[BBox::new(8.0, 0.0, 18.0, 10.0)], 1).unwrap();
        assert!(rep.matched.is_empty());
        assert_eq!(rep.born.len(), 1);
        assert_eq!(tr.tracks()[0].missed, 1);
    }

    #[test]
    fn stale_frame_rejected() {
        let mut tr = Tracker::new(TrackerParams::default());
        tr.update(&[BBox::new(0.0, 0.0, 10.0, 10.0)], 3).unwrap();
        assert!(tr.update(&[], 3).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = BBox> {
            (0.0f64..100.0, 0.0f64..100.0, 0.5f64..50.0, 0.5f64..50.0)
                .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
        }

        proptest! {
            #[test]
            fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
                let x = iou(&a, &b);
                prop_assert_eq!(x, iou(&b, &a));
                prop_assert!((0.0..=1.0).contains(&x));
            }

            #[test]
            fn hungarian_matches_brute_force(
                (r, c) in (1usize..=6, 1usize..=6),
                seed in any::<u64>(),
            ) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let cost: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
                let m = hungarian_assign(&cost).unwrap();
                prop_assert_eq!(m.len(), r.min(c));
                prop_assert!((total(&cost, &m) - brute_force_min(&cost)).abs() < 1e-9);
            }

            #[test]
            fn every_detection_owned_once(
                frames in prop::collection::vec(prop::collection::vec(arb_box(), 0..6), 1..6),
            ) {
                let mut tr = Tracker::new(TrackerParams::default());
                let mut seen = std::collections::HashSet::new();
                for (f, dets) in frames.iter().enumerate() {
                    let rep = tr.update(dets, f).unwrap();
                    let mut owners = vec![0; dets.len()];
                    for (id, d) in rep.matched.iter().chain(&rep.born) {
                        owners[*d] += 1;
                        let _ = id;
                    }
                    prop_assert!(owners.iter().all(|&o| o == 1));
                    for (id, _) in &rep.born {
                        prop_assert!(seen.insert(*id));
                    }
                }
            }
        }
    }
}
