//! Frame-by-frame upsampling state machine.
//!
//! A frame carrying a LIDAR sweep becomes the anchor: the ground is fitted,
//! each tracked box gets its object cluster, and the cluster points are
//! projected into the image to seed pixel tracks. Each following camera-only
//! frame chains those pixel tracks with KLT, estimates one pose per object
//! and writes out a virtual sweep built only from the anchor points.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::association::{fit_ground_msac, object_points_for_track, AssociationParams, Plane};
use crate::config::PipelineConfig;
use crate::error::Result;
use crate::geometry::{compose, invert, project, Pixel, PointCloud, RigidTransform, Vec3};
use crate::imaging::{build_pyramid, klt_track_guided, GrayImage, Pyramid, TrackStatus};
use crate::io::Calibration;
use crate::pose::{
    classify_motion, dynamic_transform, explained_by_static, mlesac_pnp_with_prior, object_motion, object_seed, static_transform, Correspondence, MotionLabel,
};
use crate::synthesis::{synthesize_frame, FrameSynthesisPlan, SynthesizedFrame};
use crate::tracking2d::{BBox, Tracker};

/// Wall-clock seconds per stage for one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub tracking2d: f64,
    pub ground: f64,
    pub association: f64,
    pub klt: f64,
    pub pose: f64,
    pub synthesis: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.tracking2d + self.ground + self.association + self.klt + self.pose + self.synthesis
    }

    pub fn add(&mut self, o: &StageTimings) {
        self.tracking2d += o.tracking2d;
        self.ground += o.ground;
        self.association += o.association;
        self.klt += o.klt;
        self.pose += o.pose;
        self.synthesis += o.synthesis;
    }
}

/// Why an object was moved with the static transform instead of its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "detail")]
pub enum Fallback {
    TrackLost,
    TooFewPoints,
    PoseFailed(String),
}

/// Per-object result for one virtual frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionRecord {
    pub frame: usize,
    pub anchor_frame: usize,
    pub track_id: u64,
    /// Row-major 3×4 object motion in the anchor LIDAR frame, as applied:
    /// identity when the object is static or fell back.
    pub t_mov: [f64; 12],
    pub label: MotionLabel,
    pub cluster_size: usize,
    pub correspondences: usize,
    pub inliers: usize,
    pub mean_reprojection_error: Option<f64>,
    /// Centroid of the anchor cluster, anchor LIDAR frame.
    pub centroid: [f64; 3],
    pub fallback: Option<Fallback>,
}

impl MotionRecord {
    pub fn motion(&self) -> RigidTransform {
        RigidTransform::from_row_major_3x4(&self.t_mov, 1e-6)
    }
}

#[derive(Debug, Clone)]
pub struct VirtualFrame {
    pub frame: usize,
    pub anchor_frame: usize,
    pub synthesized: SynthesizedFrame,
    pub motions: Vec<MotionRecord>,
}

#[derive(Debug, Clone)]
pub enum FrameOutcome {
    /// A LIDAR frame: passed through, anchors reset.
    Anchor { objects: usize, ground_inliers: usize },
    Virtual(Box<VirtualFrame>),
    /// A camera frame before any LIDAR sweep.
    NoAnchor,
}

#[derive(Debug, Clone)]
pub struct FrameResult {
    pub frame: usize,
    pub outcome: FrameOutcome,
    pub timings: StageTimings,
}

/// One frame of input. `camera_pose` is world-from-camera.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a> {
    pub index: usize,
    pub image: &'a GrayImage,
    pub cloud: Option<&'a PointCloud>,
    pub camera_pose: &'a RigidTransform,
    pub detections: &'a [BBox],
}

#[derive(Debug, Clone)]
struct AnchorObject {
    members: Vec<usize>,
    centroid: Vec3,
    /// Anchor points followed in the image, with their current pixel and
    /// whether the track is still alive.
    tracked: Vec<usize>,
    pixels: Vec<Pixel>,
    alive: Vec<bool>,
}

#[derive(Debug, Clone)]
struct Anchor {
    frame: usize,
    cloud: PointCloud,
    camera_pose: RigidTransform,
    objects: BTreeMap<u64, AnchorObject>,
}

pub struct Pipeline {
    config: PipelineConfig,
    calib: Calibration,
    tracker: Tracker,
    anchor: Option<Anchor>,
    /// Index and pyramid of the previous camera frame.
    prev: Option<(usize, Pyramid)>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, calib: Calibration) -> Self {
        Self {
            tracker: Tracker::new(config.tracker),
            config,
            calib,
            anchor: None,
            prev: None,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Forgets the anchor, e.g. after its frame failed to load. Camera frames
    /// that follow produce nothing until the next sweep.
    pub fn drop_anchor(&mut self) {
        self.anchor = None;
        self.prev = None;
    }

    /// Processes one frame; frames must arrive in increasing index order.
    pub fn process(&mut self, input: FrameInput) -> Result<FrameResult> {
        let mut timings = StageTimings::default();
        let t = Instant::now();
        self.tracker.update(input.detections, input.index)?;
        timings.tracking2d = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let pyramid = build_pyramid(input.image, self.config.klt.levels);
        timings.klt = t.elapsed().as_secs_f64();

        let outcome = if let Some(cloud) = input.cloud {
            self.anchor = None;
            let (objects, ground_inliers) = self.reset_anchor(&input, cloud, &mut timings)?;
            FrameOutcome::Anchor { objects, ground_inliers }
        } else if self.anchor.is_some() && self.prev.is_some() {
            FrameOutcome::Virtual(Box::new(self.upsample(&input, &pyramid, &mut timings)?))
        } else {
            FrameOutcome::NoAnchor
        };
        self.prev = Some((input.index, pyramid));
        Ok(FrameResult {
            frame: input.index,
            outcome,
            timings,
        })
    }

    fn reset_anchor(&mut self, input: &FrameInput, cloud: &PointCloud, timings: &mut StageTimings) -> Result<(usize, usize)> {
        let cfg = &self.config;
        let t = Instant::now();
        let ground = fit_ground_msac(cloud, &cfg.msac, object_seed(cfg.seed, input.index as u64))?;
        timings.ground = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let params = AssociationParams {
            ground_threshold: cfg.msac.threshold,
            cluster: cfg.cluster,
        };
        let boxes: Vec<(u64, BBox)> = self
            .tracker
            .tracks()
            .iter()
            .filter_map(|tr| tr.bbox_at(input.index).map(|b| (tr.track_id, *b)))
            .collect();
        let (t_lc, cam) = (&self.calib.t_lidar_to_cam, &self.calib.camera);
        let clusters = crate::par::map(&boxes, |(id, b)| {
            object_points_for_track(cloud, b, &ground.plane, t_lc, cam, &params).map(|idx| (*id, *b, idx))
        });
        // Overlapping boxes can elect the same points; the older track keeps
        // them.
        let mut claimed = BTreeSet::new();
        let mut objects = BTreeMap::new();
        for r in clusters {
            let (id, bbox, idx) = r?;
            let members: Vec<usize> = idx.into_iter().filter(|i| !claimed.contains(i)).collect();
            if members.is_empty() {
                continue;
            }
            claimed.extend(members.iter().copied());
            objects.insert(id, self.seed_object(cloud, &bbox, members));
        }
        timings.association = t.elapsed().as_secs_f64();
        log::debug!("frame {}: anchor with {} objects, {} ground points", input.index, objects.len(), ground.inliers.len());
        let n = objects.len();
        self.anchor = Some(Anchor {
            frame: input.index,
            cloud: cloud.clone(),
            camera_pose: *input.camera_pose,
            objects,
        });
        Ok((n, ground.inliers.len()))
    }

    fn seed_object(&self, cloud: &PointCloud, bbox: &BBox, members: Vec<usize>) -> AnchorObject {
        let centroid = members.iter().map(|&i| cloud.points[i]).sum::<Vec3>() / members.len() as f64;
        let obj = self.config.objects;
        let cam = &self.calib.camera;
        let visible: Vec<(usize, Pixel)> = members
            .iter()
            .filter_map(|&i| {
                let p = self.calib.t_lidar_to_cam.apply(&cloud.points[i]);
                project(&p, cam).filter(|px| cam.contains(px)).map(|px| (i, px))
            })
            .collect();
        // Windows straddling the silhouette track the background too; skip
        // them unless that leaves too little to solve a pose.
        let inner: Vec<(usize, Pixel)> = visible
            .iter()
            .copied()
            .filter(|(_, px)| {
                let m = (px.u - bbox.x_min).min(bbox.x_max - px.u).min(px.v - bbox.y_min).min(bbox.y_max - px.v);
                m >= obj.border_margin
            })
            .collect();
        let seeds = if inner.len() >= 2 * obj.min_points { inner } else { visible };
        let stride = seeds.len().div_ceil(obj.max_points).max(1);
        let (tracked, pixels): (Vec<usize>, Vec<Pixel>) = seeds.into_iter().step_by(stride).unzip();
        let alive = vec![true; tracked.len()];
        AnchorObject {
            members,
            centroid,
            tracked,
            pixels,
            alive,
        }
    }

    fn upsample(&mut self, input: &FrameInput, pyramid: &Pyramid, timings: &mut StageTimings) -> Result<VirtualFrame> {
        let cfg = self.config;
        let anchor = self.anchor.as_mut().expect("anchor present");
        let (prev_index, prev) = self.prev.as_ref().map(|(i, p)| (*i, p)).expect("previous pyramid present");

        // One KLT call over every live pixel of every object. Each search
        // starts where the object's box motion puts the pixel, so fast
        // movers stay inside the pyramid's reach.
        let t = Instant::now();
        let mut slots = Vec::new();
        let mut seeds = Vec::new();
        let mut predicted = Vec::new();
        for (id, obj) in &anchor.objects {
            let boxes = self.tracker.get(*id).and_then(|tr| Some((tr.bbox_at(prev_index)?, tr.bbox_at(input.index)?)));
            for k in (0..obj.tracked.len()).filter(|&k| obj.alive[k]) {
                let px = obj.pixels[k];
                slots.push((*id, k));
                seeds.push(px);
                predicted.push(boxes.map_or(px, |(a, b)| box_motion(a, b, px)));
            }
        }
        let tracked = klt_track_guided(prev, pyramid, &seeds, Some(&predicted), &cfg.klt)?;
        for ((id, k), tp) in slots.iter().zip(&tracked) {
            let obj = anchor.objects.get_mut(id).unwrap();
            if tp.status == TrackStatus::Converged {
                obj.pixels[*k] = tp.target;
            } else {
                obj.alive[*k] = false;
            }
        }
        timings.klt += t.elapsed().as_secs_f64();

        // Anchor LIDAR frame to the current camera frame, from ego poses.
        let t_lc = self.calib.t_lidar_to_cam;
        let t_t = compose(&invert(input.camera_pose), &compose(&anchor.camera_pose, &t_lc));
        let t_s = static_transform(&t_t, &t_lc);

        let t = Instant::now();
        let cam = self.calib.camera;
        let ids: Vec<u64> = anchor.objects.keys().copied().collect();
        let anchor_ref = &*anchor;
        let tracker = &self.tracker;
        let frame_seed = object_seed(cfg.seed, input.index as u64);
        let results = crate::par::map(&ids, |id| {
            let obj = &anchor_ref.objects[id];
            let corrs: Vec<Correspondence> = (0..obj.tracked.len())
                .filter(|&k| obj.alive[k])
                .map(|k| Correspondence::new(anchor_ref.cloud.points[obj.tracked[k]], obj.pixels[k]))
                .collect();
            let mut rec = MotionRecord {
                frame: input.index,
                anchor_frame: anchor_ref.frame,
                track_id: *id,
                t_mov: RigidTransform::identity().to_row_major_3x4(),
                label: MotionLabel::Static,
                cluster_size: obj.members.len(),
                correspondences: corrs.len(),
                inliers: 0,
                mean_reprojection_error: None,
                centroid: obj.centroid.into(),
                fallback: None,
            };
            if tracker.get(*id).is_none() {
                rec.fallback = Some(Fallback::TrackLost);
                return (rec, t_s);
            }
            if corrs.len() < cfg.objects.min_points {
                rec.fallback = Some(Fallback::TooFewPoints);
                return (rec, t_s);
            }
            match mlesac_pnp_with_prior(&corrs, &cam, &cfg.mlesac, object_seed(frame_seed, *id), Some(&t_t)) {
                Ok(est) => {
                    rec.inliers = est.inlier_indices.len();
                    rec.mean_reprojection_error = Some(est.mean_reprojection_error);
                    if explained_by_static(&t_t, &est, &corrs, &cam, &cfg.motion) {
                        return (rec, t_s);
                    }
                    let t_mov = object_motion(&est.transform, &t_t);
                    rec.label = classify_motion(&t_mov, &cfg.motion);
                    if rec.label == MotionLabel::Static {
                        return (rec, t_s);
                    }
                    rec.t_mov = t_mov.to_row_major_3x4();
                    (rec, dynamic_transform(&est.transform, &t_lc))
                }
                Err(e) => {
                    rec.fallback = Some(Fallback::PoseFailed(e.to_string()));
                    (rec, t_s)
                }
            }
        });
        timings.pose = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let mut plan = FrameSynthesisPlan {
            source_cloud: &anchor.cloud,
            object_memberships: BTreeMap::new(),
            t_static: t_s,
            t_dynamic: BTreeMap::new(),
        };
        let mut motions = Vec::with_capacity(results.len());
        for (rec, t_d) in results {
            if let Some(fb) = &rec.fallback {
                log::debug!("frame {}: track {} uses the static transform ({fb:?})", input.index, rec.track_id);
            }
            plan.object_memberships.insert(rec.track_id, anchor.objects[&rec.track_id].members.clone());
            plan.t_dynamic.insert(rec.track_id, t_d);
            motions.push(rec);
        }
        let synthesized = synthesize_frame(&plan)?;
        timings.synthesis = t.elapsed().as_secs_f64();
        Ok(VirtualFrame {
            frame: input.index,
            anchor_frame: anchor.frame,
            synthesized,
            motions,
        })
    }
}

/// Where `px` lands if it moves with the box from `a` to `b` (shift plus
/// per-axis scale about the box centres).
fn box_motion(a: &BBox, b: &BBox, px: Pixel) -> Pixel {
    let (wa, ha) = (a.x_max - a.x_min, a.y_max - a.y_min);
    let (wb, hb) = (b.x_max - b.x_min, b.y_max - b.y_min);
    if !(wa > 0.0 && ha > 0.0 && wb > 0.0 && hb > 0.0) {
        return px;
    }
    let (ax, ay) = (0.5 * (a.x_min + a.x_max), 0.5 * (a.y_min + a.y_max));
    let (bx, by) = (0.5 * (b.x_min + b.x_max), 0.5 * (b.y_min + b.y_max));
    Pixel::new(bx + (px.u - ax) * wb / wa, by + (px.v - ay) * hb / ha)
}

/// Ground plane fitted the same way the pipeline does, for evaluation.
pub fn ground_plane(cloud: &PointCloud, config: &PipelineConfig, frame: usize) -> Result<Plane> {
    Ok(fit_ground_msac(cloud, &config.msac, object_seed(config.seed, frame as u64))?.plane)
}
