//! File-level entry points behind the `run`, `eval` and `synth` subcommands.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::io;
use crate::metrics::{evaluate_clouds, protocol_indices, EvalProtocol, MetricReport};
use crate::pipeline::{FrameInput, FrameOutcome, MotionRecord, Pipeline, StageTimings};
use crate::scenario::{frame_name, Scenario, ScenarioConfig, SynthSummary};

/// Layout of a run directory.
pub const VIRTUAL_DIR: &str = "virtual";
pub const MOTIONS_FILE: &str = "motions.json";

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub frames: usize,
    pub anchors: Vec<usize>,
    pub virtual_frames: Vec<usize>,
    /// Frames that could not be processed, with the reason.
    pub failures: Vec<(usize, String)>,
    pub motions: Vec<MotionRecord>,
    /// Summed over frames.
    pub timings: StageTimings,
    pub frame_timings: Vec<(usize, StageTimings)>,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            1
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

/// Runs the pipeline over a manifest. Errors are fatal (manifest,
/// calibration, output directory); per-frame problems are collected in the
/// summary and the remaining frames still run.
///
/// Writes `virtual/<frame>.{bin,ply,labels}` for each camera-only frame and
/// `motions.json` with one record per object and virtual frame.
pub fn cmd_run(manifest: &Path, config: &PipelineConfig, out_dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    let seq = io::load_sequence(manifest)?;
    let vdir = out_dir.join(VIRTUAL_DIR);
    create_dir(&vdir)?;
    let mut pipe = Pipeline::new(*config, seq.calibration.clone());
    let mut summary = RunSummary {
        frames: seq.frames.len(),
        ..Default::default()
    };
    for (i, frame) in seq.frames.iter().enumerate() {
        let fail = |summary: &mut RunSummary, msg: String| {
            log::error!("frame {i}: {msg}");
            summary.failures.push((i, msg));
        };
        let image = match io::read_gray_image(&frame.image_path) {
            Ok(img) => img,
            Err(e) => {
                if frame.cloud_path.is_some() {
                    pipe.drop_anchor();
                }
                fail(&mut summary, format!("skipped: {e}"));
                continue;
            }
        };
        let cloud = match frame.cloud_path.as_ref().map(io::read_cloud_bin).transpose() {
            Ok(c) => c,
            Err(e) => {
                pipe.drop_anchor();
                fail(&mut summary, format!("skipped: {e}"));
                continue;
            }
        };
        let input = FrameInput {
            index: i,
            image: &image,
            cloud: cloud.as_ref(),
            camera_pose: &frame.ego_pose,
            detections: &frame.detections,
        };
        let result = match pipe.process(input) {
            Ok(r) => r,
            Err(e) => {
                if frame.cloud_path.is_some() {
                    pipe.drop_anchor();
                }
                fail(&mut summary, format!("failed: {e}"));
                continue;
            }
        };
        let tm = &result.timings;
        log::info!(
            "frame {i}: {:.1} ms (tracking {:.1}, ground {:.1}, association {:.1}, klt {:.1}, pose {:.1}, synthesis {:.1})",
            tm.total() * 1e3,
            tm.tracking2d * 1e3,
            tm.ground * 1e3,
            tm.association * 1e3,
            tm.klt * 1e3,
            tm.pose * 1e3,
            tm.synthesis * 1e3
        );
        summary.timings.add(tm);
        summary.frame_timings.push((i, *tm));
        match result.outcome {
            FrameOutcome::Anchor { objects, .. } => {
                log::info!("frame {i}: LIDAR anchor with {objects} objects");
                summary.anchors.push(i);
            }
            FrameOutcome::NoAnchor => {
                if frame.cloud_path.is_none() {
                    log::warn!("frame {i}: no LIDAR anchor available, nothing to synthesize");
                }
            }
            FrameOutcome::Virtual(v) => {
                let name = frame_name(i);
                let s = &v.synthesized;
                io::write_cloud_bin(&s.cloud, vdir.join(format!("{name}.bin")))?;
                io::write_cloud_ply(&s.cloud, Some(&s.provenance), vdir.join(format!("{name}.ply")))?;
                io::write_labels(&s.provenance, vdir.join(format!("{name}.labels")))?;
                summary.virtual_frames.push(i);
                summary.motions.extend(v.motions);
            }
        }
    }
    let json = serde_json::to_string_pretty(&summary.motions)?;
    write_file(&out_dir.join(MOTIONS_FILE), json)?;
    Ok(summary)
}

pub fn read_motions(path: impl AsRef<Path>) -> Result<Vec<MotionRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub cd_m2: f64,
    pub emd_m2: f64,
    pub cd_wo_outliers_m2: f64,
    pub emd_wo_outliers_m2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub protocol: EvalProtocol,
    pub per_object: bool,
    pub outlier_rule: String,
    pub frames: Vec<FrameMetrics>,
    pub mean: Option<MeanMetrics>,
    /// Frame files present in only one of the two directories.
    pub unpaired: Vec<String>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# seed {} per_object {} outliers: {}", self.seed, self.per_object, self.outlier_rule);
        let _ = writeln!(s, "# protocol {}", serde_json::to_string(&self.protocol).unwrap_or_default());
        let _ = writeln!(s, "frame cd_m2 emd_m2 cd_wo_outliers_m2 emd_wo_outliers_m2 n_est n_ref");
        for f in &self.frames {
            let r = &f.report;
            let _ = writeln!(
                s,
                "{} {:.6} {:.6} {:.6} {:.6} {} {}",
                f.frame, r.cd, r.emd, r.cd_without_outliers, r.emd_without_outliers, r.n_points[0], r.n_points[1]
            );
        }
        if let Some(m) = &self.mean {
            let _ = writeln!(s, "mean {:.6} {:.6} {:.6} {:.6}", m.cd_m2, m.emd_m2, m.cd_wo_outliers_m2, m.emd_wo_outliers_m2);
        }
        for u in &self.unpaired {
            let _ = writeln!(s, "unpaired {u}");
        }
        s
    }
}

fn bin_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeSet::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "bin") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Compares every `<name>.bin` in `virtual_dir` with the same file in
/// `truth_dir`. In per-object mode only points labeled with a track (from
/// `<name>.labels` next to the virtual cloud) are compared; this needs both
/// clouds to come from the same anchor sweep.
///
/// The report goes to `report_path` as JSON and next to it with a `.txt`
/// extension as a text table.
pub fn cmd_eval(
    virtual_dir: &Path,
    truth_dir: &Path,
    config: &PipelineConfig,
    per_object: bool,
    report_path: &Path,
) -> Result<EvalReport> {
    let protocol = config.protocol;
    protocol.validate()?;
    let est = bin_stems(virtual_dir)?;
    let truth = bin_stems(truth_dir)?;
    let paired: Vec<String> = est.intersection(&truth).cloned().collect();
    let unpaired: Vec<String> = est.symmetric_difference(&truth).cloned().collect();
    if paired.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no frames in common between {} and {}; unpaired: [{}]",
            virtual_dir.display(),
            truth_dir.display(),
            unpaired.join(", ")
        )));
    }
    for u in &unpaired {
        log::warn!("unpaired frame {u}");
    }
    let evaluate = |name: &String| -> Result<FrameMetrics> {
        let mut a = io::read_cloud_bin(virtual_dir.join(format!("{name}.bin")))?;
        let mut b = io::read_cloud_bin(truth_dir.join(format!("{name}.bin")))?;
        if per_object {
            let labels = io::read_labels(virtual_dir.join(format!("{name}.labels")))?;
            if labels.len() != a.len() || a.len() != b.len() {
                return Err(Error::DimensionMismatch(format!(
                    "frame {name}: per-object mode needs equal sizes, got {} labels, {} and {} points",
                    labels.len(),
                    a.len(),
                    b.len()
                )));
            }
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] >= 0).collect();
            a = a.select(&idx);
            b = b.select(&idx);
        }
        let ground = if protocol.remove_ground && b.len() >= 3 {
            Some(crate::pipeline::ground_plane(&b, config, 0)?)
        } else {
            None
        };
        let reduce = |c: &PointCloud| c.select(&protocol_indices(c, &protocol, ground.as_ref(), None));
        let (a, b) = (reduce(&a), reduce(&b));
        let mut report = evaluate_clouds(&a, &b, config.eval.emd_epsilon, protocol.seed)?;
        report.outlier_mask = None;
        Ok(FrameMetrics {
            frame: name.clone(),
            report,
        })
    };
    let frames: Vec<FrameMetrics> = crate::par::map(&paired, evaluate).into_iter().collect::<Result<_>>()?;
    let n = frames.len() as f64;
    let mean = MeanMetrics {
        cd_m2: frames.iter().map(|f| f.report.cd).sum::<f64>() / n,
        emd_m2: frames.iter().map(|f| f.report.emd).sum::<f64>() / n,
        cd_wo_outliers_m2: frames.iter().map(|f| f.report.cd_without_outliers).sum::<f64>() / n,
        emd_wo_outliers_m2: frames.iter().map(|f| f.report.emd_without_outliers).sum::<f64>() / n,
    };
    let report = EvalReport {
        seed: protocol.seed,
        protocol,
        per_object,
        outlier_rule: "per-point error above Q3 + 1.5 IQR".into(),
        frames,
        mean: Some(mean),
        unpaired,
    };
    if let Some(parent) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(report_path, serde_json::to_string_pretty(&report)?)?;
    write_file(&report_path.with_extension("txt"), report.to_text())?;
    Ok(report)
}

/// Renders a synthetic sequence with ground truth into `out_dir`.
pub fn cmd_synth(scenario: &ScenarioConfig, out_dir: &Path) -> Result<SynthSummary> {
    let s = Scenario::new(scenario.clone())?;
    s.write(out_dir)
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ScenarioConfig::from_toml_str(&text)
}

/// Directory with the ground-truth virtual clouds inside a synth output.
pub fn ground_truth_dir(synth_dir: &Path) -> PathBuf {
    synth_dir.join("gt_virtual")
}
