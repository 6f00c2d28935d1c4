//! Pipeline configuration, read from TOML.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected.
//!
//! ```toml
//! seed = 7
//! klt.window = 21
//! klt.levels = 3
//! klt.iters = 30
//! klt.eps = 0.01
//! msac.threshold = 0.2
//! msac.iters = 200
//! cluster.tolerance = 0.7
//! cluster.min_size = 5
//! cluster.election = "largest"      # or "nearest"
//! mlesac.sigma = 2.0
//! mlesac.iters = 500
//! tracker.iou_gate = 0.3
//! tracker.max_missed = 2
//! objects.min_points = 6
//! objects.max_points = 400
//! objects.border_margin = 10.0
//! protocol.target_points = 16384
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::association::{ClusterParams, MsacParams};
use crate::error::{Error, Result};
use crate::imaging::KltParams;
use crate::metrics::EvalProtocol;
use crate::pose::{MlesacParams, MotionThresholds};
use crate::tracking2d::TrackerParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectParams {
    /// Objects with fewer tracked correspondences fall back to the static
    /// transform.
    pub min_points: usize,
    /// Cap on anchor points tracked per object; larger clusters are
    /// subsampled with a fixed stride.
    pub max_points: usize,
    /// Pixels; anchor points projecting closer than this to their box edge
    /// are not tracked when enough others remain.
    pub border_margin: f64,
}

impl Default for ObjectParams {
    fn default() -> Self {
        Self {
            min_points: 6,
            max_points: 400,
            border_margin: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalParams {
    pub emd_epsilon: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self { emd_epsilon: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub klt: KltParams,
    pub msac: MsacParams,
    pub cluster: ClusterParams,
    pub mlesac: MlesacParams,
    pub tracker: TrackerParams,
    pub motion: MotionThresholds,
    pub objects: ObjectParams,
    pub protocol: EvalProtocol,
    pub eval: EvalParams,
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.klt.validate().map_err(|e| Error::Config(e.to_string()))?;
        check(self.klt.window <= 101, || format!("klt.window {} above 101", self.klt.window))?;
        check(self.klt.levels <= 8, || format!("klt.levels {} above 8", self.klt.levels))?;
        check(self.msac.threshold > 0.0 && self.msac.threshold < 5.0, || {
            format!("msac.threshold {} outside (0, 5) m", self.msac.threshold)
        })?;
        check(self.msac.iters > 0, || "msac.iters must be positive".into())?;
        check(self.cluster.tolerance > 0.0 && self.cluster.tolerance < 10.0, || {
            format!("cluster.tolerance {} outside (0, 10) m", self.cluster.tolerance)
        })?;
        check(self.cluster.min_size > 0, || "cluster.min_size must be positive".into())?;
        check(self.mlesac.sigma > 0.0 && self.mlesac.sigma < 100.0, || {
            format!("mlesac.sigma {} outside (0, 100) px", self.mlesac.sigma)
        })?;
        check(self.mlesac.iters > 0, || "mlesac.iters must be positive".into())?;
        check(self.mlesac.confidence > 0.0 && self.mlesac.confidence < 1.0, || {
            format!("mlesac.confidence {} outside (0, 1)", self.mlesac.confidence)
        })?;
        check(self.tracker.iou_gate > 0.0 && self.tracker.iou_gate <= 1.0, || {
            format!("tracker.iou_gate {} outside (0, 1]", self.tracker.iou_gate)
        })?;
        check(self.motion.translation >= 0.0 && self.motion.rotation_deg >= 0.0, || {
            "motion thresholds must be non-negative".into()
        })?;
        check(self.objects.min_points >= 6, || {
            format!("objects.min_points {} below the 6 needed for pose", self.objects.min_points)
        })?;
        check(self.objects.max_points >= self.objects.min_points, || {
            "objects.max_points must be at least objects.min_points".into()
        })?;
        check(self.objects.border_margin >= 0.0, || "objects.border_margin must be non-negative".into())?;
        check(self.eval.emd_epsilon > 0.0, || "eval.emd_epsilon must be positive".into())?;
        self.protocol.validate().map_err(|e| Error::Config(e.to_string()))
    }
}
