//! Pose/path MPJPE, ADE/FDE and aggregation of repeated evaluation runs.
//!
//! Positions are in meters; every metric is reported in millimeters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::MotionSequence;
use crate::error::{Error, Result};

/// Horizons (seconds) reported by the evaluation tables.
pub const HORIZONS: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 3.0];

/// z-score of the two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

const MM: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    L2,
    L1,
}

impl Distance {
    pub fn between(self, a: [f64; 3], b: [f64; 3]) -> f64 {
        let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        match self {
            Distance::L2 => (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt(),
            Distance::L1 => d[0].abs() + d[1].abs() + d[2].abs(),
        }
    }
}

fn check_pair(context: &'static str, pred: &MotionSequence, gt: &MotionSequence) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            context,
            format!("{:?}", gt.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    Ok(())
}

fn mean_distance(
    pred: &MotionSequence,
    gt: &MotionSequence,
    frames: std::ops::Range<usize>,
    joints: std::ops::Range<usize>,
    distance: Distance,
) -> f64 {
    let count = frames.len() * joints.len();
    if count == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for f in frames {
        for j in joints.clone() {
            total += distance.between(pred.joint(f, j), gt.joint(f, j));
        }
    }
    MM * total / count as f64
}

/// Mean per-joint distance over the first `upto_frame` frames.
pub fn pose_error(
    pred: &MotionSequence,
    gt: &MotionSequence,
    upto_frame: usize,
    distance: Distance,
) -> Result<f64> {
    check_pair("pose_error", pred, gt)?;
    check_horizon(upto_frame, gt.frame_count())?;
    Ok(mean_distance(pred, gt, 0..upto_frame, 0..gt.joint_count(), distance))
}

/// [`pose_error`] restricted to one joint.
pub fn path_error(
    pred: &MotionSequence,
    gt: &MotionSequence,
    root_index: usize,
    upto_frame: usize,
    distance: Distance,
) -> Result<f64> {
    check_pair("path_error", pred, gt)?;
    check_horizon(upto_frame, gt.frame_count())?;
    if root_index >= gt.joint_count() {
        return Err(Error::shape(
            "path_error",
            format!("joint < {}", gt.joint_count()),
            root_index,
        ));
    }
    Ok(mean_distance(pred, gt, 0..upto_frame, root_index..root_index + 1, distance))
}

fn check_horizon(upto_frame: usize, frames: usize) -> Result<()> {
    if upto_frame > frames {
        return Err(Error::shape("horizon", format!("<= {frames} frames"), upto_frame));
    }
    Ok(())
}

pub fn ade(pred: &MotionSequence, gt: &MotionSequence, distance: Distance) -> Result<f64> {
    check_pair("ade", pred, gt)?;
    Ok(mean_distance(pred, gt, 0..gt.frame_count(), 0..gt.joint_count(), distance))
}

pub fn fde(pred: &MotionSequence, gt: &MotionSequence, distance: Distance) -> Result<f64> {
    check_pair("fde", pred, gt)?;
    let last = gt.frame_count().saturating_sub(1);
    Ok(mean_distance(pred, gt, last..gt.frame_count(), 0..gt.joint_count(), distance))
}

/// Frame count covered by `seconds` at `fps`, or `None` past the prediction window.
pub fn horizon_frames(seconds: f64, fps: f64, future_frames: usize) -> Option<usize> {
    let frames = (seconds * fps).round() as usize;
    (frames >= 1 && frames <= future_frames).then_some(frames)
}

/// Key used for a horizon in report maps, e.g. `"1.5"`.
pub fn horizon_key(seconds: f64) -> String {
    format!("{seconds:.1}")
}

/// Metrics of one evaluation run, averaged over the test set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub pose_error_by_horizon: BTreeMap<String, f64>,
    pub path_error_by_horizon: BTreeMap<String, f64>,
    pub ade: f64,
    pub fde: f64,
}

impl RunMetrics {
    /// Averages every metric over `(prediction, ground truth)` pairs.
    pub fn from_pairs(
        pairs: &[(&MotionSequence, &MotionSequence)],
        root_index: usize,
        distance: Distance,
    ) -> Result<Self> {
        let Some((_, first)) = pairs.first() else {
            return Err(Error::InvalidConfig("no samples to evaluate".into()));
        };
        let (fps, frames) = (first.fps(), first.frame_count());
        let horizons: Vec<(String, usize)> = HORIZONS
            .iter()
            .filter_map(|&h| horizon_frames(h, fps, frames).map(|f| (horizon_key(h), f)))
            .collect();
        let mut out = RunMetrics::default();
        for (pred, gt) in pairs {
            out.ade += ade(pred, gt, distance)?;
            out.fde += fde(pred, gt, distance)?;
            for (key, f) in &horizons {
                *out.pose_error_by_horizon.entry(key.clone()).or_default() += pose_error(pred, gt, *f, distance)?;
                *out.path_error_by_horizon.entry(key.clone()).or_default() +=
                    path_error(pred, gt, root_index, *f, distance)?;
            }
        }
        let n = pairs.len() as f64;
        out.ade /= n;
        out.fde /= n;
        out.pose_error_by_horizon.values_mut().for_each(|v| *v /= n);
        out.path_error_by_horizon.values_mut().for_each(|v| *v /= n);
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.ade.is_finite()
            && self.fde.is_finite()
            && self.pose_error_by_horizon.values().all(|v| v.is_finite())
            && self.path_error_by_horizon.values().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pose_error_by_horizon: BTreeMap<String, f64>,
    pub path_error_by_horizon: BTreeMap<String, f64>,
    pub ade: f64,
    pub fde: f64,
    pub n_runs: usize,
    /// 95% half-widths, same layout as the means.
    pub ci95: RunMetrics,
    pub distance: Distance,
}

impl EvalReport {
    pub fn is_finite(&self) -> bool {
        self.means().is_finite() && self.ci95.is_finite()
    }

    pub fn means(&self) -> RunMetrics {
        RunMetrics {
            pose_error_by_horizon: self.pose_error_by_horizon.clone(),
            path_error_by_horizon: self.path_error_by_horizon.clone(),
            ade: self.ade,
            fde: self.fde,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `(mean, 1.96·sd/√n)` with the sample standard deviation.
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientRuns(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, Z95 * var.sqrt() / (n as f64).sqrt()))
}

pub fn aggregate_runs(runs: &[RunMetrics], distance: Distance) -> Result<EvalReport> {
    if runs.len() < 2 {
        return Err(Error::InsufficientRuns(runs.len()));
    }
    let column = |f: &dyn Fn(&RunMetrics) -> Option<f64>| -> Result<Option<(f64, f64)>> {
        let values: Option<Vec<f64>> = runs.iter().map(f).collect();
        values.map(|v| mean_ci95(&v)).transpose()
    };
    let (ade, ade_ci) = column(&|r| Some(r.ade))?.expect("present");
    let (fde, fde_ci) = column(&|r| Some(r.fde))?.expect("present");
    let mut mean = RunMetrics {
        ade,
        fde,
        ..RunMetrics::default()
    };
    let mut ci = RunMetrics {
        ade: ade_ci,
        fde: fde_ci,
        ..RunMetrics::default()
    };
    for key in runs[0].pose_error_by_horizon.keys() {
        if let Some((m, c)) = column(&|r| r.pose_error_by_horizon.get(key).copied())? {
            mean.pose_error_by_horizon.insert(key.clone(), m);
            ci.pose_error_by_horizon.insert(key.clone(), c);
        }
    }
    for key in runs[0].path_error_by_horizon.keys() {
        if let Some((m, c)) = column(&|r| r.path_error_by_horizon.get(key).copied())? {
            mean.path_error_by_horizon.insert(key.clone(), m);
            ci.path_error_by_horizon.insert(key.clone(), c);
        }
    }
    Ok(EvalReport {
        pose_error_by_horizon: mean.pose_error_by_horizon,
        path_error_by_horizon: mean.path_error_by_horizon,
        ade: mean.ade,
        fde: mean.fde,
        n_runs: runs.len(),
        ci95: ci,
        distance,
    })
}
