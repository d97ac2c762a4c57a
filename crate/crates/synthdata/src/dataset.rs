//! Whole datasets: parallel generation and the JSON-lines file format.
//!
//! Each line holds one sample with coordinates stored as `f32`:
//! `{"scene": [[x,y,z],...], "history": [[[x,y,z],...],...], "future": ..., "fps": 5, "meta": {...}}`.
//! The skeleton lives in a sidecar `<file>.skeleton.json`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mcld_core::domain::{MotionSequence, Point3, RngHandle, Sample, SampleMeta, ScenePointCloud, SkeletonSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};
use crate::motion::{generate_motion, BehaviorKind, BehaviorSpec};
use crate::scene::{generate_room, RoomSpec};

/// Rooms and paths redrawn per sample before giving up.
pub const MAX_SAMPLE_ATTEMPTS: u64 = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub count: usize,
    pub room: RoomSpec,
    /// Cycled over sample indices.
    pub behaviors: Vec<BehaviorSpec>,
    pub history_frames: usize,
    pub future_frames: usize,
    pub fps: f64,
}

impl DatasetSpec {
    pub fn desk(count: usize) -> Self {
        Self {
            count,
            room: RoomSpec::default(),
            behaviors: BehaviorKind::ALL.iter().map(|&k| BehaviorSpec::new(k)).collect(),
            history_frames: 5,
            future_frames: 10,
            fps: 5.0,
        }
    }
}

/// Sample `i` draws from `RngHandle::new(seed).derive(i)`; its index is
/// recorded in `meta.extra["index"]`.
pub fn generate_dataset(spec: &DatasetSpec, skeleton: &SkeletonSpec, seed: u64) -> Result<Vec<Sample>> {
    if spec.behaviors.is_empty() {
        return Err(Error::InvalidSpec("no behaviours to sample".into()));
    }
    spec.room.validate()?;
    let root = RngHandle::new(seed);
    (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let behavior = &spec.behaviors[i % spec.behaviors.len()];
            let per_sample = root.derive(i as u64);
            let mut last = None;
            for attempt in 0..MAX_SAMPLE_ATTEMPTS {
                let h = per_sample.derive(attempt);
                let attempt_result = generate_room(&spec.room, h.derive(0)).and_then(|room| {
                    generate_motion(
                        &room,
                        behavior,
                        skeleton,
                        spec.history_frames,
                        spec.future_frames,
                        spec.fps,
                        h.derive(1),
                    )
                });
                match attempt_result {
                    Ok(mut s) => {
                        s.meta.seed = seed;
                        s.meta.extra.insert("index".into(), i.to_string());
                        return Ok(s);
                    }
                    Err(e @ (Error::PlacementFailure { .. } | Error::PathFailure { .. })) => last = Some(e),
                    Err(e) => return Err(e),
                }
            }
            Err(last.expect("at least one attempt"))
        })
        .collect()
}

type Frame32 = Vec<[f32; 3]>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    scene: Frame32,
    history: Vec<Frame32>,
    future: Vec<Frame32>,
    fps: f64,
    meta: SampleMeta,
}

fn narrow(points: &[Point3]) -> Frame32 {
    points.iter().map(|p| p.map(|c| c as f32)).collect()
}

fn widen(points: Frame32) -> Vec<Point3> {
    points.into_iter().map(|p| p.map(f64::from)).collect()
}

fn to_record(s: &Sample) -> Record {
    Record {
        scene: narrow(&s.scene.points),
        history: s.history.frames().map(narrow).collect(),
        future: s.future.frames().map(narrow).collect(),
        fps: s.history.fps(),
        meta: s.meta.clone(),
    }
}

fn motion_from(frames: Vec<Frame32>, fps: f64, what: &str) -> std::result::Result<MotionSequence, String> {
    if frames.is_empty() {
        return Err(format!("{what} has no frames"));
    }
    let joints = frames[0].len();
    if joints == 0 || frames.iter().any(|f| f.len() != joints) {
        return Err(format!("{what} frames have unequal or zero joint counts"));
    }
    Ok(MotionSequence::new(frames.into_iter().map(widen).collect(), fps))
}

fn from_record(r: Record) -> std::result::Result<Sample, String> {
    if !(r.fps > 0.0) {
        return Err(format!("fps {} is not positive", r.fps));
    }
    let all_finite = |f: &Frame32| f.iter().flatten().all(|c| c.is_finite());
    if !all_finite(&r.scene) || !r.history.iter().chain(&r.future).all(all_finite) {
        return Err("non-finite coordinate".into());
    }
    let history = motion_from(r.history, r.fps, "history")?;
    let future = motion_from(r.future, r.fps, "future")?;
    if history.joint_count() != future.joint_count() {
        return Err("history and future joint counts differ".into());
    }
    Ok(Sample {
        scene: ScenePointCloud::new(widen(r.scene)),
        history,
        future,
        meta: r.meta,
    })
}

/// Path of the skeleton header written next to `path`.
pub fn skeleton_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".skeleton.json");
    path.with_file_name(name)
}

/// Writes the samples and the skeleton sidecar; returns the sample count.
pub fn write_dataset(samples: &[Sample], skeleton: &SkeletonSpec, path: &Path) -> Result<usize> {
    let file = File::create(path).map_err(io(path))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(&to_record(s)).expect("records serialize");
        writeln!(w, "{line}").map_err(io(path))?;
    }
    w.flush().map_err(io(path))?;
    let header = skeleton_path(path);
    let text = serde_json::to_string_pretty(skeleton).expect("skeleton serializes");
    std::fs::write(&header, text).map_err(io(&header))?;
    Ok(samples.len())
}

/// Reads every sample; blank lines are skipped.
pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let violation = |message: String| Error::SchemaViolation { line: i + 1, message };
        let record: Record = serde_json::from_str(&line).map_err(|e| violation(e.to_string()))?;
        out.push(from_record(record).map_err(violation)?);
    }
    Ok(out)
}

pub fn read_skeleton(path: &Path) -> Result<SkeletonSpec> {
    let header = skeleton_path(path);
    let text = std::fs::read_to_string(&header).map_err(io(&header))?;
    let sk: SkeletonSpec = serde_json::from_str(&text).map_err(|e| Error::SchemaViolation {
        line: e.line(),
        message: format!("skeleton header: {e}"),
    })?;
    sk.validate().map_err(|e| Error::SchemaViolation {
        line: 1,
        message: format!("skeleton header: {e}"),
    })?;
    Ok(sk)
}
