//! Shared domain types: skeletons, motion sequences, scene clouds, samples
//! and seeded randomness.
//!
//! Coordinates are metres in a right-handed, y-up frame.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub joint_count: usize,
    pub joint_names: Vec<String>,
    /// Joint whose trajectory defines the path (pelvis / torso centre).
    pub root_index: usize,
    pub bone_edges: Vec<(usize, usize)>,
}

const GTA_JOINTS: [&str; 21] = [
    "head",
    "neck",
    "right_clavicle",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_clavicle",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "spine0",
    "spine1",
    "spine2",
    "spine3",
    "spine4",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
];

const GTA_BONES: [(usize, usize); 20] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (4, 5),
    (1, 6),
    (6, 7),
    (7, 8),
    (8, 9),
    (1, 10),
    (10, 11),
    (11, 12),
    (12, 13),
    (13, 14),
    (14, 15),
    (15, 16),
    (16, 17),
    (14, 18),
    (18, 19),
    (19, 20),
];

const PROX_JOINTS: [&str; 18] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "neck",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
];

const PROX_BONES: [(usize, usize); 17] = [
    (0, 1),
    (0, 2),
    (0, 3),
    (1, 4),
    (2, 5),
    (3, 6),
    (4, 7),
    (5, 8),
    (6, 9),
    (9, 10),
    (10, 11),
    (9, 12),
    (9, 13),
    (12, 14),
    (13, 15),
    (14, 16),
    (15, 17),
];

impl SkeletonSpec {
    /// 21-joint skeleton with the spine chain as root path joint.
    pub fn gta_im() -> Self {
        Self {
            joint_count: 21,
            joint_names: GTA_JOINTS.iter().map(|s| s.to_string()).collect(),
            root_index: 14,
            bone_edges: GTA_BONES.to_vec(),
        }
    }

    /// 18-joint skeleton rooted at the pelvis.
    pub fn prox() -> Self {
        Self {
            joint_count: 18,
            joint_names: PROX_JOINTS.iter().map(|s| s.to_string()).collect(),
            root_index: 0,
            bone_edges: PROX_BONES.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.joint_count < 2 {
            return Err(Error::InvalidConfig(format!(
                "skeleton needs at least 2 joints, got {}",
                self.joint_count
            )));
        }
        if self.joint_names.len() != self.joint_count {
            return Err(Error::InvalidConfig(format!(
                "{} joint names for {} joints",
                self.joint_names.len(),
                self.joint_count
            )));
        }
        if self.root_index >= self.joint_count {
            return Err(Error::InvalidConfig(format!(
                "root index {} out of range",
                self.root_index
            )));
        }
        if let Some((a, b)) = self
            .bone_edges
            .iter()
            .find(|(a, b)| *a >= self.joint_count || *b >= self.joint_count)
        {
            return Err(Error::InvalidConfig(format!("bone ({a}, {b}) out of range")));
        }
        Ok(())
    }

    /// Mean bone length of a single pose.
    pub fn mean_bone_length(&self, pose: &[Point3]) -> f64 {
        if self.bone_edges.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .bone_edges
            .iter()
            .map(|&(a, b)| distance(&pose[a], &pose[b]))
            .sum();
        total / self.bone_edges.len() as f64
    }
}

pub fn distance(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// `F × N_b × 3` joint positions sampled at `fps`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    joint_count: usize,
    fps: f64,
    positions: Vec<Point3>,
}

impl MotionSequence {
    /// `frames[f][j]` is joint `j` at frame `f`. Panics on ragged input.
    pub fn new(frames: Vec<Vec<Point3>>, fps: f64) -> Self {
        let joint_count = frames.first().map_or(0, Vec::len);
        let mut positions = Vec::with_capacity(frames.len() * joint_count);
        for f in frames {
            assert_eq!(f.len(), joint_count, "ragged motion frames");
            positions.extend(f);
        }
        Self {
            joint_count,
            fps,
            positions,
        }
    }

    pub fn from_flat(joint_count: usize, fps: f64, positions: Vec<Point3>) -> Self {
        assert!(joint_count > 0 && positions.len() % joint_count == 0);
        Self {
            joint_count,
            fps,
            positions,
        }
    }

    /// Inverse of [`MotionSequence::to_tensor`].
    pub fn from_tensor(t: &Tensor, fps: f64) -> Self {
        assert_eq!(t.cols() % 3, 0, "motion tensor width must be a multiple of 3");
        let positions = t
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Self::from_flat(t.cols() / 3, fps, positions)
    }

    /// `F × (N_b·3)`, one row per frame.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.frame_count(),
            self.joint_count * 3,
            self.positions.iter().flatten().copied().collect(),
        )
    }

    pub fn frame_count(&self) -> usize {
        if self.joint_count == 0 {
            0
        } else {
            self.positions.len() / self.joint_count
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frame(&self, f: usize) -> &[Point3] {
        &self.positions[f * self.joint_count..(f + 1) * self.joint_count]
    }

    pub fn joint(&self, f: usize, j: usize) -> Point3 {
        self.positions[f * self.joint_count + j]
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut [Point3] {
        &mut self.positions
    }

    pub fn frames(&self) -> impl Iterator<Item = &[Point3]> {
        self.positions.chunks_exact(self.joint_count.max(1))
    }

    pub fn translated(&self, offset: Point3) -> Self {
        let mut out = self.clone();
        for p in &mut out.positions {
            for a in 0..3 {
                p[a] += offset[a];
            }
        }
        out
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frame_count(), self.joint_count)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePointCloud {
    pub points: Vec<Point3>,
}

impl ScenePointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounds `(min, max)`; `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(mut lo, mut hi), p| {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
            (lo, hi)
        }))
    }

    pub fn translated(&self, offset: Point3) -> Self {
        Self::new(
            self.points
                .iter()
                .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
                .collect(),
        )
    }

    /// `N × 3`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.points.len(),
            3,
            self.points.iter().flatten().copied().collect(),
        )
    }
}

/// Free-form per-sample tags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub behavior: String,
    pub seed: u64,
    #[serde(default, flatten)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: ScenePointCloud,
    pub history: MotionSequence,
    pub future: MotionSequence,
    pub meta: SampleMeta,
}

impl Sample {
    /// Root position in the last history frame.
    pub fn anchor(&self, skeleton: &SkeletonSpec) -> Point3 {
        let last = self.history.frame_count() - 1;
        self.history.joint(last, skeleton.root_index)
    }

    pub fn translated(&self, offset: Point3) -> Self {
        Self {
            scene: self.scene.translated(offset),
            history: self.history.translated(offset),
            future: self.future.translated(offset),
            meta: self.meta.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyScene,
    NonFiniteScenePoint { index: usize },
    EmptyHistory,
    EmptyFuture,
    NonFiniteJoint { sequence: &'static str, frame: usize, joint: usize },
    JointCountMismatch { sequence: &'static str, expected: usize, actual: usize },
    FpsMismatch { history: f64, future: f64 },
    NonPositiveFps { fps: f64 },
    Skeleton(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyScene => write!(f, "scene has no points"),
            Violation::NonFiniteScenePoint { index } => {
                write!(f, "scene point {index} is not finite")
            }
            Violation::EmptyHistory => write!(f, "history has no frames"),
            Violation::EmptyFuture => write!(f, "future has no frames"),
            Violation::NonFiniteJoint { sequence, frame, joint } => {
                write!(f, "{sequence} frame {frame} joint {joint} is not finite")
            }
            Violation::JointCountMismatch { sequence, expected, actual } => {
                write!(f, "{sequence} has {actual} joints, skeleton has {expected}")
            }
            Violation::FpsMismatch { history, future } => {
                write!(f, "history fps {history} differs from future fps {future}")
            }
            Violation::NonPositiveFps { fps } => write!(f, "fps {fps} is not positive"),
            Violation::Skeleton(msg) => write!(f, "skeleton: {msg}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every violated sample invariant. An empty report means the sample
/// is valid for `skeleton`.
pub fn validate_sample(sample: &Sample, skeleton: &SkeletonSpec) -> ValidationReport {
    let mut violations = Vec::new();
    if let Err(Error::InvalidConfig(msg)) = skeleton.validate() {
        violations.push(Violation::Skeleton(msg));
    }
    if sample.scene.is_empty() {
        violations.push(Violation::EmptyScene);
    }
    for (index, p) in sample.scene.points.iter().enumerate() {
        if !p.iter().all(|c| c.is_finite()) {
            violations.push(Violation::NonFiniteScenePoint { index });
        }
    }
    for (name, seq) in [("history", &sample.history), ("future", &sample.future)] {
        if seq.frame_count() == 0 {
            violations.push(if name == "history" {
                Violation::EmptyHistory
            } else {
                Violation::EmptyFuture
            });
            continue;
        }
        if seq.joint_count() != skeleton.joint_count {
            violations.push(Violation::JointCountMismatch {
                sequence: name,
                expected: skeleton.joint_count,
                actual: seq.joint_count(),
            });
        }
        if !(seq.fps() > 0.0) {
            violations.push(Violation::NonPositiveFps { fps: seq.fps() });
        }
        for (frame, joints) in seq.frames().enumerate() {
            for (joint, p) in joints.iter().enumerate() {
                if !p.iter().all(|c| c.is_finite()) {
                    violations.push(Violation::NonFiniteJoint {
                        sequence: name,
                        frame,
                        joint,
                    });
                }
            }
        }
    }
    if sample.history.fps() != sample.future.fps() {
        violations.push(Violation::FpsMismatch {
            history: sample.history.fps(),
            future: sample.future.fps(),
        });
    }
    ValidationReport { violations }
}

/// Translates the whole sample so the root joint of the last history frame
/// sits at the origin. Returns the centred sample and the offset that was
/// subtracted; adding the offset back restores the input.
pub fn center_sample(sample: &Sample, skeleton: &SkeletonSpec) -> (Sample, Point3) {
    let offset = sample.anchor(skeleton);
    let centred = sample.translated([-offset[0], -offset[1], -offset[2]]);
    (centred, offset)
}

pub fn uncenter_motion(seq: &MotionSequence, offset: Point3) -> MotionSequence {
    seq.translated(offset)
}

/// Seed plus stream id. Every draw in the crate goes through one of these;
/// the same `(seed, stream)` always yields the same sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngHandle {
    pub seed: u64,
    pub stream: u64,
}

impl RngHandle {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// A handle on an independent stream keyed by `(self, tag)`.
    pub fn derive(&self, tag: u64) -> Self {
        // splitmix-style mixing keeps derived streams distinct
        let mut x = self.stream ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
        Self {
            seed: self.seed,
            stream: x,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// `n` standard-normal draws from a fresh generator.
    pub fn normal_vec(&self, n: usize) -> Vec<f64> {
        let mut rng = self.rng();
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
