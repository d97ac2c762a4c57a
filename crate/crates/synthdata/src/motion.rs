//! Root trajectories for a handful of indoor behaviours, dressed with a
//! rigid joint template and a phase-driven gait.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use mcld_core::domain::{MotionSequence, Point3, RngHandle, Sample, SampleMeta, SkeletonSpec};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Room;

/// Minimum horizontal gap between the root and any obstacle footprint.
pub const CLEARANCE: f64 = 0.1;
/// Minimum gap between the root and the walls.
pub const WALL_MARGIN: f64 = 0.2;
pub const ROOT_HEIGHT: f64 = 0.95;
pub const SEATED_ROOT_HEIGHT: f64 = 0.55;
/// Distance covered by one full gait cycle.
pub const STRIDE: f64 = 1.2;
pub const MAX_PATH_TRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    WalkStraight,
    WalkTurn,
    CircleObstacle,
    ApproachAndSit,
    Idle,
}

impl BehaviorKind {
    pub const ALL: [BehaviorKind; 5] = [
        BehaviorKind::WalkStraight,
        BehaviorKind::WalkTurn,
        BehaviorKind::CircleObstacle,
        BehaviorKind::ApproachAndSit,
        BehaviorKind::Idle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BehaviorKind::WalkStraight => "walk_straight",
            BehaviorKind::WalkTurn => "walk_turn",
            BehaviorKind::CircleObstacle => "circle_obstacle",
            BehaviorKind::ApproachAndSit => "approach_and_sit",
            BehaviorKind::Idle => "idle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSpec {
    pub kind: BehaviorKind,
    /// Walking speed interval in m/s.
    pub speed_range: [f64; 2],
}

impl BehaviorSpec {
    pub fn new(kind: BehaviorKind) -> Self {
        Self {
            kind,
            speed_range: [0.6, 1.2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.speed_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidSpec(format!("speed range {lo}..{hi}")));
        }
        Ok(())
    }

    fn speed<R: Rng>(&self, r: &mut R) -> f64 {
        let [lo, hi] = self.speed_range;
        if lo == hi {
            lo
        } else {
            r.random_range(lo..=hi)
        }
    }
}

/// Per-frame root state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootState {
    pub x: f64,
    pub z: f64,
    pub heading: f64,
    /// 0 standing, 1 fully seated.
    pub seated: f64,
    /// Gait phase in radians, advanced by distance walked.
    pub phase: f64,
}

fn path_is_clear(room: &Room, path: &[RootState]) -> bool {
    path.iter()
        .all(|s| room.inside(s.x, s.z, WALL_MARGIN) && room.clearance(s.x, s.z) >= CLEARANCE)
}

fn with_phase(mut path: Vec<RootState>) -> Vec<RootState> {
    let mut walked = 0.0;
    for i in 1..path.len() {
        walked += (path[i].x - path[i - 1].x).hypot(path[i].z - path[i - 1].z);
        path[i].phase = TAU * walked / STRIDE;
    }
    path
}

fn free_point<R: Rng>(room: &Room, r: &mut R) -> (f64, f64) {
    let x = r.random_range(0.0..=room.extents[0]);
    let z = r.random_range(0.0..=room.extents[2]);
    (x, z)
}

fn state(x: f64, z: f64, heading: f64) -> RootState {
    RootState {
        x,
        z,
        heading,
        seated: 0.0,
        phase: 0.0,
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn propose_path<R: Rng>(room: &Room, spec: &BehaviorSpec, frames: usize, fps: f64, r: &mut R) -> Option<Vec<RootState>> {
    let step = spec.speed(r) / fps;
    match spec.kind {
        BehaviorKind::Idle => {
            let (x, z) = free_point(room, r);
            let h = r.random_range(0.0..TAU);
            Some(vec![state(x, z, h); frames])
        }
        BehaviorKind::WalkStraight => {
            let (x, z) = free_point(room, r);
            let h = r.random_range(0.0..TAU);
            let (c, s) = (h.cos(), h.sin());
            Some(
                (0..frames)
                    .map(|t| state(x + t as f64 * step * c, z + t as f64 * step * s, h))
                    .collect(),
            )
        }
        BehaviorKind::WalkTurn => {
            let (mut x, mut z) = free_point(room, r);
            let mut h = r.random_range(0.0..TAU);
            let start = r.random_range(frames / 4..=frames / 2);
            let span = (frames / 3).max(1);
            let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
            let rate = sign * r.random_range(PI / 3.0..=FRAC_PI_2) / span as f64;
            let mut out = Vec::with_capacity(frames);
            for t in 0..frames {
                out.push(state(x, z, h));
                if t >= start && t < start + span {
                    h += rate;
                }
                x += step * h.cos();
                z += step * h.sin();
            }
            Some(out)
        }
        BehaviorKind::CircleObstacle => {
            if room.obstacles.is_empty() {
                return None;
            }
            let o = room.obstacles[r.random_range(0..room.obstacles.len())];
            let [cx, cz] = o.centre_xz();
            let radius = o.footprint_radius() + r.random_range(0.3..=0.6);
            let dir = if r.random::<bool>() { 1.0 } else { -1.0 };
            let theta0 = r.random_range(0.0..TAU);
            let dtheta = dir * step / radius;
            Some(
                (0..frames)
                    .map(|t| {
                        let th = theta0 + t as f64 * dtheta;
                        state(cx + radius * th.cos(), cz + radius * th.sin(), th + dir * FRAC_PI_2)
                    })
                    .collect(),
            )
        }
        BehaviorKind::ApproachAndSit => {
            if room.obstacles.is_empty() {
                return None;
            }
            let o = room.obstacles[r.random_range(0..room.obstacles.len())];
            let [cx, cz] = o.centre_xz();
            let (hx, hz) = ((o.max[0] - o.min[0]) / 2.0, (o.max[2] - o.min[2]) / 2.0);
            // outward normal of a random face and the seat point in front of it
            let (nx, nz, reach) = match r.random_range(0..4) {
                0 => (1.0, 0.0, hx),
                1 => (-1.0, 0.0, hx),
                2 => (0.0, 1.0, hz),
                _ => (0.0, -1.0, hz),
            };
            let gap = 0.25;
            let (sx, sz) = (cx + nx * (reach + gap), cz + nz * (reach + gap));
            let walking = ((frames as f64) * 0.6).round() as usize;
            let toward = f64::atan2(-nz, -nx);
            let mut out = Vec::with_capacity(frames);
            for t in 0..frames {
                if t < walking {
                    let back = (walking - t) as f64 * step;
                    out.push(state(sx + nx * back, sz + nz * back, toward));
                } else {
                    let u = smoothstep((t - walking + 1) as f64 / (frames - walking) as f64);
                    let mut s = state(sx, sz, toward + PI * u);
                    s.seated = u;
                    out.push(s);
                }
            }
            Some(out)
        }
    }
}

/// Joint offset in the body frame `(forward, up, lateral)` and its limb role.
#[derive(Debug, Clone, Copy)]
enum Role {
    Torso,
    Arm { side: f64, swing: f64 },
    Leg { side: f64, swing: f64, knee: bool, ankle: bool },
}

/// Spine joints are numbered from the neck down when the skeleton has a
/// `spine4`, and from the pelvis up otherwise.
fn template(name: &str, index: usize, top_down_spine: bool) -> ([f64; 3], Role) {
    let side = if name.starts_with("left") { 1.0 } else { -1.0 };
    if let Some(n) = name.strip_prefix("spine").and_then(|n| n.parse::<f64>().ok()) {
        let up = if top_down_spine { 0.46 - 0.115 * n } else { 0.13 * n };
        return ([0.0, up, 0.0], Role::Torso);
    }
    match name {
        "pelvis" => ([0.0, 0.0, 0.0], Role::Torso),
        "neck" => ([0.0, 0.56, 0.0], Role::Torso),
        "head" => ([0.02, 0.72, 0.0], Role::Torso),
        "left_clavicle" | "right_clavicle" => ([0.0, 0.52, side * 0.08], Role::Torso),
        "left_shoulder" | "right_shoulder" => ([0.0, 0.5, side * 0.19], Role::Arm { side, swing: 0.02 }),
        "left_elbow" | "right_elbow" => ([0.0, 0.22, side * 0.22], Role::Arm { side, swing: 0.07 }),
        "left_wrist" | "right_wrist" => ([0.02, -0.02, side * 0.23], Role::Arm { side, swing: 0.14 }),
        "left_hip" | "right_hip" => ([0.0, -0.06, side * 0.1], Role::Leg { side, swing: 0.0, knee: false, ankle: false }),
        "left_knee" | "right_knee" => ([0.0, -0.48, side * 0.1], Role::Leg { side, swing: 0.12, knee: true, ankle: false }),
        "left_ankle" | "right_ankle" => ([0.0, -0.9, side * 0.1], Role::Leg { side, swing: 0.25, knee: false, ankle: true }),
        _ => ([0.0, 0.05 * index as f64, 0.0], Role::Torso),
    }
}

/// Joint positions for one root state; `idle_phase` drives a slow arm sway.
fn pose(skeleton: &SkeletonSpec, root: &RootState, idle_phase: f64) -> Vec<Point3> {
    let height = ROOT_HEIGHT - (ROOT_HEIGHT - SEATED_ROOT_HEIGHT) * root.seated;
    let (f, l) = ([root.heading.cos(), root.heading.sin()], [-root.heading.sin(), root.heading.cos()]);
    let root_pos = [root.x, height, root.z];
    let sin = root.phase.sin();
    let sway = 0.02 * idle_phase.sin();
    let top_down = skeleton.joint_names.iter().any(|n| n == "spine4");
    skeleton
        .joint_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            if j == skeleton.root_index {
                return root_pos;
            }
            let ([mut fw, mut up, lat], role) = template(name, j, top_down);
            match role {
                Role::Torso => {}
                Role::Arm { side, swing } => fw += -side * swing * sin + sway,
                Role::Leg { side, swing, knee, ankle } => {
                    fw += side * swing * sin;
                    if knee {
                        fw += 0.45 * root.seated;
                        up += 0.43 * root.seated;
                    }
                    if ankle {
                        fw += 0.45 * root.seated;
                        up += 0.4 * root.seated;
                    }
                }
            }
            [
                root_pos[0] + fw * f[0] + lat * l[0],
                root_pos[1] + up,
                root_pos[2] + fw * f[1] + lat * l[1],
            ]
        })
        .collect()
}

/// One sample in `room`: `history_frames` observed frames followed by
/// `future_frames` frames to predict.
pub fn generate_motion(
    room: &Room,
    spec: &BehaviorSpec,
    skeleton: &SkeletonSpec,
    history_frames: usize,
    future_frames: usize,
    fps: f64,
    rng: RngHandle,
) -> Result<Sample> {
    spec.validate()?;
    if history_frames == 0 || future_frames == 0 {
        return Err(Error::InvalidSpec("history and future need at least one frame".into()));
    }
    if !(fps > 0.0) {
        return Err(Error::InvalidSpec(format!("fps {fps} must be positive")));
    }
    let frames = history_frames + future_frames;
    let mut r = rng.rng();
    let path = (0..MAX_PATH_TRIES)
        .find_map(|_| propose_path(room, spec, frames, fps, &mut r).filter(|p| path_is_clear(room, p)))
        .ok_or_else(|| Error::PathFailure {
            behavior: spec.kind.name().to_string(),
        })?;
    let path = with_phase(path);
    let sway_offset = r.random_range(0.0..TAU);
    let poses: Vec<Vec<Point3>> = path
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let idle = if spec.kind == BehaviorKind::Idle {
                sway_offset + TAU * t as f64 / (3.0 * fps)
            } else {
                0.0
            };
            pose(skeleton, s, idle)
        })
        .collect();
    let future = poses[history_frames..].to_vec();
    let history = poses[..history_frames].to_vec();
    Ok(Sample {
        scene: room.cloud.clone(),
        history: MotionSequence::new(history, fps),
        future: MotionSequence::new(future, fps),
        meta: SampleMeta {
            behavior: spec.kind.name().to_string(),
            seed: rng.seed,
            extra: Default::default(),
        },
    })
}
