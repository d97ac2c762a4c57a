//! Rooms: a floor plane plus axis-aligned box obstacles, sampled as points.
//!
//! Coordinates are y-up; the floor is `y = 0` spanning `[0, extents.x] × [0, extents.z]`.

use mcld_core::domain::{Point3, RngHandle, ScenePointCloud};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Obstacle placement gives up after this many rejected draws.
pub const MAX_PLACEMENT_TRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub extents: Point3,
    pub obstacle_count: usize,
    pub obstacle_size_min: Point3,
    pub obstacle_size_max: Point3,
    pub points_per_m2: f64,
}

impl Default for RoomSpec {
    fn default() -> Self {
        Self {
            extents: [5.0, 2.5, 5.0],
            obstacle_count: 2,
            obstacle_size_min: [0.4, 0.4, 0.4],
            obstacle_size_max: [1.0, 1.0, 1.0],
            points_per_m2: 40.0,
        }
    }
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.extents.iter().all(|&e| e > 0.0 && e.is_finite()) {
            return Err(Error::InvalidSpec(format!("extents {:?} must be positive", self.extents)));
        }
        if !(self.points_per_m2 > 0.0) {
            return Err(Error::InvalidSpec("points_per_m2 must be positive".into()));
        }
        for a in 0..3 {
            let (lo, hi) = (self.obstacle_size_min[a], self.obstacle_size_max[a]);
            if !(lo > 0.0 && lo <= hi && hi <= self.extents[a]) {
                return Err(Error::InvalidSpec(format!(
                    "obstacle size range {lo}..{hi} invalid on axis {a}"
                )));
            }
        }
        Ok(())
    }
}

/// Axis-aligned box resting on the floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub min: Point3,
    pub max: Point3,
}

impl Obstacle {
    pub fn centre_xz(&self) -> [f64; 2] {
        [(self.min[0] + self.max[0]) / 2.0, (self.min[2] + self.max[2]) / 2.0]
    }

    /// Half the footprint diagonal.
    pub fn footprint_radius(&self) -> f64 {
        let dx = self.max[0] - self.min[0];
        let dz = self.max[2] - self.min[2];
        (dx * dx + dz * dz).sqrt() / 2.0
    }

    /// Horizontal distance from `(x, z)` to the footprint rectangle; zero inside.
    pub fn footprint_distance(&self, x: f64, z: f64) -> f64 {
        let dx = (self.min[0] - x).max(0.0).max(x - self.max[0]);
        let dz = (self.min[2] - z).max(0.0).max(z - self.max[2]);
        (dx * dx + dz * dz).sqrt()
    }

    fn footprints_overlap(&self, other: &Obstacle, gap: f64) -> bool {
        self.min[0] < other.max[0] + gap
            && other.min[0] < self.max[0] + gap
            && self.min[2] < other.max[2] + gap
            && other.min[2] < self.max[2] + gap
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Room {
    pub extents: Point3,
    pub obstacles: Vec<Obstacle>,
    pub cloud: ScenePointCloud,
}

impl Room {
    /// Smallest horizontal distance from `(x, z)` to any obstacle footprint.
    pub fn clearance(&self, x: f64, z: f64) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.footprint_distance(x, z))
            .fold(f64::INFINITY, f64::min)
    }

    /// Inside the floor rectangle shrunk by `margin`.
    pub fn inside(&self, x: f64, z: f64, margin: f64) -> bool {
        x >= margin && x <= self.extents[0] - margin && z >= margin && z <= self.extents[2] - margin
    }
}

fn count_for(area: f64, density: f64) -> usize {
    (area * density).round() as usize
}

fn sample_rect<R: Rng>(rng: &mut R, n: usize, out: &mut Vec<Point3>, f: impl Fn(f64, f64) -> Point3) {
    for _ in 0..n {
        let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
        out.push(f(u, v));
    }
}

/// Obstacles plus the sampled cloud. The floor gets `round(x·z·density)`
/// points; each obstacle gets its top and four side faces.
pub fn generate_room(spec: &RoomSpec, rng: RngHandle) -> Result<Room> {
    spec.validate()?;
    let mut r = rng.rng();
    let [ex, _, ez] = spec.extents;
    let mut obstacles: Vec<Obstacle> = Vec::with_capacity(spec.obstacle_count);
    let mut tries = 0;
    while obstacles.len() < spec.obstacle_count {
        if tries == MAX_PLACEMENT_TRIES {
            return Err(Error::PlacementFailure {
                count: spec.obstacle_count,
                tries,
            });
        }
        tries += 1;
        let size: Vec<f64> = (0..3)
            .map(|a| r.random_range(spec.obstacle_size_min[a]..=spec.obstacle_size_max[a]))
            .collect();
        let x0 = r.random_range(0.0..=ex - size[0]);
        let z0 = r.random_range(0.0..=ez - size[2]);
        let candidate = Obstacle {
            min: [x0, 0.0, z0],
            max: [x0 + size[0], size[1], z0 + size[2]],
        };
        if obstacles.iter().all(|o| !o.footprints_overlap(&candidate, 0.0)) {
            obstacles.push(candidate);
        }
    }

    let d = spec.points_per_m2;
    let mut points = Vec::new();
    sample_rect(&mut r, count_for(ex * ez, d), &mut points, |u, v| [u * ex, 0.0, v * ez]);
    for o in &obstacles {
        let [x0, _, z0] = o.min;
        let [x1, h, z1] = o.max;
        let (w, dz) = (x1 - x0, z1 - z0);
        sample_rect(&mut r, count_for(w * dz, d), &mut points, |u, v| [x0 + u * w, h, z0 + v * dz]);
        for x in [x0, x1] {
            sample_rect(&mut r, count_for(dz * h, d), &mut points, |u, v| [x, v * h, z0 + u * dz]);
        }
        for z in [z0, z1] {
            sample_rect(&mut r, count_for(w * h, d), &mut points, |u, v| [x0 + u * w, v * h, z]);
        }
    }
    Ok(Room {
        extents: spec.extents,
        obstacles,
        cloud: ScenePointCloud::new(points),
    })
}

pub fn generate_scene(spec: &RoomSpec, rng: RngHandle) -> Result<ScenePointCloud> {
    generate_room(spec, rng).map(|room| room.cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_only_room_has_area_times_density_points() {
        let spec = RoomSpec {
            extents: [4.0, 3.0, 4.0],
            obstacle_count: 0,
            points_per_m2: 12.5,
            ..RoomSpec::default()
        };
        let cloud = generate_scene(&spec, RngHandle::new(1)).unwrap();
        assert_eq!(cloud.len(), 200);
        assert!(cloud.points.iter().all(|p| p[1] == 0.0));
    }

    #[test]
    fn points_stay_inside_extents_and_obstacles_do_not_overlap() {
        for seed in 0..20 {
            let room = generate_room(&RoomSpec::default(), RngHandle::new(seed)).unwrap();
            for p in &room.cloud.points {
                for a in 0..3 {
                    assert!(p[a] >= 0.0 && p[a] <= room.extents[a], "{p:?}");
                }
            }
            for (i, a) in room.obstacles.iter().enumerate() {
                for b in &room.obstacles[i + 1..] {
                    assert!(!a.footprints_overlap(b, 0.0));
                }
            }
        }
    }

    #[test]
    fn same_seed_same_cloud() {
        let a = generate_scene(&RoomSpec::default(), RngHandle::new(3)).unwrap();
        let b = generate_scene(&RoomSpec::default(), RngHandle::new(3)).unwrap();
        let c = generate_scene(&RoomSpec::default(), RngHandle::new(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn crowded_room_fails_placement() {
        let spec = RoomSpec {
            extents: [1.0, 1.0, 1.0],
            obstacle_count: 3,
            obstacle_size_min: [0.8, 0.5, 0.8],
            obstacle_size_max: [0.9, 0.5, 0.9],
            points_per_m2: 10.0,
        };
        assert!(matches!(
            generate_room(&spec, RngHandle::new(0)),
            Err(Error::PlacementFailure { tries: MAX_PLACEMENT_TRIES, .. })
        ));
    }

    #[test]
    fn footprint_distance_hand_values() {
        let o = Obstacle {
            min: [1.0, 0.0, 1.0],
            max: [2.0, 1.0, 3.0],
        };
        assert_eq!(o.footprint_distance(1.5, 2.0), 0.0);
        assert_eq!(o.footprint_distance(0.0, 2.0), 1.0);
        assert!((o.footprint_distance(5.0, 7.0) - 5.0).abs() < 1e-12);
    }
}
