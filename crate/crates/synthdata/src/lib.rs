//! Synthetic scene and motion data standing in for captured indoor datasets.
//!
//! Rooms are floor planes with box obstacles sampled into point clouds;
//! motions follow one of a few behaviours with a rigid skeleton template.

pub mod dataset;
pub mod error;
pub mod motion;
pub mod scene;

pub use dataset::{generate_dataset, read_dataset, read_skeleton, write_dataset, DatasetSpec};
pub use error::{Error, Result};
pub use motion::{generate_motion, BehaviorKind, BehaviorSpec};
pub use scene::{generate_room, generate_scene, Obstacle, Room, RoomSpec};
