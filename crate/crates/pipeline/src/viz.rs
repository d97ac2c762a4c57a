//! Static images of predictions: one oblique view per future frame, a
//! top-down trajectory plot and a JSON dump of everything plotted.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_line_segment_mut};
use mcld_core::domain::{MotionSequence, Point3, Sample, SkeletonSpec};
use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};

pub const IMAGE_SIZE: u32 = 512;
const MARGIN: f32 = 24.0;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const SCENE: Rgb<u8> = Rgb([175, 175, 175]);
const HISTORY: Rgb<u8> = Rgb([40, 90, 220]);

fn prediction_colour(i: usize) -> Rgb<u8> {
    let shade = (40 * (i % 4)) as u8;
    Rgb([220, 50 + shade, 50 + shade])
}

type Frames32 = Vec<Vec<[f32; 3]>>;

/// Everything drawn, as written to `viz.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VizData {
    pub joint_names: Vec<String>,
    pub bone_edges: Vec<(usize, usize)>,
    pub scene: Vec<[f32; 3]>,
    pub history: Frames32,
    pub predictions: Vec<Frames32>,
}

fn frames32(m: &MotionSequence) -> Frames32 {
    m.frames().map(|f| f.iter().map(|p| p.map(|c| c as f32)).collect()).collect()
}

/// Maps 3-D points to pixels with a shared uniform scale.
struct Canvas {
    project: fn(&Point3) -> (f64, f64),
    lo: (f64, f64),
    scale: f64,
}

impl Canvas {
    fn fit<'a>(project: fn(&Point3) -> (f64, f64), points: impl Iterator<Item = &'a Point3>) -> Self {
        let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
        for p in points {
            let (u, v) = project(p);
            lo = (lo.0.min(u), lo.1.min(v));
            hi = (hi.0.max(u), hi.1.max(v));
        }
        if !lo.0.is_finite() {
            lo = (0.0, 0.0);
            hi = (1.0, 1.0);
        }
        let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-6);
        let scale = (IMAGE_SIZE as f64 - 2.0 * MARGIN as f64) / span;
        Self { project, lo, scale }
    }

    fn pixel(&self, p: &Point3) -> (f32, f32) {
        let (u, v) = (self.project)(p);
        let x = MARGIN as f64 + (u - self.lo.0) * self.scale;
        // image rows grow downwards
        let y = IMAGE_SIZE as f64 - MARGIN as f64 - (v - self.lo.1) * self.scale;
        (x as f32, y as f32)
    }

    fn dot(&self, img: &mut RgbImage, p: &Point3, r: i32, c: Rgb<u8>) {
        let (x, y) = self.pixel(p);
        draw_filled_circle_mut(img, (x.round() as i32, y.round() as i32), r, c);
    }

    fn line(&self, img: &mut RgbImage, a: &Point3, b: &Point3, c: Rgb<u8>) {
        draw_line_segment_mut(img, self.pixel(a), self.pixel(b), c);
    }

    fn skeleton(&self, img: &mut RgbImage, pose: &[Point3], sk: &SkeletonSpec, c: Rgb<u8>) {
        for &(a, b) in &sk.bone_edges {
            self.line(img, &pose[a], &pose[b], c);
        }
        for p in pose {
            self.dot(img, p, 2, c);
        }
    }
}

fn oblique(p: &Point3) -> (f64, f64) {
    let k = 0.5 * std::f64::consts::FRAC_1_SQRT_2;
    (p[0] + k * p[2], p[1] + k * p[2])
}

fn top_down(p: &Point3) -> (f64, f64) {
    (p[0], p[2])
}

fn blank() -> RgbImage {
    RgbImage::from_pixel(IMAGE_SIZE, IMAGE_SIZE, BACKGROUND)
}

fn save(img: &RgbImage, path: PathBuf, out: &mut Vec<PathBuf>) -> Result<()> {
    img.save(&path)
        .map_err(|e| Error::Io {
            source: std::io::Error::other(e.to_string()),
            path: path.clone(),
        })?;
    out.push(path);
    Ok(())
}

/// Writes `frame_XX.png` for each of the sample's future frames,
/// `trajectory.png` and `viz.json` into `out_dir`; returns the paths.
pub fn export_viz(sample: &Sample, predictions: &[MotionSequence], skeleton: &SkeletonSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::new();
    let everything = || {
        sample
            .scene
            .points
            .iter()
            .chain(sample.history.positions())
            .chain(predictions.iter().flat_map(|p| p.positions()))
    };
    let last_history = sample.history.frame(sample.history.frame_count() - 1);

    let frame_view = Canvas::fit(oblique, everything());
    for t in 0..sample.future.frame_count() {
        let mut img = blank();
        for p in &sample.scene.points {
            frame_view.dot(&mut img, p, 1, SCENE);
        }
        frame_view.skeleton(&mut img, last_history, skeleton, HISTORY);
        for (i, pred) in predictions.iter().enumerate() {
            if t < pred.frame_count() {
                frame_view.skeleton(&mut img, pred.frame(t), skeleton, prediction_colour(i));
            }
        }
        save(&img, out_dir.join(format!("frame_{t:02}.png")), &mut written)?;
    }

    let plan = Canvas::fit(top_down, everything());
    let mut img = blank();
    for p in &sample.scene.points {
        plan.dot(&mut img, p, 1, SCENE);
    }
    let root = skeleton.root_index;
    let path_of = |m: &MotionSequence| -> Vec<Point3> { (0..m.frame_count()).map(|f| m.joint(f, root)).collect() };
    let history_path = path_of(&sample.history);
    for w in history_path.windows(2) {
        plan.line(&mut img, &w[0], &w[1], HISTORY);
    }
    for p in &history_path {
        plan.dot(&mut img, p, 3, HISTORY);
    }
    for (i, pred) in predictions.iter().enumerate() {
        let mut path = vec![*history_path.last().expect("history has frames")];
        path.extend(path_of(pred));
        for w in path.windows(2) {
            plan.line(&mut img, &w[0], &w[1], prediction_colour(i));
        }
        for p in &path[1..] {
            plan.dot(&mut img, p, 2, prediction_colour(i));
        }
    }
    save(&img, out_dir.join("trajectory.png"), &mut written)?;

    let data = VizData {
        joint_names: skeleton.joint_names.clone(),
        bone_edges: skeleton.bone_edges.clone(),
        scene: sample.scene.points.iter().map(|p| p.map(|c| c as f32)).collect(),
        history: frames32(&sample.history),
        predictions: predictions.iter().map(frames32).collect(),
    };
    let json_path = out_dir.join("viz.json");
    let text = serde_json::to_string(&data).expect("viz data serializes");
    std::fs::write(&json_path, text).map_err(io(&json_path))?;
    written.push(json_path);
    Ok(written)
}
