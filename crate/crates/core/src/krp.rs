//! Key region proposal: regress an axis-aligned box from the motion history
//! and cut the scene down to the points inside it.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::domain::{MotionSequence, Point3, RngHandle, ScenePointCloud, SkeletonSpec};
use crate::error::{Error, Result};
use crate::nn::{self, Initializer, ParamStore};
use crate::tensor::Tensor;

/// Minimum box side length in metres.
pub const DIM_FLOOR: f64 = 0.5;
/// Proposed boxes may not exceed this multiple of the scene bounding-box volume.
pub const VOLUME_BOUND_FACTOR: f64 = 10.0;
/// Side length of the box proposed by an untrained network.
pub const INITIAL_SIDE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyRegionBox {
    /// Minimum corner.
    pub origin: Point3,
    /// Length, height and width along x, y, z.
    pub dims: Point3,
}

impl KeyRegionBox {
    pub fn new(origin: Point3, dims: Point3) -> Self {
        Self { origin, dims }
    }

    /// Tight box around a cloud.
    pub fn bounding(cloud: &ScenePointCloud) -> Option<Self> {
        let (lo, hi) = cloud.bounds()?;
        Some(Self {
            origin: lo,
            dims: [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
        })
    }

    pub fn max_corner(&self) -> Point3 {
        [
            self.origin[0] + self.dims[0],
            self.origin[1] + self.dims[1],
            self.origin[2] + self.dims[2],
        ]
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    /// Closed-interval containment on every axis.
    pub fn contains(&self, p: &Point3) -> bool {
        let hi = self.max_corner();
        (0..3).all(|a| self.origin[a] <= p[a] && p[a] <= hi[a])
    }

    /// Factor applied to every side so the volume does not exceed `max_volume`.
    pub fn shrink_factor(&self, max_volume: f64) -> f64 {
        let v = self.volume();
        if v > max_volume && v > 0.0 {
            (max_volume / v).cbrt()
        } else {
            1.0
        }
    }

    /// Uniformly scales the sides (keeping the origin) to respect `max_volume`.
    pub fn clamp_volume(&self, max_volume: f64) -> Self {
        let f = self.shrink_factor(max_volume);
        Self {
            origin: self.origin,
            dims: self.dims.map(|d| d * f),
        }
    }
}

/// Volume cap for boxes proposed inside `scene`. Bounding-box sides are
/// floored at [`DIM_FLOOR`] so flat (floor-only) scenes still admit boxes.
pub fn volume_bound(scene: &ScenePointCloud) -> f64 {
    let Some((lo, hi)) = scene.bounds() else {
        return f64::INFINITY;
    };
    VOLUME_BOUND_FACTOR * (0..3).map(|a| (hi[a] - lo[a]).max(DIM_FLOOR)).product::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrpConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    /// Soft-mask temperature in metres.
    pub soft_tau: f64,
}

impl Default for KrpConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 4,
            width: 128,
            soft_tau: 0.1,
        }
    }
}

impl KrpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.width == 0 || !(self.soft_tau > 0.0) {
            return Err(Error::InvalidConfig("krp sizes and tau must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "krp width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Hard,
    Soft,
}

/// Proposal network; parameters live under `krp.`.
#[derive(Debug, Clone, PartialEq)]
pub struct Krp {
    pub config: KrpConfig,
    pub skeleton: SkeletonSpec,
}

impl Krp {
    pub fn new(config: KrpConfig, skeleton: SkeletonSpec) -> Result<Self> {
        config.validate()?;
        skeleton.validate()?;
        Ok(Self { config, skeleton })
    }

    pub fn init(&self, params: &mut ParamStore, rng: RngHandle) {
        let c = &self.config;
        let mut init = Initializer::new(params, rng);
        init.linear("krp.embed", self.skeleton.joint_count * 3, c.width, true);
        for l in 0..c.layers {
            init.encoder_layer(&format!("krp.layer{l}"), c.width, 2 * c.width);
        }
        init.linear("krp.hidden", c.width, c.width, true);
        init.linear("krp.head", c.width, 6, true);
        // start from a cube of side INITIAL_SIDE centred on the root
        let side_raw = (INITIAL_SIDE - DIM_FLOOR).exp_m1().ln();
        let half = -INITIAL_SIDE / 2.0;
        *params.get_mut("krp.head.b").expect("head bias") =
            Tensor::row_vector(vec![half, half, half, side_raw, side_raw, side_raw]);
    }

    /// Box origin and sides as `1 × 3` nodes. The history is expressed
    /// relative to its last-frame root before entering the network, and the
    /// regressed offset is added back to that root, so translating the
    /// history translates the origin by exactly the same amount.
    pub fn propose_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        history: &MotionSequence,
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        let frames = history.frame_count();
        if frames == 0 || history.joint_count() != self.skeleton.joint_count {
            return Err(Error::shape(
                "propose_region",
                format!("T>=1 frames of {} joints", self.skeleton.joint_count),
                format!("{:?}", history.shape()),
            ));
        }
        let anchor = history.joint(frames - 1, self.skeleton.root_index);
        let mut rel = history.to_tensor();
        for r in 0..rel.rows() {
            for (i, v) in rel.row_mut(r).iter_mut().enumerate() {
                *v -= anchor[i % 3];
            }
        }
        let x = tape.constant(rel);
        let x = nn::linear(tape, params, "krp.embed", x)?;
        let positions: Vec<f64> = (0..frames).map(|f| f as f64).collect();
        let pe = tape.constant(nn::sinusoidal(&positions, c.width));
        let mut x = tape.add(x, pe);
        for l in 0..c.layers {
            x = nn::encoder_layer(tape, params, &format!("krp.layer{l}"), x, None, c.heads)?;
        }
        let pooled = tape.mean_rows(x);
        let h = nn::linear(tape, params, "krp.hidden", pooled)?;
        let h = tape.relu(h);
        let raw = nn::linear(tape, params, "krp.head", h)?;
        let offset = tape.slice_cols(raw, 0, 3);
        let anchor = tape.constant(Tensor::row_vector(anchor.to_vec()));
        let origin = tape.add(anchor, offset);
        let dims = tape.slice_cols(raw, 3, 3);
        let dims = tape.softplus(dims);
        let dims = tape.add_scalar(dims, DIM_FLOOR);
        Ok((origin, dims))
    }

    pub fn propose_region(&self, history: &MotionSequence, params: &ParamStore) -> Result<KeyRegionBox> {
        let mut tape = Tape::new();
        let (o, d) = self.propose_on_tape(&mut tape, params, history)?;
        let o = tape.value(o).data();
        let d = tape.value(d).data();
        Ok(KeyRegionBox::new([o[0], o[1], o[2]], [d[0], d[1], d[2]]))
    }
}

/// Per-point mask weights and the masked points `S ⊙ M`.
///
/// Hard mode gives `M_i ∈ {0, 1}` with closed-interval containment; soft
/// mode gives `Π_axis σ((p − O)/τ)·σ((O + dim − p)/τ)`.
pub fn mask_scene(
    scene: &ScenePointCloud,
    region: &KeyRegionBox,
    mode: MaskMode,
    tau: f64,
) -> (Vec<Point3>, Vec<f64>) {
    let hi = region.max_corner();
    let weights: Vec<f64> = scene
        .points
        .iter()
        .map(|p| match mode {
            MaskMode::Hard => {
                if region.contains(p) {
                    1.0
                } else {
                    0.0
                }
            }
            MaskMode::Soft => (0..3)
                .map(|a| sigmoid((p[a] - region.origin[a]) / tau) * sigmoid((hi[a] - p[a]) / tau))
                .product(),
        })
        .collect();
    let points = scene
        .points
        .iter()
        .zip(&weights)
        .map(|(p, &w)| p.map(|c| c * w))
        .collect();
    (points, weights)
}

/// Soft mask weights (`n × 1`) of the constant points `points` (`n × 3`)
/// under the box `(origin, dims)`, differentiable in the box.
pub fn soft_mask_on_tape(tape: &mut Tape, points: Var, origin: Var, dims: Var, tau: f64) -> Var {
    let neg_origin = tape.scale(origin, -1.0);
    let from_lo = tape.add_row(points, neg_origin);
    let lower = tape.scale(from_lo, 1.0 / tau);
    let lower = tape.sigmoid(lower);
    let far = tape.add(origin, dims);
    let neg_points = tape.scale(points, -1.0);
    let to_hi = tape.add_row(neg_points, far);
    let upper = tape.scale(to_hi, 1.0 / tau);
    let upper = tape.sigmoid(upper);
    let per_axis = tape.mul(lower, upper);
    let x = tape.slice_cols(per_axis, 0, 1);
    let y = tape.slice_cols(per_axis, 1, 1);
    let z = tape.slice_cols(per_axis, 2, 1);
    let xy = tape.mul(x, y);
    tape.mul(xy, z)
}

/// Indices of points with weight > 0.5, subsampled uniformly to exactly
/// `n_target`: without replacement when enough are available, otherwise
/// every candidate once plus uniform draws with replacement.
pub fn subsample_indices(weights: &[f64], n_target: usize, rng: RngHandle) -> Result<Vec<usize>> {
    if n_target == 0 {
        return Err(Error::InvalidConfig("n_target must be at least 1".into()));
    }
    let candidates: Vec<usize> = weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.5)
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let mut r = rng.rng();
    if candidates.len() >= n_target {
        let picked = sample_indices(&mut r, candidates.len(), n_target);
        Ok(picked.into_iter().map(|i| candidates[i]).collect())
    } else {
        let mut out = candidates.clone();
        while out.len() < n_target {
            out.push(candidates[r.random_range(0..candidates.len())]);
        }
        Ok(out)
    }
}

/// Uniform subsample of the masked points to exactly `n_target` points.
pub fn subsample_region(
    points: &[Point3],
    weights: &[f64],
    n_target: usize,
    rng: RngHandle,
) -> Result<ScenePointCloud> {
    if points.len() != weights.len() {
        return Err(Error::shape("subsample_region", points.len(), weights.len()));
    }
    let idx = subsample_indices(weights, n_target, rng)?;
    Ok(ScenePointCloud::new(idx.into_iter().map(|i| points[i]).collect()))
}

/// Same as [`subsample_indices`] over the whole cloud; used when the
/// proposed region is empty.
pub fn whole_scene_indices(n_points: usize, n_target: usize, rng: RngHandle) -> Result<Vec<usize>> {
    subsample_indices(&vec![1.0; n_points], n_target, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn history(offset: Point3) -> MotionSequence {
        let sk = SkeletonSpec::prox();
        let frames = (0..5)
            .map(|t| {
                (0..sk.joint_count)
                    .map(|j| {
                        [
                            offset[0] + 0.3 * t as f64 + 0.01 * j as f64,
                            offset[1] + 0.05 * j as f64,
                            offset[2] - 0.1 * t as f64,
                        ]
                    })
                    .collect()
            })
            .collect();
        MotionSequence::new(frames, 5.0)
    }

    fn krp() -> (Krp, ParamStore) {
        let k = Krp::new(
            KrpConfig {
                layers: 1,
                heads: 2,
                width: 8,
                soft_tau: 0.1,
            },
            SkeletonSpec::prox(),
        )
        .unwrap();
        let mut p = ParamStore::new();
        k.init(&mut p, RngHandle::new(3));
        (k, p)
    }

    #[test]
    fn dims_respect_floor_even_for_extreme_parameters() {
        let (k, mut p) = krp();
        for v in p.get_mut("krp.head.b").unwrap().data_mut() {
            *v = -1e3;
        }
        let b = k.propose_region(&history([0.0; 3]), &p).unwrap();
        assert!(b.dims.iter().all(|&d| d >= DIM_FLOOR));
    }

    #[test]
    fn proposal_is_pure() {
        let (k, p) = krp();
        let h = history([1.0, 0.0, 2.0]);
        assert_eq!(k.propose_region(&h, &p).unwrap(), k.propose_region(&h, &p).unwrap());
    }

    #[test]
    fn proposal_origin_is_translation_covariant() {
        let (k, p) = krp();
        let t = [1.25, -0.5, 3.0];
        let a = k.propose_region(&history([0.0; 3]), &p).unwrap();
        let b = k.propose_region(&history(t), &p).unwrap();
        for ax in 0..3 {
            assert!((b.origin[ax] - a.origin[ax] - t[ax]).abs() < 1e-12);
            assert!((b.dims[ax] - a.dims[ax]).abs() < 1e-12);
        }
    }

    #[test]
    fn untrained_box_is_clamped_to_volume_bound() {
        let (k, mut p) = krp();
        for v in p.get_mut("krp.head.b").unwrap().data_mut() {
            *v = 50.0;
        }
        let room = ScenePointCloud::new(vec![[0.0, 0.0, 0.0], [4.0, 3.0, 4.0]]);
        let b = k.propose_region(&history([1.0, 0.0, 1.0]), &p).unwrap();
        let bound = volume_bound(&room);
        assert!(b.volume() > bound);
        let c = b.clamp_volume(bound);
        assert!(c.volume() <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn hard_mask_of_bounding_box_keeps_everything() {
        let scene = ScenePointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [0.5, 0.1, 2.9]]);
        let b = KeyRegionBox::bounding(&scene).unwrap();
        let (pts, w) = mask_scene(&scene, &b, MaskMode::Hard, 0.1);
        assert!(w.iter().all(|&x| x == 1.0));
        assert_eq!(pts, scene.points);
    }

    #[test]
    fn face_points_are_inside() {
        let b = KeyRegionBox::new([0.0; 3], [1.0, 1.0, 1.0]);
        let scene = ScenePointCloud::new(vec![[1.0, 0.5, 0.5], [0.0, 0.0, 0.0], [1.0 + 1e-12, 0.5, 0.5]]);
        let (pts, w) = mask_scene(&scene, &b, MaskMode::Hard, 0.1);
        assert_eq!(w, vec![1.0, 1.0, 0.0]);
        assert_eq!(pts[2], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn soft_mask_is_near_hard_mask_away_from_faces() {
        let b = KeyRegionBox::new([0.0; 3], [2.0, 2.0, 2.0]);
        let scene = ScenePointCloud::new(vec![[1.0, 1.0, 1.0], [5.0, 1.0, 1.0]]);
        let (_, w) = mask_scene(&scene, &b, MaskMode::Soft, 0.05);
        assert!(w[0] > 0.999 && w[1] < 1e-6);
    }

    #[test]
    fn soft_mask_tape_matches_plain() {
        let b = KeyRegionBox::new([0.1, -0.2, 0.3], [1.0, 0.7, 1.4]);
        let pts = vec![[0.5, 0.0, 0.9], [0.12, 0.45, 1.68], [2.0, 0.0, 0.0]];
        let scene = ScenePointCloud::new(pts);
        let (_, w) = mask_scene(&scene, &b, MaskMode::Soft, 0.1);
        let mut tape = Tape::new();
        let p = tape.constant(scene.to_tensor());
        let o = tape.constant(Tensor::row_vector(b.origin.to_vec()));
        let d = tape.constant(Tensor::row_vector(b.dims.to_vec()));
        let m = soft_mask_on_tape(&mut tape, p, o, d, 0.1);
        for (i, wi) in w.iter().enumerate() {
            assert!((tape.value(m).data()[i] - wi).abs() < 1e-14);
        }
    }

    #[test]
    fn soft_mask_gradient_reaches_box_parameters() {
        let (k, p) = krp();
        let h = history([0.0; 3]);
        let scene = Tensor::from_rows(&[vec![0.3, 0.2, -0.1], vec![-0.4, 0.6, 0.2], vec![0.1, 0.9, -0.5]]);
        let report = check_gradients(
            &p,
            |tape, params| {
                let (o, d) = k.propose_on_tape(tape, params, &h)?;
                let pts = tape.constant(scene.clone());
                let m = soft_mask_on_tape(tape, pts, o, d, 0.3);
                Ok(tape.sum(m))
            },
            60,
            1e-5,
            RngHandle::new(9),
        )
        .unwrap();
        assert!(report.max_relative_error() < 1e-4, "{:?}", report.worst());
    }

    #[test]
    fn subsample_keeps_full_set_when_exact() {
        let pts: Vec<Point3> = (0..50).map(|i| [i as f64, 0.0, 0.0]).collect();
        let w = vec![1.0; 50];
        let out = subsample_region(&pts, &w, 50, RngHandle::new(1)).unwrap();
        let mut xs: Vec<i64> = out.points.iter().map(|p| p[0] as i64).collect();
        xs.sort_unstable();
        assert_eq!(xs, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn subsample_pads_with_replacement() {
        let pts: Vec<Point3> = (0..30).map(|i| [i as f64, 1.0, 0.0]).collect();
        let w: Vec<f64> = (0..30).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let out = subsample_region(&pts, &w, 6000, RngHandle::new(2)).unwrap();
        assert_eq!(out.len(), 6000);
        // multiset oracle: only interior points, each interior point present
        let interior: Vec<Point3> = (0..30).filter(|i| i % 3 == 0).map(|i| pts[i]).collect();
        assert!(out.points.iter().all(|p| interior.contains(p)));
        assert!(interior.iter().all(|p| out.points.contains(p)));
    }

    #[test]
    fn subsample_empty_region_errors() {
        let pts = vec![[0.0; 3]; 4];
        assert_eq!(
            subsample_region(&pts, &[0.0; 4], 10, RngHandle::new(0)),
            Err(Error::EmptyRegion)
        );
    }
}
