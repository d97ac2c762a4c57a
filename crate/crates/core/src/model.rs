//! The full predictor: VAE, key-region proposal, multi-attention encoder and
//! the conditional denoiser sharing one parameter store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffusion::{Denoiser, DenoiserConfig, DiffusionSchedule, FusionConfig, Sampler, ScheduleConfig};
use crate::domain::{center_sample, uncenter_motion, MotionSequence, Point3, RngHandle, Sample, ScenePointCloud, SkeletonSpec};
use crate::error::{Error, Result};
use crate::krp::{self, Krp, KrpConfig, KeyRegionBox, MaskMode};
use crate::mae::{ConditionBundle, ConditionSet, Mae, MaeConfig};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::vae::{Vae, VaeConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub history_frames: usize,
    pub future_frames: usize,
    pub vae: VaeConfig,
    pub krp: KrpConfig,
    pub mae: MaeConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    /// `N_s′`, points kept from the key region.
    pub region_points: usize,
    pub use_krp: bool,
    pub conditions: ConditionSet,
    pub channel_attention: bool,
    pub sampler: Sampler,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            history_frames: 5,
            future_frames: 10,
            vae: VaeConfig::default(),
            krp: KrpConfig::default(),
            mae: MaeConfig::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            region_points: 6000,
            use_krp: true,
            conditions: ConditionSet::ALL,
            channel_attention: true,
            sampler: Sampler::Literal,
        }
    }
}

impl ModelConfig {
    /// Small widths and a 50-step schedule for CPU runs.
    pub fn desk() -> Self {
        let latent = 32;
        Self {
            vae: VaeConfig {
                layers: 2,
                heads: 4,
                width: 64,
                latent_dim: latent,
                ..VaeConfig::default()
            },
            krp: KrpConfig {
                layers: 1,
                heads: 2,
                width: 32,
                ..KrpConfig::default()
            },
            mae: MaeConfig {
                layers: 2,
                heads: 2,
                width: 32,
                latent_dim: latent,
            },
            denoiser: DenoiserConfig {
                layers: 3,
                heads: 4,
                width: 64,
                latent_dim: latent,
            },
            schedule: ScheduleConfig::rescaled(50),
            region_points: 128,
            ..Self::default()
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.vae.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.history_frames == 0 || self.future_frames == 0 {
            return Err(Error::InvalidConfig("history and future lengths must be positive".into()));
        }
        if self.region_points == 0 {
            return Err(Error::InvalidConfig("region_points must be positive".into()));
        }
        let c = self.vae.latent_dim;
        if self.mae.latent_dim != c || self.denoiser.latent_dim != c {
            return Err(Error::InvalidConfig(format!(
                "latent sizes disagree: vae {c}, mae {}, denoiser {}",
                self.mae.latent_dim, self.denoiser.latent_dim
            )));
        }
        if !(self.conditions.body || self.conditions.scene || self.conditions.interaction) {
            return Err(Error::InvalidConfig("at least one condition must be enabled".into()));
        }
        if !(self.krp.soft_tau > 0.0) {
            return Err(Error::InvalidConfig("soft mask temperature must be positive".into()));
        }
        self.vae.validate()?;
        self.krp.validate()?;
        self.mae.validate()?;
        self.denoiser.validate()?;
        DiffusionSchedule::build(&self.schedule)?;
        Ok(())
    }
}

/// One sampled future together with the region it was conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub motion: MotionSequence,
    /// Proposed box in the input frame, when the key region is enabled.
    pub region: Option<KeyRegionBox>,
    /// The region held no scene point and the whole scene was used instead.
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mcld {
    pub config: ModelConfig,
    pub skeleton: SkeletonSpec,
    pub vae: Vae,
    pub krp: Krp,
    pub mae: Mae,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
}

impl Mcld {
    pub fn new(config: ModelConfig, skeleton: SkeletonSpec) -> Result<Self> {
        config.validate()?;
        skeleton.validate()?;
        let joints = skeleton.joint_count;
        let vae = Vae::new(config.vae.clone(), joints, config.future_frames)?;
        let krp = Krp::new(config.krp.clone(), skeleton.clone())?;
        let mae = Mae::new(config.mae.clone(), joints)?;
        let fusion = FusionConfig {
            conditions: config.conditions,
            channel_attention: config.channel_attention,
        };
        let denoiser = Denoiser::new(config.denoiser.clone(), fusion, config.schedule.steps)?;
        let schedule = DiffusionSchedule::build(&config.schedule)?;
        Ok(Self {
            config,
            skeleton,
            vae,
            krp,
            mae,
            denoiser,
            schedule,
        })
    }

    pub fn init(&self, rng: RngHandle) -> ParamStore {
        let mut params = ParamStore::new();
        self.vae.init(&mut params, rng.derive(1));
        self.krp.init(&mut params, rng.derive(2));
        self.mae.init(&mut params, rng.derive(3));
        self.denoiser.init(&mut params, rng.derive(4));
        params
    }

    /// Stage-one objective for one centred sample; returns `(total, l_mr, l_kl)`.
    pub fn stage1_loss_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        centred: &Sample,
        rng: RngHandle,
    ) -> Result<(Var, Var, Var)> {
        let eps = Tensor::row_vector(rng.normal_vec(self.config.latent_dim()));
        self.vae.loss_on_tape(tape, params, &centred.future.to_tensor(), &eps)
    }

    /// Diffusion target `z_0`: encoder mean of the centred future.
    pub fn target_latent(&self, params: &ParamStore, centred: &Sample) -> Result<Tensor> {
        Ok(self.vae.encode(params, &centred.future)?.0)
    }

    /// Scene input of the encoder as a tape node. With the key region on,
    /// the hard box picks the points and the soft mask weights them, so the
    /// box receives gradients.
    fn region_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        scene: &ScenePointCloud,
        history: &MotionSequence,
        rng: RngHandle,
    ) -> Result<(Var, Option<KeyRegionBox>, bool)> {
        let n = self.config.region_points;
        if !self.config.conditions.needs_scene() {
            return Ok((tape.constant(Tensor::zeros(1, 3)), None, false));
        }
        if !self.config.use_krp {
            let idx = krp::whole_scene_indices(scene.len(), n, rng)?;
            return Ok((tape.constant(gather(scene, &idx)), None, false));
        }
        let (origin, dims) = self.krp.propose_on_tape(tape, params, history)?;
        let region = {
            let (o, d) = (tape.value(origin).data(), tape.value(dims).data());
            KeyRegionBox::new([o[0], o[1], o[2]], [d[0], d[1], d[2]])
        };
        let (_, hard) = krp::mask_scene(scene, &region, MaskMode::Hard, self.config.krp.soft_tau);
        match krp::subsample_indices(&hard, n, rng) {
            Ok(idx) => {
                let pts = tape.constant(gather(scene, &idx));
                let w = krp::soft_mask_on_tape(tape, pts, origin, dims, self.config.krp.soft_tau);
                Ok((tape.mul_col(pts, w), Some(region), false))
            }
            Err(Error::EmptyRegion) => {
                let idx = krp::whole_scene_indices(scene.len(), n, rng)?;
                Ok((tape.constant(gather(scene, &idx)), Some(region), true))
            }
            Err(e) => Err(e),
        }
    }

    /// Noise-prediction loss for one centred sample with target latent `z0`.
    /// The step and noise are drawn from `rng`.
    pub fn stage2_loss_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        centred: &Sample,
        z0: &Tensor,
        rng: RngHandle,
    ) -> Result<Var> {
        let k = 1 + rng.derive(3).rng().random_range(0..self.schedule.steps());
        let eps = Tensor::row_vector(rng.derive(2).normal_vec(self.config.latent_dim()));
        let (scene, _, _) = self.region_on_tape(tape, params, &centred.scene, &centred.history, rng.derive(1))?;
        let history = tape.constant(centred.history.to_tensor());
        let bundle = self
            .mae
            .encode_on_tape(tape, params, history, scene, self.config.conditions)?;
        self.denoiser
            .noise_loss_on_tape(tape, params, &self.schedule, bundle, z0, k, &eps)
    }

    /// Conditions for a centred history and scene, with the region used.
    pub fn conditions(
        &self,
        params: &ParamStore,
        scene: &ScenePointCloud,
        history: &MotionSequence,
        rng: RngHandle,
    ) -> Result<(ConditionBundle, Option<KeyRegionBox>, bool)> {
        let mut tape = Tape::new();
        let (s, region, fell_back) = self.region_on_tape(&mut tape, params, scene, history, rng)?;
        let h = tape.constant(history.to_tensor());
        let vars = self.mae.encode_on_tape(&mut tape, params, h, s, self.config.conditions)?;
        Ok((vars.to_bundle(&tape), region, fell_back))
    }

    /// `n_samples` futures for one history and scene, in the input frame.
    /// Draw `i` uses `rng.derive(i + 1)`; the region subsample uses
    /// `rng.derive(0)`.
    pub fn predict(
        &self,
        params: &ParamStore,
        scene: &ScenePointCloud,
        history: &MotionSequence,
        n_samples: usize,
        rng: RngHandle,
    ) -> Result<Vec<Prediction>> {
        if history.frame_count() == 0 || history.joint_count() != self.skeleton.joint_count {
            return Err(Error::shape(
                "predict",
                format!("T>=1 frames of {} joints", self.skeleton.joint_count),
                format!("{:?}", history.shape()),
            ));
        }
        let anchor = history.joint(history.frame_count() - 1, self.skeleton.root_index);
        let back: Point3 = anchor.map(|c| -c);
        let scene_c = scene.translated(back);
        let history_c = history.translated(back);
        let (bundle, region, fell_back) = self.conditions(params, &scene_c, &history_c, rng.derive(0))?;
        let region = region.map(|r| KeyRegionBox::new(add(r.origin, anchor), r.dims));
        (0..n_samples)
            .map(|i| {
                let z = self
                    .denoiser
                    .sample(params, &self.schedule, &bundle, rng.derive(i as u64 + 1), self.config.sampler)?;
                let motion = self.vae.decode(params, &z, history.fps())?;
                Ok(Prediction {
                    motion: uncenter_motion(&motion, anchor),
                    region,
                    fell_back,
                })
            })
            .collect()
    }

    /// Centres a sample on its last history root.
    pub fn centre(&self, sample: &Sample) -> Sample {
        center_sample(sample, &self.skeleton).0
    }
}

fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn gather(scene: &ScenePointCloud, idx: &[usize]) -> Tensor {
    let data = idx.iter().flat_map(|&i| scene.points[i]).collect();
    Tensor::from_vec(idx.len(), 3, data)
}
