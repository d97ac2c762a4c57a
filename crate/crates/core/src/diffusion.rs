//! Conditional latent diffusion: noise schedule, forward noising,
//! multi-condition fusion, the transformer noise predictor and the reverse
//! samplers.
//!
//! Diffusion steps are numbered `1..=K` as in `z_1 … z_K`; the step
//! embedding takes the zero-based index `k − 1`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::domain::RngHandle;
use crate::error::{Error, Result};
use crate::mae::{BundleVars, ConditionBundle, ConditionSet};
use crate::nn::{self, Initializer, ParamStore};
use crate::tensor::Tensor;

/// Upper bound on `ᾱ_K` for the terminal latent to be treated as N(0, I).
pub const TERMINAL_ALPHA_BAR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    /// Linear schedule for `steps` with both endpoints scaled by `1000 / steps`,
    /// so short schedules still end near pure noise.
    pub fn rescaled(steps: usize) -> Self {
        let scale = 1000.0 / steps as f64;
        Self {
            steps,
            beta_start: 1e-4 * scale,
            beta_end: 2e-2 * scale,
            kind: ScheduleKind::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn build(config: &ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            kind: ScheduleKind::Linear,
        } = *config;
        if steps == 0 {
            return Err(Error::BadSchedule("K must be positive".into()));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::BadSchedule(format!(
                "need 0 < beta_start ({beta_start}) < beta_end ({beta_end}) < 1"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::BadSchedule("every beta must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let terminal = *alpha_bars.last().expect("non-empty schedule");
        if terminal >= TERMINAL_ALPHA_BAR {
            return Err(Error::BadSchedule(format!(
                "terminal alpha_bar {terminal:.3e} is not below {TERMINAL_ALPHA_BAR:e}"
            )));
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of Markov steps `K`.
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    fn check_step(&self, k: usize) {
        assert!(
            (1..=self.steps()).contains(&k),
            "diffusion step {k} outside 1..={}",
            self.steps()
        );
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.check_step(k);
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.check_step(k);
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.check_step(k);
        self.alpha_bars[k - 1]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `z_k = √α_k·z_{k−1} + √(1−α_k)·ε`.
    pub fn forward_noise_step(&self, z_prev: &Tensor, k: usize, eps: &Tensor) -> Tensor {
        forward_noise_step_with(self.alpha(k), z_prev, eps)
    }

    /// `z_k = √ᾱ_k·z_0 + √(1−ᾱ_k)·ε`.
    pub fn forward_noise_jump(&self, z0: &Tensor, k: usize, eps: &Tensor) -> Tensor {
        let ab = self.alpha_bar(k);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        z0.zip_map(eps, |z, e| a * z + b * e)
    }

    /// `z_{k−1} = z_k/√α_k − √(1/α_k − 1)·ε̂`.
    pub fn denoise_step(&self, z_k: &Tensor, eps_hat: &Tensor, k: usize) -> Tensor {
        denoise_step_with(self.alpha(k), z_k, eps_hat)
    }

    /// Ancestral DDPM step with posterior variance
    /// `β̃_k = β_k(1 − ᾱ_{k−1})/(1 − ᾱ_k)`.
    pub fn ancestral_step(&self, z_k: &Tensor, eps_hat: &Tensor, k: usize, noise: &Tensor) -> Tensor {
        let (alpha, beta, ab) = (self.alpha(k), self.beta(k), self.alpha_bar(k));
        let ab_prev = if k > 1 { self.alpha_bar(k - 1) } else { 1.0 };
        let coef = beta / (1.0 - ab).sqrt();
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let mean = z_k.zip_map(eps_hat, |z, e| inv * (z - coef * e));
        mean.zip_map(noise, |m, n| m + sigma * n)
    }
}

/// Single forward step for an explicit `α`.
pub fn forward_noise_step_with(alpha: f64, z_prev: &Tensor, eps: &Tensor) -> Tensor {
    let (a, b) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    z_prev.zip_map(eps, |z, e| a * z + b * e)
}

/// Literal reverse step for an explicit `α`.
pub fn denoise_step_with(alpha: f64, z_k: &Tensor, eps_hat: &Tensor) -> Tensor {
    let a = 1.0 / alpha.sqrt();
    let b = (1.0 / alpha - 1.0).sqrt();
    z_k.zip_map(eps_hat, |z, e| a * z - b * e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    /// Deterministic reverse steps; randomness enters only through `z_K`.
    #[default]
    Literal,
    /// Standard DDPM ancestral sampling with posterior noise.
    Ancestral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub latent_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 9,
            heads: 4,
            width: 512,
            latent_dim: 512,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidConfig("denoiser sizes must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "denoiser width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Ablation switches for the condition path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub conditions: ConditionSet,
    /// Step-embedding plus channel attention; `false` is plain concatenation.
    pub channel_attention: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            conditions: ConditionSet::ALL,
            channel_attention: true,
        }
    }
}

/// Joint condition `E_C` at one (zero-based) step index.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedCondition {
    pub e_c: Tensor,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Body,
    Scene,
    Interaction,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Body => "mcf.body",
            Branch::Scene => "mcf.scene",
            Branch::Interaction => "mcf.inter",
        }
    }
}

/// Fusion module and noise predictor; parameters live under `mcf.` and `den.`.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub fusion: FusionConfig,
    pub steps: usize,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, fusion: FusionConfig, steps: usize) -> Result<Self> {
        config.validate()?;
        if steps == 0 {
            return Err(Error::InvalidConfig("diffusion needs at least one step".into()));
        }
        Ok(Self {
            config,
            fusion,
            steps,
        })
    }

    fn latent(&self) -> usize {
        self.config.latent_dim
    }

    pub fn init(&self, params: &mut ParamStore, rng: RngHandle) {
        let c = &self.config;
        let ce = c.latent_dim;
        let mut init = Initializer::new(params, rng);
        init.linear("mcf.theta", ce, ce, true);
        for b in [Branch::Body, Branch::Scene, Branch::Interaction] {
            init.linear(&format!("{}.theta1", b.prefix()), ce, ce, true);
            init.linear(&format!("{}.theta2", b.prefix()), ce, ce, true);
        }
        init.linear("den.z_in", ce, c.width, true);
        init.linear("den.c_in", 3 * ce, c.width, true);
        init.linear("den.step", c.width, c.width, true);
        for l in 0..c.layers {
            init.encoder_layer(&format!("den.layer{l}"), c.width, 2 * c.width);
        }
        init.linear("den.out", c.width, ce, true);
    }

    fn check_index(&self, index: usize) {
        assert!(index < self.steps, "step index {index} outside 0..{}", self.steps);
    }

    /// `θ(k)`: sinusoidal encoding of the step index through one linear layer.
    pub fn step_embed_on_tape(&self, tape: &mut Tape, params: &ParamStore, index: usize) -> Result<Var> {
        self.check_index(index);
        let enc = tape.constant(nn::sinusoidal(&[index as f64], self.latent()));
        nn::linear(tape, params, "mcf.theta", enc)
    }

    /// `Ẽ ⊙ SoftMax(θ²(ReLU(θ¹(Ẽ))))` over channels.
    pub fn condition_attention_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        branch: Branch,
        e_tilde: Var,
    ) -> Result<Var> {
        let p = branch.prefix();
        let h = nn::linear(tape, params, &format!("{p}.theta1"), e_tilde)?;
        let h = tape.relu(h);
        let logits = nn::linear(tape, params, &format!("{p}.theta2"), h)?;
        let w = tape.softmax_rows(logits);
        Ok(tape.mul(e_tilde, w))
    }

    /// `E_C` at zero-based step `index`, `1 × 3·C_e` in order body, scene,
    /// interaction. Disabled conditions occupy their slot as zeros.
    pub fn fuse_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        bundle: BundleVars,
        index: usize,
    ) -> Result<Var> {
        let wanted = self.fusion.conditions;
        let slots = [
            (Branch::Body, bundle.e_b, wanted.body),
            (Branch::Scene, bundle.e_s, wanted.scene),
            (Branch::Interaction, bundle.e_i, wanted.interaction),
        ];
        for (_, v, _) in &slots {
            if tape.shape(*v) != (1, self.latent()) {
                return Err(Error::shape(
                    "fuse_conditions",
                    format!("1x{}", self.latent()),
                    format!("{:?}", tape.shape(*v)),
                ));
            }
        }
        let theta = if self.fusion.channel_attention {
            Some(self.step_embed_on_tape(tape, params, index)?)
        } else {
            None
        };
        let mut parts = Vec::with_capacity(3);
        for (branch, e, on) in slots {
            let part = if !on {
                tape.constant(Tensor::zeros(1, self.latent()))
            } else if let Some(theta) = theta {
                let e_tilde = tape.add(e, theta);
                self.condition_attention_on_tape(tape, params, branch, e_tilde)?
            } else {
                e
            };
            parts.push(part);
        }
        Ok(tape.concat_cols(&parts))
    }

    /// `ε̂ = ℛ(z_k, E_C, k)` for the one-based step `k`.
    pub fn predict_noise_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        z_k: Var,
        e_c: Var,
        k: usize,
    ) -> Result<Var> {
        let c = &self.config;
        if tape.shape(z_k) != (1, c.latent_dim) || tape.shape(e_c) != (1, 3 * c.latent_dim) {
            return Err(Error::shape(
                "predict_noise",
                format!("z 1x{}, E_C 1x{}", c.latent_dim, 3 * c.latent_dim),
                format!("z {:?}, E_C {:?}", tape.shape(z_k), tape.shape(e_c)),
            ));
        }
        assert!((1..=self.steps).contains(&k), "diffusion step {k} outside 1..={}", self.steps);
        let zt = nn::linear(tape, params, "den.z_in", z_k)?;
        let ct = nn::linear(tape, params, "den.c_in", e_c)?;
        let mut x = tape.concat_rows(&[zt, ct]);
        let enc = tape.constant(nn::sinusoidal(&[(k - 1) as f64], c.width));
        let step = nn::linear(tape, params, "den.step", enc)?;
        x = tape.add_row(x, step);
        for l in 0..c.layers {
            x = nn::encoder_layer(tape, params, &format!("den.layer{l}"), x, None, c.heads)?;
        }
        let first = tape.slice_rows(x, 0, 1);
        nn::linear(tape, params, "den.out", first)
    }

    /// `‖ε − ℛ(z_k, E_C^k, k)‖²` with `z_k` the closed-form noising of `z0`.
    #[allow(clippy::too_many_arguments)]
    pub fn noise_loss_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        schedule: &DiffusionSchedule,
        bundle: BundleVars,
        z0: &Tensor,
        k: usize,
        eps: &Tensor,
    ) -> Result<Var> {
        let z_k = tape.constant(schedule.forward_noise_jump(z0, k, eps));
        let e_c = self.fuse_on_tape(tape, params, bundle, k - 1)?;
        let eps_hat = self.predict_noise_on_tape(tape, params, z_k, e_c, k)?;
        let target = tape.constant(eps.clone());
        let diff = tape.sub(target, eps_hat);
        let sq = tape.square(diff);
        Ok(tape.sum(sq))
    }

    pub fn step_embed(&self, params: &ParamStore, index: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.step_embed_on_tape(&mut tape, params, index)?;
        Ok(tape.value(v).clone())
    }

    pub fn condition_attention(&self, params: &ParamStore, branch: Branch, e_tilde: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let e = tape.constant(e_tilde.clone());
        let v = self.condition_attention_on_tape(&mut tape, params, branch, e)?;
        Ok(tape.value(v).clone())
    }

    pub fn fuse(&self, params: &ParamStore, bundle: &ConditionBundle, index: usize) -> Result<FusedCondition> {
        let mut tape = Tape::new();
        let vars = bundle_constants(&mut tape, bundle);
        let v = self.fuse_on_tape(&mut tape, params, vars, index)?;
        Ok(FusedCondition {
            e_c: tape.value(v).clone(),
            step: index,
        })
    }

    pub fn predict_noise(&self, params: &ParamStore, z_k: &Tensor, e_c: &Tensor, k: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = tape.constant(z_k.clone());
        let c = tape.constant(e_c.clone());
        let v = self.predict_noise_on_tape(&mut tape, params, z, c, k)?;
        Ok(tape.value(v).clone())
    }

    /// Reverse chain from `z_K ~ N(0, I)` drawn from `rng` down to `z_0′`.
    pub fn sample(
        &self,
        params: &ParamStore,
        schedule: &DiffusionSchedule,
        bundle: &ConditionBundle,
        rng: RngHandle,
        sampler: Sampler,
    ) -> Result<Tensor> {
        let ce = self.latent();
        let mut z = Tensor::row_vector(rng.normal_vec(ce));
        for k in (1..=schedule.steps()).rev() {
            let fused = self.fuse(params, bundle, k - 1)?;
            let eps_hat = self.predict_noise(params, &z, &fused.e_c, k)?;
            z = match sampler {
                Sampler::Literal => schedule.denoise_step(&z, &eps_hat, k),
                Sampler::Ancestral => {
                    let noise = if k > 1 {
                        Tensor::row_vector(rng.derive(k as u64).normal_vec(ce))
                    } else {
                        Tensor::zeros(1, ce)
                    };
                    schedule.ancestral_step(&z, &eps_hat, k, &noise)
                }
            };
        }
        Ok(z)
    }
}

pub fn bundle_constants(tape: &mut Tape, bundle: &ConditionBundle) -> BundleVars {
    BundleVars {
        e_b: tape.constant(bundle.e_b.clone()),
        e_s: tape.constant(bundle.e_s.clone()),
        e_i: tape.constant(bundle.e_i.clone()),
    }
}

/// `Ẽ_X = E_X + θ(k)` for every branch.
pub fn add_to_bundle(bundle: &ConditionBundle, theta: &Tensor) -> ConditionBundle {
    let add = |e: &Tensor| e.zip_map(theta, |a, b| a + b);
    ConditionBundle {
        e_b: add(&bundle.e_b),
        e_s: add(&bundle.e_s),
        e_i: add(&bundle.e_i),
    }
}

/// Channel-wise concatenation in the fixed order body, scene, interaction.
pub fn fuse_conditions(e_b: &Tensor, e_s: &Tensor, e_i: &Tensor) -> Result<Tensor> {
    if e_b.shape() != e_s.shape() || e_b.shape() != e_i.shape() || e_b.rows() != 1 {
        return Err(Error::shape(
            "fuse_conditions",
            format!("three equal 1xC rows, first {:?}", e_b.shape()),
            format!("{:?}, {:?}", e_s.shape(), e_i.shape()),
        ));
    }
    Ok(Tensor::concat_cols(&[e_b, e_s, e_i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn tiny(fusion: FusionConfig) -> (Denoiser, ParamStore) {
        let d = Denoiser::new(
            DenoiserConfig {
                layers: 1,
                heads: 2,
                width: 8,
                latent_dim: 4,
            },
            fusion,
            50,
        )
        .unwrap();
        let mut p = ParamStore::new();
        d.init(&mut p, RngHandle::new(11));
        (d, p)
    }

    fn bundle() -> ConditionBundle {
        ConditionBundle {
            e_b: Tensor::row_vector(vec![0.5, -0.2, 0.1, 1.0]),
            e_s: Tensor::row_vector(vec![-1.0, 0.3, 0.7, 0.0]),
            e_i: Tensor::row_vector(vec![0.2, 0.2, -0.6, 0.4]),
        }
    }

    #[test]
    fn default_schedule_is_near_gaussian_at_the_end() {
        let s = DiffusionSchedule::build(&ScheduleConfig::default()).unwrap();
        // oracle: direct prefix product of (1 - beta_k)
        let mut prod = 1.0;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
        assert!(prod < 1e-3);
        assert_eq!(s.alpha_bar(1), s.alpha(1));
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rescaled_short_schedule_is_valid() {
        let s = DiffusionSchedule::build(&ScheduleConfig::rescaled(50)).unwrap();
        assert_eq!(s.steps(), 50);
        assert!(s.alpha_bar(50) < TERMINAL_ALPHA_BAR);
    }

    #[test]
    fn bad_schedules_are_rejected() {
        let short = ScheduleConfig {
            steps: 10,
            ..ScheduleConfig::default()
        };
        assert!(matches!(DiffusionSchedule::build(&short), Err(Error::BadSchedule(_))));
        let inverted = ScheduleConfig {
            beta_start: 0.5,
            beta_end: 0.1,
            ..ScheduleConfig::default()
        };
        assert!(matches!(DiffusionSchedule::build(&inverted), Err(Error::BadSchedule(_))));
    }

    #[test]
    fn forward_step_limits() {
        let z = Tensor::row_vector(vec![1.0, -2.0, 3.0]);
        let eps = Tensor::row_vector(vec![0.3, 0.9, -1.1]);
        let near_one = forward_noise_step_with(1.0 - 1e-12, &z, &eps);
        assert!(near_one.max_abs_diff(&z) < 1e-5);
        let zero = Tensor::zeros(1, 3);
        let a = 0.81;
        assert_eq!(forward_noise_step_with(a, &z, &zero), z.scale(0.9));
    }

    #[test]
    fn jump_at_step_one_equals_single_step() {
        let s = DiffusionSchedule::build(&ScheduleConfig::default()).unwrap();
        let z = Tensor::row_vector(vec![1.0, -2.0, 3.0]);
        let eps = Tensor::row_vector(vec![0.3, 0.9, -1.1]);
        assert_eq!(s.forward_noise_jump(&z, 1, &eps), s.forward_noise_step(&z, 1, &eps));
        let zero = Tensor::zeros(1, 3);
        let k = 400;
        let expected = eps.scale((1.0 - s.alpha_bar(k)).sqrt());
        assert!(s.forward_noise_jump(&zero, k, &eps).max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn denoise_inverts_forward_with_oracle_noise() {
        let s = DiffusionSchedule::build(&ScheduleConfig::default()).unwrap();
        let z = Tensor::row_vector(vec![0.7, -1.3, 2.2, 0.0]);
        let eps = Tensor::row_vector(vec![-0.4, 1.6, 0.1, -2.0]);
        for k in [1, 2, 500, 1000] {
            let zk = s.forward_noise_step(&z, k, &eps);
            assert!(s.denoise_step(&zk, &eps, k).max_abs_diff(&z) < 1e-9);
        }
        let zero = Tensor::zeros(1, 4);
        let zk = Tensor::row_vector(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.denoise_step(&zk, &zero, 7), zk.scale(1.0 / s.alpha(7).sqrt()));
    }

    #[test]
    fn zero_predictor_chain_scales_by_alpha_bar() {
        let s = DiffusionSchedule::build(&ScheduleConfig::rescaled(50)).unwrap();
        let zk = Tensor::row_vector(vec![0.3, -0.4]);
        let zero = Tensor::zeros(1, 2);
        let mut z = zk.clone();
        for k in (1..=50).rev() {
            z = s.denoise_step(&z, &zero, k);
        }
        let expected = zk.norm() / s.alpha_bar(50).sqrt();
        assert!((z.norm() - expected).abs() <= 1e-9 * expected);
    }

    #[test]
    fn zero_theta_leaves_bundle_unchanged() {
        let b = bundle();
        assert_eq!(add_to_bundle(&b, &Tensor::zeros(1, 4)), b);
    }

    #[test]
    fn step_embedding_is_deterministic_and_step_dependent() {
        let (d, p) = tiny(FusionConfig::default());
        assert_eq!(d.step_embed(&p, 3).unwrap(), d.step_embed(&p, 3).unwrap());
        let first = d.step_embed(&p, 0).unwrap();
        let last = d.step_embed(&p, 49).unwrap();
        assert!(first.max_abs_diff(&last) > 0.0);
    }

    #[test]
    fn channel_attention_uniform_and_hand_cases() {
        let (d, mut p) = tiny(FusionConfig::default());
        // theta2 with zero weight and constant bias gives equal logits
        *p.get_mut("mcf.scene.theta2.w").unwrap() = Tensor::zeros(4, 4);
        *p.get_mut("mcf.scene.theta2.b").unwrap() = Tensor::full(1, 4, 0.3);
        let e = Tensor::row_vector(vec![1.0, -2.0, 4.0, 8.0]);
        let out = d.condition_attention(&p, Branch::Scene, &e).unwrap();
        assert!(out.max_abs_diff(&e.scale(0.25)) < 1e-15);

        // C_e = 2, logits (ln 3, 0) -> weights (0.75, 0.25)
        let d2 = Denoiser::new(
            DenoiserConfig {
                layers: 1,
                heads: 1,
                width: 2,
                latent_dim: 2,
            },
            FusionConfig::default(),
            10,
        )
        .unwrap();
        let mut p2 = ParamStore::new();
        d2.init(&mut p2, RngHandle::new(0));
        *p2.get_mut("mcf.body.theta2.w").unwrap() = Tensor::zeros(2, 2);
        *p2.get_mut("mcf.body.theta2.b").unwrap() = Tensor::row_vector(vec![3f64.ln(), 0.0]);
        let e = Tensor::row_vector(vec![2.0, 2.0]);
        let out = d2.condition_attention(&p2, Branch::Body, &e).unwrap();
        assert!((out.data()[0] - 1.5).abs() < 1e-12);
        assert!((out.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fused_condition_layout() {
        let (d, p) = tiny(FusionConfig::default());
        let fused = d.fuse(&p, &bundle(), 5).unwrap();
        assert_eq!(fused.e_c.shape(), (1, 12));
        let theta = d.step_embed(&p, 5).unwrap();
        let tilde = add_to_bundle(&bundle(), &theta);
        let e_s = d.condition_attention(&p, Branch::Scene, &tilde.e_s).unwrap();
        assert_eq!(fused.e_c.slice_cols(4, 4), e_s);

        let plain = fuse_conditions(&bundle().e_b, &bundle().e_s, &bundle().e_i).unwrap();
        assert_eq!(plain.shape(), (1, 12));
        assert_eq!(plain.slice_cols(4, 4), bundle().e_s);
        let z = Tensor::zeros(1, 512);
        assert_eq!(fuse_conditions(&z, &z, &z).unwrap(), Tensor::zeros(1, 1536));
        assert!(fuse_conditions(&z, &Tensor::zeros(1, 3), &z).is_err());
    }

    #[test]
    fn channel_weights_sum_to_one() {
        let (d, p) = tiny(FusionConfig::default());
        let mut tape = Tape::new();
        let vars = bundle_constants(&mut tape, &bundle());
        d.fuse_on_tape(&mut tape, &p, vars, 17).unwrap();
        let mut n = 0;
        for w in tape.softmax_outputs() {
            n += 1;
            assert!((w.sum() - 1.0).abs() < 1e-6);
        }
        assert_eq!(n, 3);
    }

    #[test]
    fn ablated_fusion_variants() {
        let no_mcf = FusionConfig {
            channel_attention: false,
            ..FusionConfig::default()
        };
        let (d, p) = tiny(no_mcf);
        let fused = d.fuse(&p, &bundle(), 0).unwrap();
        let plain = fuse_conditions(&bundle().e_b, &bundle().e_s, &bundle().e_i).unwrap();
        assert_eq!(fused.e_c, plain);

        let body_only = FusionConfig {
            conditions: ConditionSet {
                body: true,
                scene: false,
                interaction: false,
            },
            ..FusionConfig::default()
        };
        let (d, p) = tiny(body_only);
        let fused = d.fuse(&p, &bundle(), 0).unwrap();
        assert_eq!(fused.e_c.slice_cols(4, 8).max_abs(), 0.0);
        assert!(fused.e_c.slice_cols(0, 4).max_abs() > 0.0);
    }

    #[test]
    fn predict_noise_is_pure_with_latent_output() {
        let (d, p) = tiny(FusionConfig::default());
        let z = Tensor::row_vector(vec![0.1, 0.2, -0.3, 0.4]);
        let fused = d.fuse(&p, &bundle(), 9).unwrap();
        let a = d.predict_noise(&p, &z, &fused.e_c, 10).unwrap();
        assert_eq!(a.shape(), (1, 4));
        assert_eq!(a, d.predict_noise(&p, &z, &fused.e_c, 10).unwrap());
        assert!(d.predict_noise(&p, &z, &z, 10).is_err());
    }

    #[test]
    fn sampling_is_seeded_and_finite() {
        let (d, p) = tiny(FusionConfig::default());
        let s = DiffusionSchedule::build(&ScheduleConfig::rescaled(50)).unwrap();
        let a = d.sample(&p, &s, &bundle(), RngHandle::new(1), Sampler::Literal).unwrap();
        let b = d.sample(&p, &s, &bundle(), RngHandle::new(1), Sampler::Literal).unwrap();
        let c = d.sample(&p, &s, &bundle(), RngHandle::new(2), Sampler::Literal).unwrap();
        assert_eq!(a, b);
        assert!(a.max_abs_diff(&c) > 0.0);
        assert!(a.is_finite() && c.is_finite());
        let anc = d.sample(&p, &s, &bundle(), RngHandle::new(1), Sampler::Ancestral).unwrap();
        assert!(anc.is_finite());
    }

    #[test]
    fn zero_predictor_loss_matches_chi_square_mean() {
        let d = Denoiser::new(
            DenoiserConfig {
                layers: 1,
                heads: 1,
                width: 4,
                latent_dim: 16,
            },
            FusionConfig::default(),
            50,
        )
        .unwrap();
        let mut p = ParamStore::new();
        d.init(&mut p, RngHandle::new(4));
        *p.get_mut("den.out.w").unwrap() = Tensor::zeros(4, 16);
        *p.get_mut("den.out.b").unwrap() = Tensor::zeros(1, 16);
        let s = DiffusionSchedule::build(&ScheduleConfig::rescaled(50)).unwrap();
        let b = ConditionBundle {
            e_b: Tensor::zeros(1, 16),
            e_s: Tensor::zeros(1, 16),
            e_i: Tensor::zeros(1, 16),
        };
        let z0 = Tensor::zeros(1, 16);
        let root = RngHandle::new(99);
        let draws = 10_000;
        let mut total = 0.0;
        for i in 0..draws {
            let h = root.derive(i);
            let eps = Tensor::row_vector(h.normal_vec(16));
            let k = 1 + (i as usize % 50);
            let mut tape = Tape::new();
            let vars = bundle_constants(&mut tape, &b);
            let loss = d.noise_loss_on_tape(&mut tape, &p, &s, vars, &z0, k, &eps).unwrap();
            let v = tape.value(loss).item();
            assert!(v >= 0.0);
            total += v;
        }
        let mean = total / draws as f64;
        assert!((mean - 16.0).abs() < 0.05 * 16.0, "mean {mean}");
    }

    #[test]
    fn noise_loss_gradients_match_finite_differences() {
        let (d, p) = tiny(FusionConfig::default());
        let s = DiffusionSchedule::build(&ScheduleConfig::rescaled(50)).unwrap();
        let z0 = Tensor::row_vector(vec![0.4, -0.1, 0.8, -0.5]);
        let eps = Tensor::row_vector(vec![1.1, -0.3, 0.2, 0.9]);
        let report = check_gradients(
            &p,
            |tape, params| {
                let vars = bundle_constants(tape, &bundle());
                d.noise_loss_on_tape(tape, params, &s, vars, &z0, 23, &eps)
            },
            200,
            1e-5,
            RngHandle::new(8),
        )
        .unwrap();
        assert!(report.max_relative_error() < 1e-4, "{:?}", report.worst());
    }
}
