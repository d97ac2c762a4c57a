//! Transformer VAE mapping a future motion sequence to a single latent
//! vector and back.
//!
//! The encoder prepends two learned distribution tokens to one token per
//! frame; after `layers` self-attention layers the first token is read as
//! the mean and the second as the log standard deviation. The decoder runs
//! one learned query per output frame through self-attention and
//! cross-attention into a single memory token projected from `z`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::domain::{MotionSequence, RngHandle};
use crate::error::{Error, Result};
use crate::nn::{self, Initializer, ParamStore};
use crate::tensor::Tensor;

/// Lower bound applied to σ (via the log-std head).
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Smallest per-coordinate scale used by the input/output standardisation.
pub const SCALE_FLOOR: f64 = 1e-2;

const NORM_MEAN: &str = "vae.norm.mean";
const NORM_SCALE: &str = "vae.norm.scale";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub latent_dim: usize,
    /// Feed-forward width as a multiple of `width`.
    pub ff_mult: usize,
    pub lambda_mr: f64,
    pub lambda_kl: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 4,
            width: 256,
            latent_dim: 512,
            ff_mult: 2,
            lambda_mr: 1.0,
            lambda_kl: 1e-4,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.latent_dim == 0 || self.ff_mult == 0 {
            return Err(Error::InvalidConfig("vae sizes must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "vae width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(self.lambda_mr > 0.0 && self.lambda_kl > 0.0) {
            return Err(Error::InvalidConfig("vae loss weights must be positive".into()));
        }
        Ok(())
    }
}

/// Latent sample together with the Gaussian it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub l_mr: f64,
    pub l_kl: f64,
}

/// Model definition; parameters live in a [`ParamStore`] under `vae.`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    pub config: VaeConfig,
    pub joints: usize,
    pub frames: usize,
}

impl Vae {
    pub fn new(config: VaeConfig, joints: usize, frames: usize) -> Result<Self> {
        config.validate()?;
        if joints == 0 || frames == 0 {
            return Err(Error::InvalidConfig("vae needs at least one joint and frame".into()));
        }
        Ok(Self {
            config,
            joints,
            frames,
        })
    }

    fn ff_width(&self) -> usize {
        self.config.ff_mult * self.config.width
    }

    pub fn init(&self, params: &mut ParamStore, rng: RngHandle) {
        let c = &self.config;
        let mut init = Initializer::new(params, rng);
        init.linear("vae.enc.embed", self.joints * 3, c.width, true);
        init.uniform("vae.enc.dist_tokens", 2, c.width, 0.5);
        for l in 0..c.layers {
            init.encoder_layer(&format!("vae.enc.layer{l}"), c.width, self.ff_width());
        }
        init.linear("vae.enc.mu", c.width, c.latent_dim, true);
        init.linear("vae.enc.log_sigma", c.width, c.latent_dim, true);

        init.linear("vae.dec.memory", c.latent_dim, c.width, true);
        init.uniform("vae.dec.queries", self.frames, c.width, 0.5);
        for l in 0..c.layers {
            init.decoder_layer(&format!("vae.dec.layer{l}"), c.width, self.ff_width());
        }
        init.linear("vae.dec.head", c.width, self.joints * 3, true);
        init.constant(NORM_MEAN, self.frames, self.joints * 3, 0.0);
        init.constant(NORM_SCALE, self.frames, self.joints * 3, 1.0);
    }

    /// Sets the fixed per-coordinate standardisation from training motions:
    /// the encoder sees `(b - mean) / scale` and the decoder head is mapped
    /// back by `scale` and `mean`. These entries never receive gradients.
    pub fn set_normalization(&self, params: &mut ParamStore, motions: &[MotionSequence]) -> Result<()> {
        let shape = (self.frames, self.joints * 3);
        if motions.is_empty() {
            return Err(Error::InvalidConfig("normalisation needs at least one motion".into()));
        }
        let mut sum = Tensor::zeros(shape.0, shape.1);
        let mut sq = Tensor::zeros(shape.0, shape.1);
        for m in motions {
            let t = m.to_tensor();
            self.check_motion(&t, "vae normalisation")?;
            for ((s, q), &x) in sum.data_mut().iter_mut().zip(sq.data_mut()).zip(t.data()) {
                *s += x;
                *q += x * x;
            }
        }
        let n = motions.len() as f64;
        let mean = sum.scale(1.0 / n);
        let mut scale = mean.clone();
        for ((sc, &m), &q) in scale.data_mut().iter_mut().zip(mean.data()).zip(sq.data()) {
            *sc = (q / n - m * m).max(0.0).sqrt().max(SCALE_FLOOR);
        }
        params.insert(NORM_MEAN, mean);
        params.insert(NORM_SCALE, scale);
        Ok(())
    }

    fn norm_constants(&self, tape: &mut Tape, params: &ParamStore) -> Result<(Var, Var)> {
        let mean = tape.constant(params.get(NORM_MEAN)?.clone());
        let scale = tape.constant(params.get(NORM_SCALE)?.clone());
        Ok((mean, scale))
    }

    fn check_motion(&self, t: &Tensor, context: &'static str) -> Result<()> {
        if t.shape() != (self.frames, self.joints * 3) {
            return Err(Error::shape(
                context,
                format!("{}x{}", self.frames, self.joints * 3),
                format!("{}x{}", t.rows(), t.cols()),
            ));
        }
        Ok(())
    }

    /// Returns `(mu, log_sigma)`, each `1 × latent_dim`; `log_sigma` is
    /// already clamped at `ln(SIGMA_FLOOR)`.
    pub fn encode_on_tape(&self, tape: &mut Tape, params: &ParamStore, motion: Var) -> Result<(Var, Var)> {
        self.check_motion(tape.value(motion), "vae encode")?;
        let c = &self.config;
        let (mean, scale) = self.norm_constants(tape, params)?;
        let inv = tape.constant(tape.value(scale).map(|v| 1.0 / v));
        let centred = tape.sub(motion, mean);
        let standard = tape.mul(centred, inv);
        let tokens = nn::linear(tape, params, "vae.enc.embed", standard)?;
        let positions: Vec<f64> = (0..self.frames).map(|f| f as f64).collect();
        let pe = tape.constant(nn::sinusoidal(&positions, c.width));
        let tokens = tape.add(tokens, pe);
        let dist = params.bind(tape, "vae.enc.dist_tokens")?;
        let mut x = tape.concat_rows(&[dist, tokens]);
        for l in 0..c.layers {
            x = nn::encoder_layer(tape, params, &format!("vae.enc.layer{l}"), x, None, c.heads)?;
        }
        let mu_token = tape.slice_rows(x, 0, 1);
        let sigma_token = tape.slice_rows(x, 1, 1);
        let mu = nn::linear(tape, params, "vae.enc.mu", mu_token)?;
        let log_sigma = nn::linear(tape, params, "vae.enc.log_sigma", sigma_token)?;
        let log_sigma = tape.clamp_min(log_sigma, SIGMA_FLOOR.ln());
        Ok((mu, log_sigma))
    }

    /// `ΔT × (N_b·3)` reconstruction from a `1 × latent_dim` code.
    pub fn decode_on_tape(&self, tape: &mut Tape, params: &ParamStore, z: Var) -> Result<Var> {
        let c = &self.config;
        if tape.shape(z) != (1, c.latent_dim) {
            return Err(Error::shape(
                "vae decode",
                format!("1x{}", c.latent_dim),
                format!("{:?}", tape.shape(z)),
            ));
        }
        let memory = nn::linear(tape, params, "vae.dec.memory", z)?;
        let mut x = params.bind(tape, "vae.dec.queries")?;
        for l in 0..c.layers {
            x = nn::decoder_layer(tape, params, &format!("vae.dec.layer{l}"), x, memory, c.heads)?;
        }
        let out = nn::linear(tape, params, "vae.dec.head", x)?;
        let (mean, scale) = self.norm_constants(tape, params)?;
        let out = tape.mul(out, scale);
        Ok(tape.add(out, mean))
    }

    /// Gaussian parameters `(mu, sigma)` for a future motion.
    pub fn encode(&self, params: &ParamStore, motion: &MotionSequence) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let m = tape.constant(motion.to_tensor());
        let (mu, log_sigma) = self.encode_on_tape(&mut tape, params, m)?;
        let sigma = tape.value(log_sigma).map(f64::exp);
        Ok((tape.value(mu).clone(), sigma))
    }

    pub fn decode(&self, params: &ParamStore, z: &Tensor, fps: f64) -> Result<MotionSequence> {
        if !z.is_finite() {
            return Err(Error::InvalidConfig("latent code is not finite".into()));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.decode_on_tape(&mut tape, params, zv)?;
        Ok(MotionSequence::from_tensor(tape.value(out), fps))
    }

    /// Encode, reparameterise with `eps`, decode.
    pub fn reconstruct(
        &self,
        params: &ParamStore,
        motion: &MotionSequence,
        eps: &Tensor,
    ) -> Result<(MotionSequence, LatentCode)> {
        let (mu, sigma) = self.encode(params, motion)?;
        let z = reparameterize(&mu, &sigma, eps)?;
        let recon = self.decode(params, &z, motion.fps())?;
        Ok((recon, LatentCode { z, mu, sigma }))
    }

    /// Full first-stage objective on the tape for one motion with a fixed
    /// noise draw. Returns `(total, l_mr, l_kl)` nodes.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        motion: &Tensor,
        eps: &Tensor,
    ) -> Result<(Var, Var, Var)> {
        let target = tape.constant(motion.clone());
        let (mu, log_sigma) = self.encode_on_tape(tape, params, target)?;
        let sigma = tape.exp(log_sigma);
        let e = tape.constant(eps.clone());
        let noise = tape.mul(sigma, e);
        let z = tape.add(mu, noise);
        let recon = self.decode_on_tape(tape, params, z)?;
        let l_mr = reconstruction_on_tape(tape, recon, target);
        let l_kl = kl_on_tape(tape, mu, log_sigma);
        let a = tape.scale(l_mr, self.config.lambda_mr);
        let b = tape.scale(l_kl, self.config.lambda_kl);
        let total = tape.add(a, b);
        Ok((total, l_mr, l_kl))
    }
}

/// `z = mu + sigma ⊙ eps`, with `sigma` floored at [`SIGMA_FLOOR`].
pub fn reparameterize(mu: &Tensor, sigma: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if mu.shape() != sigma.shape() || mu.shape() != eps.shape() {
        return Err(Error::shape(
            "reparameterize",
            format!("{:?}", mu.shape()),
            format!("sigma {:?}, eps {:?}", sigma.shape(), eps.shape()),
        ));
    }
    let mut z = mu.clone();
    for ((zi, &s), &e) in z.data_mut().iter_mut().zip(sigma.data()).zip(eps.data()) {
        *zi += s.max(SIGMA_FLOOR) * e;
    }
    Ok(z)
}

/// Mean per-joint Euclidean distance over frames and joints.
pub(crate) fn reconstruction_on_tape(tape: &mut Tape, recon: Var, target: Var) -> Var {
    let diff = tape.sub(recon, target);
    let d = tape.group_norms(diff, 3);
    tape.mean(d)
}

/// `Σ 0.5(μ² + σ² − 1 − ln σ²)` written in terms of `log σ`.
pub(crate) fn kl_on_tape(tape: &mut Tape, mu: Var, log_sigma: Var) -> Var {
    let mu2 = tape.square(mu);
    let two_log = tape.scale(log_sigma, 2.0);
    let var = tape.exp(two_log);
    let s = tape.add(mu2, var);
    let s = tape.sub(s, two_log);
    let s = tape.add_scalar(s, -1.0);
    let total = tape.sum(s);
    tape.scale(total, 0.5)
}

/// Closed-form KL of `N(mu, diag σ²)` from `N(0, I)`.
pub fn kl_divergence(mu: &Tensor, sigma: &Tensor) -> f64 {
    mu.data()
        .iter()
        .zip(sigma.data())
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
        .sum()
}

/// Mean per-joint Euclidean distance between two sequences of equal shape.
pub fn reconstruction_error(target: &MotionSequence, recon: &MotionSequence) -> Result<f64> {
    if target.shape() != recon.shape() {
        return Err(Error::shape(
            "reconstruction_error",
            format!("{:?}", target.shape()),
            format!("{:?}", recon.shape()),
        ));
    }
    let n = target.positions().len();
    let total: f64 = target
        .positions()
        .iter()
        .zip(recon.positions())
        .map(|(a, b)| crate::domain::distance(a, b))
        .sum();
    Ok(total / n as f64)
}

/// First-stage objective `λ_mr·L_mr + λ_kl·L_kl`.
pub fn vae_loss(
    target: &MotionSequence,
    recon: &MotionSequence,
    mu: &Tensor,
    sigma: &Tensor,
    config: &VaeConfig,
) -> Result<VaeLoss> {
    if mu.shape() != sigma.shape() {
        return Err(Error::shape(
            "vae_loss",
            format!("{:?}", mu.shape()),
            format!("{:?}", sigma.shape()),
        ));
    }
    let l_mr = reconstruction_error(target, recon)?;
    let l_kl = kl_divergence(mu, sigma);
    let total = config.lambda_mr * l_mr + config.lambda_kl * l_kl;
    for (term, v) in [("l_mr", l_mr), ("l_kl", l_kl), ("total", total)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term });
        }
    }
    Ok(VaeLoss { total, l_mr, l_kl })
}
