//! Multi-attention encoder producing the body, scene and interaction
//! condition embeddings.
//!
//! * scene branch: per-point linear embedding (no positions), self-attention
//!   layers, mean pooling;
//! * body branch: per-frame tokens with sinusoidal frame positions,
//!   self-attention layers, mean pooling;
//! * interaction branch: body tokens as queries cross-attending to the scene
//!   tokens of the matching scene layer, mean pooling.
//!
//! Each pooled vector is projected to `latent_dim`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::domain::{MotionSequence, RngHandle, ScenePointCloud};
use crate::error::{Error, Result};
use crate::nn::{self, Initializer, ParamStore};
use crate::tensor::Tensor;

pub use crate::nn::{multi_head_attention, qkv_project, scaled_dot_attention};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub latent_dim: usize,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 4,
            width: 128,
            latent_dim: 512,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidConfig("mae sizes must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "mae width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Body, scene and interaction embeddings, each `1 × latent_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub e_b: Tensor,
    pub e_s: Tensor,
    pub e_i: Tensor,
}

impl ConditionBundle {
    pub fn is_finite(&self) -> bool {
        self.e_b.is_finite() && self.e_s.is_finite() && self.e_i.is_finite()
    }
}

/// Which condition embeddings are computed; disabled ones are all-zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSet {
    pub body: bool,
    pub scene: bool,
    pub interaction: bool,
}

impl Default for ConditionSet {
    fn default() -> Self {
        Self::ALL
    }
}

impl ConditionSet {
    pub const ALL: Self = Self {
        body: true,
        scene: true,
        interaction: true,
    };

    pub fn needs_scene(&self) -> bool {
        self.scene || self.interaction
    }
}

/// Tape handles of a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BundleVars {
    pub e_b: Var,
    pub e_s: Var,
    pub e_i: Var,
}

impl BundleVars {
    pub fn to_bundle(&self, tape: &Tape) -> ConditionBundle {
        ConditionBundle {
            e_b: tape.value(self.e_b).clone(),
            e_s: tape.value(self.e_s).clone(),
            e_i: tape.value(self.e_i).clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mae {
    pub config: MaeConfig,
    pub joints: usize,
}

impl Mae {
    pub fn new(config: MaeConfig, joints: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, joints })
    }

    pub fn init(&self, params: &mut ParamStore, rng: RngHandle) {
        let c = &self.config;
        let ff = 2 * c.width;
        let mut init = Initializer::new(params, rng);
        init.linear("mae.scene.embed", 3, c.width, true);
        init.linear("mae.body.embed", self.joints * 3, c.width, true);
        init.linear("mae.inter.embed", self.joints * 3, c.width, true);
        for l in 0..c.layers {
            init.encoder_layer(&format!("mae.scene.layer{l}"), c.width, ff);
            init.encoder_layer(&format!("mae.body.layer{l}"), c.width, ff);
            init.encoder_layer(&format!("mae.inter.layer{l}"), c.width, ff);
        }
        for branch in ["scene", "body", "inter"] {
            init.linear(&format!("mae.{branch}.out"), c.width, c.latent_dim, true);
        }
    }

    /// Encodes `history` (`T × N_b·3`) and `scene` (`N × 3`) nodes.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        history: Var,
        scene: Var,
        wanted: ConditionSet,
    ) -> Result<BundleVars> {
        let c = &self.config;
        let (frames, hw) = tape.shape(history);
        if hw != self.joints * 3 || frames == 0 {
            return Err(Error::shape(
                "encode_conditions",
                format!("T x {}", self.joints * 3),
                format!("{frames}x{hw}"),
            ));
        }
        let (points, pw) = tape.shape(scene);
        if wanted.needs_scene() && (pw != 3 || points == 0) {
            return Err(Error::shape("encode_conditions", "N x 3 scene", format!("{points}x{pw}")));
        }
        let zero = || Tensor::zeros(1, c.latent_dim);
        let positions: Vec<f64> = (0..frames).map(|f| f as f64).collect();
        let pe = nn::sinusoidal(&positions, c.width);

        // scene tokens entering each layer, plus the final output
        let mut scene_states = Vec::new();
        if wanted.needs_scene() {
            let mut s = nn::linear(tape, params, "mae.scene.embed", scene)?;
            let depth = if wanted.scene { c.layers } else { c.layers - 1 };
            scene_states.push(s);
            for l in 0..depth {
                s = nn::encoder_layer(tape, params, &format!("mae.scene.layer{l}"), s, None, c.heads)?;
                scene_states.push(s);
            }
        }

        let e_s = if wanted.scene {
            let pooled = tape.mean_rows(scene_states[c.layers]);
            nn::linear(tape, params, "mae.scene.out", pooled)?
        } else {
            tape.constant(zero())
        };

        let e_b = if wanted.body {
            let x = nn::linear(tape, params, "mae.body.embed", history)?;
            let p = tape.constant(pe.clone());
            let mut x = tape.add(x, p);
            for l in 0..c.layers {
                x = nn::encoder_layer(tape, params, &format!("mae.body.layer{l}"), x, None, c.heads)?;
            }
            let pooled = tape.mean_rows(x);
            nn::linear(tape, params, "mae.body.out", pooled)?
        } else {
            tape.constant(zero())
        };

        let e_i = if wanted.interaction {
            let x = nn::linear(tape, params, "mae.inter.embed", history)?;
            let p = tape.constant(pe);
            let mut x = tape.add(x, p);
            for l in 0..c.layers {
                let kv = scene_states[l];
                x = nn::encoder_layer(tape, params, &format!("mae.inter.layer{l}"), x, Some(kv), c.heads)?;
            }
            let pooled = tape.mean_rows(x);
            nn::linear(tape, params, "mae.inter.out", pooled)?
        } else {
            tape.constant(zero())
        };

        Ok(BundleVars { e_b, e_s, e_i })
    }

    /// Condition embeddings for a history and its (subsampled) key region.
    pub fn encode_conditions(
        &self,
        history: &MotionSequence,
        region: &ScenePointCloud,
        params: &ParamStore,
    ) -> Result<ConditionBundle> {
        let mut tape = Tape::new();
        let h = tape.constant(history.to_tensor());
        let s = tape.constant(region.to_tensor());
        let vars = self.encode_on_tape(&mut tape, params, h, s, ConditionSet::ALL)?;
        Ok(vars.to_bundle(&tape))
    }
}
