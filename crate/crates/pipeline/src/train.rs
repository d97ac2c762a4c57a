//! Two-stage training: the motion VAE first, then the key-region proposal,
//! condition encoder, fusion and denoiser against the frozen VAE.
//!
//! Every step draws its batch and noise from `(seed, stage, step)`, and
//! parameters are kept representable in `f32`, so a run resumed from a
//! checkpoint retraces the uninterrupted run exactly.

use std::collections::BTreeMap;

use log::{debug, info};
use mcld_core::autodiff::Tape;
use mcld_core::domain::{RngHandle, Sample};
use mcld_core::model::Mcld;
use mcld_core::nn::{accumulate_grads, clip_global_norm, AdamW, ParamStore};
use mcld_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_mr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_kl: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

fn round_to_f32(params: &mut ParamStore) {
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v = f64::from(*v as f32);
        }
    }
}

fn stage_tag(stage: Stage) -> u64 {
    match stage {
        Stage::Vae => 1,
        Stage::Diffusion => 2,
    }
}

/// Sample indices of one step: a fresh permutation per epoch, cut into
/// consecutive batches (the last one may be short).
pub fn batch_indices(seed: u64, stage: Stage, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch);
    let (epoch, pos) = (step / per_epoch, step % per_epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut RngHandle::new(seed).derive(stage_tag(stage)).derive(epoch as u64).rng());
    perm[pos * batch..((pos + 1) * batch).min(n)].to_vec()
}

/// Noise for one step; batch slot `s` uses `.derive(s)`.
pub fn step_rng(seed: u64, stage: Stage, step: usize) -> RngHandle {
    RngHandle::new(seed).derive(stage_tag(stage) + 100).derive(step as u64)
}

struct SampleStep {
    loss: f64,
    terms: Option<(f64, f64)>,
    grads: BTreeMap<String, Tensor>,
}

struct Loop<'a> {
    cfg: &'a RunConfig,
    model: &'a Mcld,
    stage: Stage,
    params: ParamStore,
    optimizer: AdamW,
    step: usize,
    clip: Option<f64>,
}

impl Loop<'_> {
    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.stage,
            step: self.step,
            config: self.cfg.clone(),
            skeleton: self.model.skeleton.clone(),
            schedule: self.model.schedule.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Trains up to `stop` of the stage's `total` steps.
    fn run<F>(mut self, n_samples: usize, total: usize, stop: usize, per_sample: F) -> Result<TrainOutcome>
    where
        F: Fn(&ParamStore, usize, RngHandle) -> mcld_core::Result<SampleStep> + Sync,
    {
        let stage_name = match self.stage {
            Stage::Vae => "vae",
            Stage::Diffusion => "diffusion",
        };
        let per_epoch = n_samples.div_ceil(self.cfg.batch_size);
        let stop = stop.min(total);
        let mut log = Vec::with_capacity(stop.saturating_sub(self.step));
        while self.step < stop {
            let idx = batch_indices(self.cfg.seed, self.stage, self.step, n_samples, self.cfg.batch_size);
            let rng = step_rng(self.cfg.seed, self.stage, self.step);
            let params = &self.params;
            let results: Vec<SampleStep> = idx
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| per_sample(params, i, rng.derive(slot as u64)))
                .collect::<mcld_core::Result<_>>()?;

            let scale = 1.0 / results.len() as f64;
            let mut grads = BTreeMap::new();
            let (mut loss, mut l_mr, mut l_kl) = (0.0, 0.0, 0.0);
            for r in &results {
                accumulate_grads(&mut grads, &r.grads);
                loss += r.loss * scale;
                if let Some((a, b)) = r.terms {
                    l_mr += a * scale;
                    l_kl += b * scale;
                }
            }
            for g in grads.values_mut() {
                *g = g.scale(scale);
            }
            let finite = loss.is_finite() && grads.values().all(Tensor::is_finite);
            if !finite {
                return Err(Error::NonFiniteLoss {
                    stage: stage_name,
                    step: self.step,
                    last_good: Box::new(self.checkpoint()),
                });
            }
            let grad_norm = match self.clip {
                Some(c) => clip_global_norm(&mut grads, c),
                None => mcld_core::nn::global_norm(&grads),
            };
            let before = (self.params.clone(), self.optimizer.clone());
            self.optimizer.config.lr = self.cfg.optimizer.lr_at(self.step, total);
            self.optimizer.update(&mut self.params, &grads);
            round_to_f32(&mut self.params);
            if !self.params.iter().all(|(_, t)| t.is_finite()) {
                (self.params, self.optimizer) = before;
                return Err(Error::NonFiniteLoss {
                    stage: stage_name,
                    step: self.step,
                    last_good: Box::new(self.checkpoint()),
                });
            }

            let terms = results[0].terms.is_some();
            log.push(StepRecord {
                step: self.step,
                loss,
                l_mr: terms.then_some(l_mr),
                l_kl: terms.then_some(l_kl),
                grad_norm,
            });
            debug!("{stage_name} step {} loss {loss:.6}", self.step);
            self.step += 1;
            if self.step % per_epoch == 0 || self.step == total {
                let recent = &log[log.len().saturating_sub(per_epoch)..];
                let mean = recent.iter().map(|r| r.loss).sum::<f64>() / recent.len() as f64;
                info!("{stage_name} epoch {} step {} loss {mean:.5}", self.step.div_ceil(per_epoch), self.step);
            }
        }
        Ok(TrainOutcome {
            checkpoint: self.checkpoint(),
            log,
        })
    }
}

fn check_resume(resume: &Checkpoint, stage: Stage, cfg: &RunConfig) -> Result<()> {
    if resume.stage != stage {
        return Err(Error::BadCheckpoint(format!("cannot resume {stage:?} training from a {:?} checkpoint", resume.stage)));
    }
    if resume.config.model != cfg.model || resume.config.seed != cfg.seed || resume.config.batch_size != cfg.batch_size {
        return Err(Error::Config("resumed run must keep the model, seed and batch size".into()));
    }
    Ok(())
}

/// Stage one. Starts from a fresh initialisation unless `resume` is given.
pub fn train_vae(cfg: &RunConfig, samples: &[Sample], resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    train_vae_until(cfg, samples, resume, usize::MAX)
}

/// [`train_vae`] that stops once `stop_at` steps are done, as an
/// interrupted run would.
pub fn train_vae_until(cfg: &RunConfig, samples: &[Sample], resume: Option<&Checkpoint>, stop_at: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let model = Mcld::new(cfg.model.clone(), cfg.skeleton_spec())?;
    let centred: Vec<Sample> = samples.iter().map(|s| model.centre(s)).collect();
    let (params, optimizer, step) = match resume {
        Some(c) => {
            check_resume(c, Stage::Vae, cfg)?;
            (c.params.clone(), c.optimizer.clone(), c.step)
        }
        None => {
            let mut p = model.init(RngHandle::new(cfg.seed));
            let futures: Vec<_> = centred.iter().map(|s| s.future.clone()).collect();
            model.vae.set_normalization(&mut p, &futures)?;
            round_to_f32(&mut p);
            (p, AdamW::new(cfg.optimizer.adamw()), 0)
        }
    };
    let total = cfg.stage_steps(1, samples.len());
    let lp = Loop {
        cfg,
        model: &model,
        stage: Stage::Vae,
        params,
        optimizer,
        step,
        clip: None,
    };
    lp.run(samples.len(), total, stop_at, |params, i, rng| {
        let mut tape = Tape::new();
        let (total, l_mr, l_kl) = model.stage1_loss_on_tape(&mut tape, params, &centred[i], rng)?;
        Ok(SampleStep {
            loss: tape.value(total).item(),
            terms: Some((tape.value(l_mr).item(), tape.value(l_kl).item())),
            grads: tape.param_grads(total),
        })
    })
}

/// Stage two on top of a stage-one checkpoint; VAE parameters are left
/// untouched.
pub fn train_diffusion(
    cfg: &RunConfig,
    samples: &[Sample],
    stage1: Option<&Checkpoint>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    train_diffusion_until(cfg, samples, stage1, resume, usize::MAX)
}

pub fn train_diffusion_until(
    cfg: &RunConfig,
    samples: &[Sample],
    stage1: Option<&Checkpoint>,
    resume: Option<&Checkpoint>,
    stop_at: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let Some(stage1) = stage1 else {
        return Err(Error::MissingStage1("no checkpoint given".into()));
    };
    if stage1.stage != Stage::Vae {
        return Err(Error::MissingStage1(format!("expected a vae checkpoint, got {:?}", stage1.stage)));
    }
    let m1 = &stage1.config.model;
    if m1.vae != cfg.model.vae || m1.future_frames != cfg.model.future_frames || stage1.skeleton != cfg.skeleton_spec() {
        return Err(Error::Config("stage-1 checkpoint was trained with a different VAE or skeleton".into()));
    }
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let model = Mcld::new(cfg.model.clone(), cfg.skeleton_spec())?;
    let centred: Vec<Sample> = samples.iter().map(|s| model.centre(s)).collect();
    let vae_params = stage1.params.subset("vae");
    let targets: Vec<Tensor> = centred
        .par_iter()
        .map(|s| model.target_latent(&vae_params, s))
        .collect::<mcld_core::Result<_>>()?;

    let (params, optimizer, step) = match resume {
        Some(c) => {
            check_resume(c, Stage::Diffusion, cfg)?;
            if c.params.subset("vae") != vae_params {
                return Err(Error::Config("resume checkpoint holds a different VAE".into()));
            }
            (c.params.clone(), c.optimizer.clone(), c.step)
        }
        None => {
            // fresh weights for every non-VAE module, the trained VAE kept as is
            let mut p = model.init(RngHandle::new(cfg.seed).derive(2));
            round_to_f32(&mut p);
            p.extend(vae_params.clone());
            (p, AdamW::new(cfg.optimizer.adamw()), 0)
        }
    };
    info!(
        "diffusion stage: {} samples, latent norm mean {:.3}",
        samples.len(),
        targets.iter().map(Tensor::norm).sum::<f64>() / targets.len() as f64
    );
    let total = cfg.stage_steps(2, samples.len());
    let lp = Loop {
        cfg,
        model: &model,
        stage: Stage::Diffusion,
        params,
        optimizer,
        step,
        clip: cfg.grad_clip,
    };
    lp.run(samples.len(), total, stop_at, |params, i, rng| {
        let mut tape = Tape::new();
        let loss = model.stage2_loss_on_tape(&mut tape, params, &centred[i], &targets[i], rng)?;
        let mut grads = tape.param_grads(loss);
        grads.retain(|name, _| !name.starts_with("vae."));
        Ok(SampleStep {
            loss: tape.value(loss).item(),
            terms: None,
            grads,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_indices(3, Stage::Vae, s, 10, 3)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_ne!(batch_indices(3, Stage::Vae, 0, 10, 3), batch_indices(3, Stage::Vae, 4, 10, 3));
        assert_eq!(batch_indices(3, Stage::Vae, 5, 10, 3), batch_indices(3, Stage::Vae, 5, 10, 3));
    }

    #[test]
    fn rounding_is_idempotent() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::row_vector(vec![0.1, 1.0 / 3.0]));
        round_to_f32(&mut p);
        let once = p.clone();
        round_to_f32(&mut p);
        assert_eq!(p, once);
    }
}
