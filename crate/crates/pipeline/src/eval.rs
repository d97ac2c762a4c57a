//! Sampling futures from a trained checkpoint and scoring them.

use log::{info, warn};
use mcld_core::domain::{MotionSequence, RngHandle, Sample};
use mcld_core::metrics::{aggregate_runs, Distance, EvalReport, RunMetrics};
use mcld_core::model::{Mcld, Prediction};
use mcld_core::nn::ParamStore;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, Stage};
use crate::error::{Error, Result};

/// A trained model ready for sampling.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub model: Mcld,
    pub params: ParamStore,
}

impl Predictor {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.stage != Stage::Diffusion {
            return Err(Error::BadCheckpoint("prediction needs a diffusion checkpoint".into()));
        }
        let model = Mcld::new(ckpt.config.model.clone(), ckpt.skeleton.clone())?;
        Ok(Self {
            model,
            params: ckpt.params.clone(),
        })
    }

    /// `n_samples` futures for the history and scene of `sample`; its
    /// future, if any, is ignored.
    pub fn predict(&self, sample: &Sample, n_samples: usize, rng: RngHandle) -> Result<Vec<Prediction>> {
        let out = self
            .model
            .predict(&self.params, &sample.scene, &sample.history, n_samples, rng)?;
        if out.first().is_some_and(|p| p.fell_back) {
            warn!("key region of sample {:?} held no scene point; used the whole scene", sample.meta.extra.get("index"));
        }
        Ok(out)
    }
}

/// Aggregates runs of `(prediction, ground truth)` pairs.
pub fn score_runs(runs: &[Vec<(MotionSequence, MotionSequence)>], root_index: usize, distance: Distance) -> Result<EvalReport> {
    let per_run = runs
        .iter()
        .map(|pairs| {
            let refs: Vec<_> = pairs.iter().map(|(p, g)| (p, g)).collect();
            RunMetrics::from_pairs(&refs, root_index, distance)
        })
        .collect::<mcld_core::Result<Vec<_>>>()?;
    Ok(aggregate_runs(&per_run, distance)?)
}

/// `n_runs` independent passes over `samples`, one draw per sample per run.
/// Run `r` samples with `RngHandle::new(seed).derive(r).derive(i)`.
pub fn evaluate(predictor: &Predictor, samples: &[Sample], n_runs: usize, seed: u64, distance: Distance) -> Result<EvalReport> {
    if n_runs < 2 {
        return Err(mcld_core::Error::InsufficientRuns(n_runs).into());
    }
    if samples.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    let root = RngHandle::new(seed);
    let runs: Vec<Vec<(MotionSequence, MotionSequence)>> = (0..n_runs)
        .into_par_iter()
        .map(|r| {
            samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let rng = root.derive(r as u64).derive(i as u64);
                    let p = predictor.predict(s, 1, rng)?.remove(0);
                    Ok((p.motion, s.future.clone()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let report = score_runs(&runs, predictor.model.skeleton.root_index, distance)?;
    info!("evaluation over {} runs: ADE {:.1} mm, FDE {:.1} mm", n_runs, report.ade, report.fde);
    Ok(report)
}
