#![allow(dead_code)]

use mcld_core::domain::Sample;
use mcld_pipeline::RunConfig;
use mcld_synthdata::generate_dataset;

/// Desk profile shrunk to a few hundred parameters per module.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::desk();
    let m = &mut c.model;
    m.vae.layers = 1;
    m.vae.heads = 2;
    m.vae.width = 16;
    m.vae.latent_dim = 8;
    m.krp.width = 8;
    m.mae.layers = 1;
    m.mae.width = 8;
    m.mae.latent_dim = 8;
    m.denoiser.layers = 1;
    m.denoiser.heads = 2;
    m.denoiser.width = 16;
    m.denoiser.latent_dim = 8;
    m.region_points = 16;
    c.batch_size = 4;
    c.stage1_epochs = 2;
    c.stage2_epochs = 2;
    c.data.train_samples = 8;
    c.data.test_samples = 3;
    c.data.room.points_per_m2 = 8.0;
    c
}

pub fn dataset(cfg: &RunConfig, n: usize, seed: u64) -> Vec<Sample> {
    generate_dataset(&cfg.dataset_spec(n), &cfg.skeleton_spec(), seed).unwrap()
}
