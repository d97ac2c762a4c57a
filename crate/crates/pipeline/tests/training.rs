mod common;

use common::{dataset, tiny_config};
use mcld_core::autodiff::Tape;
use mcld_core::domain::RngHandle;
use mcld_core::model::Mcld;
use mcld_pipeline::train::{batch_indices, step_rng};
use mcld_pipeline::{train_diffusion, train_diffusion_until, train_vae, train_vae_until, Checkpoint, Error, Stage};

#[test]
fn overfitting_one_sample_reconstructs_within_five_percent_of_bone_length() {
    let mut cfg = tiny_config();
    cfg.batch_size = 1;
    cfg.stage1_epochs = 2000;
    cfg.stage1_max_steps = None;
    let samples = dataset(&cfg, 1, 11);
    let out = train_vae(&cfg, &samples, None).unwrap();
    assert_eq!(out.log.len(), 2000);

    let sk = cfg.skeleton_spec();
    let model = Mcld::new(cfg.model.clone(), sk.clone()).unwrap();
    let centred = model.centre(&samples[0]);
    let bone = sk.mean_bone_length(centred.future.frame(0));
    let final_l_mr = out.log.last().unwrap().l_mr.unwrap();
    assert!(final_l_mr < 0.05 * bone, "l_mr {final_l_mr} vs bone {bone}");

    let (mu, _) = model.vae.encode(&out.checkpoint.params, &centred.future).unwrap();
    let recon = model.vae.decode(&out.checkpoint.params, &mu, centred.future.fps()).unwrap();
    let err = mcld_core::vae::reconstruction_error(&centred.future, &recon).unwrap();
    assert!(err < 0.05 * bone, "mean-code reconstruction {err}");
}

#[test]
fn overfit_mean_code_reconstructs_within_a_millimetre() {
    let mut cfg = tiny_config();
    cfg.batch_size = 1;
    cfg.stage1_epochs = 4000;
    cfg.stage1_max_steps = None;
    let samples = dataset(&cfg, 1, 11);
    cfg.stage1_max_steps = Some(0);
    let mut start = train_vae(&cfg, &samples, None).unwrap().checkpoint;
    cfg.stage1_max_steps = None;
    // With one sample the fitted mean is the sample itself; start from identity instead.
    for (name, value) in [("vae.norm.mean", 0.0), ("vae.norm.scale", 1.0)] {
        let t = start.params.get(name).unwrap().map(|_| value);
        start.params.insert(name, t);
    }
    let out = train_vae(&cfg, &samples, Some(&start)).unwrap();

    let model = Mcld::new(cfg.model.clone(), cfg.skeleton_spec()).unwrap();
    let centred = model.centre(&samples[0]);
    let (mu, _) = model.vae.encode(&out.checkpoint.params, &centred.future).unwrap();
    let recon = model.vae.decode(&out.checkpoint.params, &mu, centred.future.fps()).unwrap();
    let err = mcld_core::vae::reconstruction_error(&centred.future, &recon).unwrap();
    assert!(err < 1e-3, "mean-code reconstruction {err}");
}

#[test]
fn first_logged_loss_matches_recomputation_from_initial_checkpoint() {
    let mut cfg = tiny_config();
    let samples = dataset(&cfg, 8, 3);
    cfg.stage1_max_steps = Some(0);
    let initial = train_vae(&cfg, &samples, None).unwrap().checkpoint;
    assert_eq!(initial.step, 0);
    cfg.stage1_max_steps = None;
    let log = train_vae_until(&cfg, &samples, None, 1).unwrap().log;

    let model = Mcld::new(cfg.model.clone(), cfg.skeleton_spec()).unwrap();
    let idx = batch_indices(cfg.seed, Stage::Vae, 0, samples.len(), cfg.batch_size);
    let rng = step_rng(cfg.seed, Stage::Vae, 0);
    let mut expected = 0.0;
    for (slot, &i) in idx.iter().enumerate() {
        let mut tape = Tape::new();
        let centred = model.centre(&samples[i]);
        let (total, _, _) = model
            .stage1_loss_on_tape(&mut tape, &initial.params, &centred, rng.derive(slot as u64))
            .unwrap();
        expected += tape.value(total).item() / idx.len() as f64;
    }
    assert_eq!(log[0].loss, expected);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let cfg = tiny_config();
    let samples = dataset(&cfg, 8, 5);
    let a = train_vae(&cfg, &samples, None).unwrap();
    let b = train_vae(&cfg, &samples, None).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.log, b.log);

    let mut other = cfg.clone();
    other.seed = 6;
    let c = train_vae(&other, &samples, None).unwrap();
    assert_ne!(a.checkpoint.params, c.checkpoint.params);
}

#[test]
fn stage_two_leaves_the_vae_untouched() {
    let cfg = tiny_config();
    let samples = dataset(&cfg, 8, 7);
    let stage1 = train_vae(&cfg, &samples, None).unwrap().checkpoint;
    let before = stage1.params.subset("vae").checksum();
    let out = train_diffusion(&cfg, &samples, Some(&stage1), None).unwrap();
    assert_eq!(out.checkpoint.stage, Stage::Diffusion);
    assert_eq!(out.checkpoint.params.subset("vae").checksum(), before);
    for prefix in ["krp", "mae", "mcf", "den"] {
        let fresh = Mcld::new(cfg.model.clone(), cfg.skeleton_spec())
            .unwrap()
            .init(RngHandle::new(cfg.seed).derive(2))
            .subset(prefix);
        assert_ne!(out.checkpoint.params.subset(prefix), fresh, "{prefix} did not move");
    }
}

#[test]
fn resumed_runs_retrace_the_uninterrupted_run() {
    let cfg = tiny_config();
    let samples = dataset(&cfg, 8, 9);
    let full = train_vae(&cfg, &samples, None).unwrap();
    let half = train_vae_until(&cfg, &samples, None, 2).unwrap();
    let reloaded = Checkpoint::from_bytes(&half.checkpoint.to_bytes()).unwrap();
    let rest = train_vae(&cfg, &samples, Some(&reloaded)).unwrap();
    for (a, b) in full.log[2..].iter().zip(&rest.log) {
        assert_eq!(a.step, b.step);
        assert!((a.loss - b.loss).abs() < 1e-5);
    }
    assert_eq!(rest.checkpoint.params, full.checkpoint.params);

    let stage1 = full.checkpoint;
    let full2 = train_diffusion(&cfg, &samples, Some(&stage1), None).unwrap();
    let half2 = train_diffusion_until(&cfg, &samples, Some(&stage1), None, 3).unwrap();
    let reloaded = Checkpoint::from_bytes(&half2.checkpoint.to_bytes()).unwrap();
    let rest2 = train_diffusion(&cfg, &samples, Some(&stage1), Some(&reloaded)).unwrap();
    assert_eq!(rest2.log.len(), full2.log.len() - 3);
    for (a, b) in full2.log[3..].iter().zip(&rest2.log) {
        assert!((a.loss - b.loss).abs() < 1e-5);
    }
    assert_eq!(rest2.checkpoint.to_bytes(), full2.checkpoint.to_bytes());
}

#[test]
fn stage_two_requires_a_stage_one_checkpoint() {
    let cfg = tiny_config();
    let samples = dataset(&cfg, 4, 1);
    assert!(matches!(train_diffusion(&cfg, &samples, None, None), Err(Error::MissingStage1(_))));

    let stage1 = train_vae_until(&cfg, &samples, None, 1).unwrap().checkpoint;
    let stage2 = train_diffusion_until(&cfg, &samples, Some(&stage1), None, 1).unwrap().checkpoint;
    assert!(matches!(
        train_diffusion(&cfg, &samples, Some(&stage2), None),
        Err(Error::MissingStage1(_))
    ));
    assert!(matches!(train_vae(&cfg, &samples, Some(&stage2)), Err(Error::BadCheckpoint(_))));
}

#[test]
fn diverging_training_reports_the_last_good_checkpoint() {
    let mut cfg = tiny_config();
    cfg.optimizer.lr = 1e300;
    cfg.optimizer.warmup_steps = 0;
    let samples = dataset(&cfg, 4, 2);
    match train_vae(&cfg, &samples, None) {
        Err(Error::NonFiniteLoss { stage, step, last_good }) => {
            assert_eq!(stage, "vae");
            assert_eq!(last_good.step, step);
            assert!(last_good.params.iter().all(|(_, t)| t.is_finite()));
        }
        other => panic!("expected NonFiniteLoss, got {:?}", other.map(|o| o.log.len())),
    }
}
