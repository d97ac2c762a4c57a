//! Acceptance suite: one PASS/FAIL line per criterion and a summary line.
//! Exits nonzero on a failure only with `MCLD_STRICT_ACCEPTANCE` set.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use mcld_core::autodiff::Tape;
use mcld_core::diffusion::{bundle_constants, Denoiser, DenoiserConfig, DiffusionSchedule, FusionConfig, ScheduleConfig};
use mcld_core::domain::{MotionSequence, RngHandle, Sample, ScenePointCloud};
use mcld_core::gradcheck::check_gradients;
use mcld_core::krp::{mask_scene, KeyRegionBox, MaskMode};
use mcld_core::mae::ConditionBundle;
use mcld_core::metrics::{self, Distance};
use mcld_core::model::Mcld;
use mcld_core::nn::{self, Initializer, ParamStore};
use mcld_core::tensor::Tensor;
use mcld_core::vae::{kl_divergence, Vae, VaeConfig};
use mcld_pipeline::{evaluate, train_diffusion, train_vae, Checkpoint, Predictor, RunConfig, StepRecord};
use mcld_synthdata::generate_dataset;
use rand::Rng;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.2} s (limit {} s)", t.as_secs_f64(), limit.as_secs()))
}

fn inversion_identity() -> Verdict {
    let start = Instant::now();
    let s = DiffusionSchedule::build(&ScheduleConfig::default()).map_err(|e| e.to_string())?;
    let root = RngHandle::new(2024);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let h = root.derive(i);
        let mut r = h.rng();
        let k = r.random_range(1..=1000);
        let z = Tensor::row_vector(h.derive(0).normal_vec(512).iter().map(|v| v * 3.0).collect());
        let eps = Tensor::row_vector(h.derive(1).normal_vec(512));
        let zk = s.forward_noise_step(&z, k, &eps);
        let back = s.denoise_step(&zk, &eps, k);
        worst = worst.max(back.max_abs_diff(&z) / z.max_abs());
    }
    let (fast, time) = within(Duration::from_secs(5), start);
    check(worst < 1e-9 && fast, format!("max relative error {worst:.2e} (< 1e-9), {time}"))
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let probes = 200;
    let mut lines = Vec::new();
    let mut ok = true;

    // VAE objective at C_e=8, width 16, one layer, two frames of three joints
    let vae = Vae::new(
        VaeConfig {
            layers: 1,
            heads: 2,
            width: 16,
            latent_dim: 8,
            ..VaeConfig::default()
        },
        3,
        2,
    )
    .unwrap();
    let mut p = ParamStore::new();
    vae.init(&mut p, RngHandle::new(1));
    let motion = Tensor::from_vec(2, 9, (0..18).map(|i| (i as f64 * 0.37).sin()).collect());
    let eps = Tensor::row_vector(RngHandle::new(2).normal_vec(8));
    let r = check_gradients(&p, |t, p| Ok(vae.loss_on_tape(t, p, &motion, &eps)?.0), probes, 1e-5, RngHandle::new(3)).unwrap();
    ok &= r.probes.len() >= probes && r.max_relative_error() < 1e-4;
    lines.push(format!("vae {:.1e} over {}", r.max_relative_error(), r.probes.len()));

    // one attention encoder layer, cross-attending as the interaction branch does
    let mut p = ParamStore::new();
    Initializer::new(&mut p, RngHandle::new(4)).encoder_layer("layer", 8, 16);
    let x = Tensor::from_vec(3, 8, (0..24).map(|i| (i as f64 * 0.61).cos()).collect());
    let kv = Tensor::from_vec(5, 8, (0..40).map(|i| (i as f64 * 0.23).sin()).collect());
    let w = Tensor::from_vec(3, 8, (0..24).map(|i| 0.1 * i as f64 - 1.0).collect());
    let r = check_gradients(
        &p,
        |t, p| {
            let (xv, kvv, wv) = (t.constant(x.clone()), t.constant(kv.clone()), t.constant(w.clone()));
            let y = nn::encoder_layer(t, p, "layer", xv, Some(kvv), 2)?;
            let y = t.mul(y, wv);
            Ok(t.sum(y))
        },
        probes,
        1e-5,
        RngHandle::new(5),
    )
    .unwrap();
    ok &= r.probes.len() >= probes && r.max_relative_error() < 1e-4;
    lines.push(format!("mae layer {:.1e} over {}", r.max_relative_error(), r.probes.len()));

    // noise-prediction loss through fusion and denoiser
    let d = Denoiser::new(
        DenoiserConfig {
            layers: 1,
            heads: 2,
            width: 8,
            latent_dim: 4,
        },
        FusionConfig::default(),
        50,
    )
    .unwrap();
    let mut p = ParamStore::new();
    d.init(&mut p, RngHandle::new(6));
    let s = DiffusionSchedule::build(&ScheduleConfig::rescaled(50)).unwrap();
    let bundle = ConditionBundle {
        e_b: Tensor::row_vector(vec![0.5, -0.2, 0.1, 1.0]),
        e_s: Tensor::row_vector(vec![-1.0, 0.3, 0.7, 0.0]),
        e_i: Tensor::row_vector(vec![0.2, 0.2, -0.6, 0.4]),
    };
    let z0 = Tensor::row_vector(vec![0.4, -0.1, 0.8, -0.5]);
    let eps = Tensor::row_vector(vec![1.1, -0.3, 0.2, 0.9]);
    let r = check_gradients(
        &p,
        |t, p| {
            let vars = bundle_constants(t, &bundle);
            d.noise_loss_on_tape(t, p, &s, vars, &z0, 17, &eps)
        },
        probes,
        1e-5,
        RngHandle::new(7),
    )
    .unwrap();
    ok &= r.probes.len() >= probes && r.max_relative_error() < 1e-4;
    lines.push(format!("fusion+denoiser {:.1e} over {}", r.max_relative_error(), r.probes.len()));

    let (fast, time) = within(Duration::from_secs(120), start);
    check(ok && fast, format!("{} (< 1e-4, >= {probes} probes), {time}", lines.join(", ")))
}

fn mask_oracle() -> Verdict {
    let start = Instant::now();
    let mut r = RngHandle::new(77).rng();
    let scene = ScenePointCloud::new((0..10_000).map(|_| [0; 3].map(|_: i32| r.random_range(-5.0..5.0))).collect());
    let mut mismatches = 0;
    let mut inside = 0usize;
    for _ in 0..100 {
        let origin = [0; 3].map(|_: i32| r.random_range(-5.0..4.0));
        let dims = [0; 3].map(|_: i32| r.random_range(0.1..4.0));
        let region = KeyRegionBox::new(origin, dims);
        let (points, weights) = mask_scene(&scene, &region, MaskMode::Hard, 0.1);
        for (i, p) in scene.points.iter().enumerate() {
            let mut hit = true;
            for a in 0..3 {
                if p[a] < origin[a] || p[a] > origin[a] + dims[a] {
                    hit = false;
                }
            }
            let want = if hit { 1.0 } else { 0.0 };
            let masked = if hit { *p } else { [0.0; 3] };
            if weights[i] != want || points[i] != masked {
                mismatches += 1;
            }
            inside += hit as usize;
        }
    }
    let (fast, time) = within(Duration::from_secs(10), start);
    check(
        mismatches == 0 && fast,
        format!("{mismatches} mismatches over 10^6 point-box pairs ({inside} inside), {time}"),
    )
}

fn desk_sample(seed: u64) -> (RunConfig, Sample) {
    let cfg = RunConfig::desk();
    let s = generate_dataset(&cfg.dataset_spec(1), &cfg.skeleton_spec(), seed).unwrap().remove(0);
    (cfg, s)
}

fn attention_invariants() -> Verdict {
    let start = Instant::now();
    let (cfg, sample) = desk_sample(5);
    let model = Mcld::new(cfg.model.clone(), cfg.skeleton_spec()).unwrap();
    let params = model.init(RngHandle::new(1));
    let centred = model.centre(&sample);
    let z0 = Tensor::row_vector(RngHandle::new(2).normal_vec(cfg.model.latent_dim()));
    let mut tape = Tape::new();
    model
        .stage2_loss_on_tape(&mut tape, &params, &centred, &z0, RngHandle::new(3))
        .map_err(|e| e.to_string())?;
    let mut maps = 0;
    let mut worst_row: f64 = 0.0;
    for w in tape.softmax_outputs() {
        maps += 1;
        for r in 0..w.rows() {
            worst_row = worst_row.max((w.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }

    let region = ScenePointCloud::new(centred.scene.points.iter().take(200).copied().collect());
    let mut shuffled = region.points.clone();
    use rand::seq::SliceRandom;
    shuffled.shuffle(&mut RngHandle::new(4).rng());
    let a = model.mae.encode_conditions(&centred.history, &region, &params).unwrap();
    let b = model
        .mae
        .encode_conditions(&centred.history, &ScenePointCloud::new(shuffled), &params)
        .unwrap();
    let perm = a.e_s.max_abs_diff(&b.e_s).max(a.e_i.max_abs_diff(&b.e_i));
    let (fast, time) = within(Duration::from_secs(30), start);
    check(
        worst_row < 1e-6 && perm < 1e-5 && maps > 0 && fast,
        format!("{maps} softmax maps, max |row sum - 1| {worst_row:.1e} (< 1e-6); permutation drift {perm:.1e} (< 1e-5), {time}"),
    )
}

fn closed_form_values() -> Verdict {
    let kl = kl_divergence(&Tensor::row_vector(vec![1.0]), &Tensor::row_vector(vec![1.0]));
    let c = 32;
    let kl_many = kl_divergence(&Tensor::full(1, c, 1.0), &Tensor::full(1, c, 1.0));

    let d = Denoiser::new(
        DenoiserConfig {
            layers: 1,
            heads: 2,
            width: 8,
            latent_dim: c,
        },
        FusionConfig::default(),
        50,
    )
    .unwrap();
    let mut p = ParamStore::new();
    d.init(&mut p, RngHandle::new(8));
    *p.get_mut("den.out.w").unwrap() = Tensor::zeros(8, c);
    *p.get_mut("den.out.b").unwrap() = Tensor::zeros(1, c);
    let s = DiffusionSchedule::build(&ScheduleConfig::rescaled(50)).unwrap();
    let bundle = ConditionBundle {
        e_b: Tensor::zeros(1, c),
        e_s: Tensor::zeros(1, c),
        e_i: Tensor::zeros(1, c),
    };
    let root = RngHandle::new(10);
    let draws = 10_000;
    let mut total = 0.0;
    for i in 0..draws {
        let h = root.derive(i);
        let k = h.rng().random_range(1..=50);
        let z0 = Tensor::row_vector(h.derive(0).normal_vec(c));
        let eps = Tensor::row_vector(h.derive(1).normal_vec(c));
        let mut tape = Tape::new();
        let vars = bundle_constants(&mut tape, &bundle);
        let loss = d.noise_loss_on_tape(&mut tape, &p, &s, vars, &z0, k, &eps).unwrap();
        total += tape.value(loss).item();
    }
    let mean = total / draws as f64;
    let rel = (mean - c as f64).abs() / c as f64;
    check(
        kl == 0.5 && kl_many == 0.5 * c as f64 && rel < 0.05,
        format!("KL {kl} (= 0.5), {c} components {kl_many}; zero-predictor loss mean {mean:.3} vs C_e {c} ({:.2}% off, < 5%)", 100.0 * rel),
    )
}

fn epoch_means(log: &[StepRecord], per_epoch: usize, field: fn(&StepRecord) -> f64) -> Vec<f64> {
    log.chunks(per_epoch)
        .map(|c| c.iter().map(field).sum::<f64>() / c.len() as f64)
        .collect()
}

struct DeskRun {
    checkpoint: Checkpoint,
    test: Vec<Sample>,
    report_finite: bool,
    report_ci_ok: bool,
}

fn desk_training() -> (Verdict, Option<DeskRun>) {
    let start = Instant::now();
    let cfg = RunConfig::desk();
    let sk = cfg.skeleton_spec();
    let train = generate_dataset(&cfg.dataset_spec(cfg.data.train_samples), &sk, cfg.seed).unwrap();
    let test = generate_dataset(&cfg.dataset_spec(cfg.data.test_samples), &sk, cfg.seed ^ 0x7e57).unwrap();
    let bone = train.iter().flat_map(|s| s.future.frames().map(|f| sk.mean_bone_length(f))).sum::<f64>()
        / train.iter().map(|s| s.future.frame_count()).sum::<usize>() as f64;
    let per_epoch = train.len().div_ceil(cfg.batch_size);

    let t1 = Instant::now();
    let s1 = match train_vae(&cfg, &train, None) {
        Ok(o) => o,
        Err(e) => return (Err(format!("stage 1 failed: {e}")), None),
    };
    let t1 = t1.elapsed().as_secs_f64();
    let l_mr = epoch_means(&s1.log, per_epoch, |r| r.l_mr.unwrap_or(f64::NAN));
    let best_mr = l_mr.iter().copied().fold(f64::INFINITY, f64::min);
    let stage1_ok = s1.log.len() <= 2000 && best_mr < 0.05 * bone;

    let t2 = Instant::now();
    let s2 = match train_diffusion(&cfg, &train, Some(&s1.checkpoint), None) {
        Ok(o) => o,
        Err(e) => return (Err(format!("stage 2 failed: {e}")), None),
    };
    let t2 = t2.elapsed().as_secs_f64();
    let first = s2.log.iter().take(100).map(|r| r.loss).sum::<f64>() / 100.0;
    let best_loss = epoch_means(&s2.log, per_epoch, |r| r.loss).into_iter().fold(f64::INFINITY, f64::min);
    let stage2_ok = s2.log.len() <= 5000 && best_loss < 0.5 * first;

    let t3 = Instant::now();
    let predictor = Predictor::from_checkpoint(&s2.checkpoint).unwrap();
    let report = evaluate(&predictor, &test, cfg.eval_runs, cfg.seed, cfg.distance);
    let t3 = t3.elapsed().as_secs_f64();
    let (report_finite, report_ci_ok, ade) = match &report {
        Ok(r) => {
            let ci = &r.ci95;
            let cells_ok = ci.ade >= 0.0
                && ci.fde >= 0.0
                && ci.pose_error_by_horizon.values().chain(ci.path_error_by_horizon.values()).all(|&v| v >= 0.0);
            (r.is_finite(), cells_ok, r.ade)
        }
        Err(_) => (false, false, f64::NAN),
    };
    let (fast, time) = within(Duration::from_secs(30 * 60), start);
    let detail = format!(
        "stage-1 best epoch l_mr {:.1} mm vs 5% of bone {:.1} mm in {} steps ({t1:.0} s); \
         stage-2 best epoch loss {best_loss:.3} vs 0.5x first-100 {:.3} in {} steps ({t2:.0} s); \
         evaluate {} runs ADE {ade:.0} mm ({t3:.0} s); total {time}",
        1000.0 * best_mr,
        50.0 * bone,
        s1.log.len(),
        0.5 * first,
        s2.log.len(),
        cfg.eval_runs,
    );
    let run = DeskRun {
        checkpoint: s2.checkpoint,
        test,
        report_finite,
        report_ci_ok,
    };
    (check(stage1_ok && stage2_ok && report.is_ok() && fast, detail), Some(run))
}

fn prediction_contract(run: Option<&DeskRun>) -> Verdict {
    let run = run.ok_or("no desk checkpoint")?;
    let predictor = Predictor::from_checkpoint(&run.checkpoint).unwrap();
    let mut input = run.test[0].clone();
    input.future = MotionSequence::new(Vec::new(), input.future.fps());
    let a = predictor.predict(&input, 20, RngHandle::new(31)).map_err(|e| e.to_string())?;
    let b = predictor.predict(&input, 20, RngHandle::new(31)).map_err(|e| e.to_string())?;
    let mut min_ade = f64::INFINITY;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            min_ade = min_ade.min(metrics::ade(&a[i].motion, &a[j].motion, Distance::L2).unwrap());
        }
    }
    let identical = a.len() == 20
        && a.iter().zip(&b).all(|(x, y)| {
            x.motion
                .positions()
                .iter()
                .flatten()
                .zip(y.motion.positions().iter().flatten())
                .all(|(u, v)| u.to_bits() == v.to_bits())
        });
    check(
        min_ade > 0.0 && identical && run.report_finite && run.report_ci_ok,
        format!(
            "min pairwise ADE {:.3e} mm (> 0); repeat bit-identical {identical}; report finite {}, ci95 >= 0 {}",
            min_ade * 1e3,
            run.report_finite,
            run.report_ci_ok
        ),
    )
}

fn naive(pred: &MotionSequence, gt: &MotionSequence, frames: std::ops::Range<usize>, joints: std::ops::Range<usize>, l1: bool) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for f in frames {
        for j in joints.clone() {
            let (p, g) = (pred.joint(f, j), gt.joint(f, j));
            let mut acc = 0.0;
            for a in 0..3 {
                let d = p[a] - g[a];
                acc += if l1 { d.abs() } else { d * d };
            }
            total += if l1 { acc } else { acc.sqrt() };
            n += 1;
        }
    }
    1000.0 * total / n as f64
}

fn metrics_oracle() -> Verdict {
    let root = RngHandle::new(88);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let mut r = root.derive(i).rng();
        let (frames, joints) = (r.random_range(1..=6), r.random_range(1..=5));
        let mut seq = || {
            let pos = (0..frames * joints).map(|_| [0; 3].map(|_: i32| r.random_range(-2.0..2.0))).collect();
            MotionSequence::from_flat(joints, 5.0, pos)
        };
        let (pred, gt) = (seq(), seq());
        let upto = 1 + (i as usize % frames);
        let root_j = i as usize % joints;
        for (dist, l1) in [(Distance::L2, false), (Distance::L1, true)] {
            let pairs = [
                (metrics::ade(&pred, &gt, dist).unwrap(), naive(&pred, &gt, 0..frames, 0..joints, l1)),
                (metrics::fde(&pred, &gt, dist).unwrap(), naive(&pred, &gt, frames - 1..frames, 0..joints, l1)),
                (metrics::pose_error(&pred, &gt, upto, dist).unwrap(), naive(&pred, &gt, 0..upto, 0..joints, l1)),
                (
                    metrics::path_error(&pred, &gt, root_j, upto, dist).unwrap(),
                    naive(&pred, &gt, 0..upto, root_j..root_j + 1, l1),
                ),
            ];
            for (got, want) in pairs {
                worst = worst.max((got - want).abs());
            }
        }
    }
    check(worst < 1e-9, format!("max deviation {worst:.1e} over 100 instances, l2 and l1 (< 1e-9)"))
}

fn ablation_harness() -> Verdict {
    let start = Instant::now();
    let base = RunConfig::desk();
    let sk = base.skeleton_spec();
    let train = generate_dataset(&base.dataset_spec(base.data.train_samples), &sk, 3).unwrap();
    let one_epoch = "stage1_epochs = 1\nstage2_epochs = 1\n";
    let cfg1 = base.with_overrides(one_epoch).unwrap();
    let stage1 = train_vae(&cfg1, &train, None).map_err(|e| format!("stage 1: {e}"))?.checkpoint;

    let mut variants: Vec<(String, String)> = Vec::new();
    for mask in 1..8u8 {
        let (b, s, i) = (mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
        let name: String = [(b, "B"), (i, "I"), (s, "S")].iter().filter(|x| x.0).map(|x| x.1).collect();
        variants.push((
            format!("E_{name}"),
            format!("model.conditions.body = {b}\nmodel.conditions.scene = {s}\nmodel.conditions.interaction = {i}\n"),
        ));
    }
    variants.push(("w/o KRP".into(), "model.use_krp = false\n".into()));
    variants.push(("w/o MCF".into(), "model.channel_attention = false\n".into()));

    let mut failed = Vec::new();
    for (name, text) in &variants {
        let cfg = match base.with_overrides(&format!("{one_epoch}{text}")) {
            Ok(c) => c,
            Err(e) => {
                failed.push(format!("{name}: {e}"));
                continue;
            }
        };
        match train_diffusion(&cfg, &train, Some(&stage1), None) {
            Ok(o) if o.log.iter().all(|r| r.loss.is_finite()) && o.log.len() == 16 => {}
            Ok(o) => failed.push(format!("{name}: {} steps", o.log.len())),
            Err(e) => failed.push(format!("{name}: {e}")),
        }
    }
    let names: Vec<&str> = variants.iter().map(|v| v.0.as_str()).collect();
    let time = format!("{:.0} s", start.elapsed().as_secs_f64());
    check(
        failed.is_empty(),
        format!("{} variants [{}] each trained one epoch; failures {:?}; {time}", variants.len(), names.join(", "), failed),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        let (tag, detail) = match &v {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n} {tag} [{name}] {detail}");
        results.push((n, name, v));
    };
    report(1, "diffusion inversion identity", guarded(inversion_identity));
    report(2, "gradient fidelity", guarded(gradient_fidelity));
    report(3, "mask oracle", guarded(mask_oracle));
    report(4, "attention invariants", guarded(attention_invariants));
    report(5, "closed-form spot values", guarded(closed_form_values));
    let mut desk = None;
    let v6 = guarded(|| {
        let (v, run) = desk_training();
        desk = run;
        v
    });
    report(6, "desk-scale end-to-end training", v6);
    report(7, "prediction contract", guarded(|| prediction_contract(desk.as_ref())));
    report(8, "metrics oracle equivalence", guarded(metrics_oracle));
    report(9, "ablation harness", guarded(ablation_harness));

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("acceptance: {}/{} passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        if std::env::var_os("MCLD_STRICT_ACCEPTANCE").is_some() {
            std::process::exit(1);
        }
    }
}
