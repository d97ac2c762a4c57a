use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use mcld_core::domain::{MotionSequence, RngHandle, Sample};
use mcld_pipeline::config::Profile;
use mcld_pipeline::error::{Error, Result};
use mcld_pipeline::{evaluate, export_viz, train_diffusion, train_vae, Checkpoint, Predictor, RunConfig, StepRecord};
use mcld_synthdata::{generate_dataset, read_dataset, write_dataset};
use serde_json::json;

#[derive(Parser)]
#[command(name = "mcld", version, about = "Scene-aware human motion prediction with multi-condition latent diffusion")]
struct Cli {
    /// Flat `key = value` file overriding the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: Profile,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/desk")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArg {
    /// Dataset file; defaults to `<out>/train.jsonl` or `<out>/test.jsonl`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test sets into `<out>`.
    GenData,
    /// Stage one: fit the motion VAE.
    TrainVae {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage two: fit the condition path and denoiser with the VAE frozen.
    TrainDiffusion {
        #[command(flatten)]
        data: DataArg,
        /// Stage-one checkpoint; defaults to `<out>/vae.ckpt`.
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample futures for one test sample.
    Predict {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 5)]
        n_samples: usize,
    },
    /// Repeated evaluation over the test set.
    Evaluate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        n_runs: Option<usize>,
    },
    /// Frame and trajectory images for one test sample.
    Viz {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 3)]
        n_samples: usize,
    },
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_log(path: &Path, log: &[StepRecord]) -> Result<()> {
    let lines: Vec<String> = log.iter().map(|r| serde_json::to_string(r).expect("record serializes")).collect();
    std::fs::write(path, lines.join("\n") + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_samples(arg: &DataArg, out: &Path, default: &str) -> Result<Vec<Sample>> {
    let path = arg.data.clone().unwrap_or_else(|| out.join(default));
    Ok(read_dataset(&path)?)
}

fn load_ckpt(path: Option<&PathBuf>, out: &Path) -> Result<Checkpoint> {
    Checkpoint::load(&path.cloned().unwrap_or_else(|| out.join("diffusion.ckpt")))
}

fn save_failure(err: Error, out: &Path) -> Error {
    if let Error::NonFiniteLoss { stage, last_good, .. } = &err {
        let path = out.join(format!("{stage}.last_good.ckpt"));
        if last_good.save(&path).is_ok() {
            info!("last good parameters written to {}", path.display());
        }
    }
    err
}

fn motion_json(m: &MotionSequence) -> serde_json::Value {
    json!(m.frames().map(|f| f.iter().map(|p| p.map(|c| c as f32)).collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let mut cfg = RunConfig::load(cli.profile, cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let skeleton = cfg.skeleton_spec();
    match cli.command {
        Command::GenData => {
            let train = generate_dataset(&cfg.dataset_spec(cfg.data.train_samples), &skeleton, cfg.seed)?;
            let test = generate_dataset(&cfg.dataset_spec(cfg.data.test_samples), &skeleton, cfg.seed ^ 0x7e57)?;
            let (a, b) = (out.join("train.jsonl"), out.join("test.jsonl"));
            write_dataset(&train, &skeleton, &a)?;
            write_dataset(&test, &skeleton, &b)?;
            std::fs::write(out.join("config.txt"), cfg.to_flat()).map_err(|source| Error::Io {
                path: out.join("config.txt"),
                source,
            })?;
            Ok(json!({"train": a, "test": b, "train_samples": train.len(), "test_samples": test.len()}))
        }
        Command::TrainVae { data, resume } => {
            let samples = load_samples(&data, out, "train.jsonl")?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let outcome = train_vae(&cfg, &samples, resume.as_ref()).map_err(|e| save_failure(e, out))?;
            let path = out.join("vae.ckpt");
            outcome.checkpoint.save(&path)?;
            write_log(&out.join("vae_log.jsonl"), &outcome.log)?;
            let last = outcome.log.last();
            Ok(json!({"checkpoint": path, "steps": outcome.checkpoint.step, "final_loss": last.map(|r| r.loss), "final_l_mr": last.and_then(|r| r.l_mr)}))
        }
        Command::TrainDiffusion { data, vae, resume } => {
            let samples = load_samples(&data, out, "train.jsonl")?;
            let vae_path = vae.unwrap_or_else(|| out.join("vae.ckpt"));
            if !vae_path.exists() {
                return Err(Error::MissingStage1(format!("{} does not exist", vae_path.display())));
            }
            let stage1 = Checkpoint::load(&vae_path)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let outcome =
                train_diffusion(&cfg, &samples, Some(&stage1), resume.as_ref()).map_err(|e| save_failure(e, out))?;
            let path = out.join("diffusion.ckpt");
            outcome.checkpoint.save(&path)?;
            write_log(&out.join("diffusion_log.jsonl"), &outcome.log)?;
            Ok(json!({"checkpoint": path, "steps": outcome.checkpoint.step, "final_loss": outcome.log.last().map(|r| r.loss)}))
        }
        Command::Predict { data, ckpt, index, n_samples } => {
            let samples = load_samples(&data, out, "test.jsonl")?;
            let sample = samples
                .get(index)
                .ok_or_else(|| Error::Config(format!("index {index} out of range ({} samples)", samples.len())))?;
            let predictor = Predictor::from_checkpoint(&load_ckpt(ckpt.as_ref(), out)?)?;
            let preds = predictor.predict(sample, n_samples, RngHandle::new(cfg.seed))?;
            let path = out.join("predictions.json");
            let motions: Vec<_> = preds.iter().map(|p| motion_json(&p.motion)).collect();
            write_json(&path, &json!({"index": index, "predictions": motions}))?;
            Ok(json!({"predictions": path, "count": preds.len()}))
        }
        Command::Evaluate { data, ckpt, n_runs } => {
            let samples = load_samples(&data, out, "test.jsonl")?;
            let predictor = Predictor::from_checkpoint(&load_ckpt(ckpt.as_ref(), out)?)?;
            let report = evaluate(&predictor, &samples, n_runs.unwrap_or(cfg.eval_runs), cfg.seed, cfg.distance)?;
            let path = out.join("report.json");
            let value = serde_json::to_value(&report).expect("report serializes");
            write_json(&path, &value)?;
            Ok(value)
        }
        Command::Viz { data, ckpt, index, n_samples } => {
            let samples = load_samples(&data, out, "test.jsonl")?;
            let sample = samples
                .get(index)
                .ok_or_else(|| Error::Config(format!("index {index} out of range ({} samples)", samples.len())))?;
            let ckpt = load_ckpt(ckpt.as_ref(), out)?;
            let predictor = Predictor::from_checkpoint(&ckpt)?;
            let preds: Vec<MotionSequence> = predictor
                .predict(sample, n_samples, RngHandle::new(cfg.seed))?
                .into_iter()
                .map(|p| p.motion)
                .collect();
            let files = export_viz(sample, &preds, &ckpt.skeleton, &out.join("viz"))?;
            Ok(json!({"files": files}))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
