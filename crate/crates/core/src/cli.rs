//! The `pixproto` command line: `train`, `labels`, `ablate` and `eval`.
//!
//! Every flag can also come from an environment variable named
//! `PIXPROTO_<FLAG>` (for example `PIXPROTO_SEED=3`). Exit codes: 0 success,
//! 1 other failure, 2 invalid or missing configuration, 3 non-finite loss,
//! 4 corrupt checkpoint.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io;
use crate::synth::Dataset;
use crate::trainer::ablation::{run_ablation, AblationOptions, Arm};
use crate::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use crate::trainer::eval::{evaluate, predict, sample_embeddings, SnapshotTally};
use crate::trainer::{warmup, TrainConfig, TrainState, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "pixproto", version, about = "Pixel-prototype domain adaptation on a synthetic benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Warm up on source, adapt, and write metrics, checkpoints and a manifest.
    Train(TrainArgs),
    /// Export pseudo labels of target training scenes from a checkpoint.
    Labels(LabelsArgs),
    /// Run the five-arm ablation over several seeds.
    Ablate(AblateArgs),
    /// Score a checkpoint, or a freshly warmed-up model, on the evaluation scenes.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, env = "PIXPROTO_CONFIG")]
    pub config: PathBuf,
    #[arg(long, env = "PIXPROTO_OUT")]
    pub out: PathBuf,
    /// Overrides `seed` in the config.
    #[arg(long, env = "PIXPROTO_SEED")]
    pub seed: Option<u64>,
    /// Resume from this checkpoint instead of warming up.
    #[arg(long, env = "PIXPROTO_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LabelsArgs {
    #[arg(long, env = "PIXPROTO_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "PIXPROTO_OUT")]
    pub out: PathBuf,
    /// Target training scenes to export, comma separated.
    #[arg(long, env = "PIXPROTO_SCENES", value_delimiter = ',', default_value = "0")]
    pub scenes: Vec<usize>,
    /// Thresholds for the density/accuracy table; defaults to the configured one.
    #[arg(long, env = "PIXPROTO_THRESHOLD_SWEEP", value_delimiter = ',')]
    pub threshold_sweep: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, env = "PIXPROTO_CONFIG")]
    pub config: PathBuf,
    #[arg(long, env = "PIXPROTO_OUT")]
    pub out: PathBuf,
    /// Seeds, comma separated; defaults to `ablation_seeds`.
    #[arg(long, env = "PIXPROTO_SEED", value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Arms, comma separated; defaults to all five.
    #[arg(long, env = "PIXPROTO_ARM", value_delimiter = ',')]
    pub arm: Vec<Arm>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Evaluate this checkpoint. Without it, `--config` is warmed up and scored.
    #[arg(long, env = "PIXPROTO_CHECKPOINT", conflicts_with = "config")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "PIXPROTO_CONFIG", required_unless_present = "checkpoint")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "PIXPROTO_SEED")]
    pub seed: Option<u64>,
    /// Number of evaluation scenes; defaults to the configured count.
    #[arg(long, env = "PIXPROTO_SCENES")]
    pub scenes: Option<usize>,
    /// Also write `eval.csv` and a manifest here.
    #[arg(long, env = "PIXPROTO_OUT")]
    pub out: Option<PathBuf>,
}

/// Written next to every set of outputs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Output files, relative to the output directory.
    pub outputs: Vec<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_manifest(out: &Path, command: &str, cfg: &TrainConfig, started: u64, mut outputs: Vec<String>) -> Result<()> {
    outputs.sort();
    let m = Manifest {
        command: command.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        started_unix: started,
        finished_unix: now(),
        outputs,
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        Error::NonFinite(_) => EXIT_NON_FINITE,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_CONFIG
            } else {
                EXIT_OK
            }
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Labels(a) => cmd_labels(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Eval(a) => cmd_eval(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let d = &cfg.data;
    Dataset::generate(&d.scene, &d.shift, d.source_scenes, d.target_scenes, d.eval_scenes)
}

fn checkpoint_name(iteration: usize) -> String {
    format!("checkpoints/iter_{iteration:06}.ckpt")
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let started = now();
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let resume = match &args.checkpoint {
        Some(path) => {
            let (stored, state) = load_checkpoint(path)?;
            if stored != cfg {
                return Err(Error::config("checkpoint", "checkpoint was written with a different config"));
            }
            Some(state)
        }
        None => None,
    };
    let out = &args.out;
    std::fs::create_dir_all(out.join("checkpoints"))?;
    std::fs::create_dir_all(out.join("snapshots"))?;
    std::fs::write(out.join("config.json"), cfg.to_json())?;
    let mut outputs = vec!["config.json".to_string(), "metrics.csv".into(), "eval.csv".into()];

    let data = dataset(&cfg)?;
    let eval = data.evaluation_handle();
    let mut trainer = match resume {
        Some(state) => Trainer::resume(cfg.clone(), data.training_view(), state)?,
        None => Trainer::new(cfg.clone(), data.training_view())?,
    };
    let mut metrics = io::MetricsWriter::create(&out.join("metrics.csv"))?;
    let mut eval_csv = csv::Writer::from_path(out.join("eval.csv"))?;
    eval_csv.write_record(io::eval_columns(cfg.classes()))?;

    let mut last_checkpoint: Option<String> = None;
    let snapshot = |t: &Trainer, outputs: &mut Vec<String>, eval_csv: &mut csv::Writer<std::fs::File>| -> Result<()> {
        let it = t.state().iteration;
        let params = &t.state().params;
        eval_csv.write_record(io::eval_row(it, &evaluate(params, &eval)?))?;
        eval_csv.flush()?;
        if eval.num_eval() > 0 {
            let name = format!("snapshots/iter_{it:06}_eval0_prediction.png");
            io::write_color_png(&out.join(&name), &predict(params, eval.eval_scene(0).0)?)?;
            outputs.push(name);
        }
        if t.view().num_target() > 0 {
            let labels = t.scene_context(0)?.labels(t.config().dynamic_threshold)?;
            let name = format!("snapshots/iter_{it:06}_target0_hybrid.png");
            io::write_label_png(&out.join(&name), &labels.hybrid)?;
            outputs.push(name);
        }
        Ok(())
    };

    let result = trainer.run(Some(&eval), |t, record| {
        metrics.write(record)?;
        let it = t.state().iteration;
        if cfg.eval_interval > 0 && it % cfg.eval_interval == 0 && !t.is_finished() {
            snapshot(t, &mut outputs, &mut eval_csv)?;
        }
        if cfg.checkpoint_interval > 0 && it % cfg.checkpoint_interval == 0 && !t.is_finished() {
            let name = checkpoint_name(it);
            save_checkpoint(&out.join(&name), t.config(), t.state())?;
            outputs.push(name.clone());
            last_checkpoint = Some(name);
        }
        Ok(())
    });
    if let Err(e) = result {
        if let Error::NonFinite(msg) = e {
            let last = last_checkpoint.map_or_else(|| "none".to_string(), |n| out.join(n).display().to_string());
            return Err(Error::NonFinite(format!("{msg}; last good checkpoint: {last}")));
        }
        return Err(e);
    }

    snapshot(&trainer, &mut outputs, &mut eval_csv)?;
    save_checkpoint(&out.join("final.ckpt"), trainer.config(), trainer.state())?;
    outputs.push("final.ckpt".into());
    let rows = sample_embeddings(&trainer.state().params, &eval, cfg.embedding_pixels, cfg.seed)?;
    io::write_embeddings_csv(&out.join("embeddings.csv"), &rows)?;
    outputs.push("embeddings.csv".into());
    write_manifest(out, "train", &cfg, started, outputs)
}

pub fn cmd_labels(args: &LabelsArgs) -> Result<()> {
    let started = now();
    let (cfg, state): (TrainConfig, TrainState) = load_checkpoint(&args.checkpoint)?;
    let data = dataset(&cfg)?;
    let eval = data.evaluation_handle();
    let trainer = Trainer::resume(cfg.clone(), data.training_view(), state)?;
    let thresholds = if args.threshold_sweep.is_empty() {
        vec![cfg.dynamic_threshold]
    } else {
        args.threshold_sweep.clone()
    };
    if let Some(t) = thresholds.iter().find(|t| !(t.is_finite() && (-1.0..=1.0).contains(*t))) {
        return Err(Error::config("threshold_sweep", format!("{t} is not a cosine threshold in [-1, 1]")));
    }
    let out = &args.out;
    std::fs::create_dir_all(out)?;
    let mut outputs = vec!["threshold_sweep.csv".to_string()];
    let mut tallies = vec![SnapshotTally::default(); thresholds.len()];
    for &i in &args.scenes {
        let ctx = trainer.scene_context(i)?;
        let truth = eval.target_ground_truth(i);
        for (k, (tally, &thr)) in tallies.iter_mut().zip(&thresholds).enumerate() {
            let labels = ctx.labels(thr)?;
            tally.add(&labels, truth)?;
            if k > 0 {
                continue;
            }
            let variants = [
                ("static", &labels.static_labels),
                ("dynamic_uncalibrated", &labels.dynamic_uncalibrated),
                ("dynamic", &labels.dynamic),
                ("hybrid", &labels.hybrid),
                ("ground_truth", truth),
            ];
            for (name, y) in variants {
                let gray = format!("scene_{i:04}_{name}.png");
                let color = format!("scene_{i:04}_{name}_color.png");
                io::write_label_png(&out.join(&gray), y)?;
                io::write_color_png(&out.join(&color), y)?;
                outputs.push(gray);
                outputs.push(color);
            }
            let image = format!("scene_{i:04}_image.png");
            io::write_image_png(&out.join(&image), data.training_view().target(i).image)?;
            outputs.push(image);
        }
    }
    let iteration = trainer.state().iteration;
    let snaps: Vec<_> = tallies.iter().zip(&thresholds).map(|(t, &thr)| t.finish(iteration, thr)).collect();
    io::write_sweep_csv(&out.join("threshold_sweep.csv"), &snaps)?;
    write_manifest(out, "labels", &cfg, started, outputs)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let started = now();
    let cfg = TrainConfig::load(&args.config)?;
    let seeds = if args.seed.is_empty() {
        cfg.ablation_seeds.clone()
    } else {
        args.seed.clone()
    };
    let arms = if args.arm.is_empty() { Arm::ALL.to_vec() } else { args.arm.clone() };
    let data = dataset(&cfg)?;
    let report = run_ablation(&cfg, &data, &arms, &seeds, &AblationOptions::default())?;
    std::fs::create_dir_all(&args.out)?;
    io::write_ablation_csvs(&args.out, &report, cfg.classes())?;
    std::fs::write(args.out.join("config.json"), cfg.to_json())?;
    let outputs = ["ablation_summary.csv", "ablation_runs.csv", "config.json"].map(String::from).to_vec();
    write_manifest(&args.out, "ablate", &cfg, started, outputs)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let started = now();
    let (mut cfg, params) = match (&args.checkpoint, &args.config) {
        (Some(path), _) => {
            let (cfg, state) = load_checkpoint(path)?;
            (cfg, Some(state.params))
        }
        (None, Some(path)) => (TrainConfig::load(path)?, None),
        (None, None) => return Err(Error::config("config", "either --checkpoint or --config is required")),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.scenes {
        cfg.data.eval_scenes = n;
    }
    cfg.validate()?;
    let data = dataset(&cfg)?;
    let params = match params {
        Some(p) => p,
        None => warmup(&cfg, &data.training_view())?,
    };
    let report = evaluate(&params, &data.evaluation_handle())?;
    println!("{}", serde_json::to_string(&report)?);
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        let mut w = csv::Writer::from_path(out.join("eval.csv"))?;
        w.write_record(io::eval_columns(cfg.classes()))?;
        w.write_record(io::eval_row(0, &report))?;
        w.flush()?;
        write_manifest(out, "eval", &cfg, started, vec!["eval.csv".into()])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&Error::config("x", "y")), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::NonFinite("loss".into())), EXIT_NON_FINITE);
        assert_eq!(exit_code(&Error::Checkpoint("bad".into())), EXIT_CHECKPOINT);
        assert_eq!(exit_code(&Error::Sealed), EXIT_FAILURE);
    }

    #[test]
    fn flags_parse_and_env_fills_gaps() {
        let cli = Cli::try_parse_from([
            "pixproto",
            "labels",
            "--checkpoint",
            "a.ckpt",
            "--out",
            "o",
            "--threshold-sweep",
            "0.5,0.75,0.9",
            "--scenes",
            "1,2",
        ])
        .unwrap();
        let Command::Labels(a) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(a.threshold_sweep, vec![0.5, 0.75, 0.9]);
        assert_eq!(a.scenes, vec![1, 2]);

        let cli = Cli::try_parse_from(["pixproto", "ablate", "--config", "c", "--out", "o", "--arm", "baseline"]).unwrap();
        let Command::Ablate(a) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(a.arm, vec![Arm::Baseline]);
        assert!(Cli::try_parse_from(["pixproto", "ablate", "--config", "c", "--out", "o", "--arm", "nope"]).is_err());
    }

    #[test]
    fn missing_config_file_exits_with_config_code() {
        let dir = tempfile::tempdir().unwrap();
        let code = main_with_args([
            "pixproto",
            "train",
            "--config",
            dir.path().join("missing.json").to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_CONFIG);
    }
}
