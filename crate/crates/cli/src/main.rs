//! `tempograph` command-line harness.

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tempograph::harness::{
    ablate, evaluate, gradcheck_suite, load_checkpoint, metrics_csv, save_checkpoint, train, Dataset, ExperimentConfig,
    HarnessError, IdentityStub, MeanPose, Predictor,
};

#[derive(Parser)]
#[command(name = "tempograph", version, about = "Occlusion-robust body mesh sequence reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset directory.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the model seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Writes the per-step loss as CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or a reference predictor) on a test split.
    Eval {
        #[arg(long, required_unless_present = "predictor")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        predictor: Option<Reference>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "occluded")]
        split: Split,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate the four toggle cells for every seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every differentiable primitive and the miniature model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Occluded,
    Clean,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reference {
    Identity,
    MeanPose,
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match e {
            HarnessError::Config(_) => 2,
            _ => 1,
        };
        Self {
            kind: e.kind(),
            message: e.to_string(),
            code,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        HarnessError::from(e).into()
    }
}

fn config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Dataset, Failure> {
    Ok(match dir {
        Some(d) => Dataset::load(d)?,
        None => Dataset::generate(&cfg.model.body, &cfg.data)?,
    })
}

fn emit(value: &impl Serialize) {
    println!("{}", serde_json::to_string(value).expect("summary serializes"));
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { config: c, out } => {
            let cfg = config(c.as_deref())?;
            let ds = Dataset::generate(&cfg.model.body, &cfg.data)?;
            ds.save(&out, &cfg.data)?;
            emit(&json!({
                "dataset": out,
                "train": ds.train.len(),
                "test": ds.test.len(),
                "vertices": ds.body.graph.n_vertices(),
            }));
        }
        Command::Train {
            config: c,
            data,
            out,
            seed,
            curve,
        } => {
            let mut cfg = config(c.as_deref())?;
            if let Some(s) = seed {
                cfg.model.seed = s;
            }
            let ds = dataset(&cfg, data.as_deref())?;
            let res = train(&cfg.model, &cfg.train, &ds.train)?;
            save_checkpoint(&res.model, &out)?;
            if let Some(path) = curve {
                let mut s = String::from("step,loss\n");
                for (i, l) in res.curve.iter().enumerate() {
                    s += &format!("{i},{l}\n");
                }
                std::fs::write(path, s)?;
            }
            emit(&json!({
                "checkpoint": out,
                "steps": res.curve.len(),
                "initial_loss": res.curve.first(),
                "final_loss": res.curve.last(),
                "parameters": res.model.store.numel(),
            }));
        }
        Command::Eval {
            checkpoint,
            predictor,
            data,
            split,
            csv,
        } => {
            let ds = Dataset::load(&data)?;
            let seqs = match split {
                Split::Occluded => ds.test.clone(),
                Split::Clean => ds.clean_test(),
            };
            let model;
            let mean_pose;
            let p: &dyn Predictor = match (predictor, &checkpoint) {
                (Some(Reference::Identity), _) => &IdentityStub,
                (Some(Reference::MeanPose), _) => {
                    mean_pose = MeanPose::fit(&ds.train)?;
                    &mean_pose
                }
                (None, Some(path)) => {
                    model = load_checkpoint(path)?;
                    &model
                }
                (None, None) => unreachable!("clap requires one of them"),
            };
            let rep = evaluate(p, &ds.body.regressor, &seqs)?;
            let text = metrics_csv(&rep.rows);
            match csv {
                Some(path) => {
                    std::fs::write(&path, text)?;
                    emit(&json!({ "csv": path, "sequences": rep.rows.len(), "mean": rep.mean }));
                }
                None => print!("{text}"),
            }
        }
        Command::Ablate { config: c, data, out } => {
            let cfg = config(c.as_deref())?;
            let ds = dataset(&cfg, data.as_deref())?;
            let rep = ablate(&cfg, &ds)?;
            std::fs::write(&out, rep.to_json())?;
            emit(&json!({
                "report": out,
                "report_hash": rep.report_hash,
                "failed_cells": rep.cells.iter().filter(|c| c.failed).count(),
                "wall_clock_s": rep.wall_clock_s,
            }));
        }
        Command::Gradcheck { seed, out } => {
            let entries = gradcheck_suite(seed)?;
            let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
            let doc = json!({ "entries": entries, "failed": failed });
            if let Some(path) = out {
                std::fs::write(path, serde_json::to_string_pretty(&doc).expect("serializes"))?;
            }
            emit(&doc);
            if !failed.is_empty() {
                return Err(Failure {
                    kind: "gradcheck",
                    message: format!("gradient mismatch in {}", failed.join(", ")),
                    code: 3,
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": msg.trim() } }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": { "kind": f.kind, "message": f.message } }));
            ExitCode::from(f.code)
        }
    }
}
