use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use remocap::harness::{self, Checkpoint, RunConfig, Target, Trainer};
use remocap::model::Model;
use remocap::parallel::Execution;
use remocap::synth::{self, Sample};
use remocap::tensor::GradCheckConfig;

const TRAIN_FILE: &str = "train.rmcd";
const TEST_FILE: &str = "test.rmcd";
const CHECKPOINT_FILE: &str = "checkpoint.rmck";

#[derive(Parser)]
#[command(name = "remocap", version, about = "Occlusion-robust mesh regression on synthetic motion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run sequentially instead of across the thread pool.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => Ok(RunConfig::load(p)?),
            None => Ok(RunConfig::default()),
        }
    }

    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test datasets.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory for train.rmcd and test.rmcd.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        occlusion_level: Option<f64>,
    },
    /// Train a model and write a checkpoint and loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (train.rmcd, optional test.rmcd) or a single file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Components to disable: any of sd, md, vel.
        #[arg(long)]
        ablation: Option<String>,
        /// Print a loss line every N steps (0 = quiet).
        #[arg(long, default_value_t = 10)]
        log_every: usize,
    },
    /// Evaluate a checkpoint and print a JSON metric report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory (uses test.rmcd) or a single file.
        #[arg(long)]
        data: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Verify analytic gradients against central differences.
    Gradcheck {
        /// sd, md, losses, model or all.
        #[arg(default_value = "all")]
        target: String,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write channel-mean feature maps at each tap as CSV grids.
    ExportHeatmaps {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        /// Comma-separated frame indices.
        #[arg(long, default_value = "0")]
        frames: String,
    },
}

fn dataset_file(data: &Path, default_name: &str) -> PathBuf {
    if data.is_dir() {
        data.join(default_name)
    } else {
        data.to_path_buf()
    }
}

fn read(path: &Path) -> Result<Vec<Sample>> {
    synth::read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn gen_data(common: &Common, out: &Path, occlusion: Option<f64>) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(s) = common.seed {
        cfg.scene.seed = s;
    }
    if let Some(o) = occlusion {
        cfg.scene.occlusion_level = o;
    }
    cfg.scene.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let exec = common.exec();
    let train = synth::generate_dataset(&cfg.scene, 0, cfg.train_sequences, exec)?;
    let test = synth::generate_dataset(&cfg.scene, cfg.train_sequences as u64, cfg.test_sequences, exec)?;
    synth::write_dataset(&out.join(TRAIN_FILE), &train)?;
    synth::write_dataset(&out.join(TEST_FILE), &test)?;
    println!(
        "wrote {} train and {} test sequences to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn train(common: &Common, data: &Path, out: &Path, ablation: Option<&str>, log_every: usize) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(a) = ablation {
        cfg.apply_ablation(a)?;
    }
    let train_set = read(&dataset_file(data, TRAIN_FILE))?;
    let test_path = data.join(TEST_FILE);
    let val = if data.is_dir() && test_path.exists() {
        Some(read(&test_path)?)
    } else {
        None
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut progress = |r: &harness::StepRecord| {
        if log_every > 0 && r.step % log_every == 0 {
            eprintln!(
                "step {:>5} epoch {:>3} lr {:.1e} total {:.4} (l3d {:.3} l2d {:.3} lv {:.3} lvert {:.3})",
                r.step, r.epoch, r.lr, r.loss.total, r.loss.l3d, r.loss.l2d, r.loss.lv, r.loss.lvert
            );
        }
    };
    let mut trainer = Trainer::new(cfg);
    trainer.exec = common.exec();
    trainer.progress = Some(&mut progress);
    let (ck, log) = trainer.run(&train_set, val.as_deref())?;

    ck.save(&out.join(CHECKPOINT_FILE))?;
    fs::write(out.join("train_log.csv"), log.to_csv())?;
    let summary = serde_json::json!({
        "hash": log.hash,
        "steps": log.steps.len(),
        "wall_seconds": log.wall_seconds,
        "validation": log.validation.iter().map(|e| serde_json::json!({
            "epoch": e.epoch,
            "report": e.report,
        })).collect::<Vec<_>>(),
    });
    fs::write(out.join("train_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("trained {} steps in {:.1}s, log hash {}", log.steps.len(), log.wall_seconds, log.hash);
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, out: Option<&Path>, sequential: bool) -> Result<()> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let samples = read(&dataset_file(data, TEST_FILE))?;
    let model = Model::new(ck.config.model_config()?)?;
    let exec = if sequential { Execution::Sequential } else { Execution::default() };
    let report = harness::evaluate(&model, &ck.params, &samples, ck.config.scene.fps, exec)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(p) = out {
        fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{json}");
    Ok(())
}

fn gradcheck(target: &str, inject_fault: bool) -> Result<bool> {
    let target: Target = target.parse()?;
    let cfg = GradCheckConfig {
        analytic_scale: if inject_fault { 1.01 } else { 1.0 },
        ..GradCheckConfig::default()
    };
    let mut ok = true;
    for (name, report) in harness::run_gradchecks(target, cfg)? {
        println!("{name}\n{report}");
        ok &= report.pass;
    }
    println!("{}", if ok { "gradcheck: PASS" } else { "gradcheck: FAIL" });
    Ok(ok)
}

fn export(ckpt: &Path, data: &Path, out: &Path, sequence: usize, frames: &str) -> Result<()> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let samples = read(&dataset_file(data, TEST_FILE))?;
    let model = Model::new(ck.config.model_config()?)?;
    let mut requests = Vec::new();
    for f in frames.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let f: usize = f.parse().with_context(|| format!("bad frame index {f:?}"))?;
        requests.push((sequence, f));
    }
    if requests.is_empty() {
        bail!("no frames requested");
    }
    let written = harness::export_heatmaps(&model, &ck.params, &samples, &requests, out)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData {
            common,
            out,
            occlusion_level,
        } => gen_data(common, out, *occlusion_level).map(|_| true),
        Command::Train {
            common,
            data,
            out,
            ablation,
            log_every,
        } => train(common, data, out, ablation.as_deref(), *log_every).map(|_| true),
        Command::Eval {
            ckpt,
            data,
            out,
            sequential,
        } => eval(ckpt, data, out.as_deref(), *sequential).map(|_| true),
        Command::Gradcheck { target, inject_fault } => gradcheck(target, *inject_fault),
        Command::ExportHeatmaps {
            ckpt,
            data,
            out,
            sequence,
            frames,
        } => export(ckpt, data, out, *sequence, frames).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
