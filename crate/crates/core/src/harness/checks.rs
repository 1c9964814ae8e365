//! Fixed-shape gradient checks for each differentiable component.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::LossSettings;
use super::train::batch_loss;
use crate::error::{Error, Result};
use crate::losses::{
    l1_joints2d, l1_joints3d, l1_vertices, sequence_velocity_loss, total_loss, LossTerms, LossWeights, SpeedNorm,
};
use crate::md::{md_forward, FeatureBatch, MdConfig, Mode, ShufflePlan};
use crate::model::{Model, ModelConfig};
use crate::params::Bound;
use crate::sd::{sd_forward, SdConfig, SdVars};
use crate::synth::{BodySequence, Sample};
use crate::tensor::{grad_check, GradCheckConfig, GradCheckReport, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Sd,
    Md,
    Losses,
    Model,
    All,
}

impl FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sd" => Ok(Target::Sd),
            "md" => Ok(Target::Md),
            "losses" => Ok(Target::Losses),
            "model" => Ok(Target::Model),
            "all" => Ok(Target::All),
            _ => Err(Error::invalid(format!(
                "unknown gradcheck target {s:?} (expected sd, md, losses, model, all)"
            ))),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Sd => "sd",
            Target::Md => "md",
            Target::Losses => "losses",
            Target::Model => "model",
            Target::All => "all",
        })
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// `sum(y * w)` with fixed random `w`, so every output element matters.
fn probe<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &y.shape(), -1.0, 1.0);
    Ok(y.mul(y.tape().constant(w))?.sum())
}

fn block_params(rng: &mut ChaCha8Rng, prefix: &str, cg: usize) -> Vec<(String, Tensor)> {
    vec![
        (format!("{prefix}.w1x1"), random(rng, &[cg, cg, 1, 1], -0.8, 0.8)),
        (format!("{prefix}.w3x3"), random(rng, &[cg, cg, 3, 3], -0.4, 0.4)),
        (format!("{prefix}.norm_scale"), random(rng, &[cg], 0.5, 1.5)),
        (format!("{prefix}.norm_shift"), random(rng, &[cg], -0.3, 0.3)),
    ]
}

fn bound<'t>(names: &[String], vars: &[Var<'t>]) -> Bound<'t> {
    Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

fn check_sd(cfg: GradCheckConfig, shared: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut sd = SdConfig::new(4, 2);
    sd.shared_params = shared;
    let mut params = vec![("x".to_string(), random(&mut rng, &[2, 4, 4, 3], -1.0, 1.0))];
    let sets = sd.param_sets();
    for g in 0..sets {
        let prefix = if sets == 1 { "sd".to_string() } else { format!("sd.g{g}") };
        params.extend(block_params(&mut rng, &prefix, sd.group_channels()));
    }
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    grad_check(
        |_, v| {
            let b = bound(&names, v);
            let vars = SdVars::block_from_bound(&b, "sd", sets)?;
            probe(sd_forward(b.get("x")?, &vars, &sd)?, 7)
        },
        &params,
        cfg,
    )
}

fn check_md(cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (batch, frames, channels) = (2, 3, 2);
    let md = MdConfig::new(frames);
    let mut params = vec![("x".to_string(), random(&mut rng, &[batch * frames, channels, 3, 4], -1.0, 1.0))];
    params.extend(block_params(&mut rng, "md", frames));
    let plan = ShufflePlan::new(batch, channels, frames, 5, Mode::Train);
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    grad_check(
        |_, v| {
            let b = bound(&names, v);
            let vars = [SdVars::from_bound(&b, "md")?];
            let fb = FeatureBatch::frame_major(b.get("x")?, batch, frames)?;
            probe(md_forward(fb, &vars, &md, &plan)?.var, 8)
        },
        &params,
        cfg,
    )
}

fn check_losses(cfg: GradCheckConfig, norm: SpeedNorm) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (seqs, t, k, nv) = (2, 4, 3, 5);
    let params = vec![
        ("joints3d".to_string(), random(&mut rng, &[seqs * t, k, 3], -1.0, 1.0)),
        ("joints2d".to_string(), random(&mut rng, &[seqs * t, k, 2], -1.0, 1.0)),
        ("vertices3d".to_string(), random(&mut rng, &[seqs * t, nv, 3], -1.0, 1.0)),
    ];
    let gt: Vec<Tensor> = params
        .iter()
        .map(|(_, p)| random(&mut rng, p.shape(), -1.0, 1.0))
        .collect();
    let weights = LossWeights {
        joints3d: 0.7,
        joints2d: 1.3,
        velocity: 2.0,
        vertices: 0.5,
    };
    grad_check(
        |tape, v| {
            let g: Vec<Var<'_>> = gt.iter().map(|t| tape.constant(t.clone())).collect();
            let terms = LossTerms {
                l3d: l1_joints3d(v[0], g[0])?,
                l2d: l1_joints2d(v[1], g[1])?,
                lv: sequence_velocity_loss(v[0].reshape([seqs, t, k, 3])?, g[0].reshape([seqs, t, k, 3])?, norm)?,
                lvert: l1_vertices(v[2], g[2])?,
            };
            Ok(total_loss(&terms, &weights)?.0)
        },
        &params,
        cfg,
    )
}

/// The tiny configuration used for the full-model check: K=2, V=4, C=8, S=2, 16x16 images.
pub fn tiny_model_config() -> ModelConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let tj = random(&mut rng, &[2, 3], -1.0, 1.0);
    let tv = random(&mut rng, &[4, 3], -1.0, 1.0);
    let mut c = ModelConfig::new(tj, tv, [0.8, 0.1, -0.1]);
    c.image_height = 16;
    c.image_width = 16;
    c.backbone = vec![4, 8];
    c.sd = SdConfig::new(8, 2);
    c.md = MdConfig::new(2);
    c.dim = 8;
    c.heads = 2;
    c.layers = 1;
    c.offset_scale = 0.5;
    c.camera_step = [0.1, 0.1, 0.1];
    c
}

/// `t` plus a positive offset in `[0.05, 0.15)` per element.
fn offset_from(rng: &mut ChaCha8Rng, t: &Tensor) -> Result<Tensor> {
    let data = t.data().iter().map(|v| v + rng.random_range(0.05..0.15)).collect();
    Tensor::new(t.shape().to_vec(), data)
}

/// Ground truth sits just above the initial prediction. A small loss keeps
/// finite-difference roundoff below the smallest gradients, and same-sign
/// residuals keep L1 sign sums from cancelling to an exact zero.
fn check_model(cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let model = Model::new(tiny_model_config())?;
    let c = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let s = c.frames();
    let images = random(&mut rng, &[s, 1, c.image_height, c.image_width], 0.0, 1.0);
    let store = model.init_params(9);
    let plan = ShufflePlan::new(1, c.channels(), s, 3, Mode::Train);
    let sample = {
        let tape = Tape::new();
        let bound = store.bind_frozen(&tape);
        let out = model.forward(tape.constant(images.clone()), &bound, 1, &plan)?;
        Sample {
            images,
            body: BodySequence {
                joints3d: offset_from(&mut rng, &out.joints3d.to_tensor())?,
                joints2d: offset_from(&mut rng, &out.joints2d.to_tensor())?,
                vertices3d: offset_from(&mut rng, &out.vertices3d.to_tensor())?,
                camera: Tensor::zeros([s, 3]),
                visibility: Tensor::full([s, c.joints], 1.0),
            },
        }
    };
    let params: Vec<(String, Tensor)> = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let settings = LossSettings::default();
    grad_check(
        |tape: &Tape, v| {
            let b = bound(&names, v);
            let images = tape.constant(sample.images.clone());
            let out = model.forward(images, &b, 1, &plan)?;
            Ok(batch_loss(&out, &[&sample], &settings)?.0)
        },
        &params,
        cfg,
    )
}

/// Runs the checks selected by `target`, returning one named report per check.
pub fn run_gradchecks(target: Target, cfg: GradCheckConfig) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    let all = target == Target::All;
    if all || target == Target::Sd {
        out.push(("sd (shared)".to_string(), check_sd(cfg, true)?));
        out.push(("sd (per-group)".to_string(), check_sd(cfg, false)?));
    }
    if all || target == Target::Md {
        out.push(("md".to_string(), check_md(cfg)?));
    }
    if all || target == Target::Losses {
        out.push(("losses (K*T)".to_string(), check_losses(cfg, SpeedNorm::JointsTimesFrames)?));
        out.push(("losses (K*(T-1))".to_string(), check_losses(cfg, SpeedNorm::JointsTimesIntervals)?));
    }
    if all || target == Target::Model {
        out.push(("model".to_string(), check_model(cfg)?));
    }
    Ok(out)
}
