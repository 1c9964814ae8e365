//! Training loop.
//!
//! Each sequence of a batch gets its own tape, so sequences run in parallel.
//! Per-sequence gradients are summed in batch order and scaled by `1/n`, which
//! keeps the result identical under both execution modes.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::config::{LossSettings, RunConfig};
use super::eval::{check_sample, evaluate};
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::losses::{
    l1_joints2d, l1_joints3d, l1_vertices, sequence_velocity_loss, total_loss, LossBreakdown, LossTerms,
    VelocityTarget,
};
use crate::md::{Mode, ShufflePlan};
use crate::metrics::MetricReport;
use crate::model::{MeshOutput, Model};
use crate::parallel::{map_slice, Execution};
use crate::params::{Bound, ParamStore};
use crate::synth::Sample;
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub report: MetricReport,
}

#[derive(Clone, Debug)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<EpochRecord>,
    pub wall_seconds: f64,
    /// SHA-256 over the config, every logged loss and the final parameters.
    pub hash: String,
}

impl TrainLog {
    /// `step,l3d,l2d,lv,lvert,total` lines with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,l3d,l2d,lv,lvert,total\n");
        for s in &self.steps {
            let l = &s.loss;
            out.push_str(&format!("{},{},{},{},{},{}\n", s.step, l.l3d, l.l2d, l.lv, l.lvert, l.total));
        }
        out
    }
}

/// Loss of `samples` (each `[S, ...]`) against a forward pass on one tape.
pub fn batch_loss<'t>(
    out: &MeshOutput<'t>,
    samples: &[&Sample],
    settings: &LossSettings,
) -> Result<(Var<'t>, LossBreakdown)> {
    let tape = out.joints3d.tape();
    let stack = |f: fn(&Sample) -> &crate::tensor::Tensor| -> Result<Var<'t>> {
        let first = f(samples[0]).shape().to_vec();
        let mut data = Vec::with_capacity(first.iter().product::<usize>() * samples.len());
        for s in samples {
            if f(s).shape() != first.as_slice() {
                return Err(Error::shape("batch_loss", "sequences in a batch differ in shape"));
            }
            data.extend_from_slice(f(s).data());
        }
        let mut shape = first;
        shape[0] *= samples.len();
        Ok(tape.constant(crate::tensor::Tensor::new(shape, data)?))
    };
    let gj = stack(|s| &s.body.joints3d)?;
    let gv = stack(|s| &s.body.vertices3d)?;
    let g2 = stack(|s| &s.body.joints2d)?;
    let b = samples.len();
    let per_seq = |v: Var<'t>| -> Result<Var<'t>> {
        let s = v.shape();
        v.reshape([b, s[0] / b, s[1], s[2]])
    };
    let (vp, vg) = match settings.velocity_target {
        VelocityTarget::Joints => (out.joints3d, gj),
        VelocityTarget::Vertices => (out.vertices3d, gv),
    };
    let terms = LossTerms {
        l3d: l1_joints3d(out.joints3d, gj)?,
        l2d: l1_joints2d(out.joints2d, g2)?,
        lv: sequence_velocity_loss(per_seq(vp)?, per_seq(vg)?, settings.speed_norm)?,
        lvert: l1_vertices(out.vertices3d, gv)?,
    };
    total_loss(&terms, &settings.effective_weights())
}

fn plan_seed(seed: u64, step: usize, slot: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((step as u64).to_le_bytes());
    h.update((slot as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Gradient and loss breakdown of one sequence.
pub fn sequence_gradient(
    model: &Model,
    params: &ParamStore,
    sample: &Sample,
    settings: &LossSettings,
    plan: &ShufflePlan,
) -> Result<(ParamStore, LossBreakdown)> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let images = tape.constant(sample.images.clone());
    let out = model.forward(images, &bound, 1, plan)?;
    let (loss, breakdown) = batch_loss(&out, &[sample], settings)?;
    let mut grads = tape.backward(loss)?;
    Ok((bound.gradients(&mut grads), breakdown))
}

/// Per-step hook for callers that want progress output.
pub type Progress<'a> = &'a mut dyn FnMut(&StepRecord);

pub struct Trainer<'a> {
    pub config: RunConfig,
    pub exec: Execution,
    pub progress: Option<Progress<'a>>,
    /// Starting parameters; fresh initialisation when `None`.
    pub init: Option<ParamStore>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig) -> Self {
        Trainer {
            config,
            exec: Execution::default(),
            progress: None,
            init: None,
        }
    }

    pub fn run(mut self, train: &[Sample], val: Option<&[Sample]>) -> Result<(Checkpoint, TrainLog)> {
        let cfg = self.config.clone();
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let model = Model::new(cfg.model_config()?)?;
        for s in train.iter().chain(val.unwrap_or(&[])) {
            check_sample(&model.config, s)?;
        }
        let started = Instant::now();
        let mut params = self.init.take().unwrap_or_else(|| model.init_params(cfg.seed));
        let mut opt = AdamW::new(cfg.optim.clone());
        let channels = model.config.channels();
        let frames = model.config.frames();

        let mut hasher = Sha256::new();
        hasher.update(cfg.to_text().as_bytes());
        let mut steps = Vec::new();
        let mut validation = Vec::new();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut step = 0usize;
        for epoch in 0..cfg.epochs {
            let lr = cfg.optim.lr_at(epoch);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1 + epoch as u64);
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch) {
                let results = map_slice(self.exec, chunk, |slot, &idx| {
                    let plan = ShufflePlan::new(1, channels, frames, plan_seed(cfg.seed, step, slot), Mode::Train);
                    sequence_gradient(&model, &params, &train[idx], &cfg.loss, &plan)
                });
                let inv = 1.0 / chunk.len() as f64;
                let mut grads: Option<ParamStore> = None;
                let mut sum = [0.0f64; 4];
                for r in results {
                    let (g, b) = r?;
                    for (acc, v) in sum.iter_mut().zip([b.l3d, b.l2d, b.lv, b.lvert]) {
                        *acc += v;
                    }
                    match grads.as_mut() {
                        None => grads = Some(g),
                        Some(acc) => {
                            for (name, t) in acc.iter_mut() {
                                let gi = g.get(name).expect("same parameter set");
                                for (a, b) in t.data_mut().iter_mut().zip(gi.data()) {
                                    *a += b;
                                }
                            }
                        }
                    }
                }
                let mut grads = grads.expect("non-empty batch");
                grads.map_values(|_, t| t.data_mut().iter_mut().for_each(|v| *v *= inv));
                let [l3d, l2d, lv, lvert] = sum.map(|v| v * inv);
                let loss = LossBreakdown {
                    l3d,
                    l2d,
                    lv,
                    lvert,
                    total: cfg.loss.effective_weights().combine(l3d, l2d, lv, lvert),
                };
                if !loss.total.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                opt.update(&mut params, &grads, lr)?;

                hasher.update((step as u64).to_le_bytes());
                for v in [l3d, l2d, lv, lvert, loss.total] {
                    hasher.update(v.to_bits().to_le_bytes());
                }
                let rec = StepRecord { step, epoch, lr, loss };
                if let Some(p) = self.progress.as_mut() {
                    p(&rec);
                }
                steps.push(rec);
                step += 1;
            }
            let last = epoch + 1 == cfg.epochs;
            if let Some(v) = val {
                if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) {
                    let report = evaluate(&model, &params, v, cfg.scene.fps, self.exec)?;
                    validation.push(EpochRecord { epoch, report });
                }
            }
        }
        for (name, t) in params.iter() {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        let hash = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let log = TrainLog {
            steps,
            validation,
            wall_seconds: started.elapsed().as_secs_f64(),
            hash,
        };
        let ck = Checkpoint {
            step: step as u64,
            config: cfg,
            params,
        };
        Ok((ck, log))
    }
}

/// Trains with default execution and no progress output.
pub fn train(config: &RunConfig, train: &[Sample], val: Option<&[Sample]>) -> Result<(Checkpoint, TrainLog)> {
    Trainer::new(config.clone()).run(train, val)
}

/// Binds parameters as constants and runs the model in eval mode on one sequence.
pub(crate) fn eval_forward<'t>(
    model: &Model,
    params: &ParamStore,
    tape: &'t Tape,
    sample: &Sample,
) -> Result<(MeshOutput<'t>, Bound<'t>)> {
    let bound = params.bind_frozen(tape);
    let images = tape.constant(sample.images.clone());
    let plan = ShufflePlan::identity(1, model.config.channels(), model.config.frames());
    let out = model.forward(images, &bound, 1, &plan)?;
    Ok((out, bound))
}
