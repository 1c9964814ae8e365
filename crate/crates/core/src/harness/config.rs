//! Run configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, SpeedNorm, VelocityTarget};
use crate::md::MdConfig;
use crate::model::{BlockOrder, ModelConfig};
use crate::sd::SdConfig;
use crate::synth::{self, SceneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub backbone: Vec<usize>,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub groups: usize,
    /// 0 selects `C / groups`.
    pub norm_groups: usize,
    pub shared_params: bool,
    pub md_groups: usize,
    pub shuffle: bool,
    pub order: BlockOrder,
    pub offset_scale: f64,
    pub sd_enabled: bool,
    pub md_enabled: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            backbone: vec![16, 32, 32],
            layers: 2,
            heads: 2,
            dim: 64,
            groups: 4,
            norm_groups: 0,
            shared_params: true,
            md_groups: 1,
            shuffle: true,
            order: BlockOrder::Sequential,
            offset_scale: 100.0,
            sd_enabled: true,
            md_enabled: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub velocity_enabled: bool,
    pub velocity_target: VelocityTarget,
    pub speed_norm: SpeedNorm,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            weights: LossWeights::default(),
            velocity_enabled: true,
            velocity_target: VelocityTarget::Joints,
            speed_norm: SpeedNorm::JointsTimesFrames,
        }
    }
}

impl LossSettings {
    /// Weights with the ablation flag applied.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            velocity: if self.velocity_enabled { self.weights.velocity } else { 0.0 },
            ..self.weights
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_epoch: 10,
            decay_factor: 10.0,
        }
    }
}

impl OptimConfig {
    /// Step schedule: the base rate before `decay_epoch`, divided by `decay_factor` from then on.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.lr
        } else {
            self.lr / self.decay_factor
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    /// Validate every this many epochs (0 disables).
    pub eval_every: usize,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub scene: SceneSpec,
    pub model: ModelSettings,
    pub loss: LossSettings,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 40,
            batch: 16,
            eval_every: 10,
            train_sequences: 200,
            test_sequences: 50,
            scene: SceneSpec::default(),
            model: ModelSettings::default(),
            loss: LossSettings::default(),
            optim: OptimConfig::default(),
        }
    }
}

fn order_name(o: BlockOrder) -> &'static str {
    match o {
        BlockOrder::Sequential => "sequential",
        BlockOrder::Parallel => "parallel",
    }
}

fn target_name(t: VelocityTarget) -> &'static str {
    match t {
        VelocityTarget::Joints => "joints",
        VelocityTarget::Vertices => "vertices",
    }
}

fn norm_name(n: SpeedNorm) -> &'static str {
    match n {
        SpeedNorm::JointsTimesFrames => "frames",
        SpeedNorm::JointsTimesIntervals => "intervals",
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.optim.lr > 0.0) || self.epochs == 0 || self.batch == 0 {
            return Err(Error::invalid("lr and epochs must be positive and batch >= 1"));
        }
        if !(self.optim.decay_factor > 0.0) {
            return Err(Error::invalid("decay_factor must be positive"));
        }
        self.scene.validate()?;
        self.loss.weights.validate()?;
        self.model_config()?.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let s = &self.scene;
        let m = &self.model;
        let (tj, tv) = synth::template(s.vertices, s.body_scale);
        let prior = [s.nominal_scale(), s.width as f64 / 2.0, s.height as f64 / 2.0];
        let mut c = ModelConfig::new(tj, tv, prior);
        c.image_height = s.height;
        c.image_width = s.width;
        c.backbone = m.backbone.clone();
        c.layers = m.layers;
        c.heads = m.heads;
        c.dim = m.dim;
        let ch = c.channels();
        if m.groups == 0 || ch % m.groups != 0 {
            return Err(Error::invalid(format!("model.groups = {} must divide C = {ch}", m.groups)));
        }
        c.sd = SdConfig::new(ch, m.groups);
        if m.norm_groups != 0 {
            c.sd.norm_groups = m.norm_groups;
        }
        c.sd.shared_params = m.shared_params;
        c.md = MdConfig::new(s.frames);
        c.md.groups = m.md_groups;
        if m.md_groups == 0 || s.frames % m.md_groups != 0 {
            return Err(Error::invalid(format!(
                "model.md_groups = {} must divide S = {}",
                m.md_groups, s.frames
            )));
        }
        c.md.norm_groups = s.frames / m.md_groups;
        c.md.shuffle = m.shuffle;
        c.order = m.order;
        c.offset_scale = m.offset_scale;
        c.sd_enabled = m.sd_enabled;
        c.md_enabled = m.md_enabled;
        Ok(c)
    }

    /// Disables the listed components: `sd`, `md`, `vel`.
    pub fn apply_ablation(&mut self, list: &str) -> Result<()> {
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "sd" => self.model.sd_enabled = false,
                "md" => self.model.md_enabled = false,
                "vel" => self.loss.velocity_enabled = false,
                other => {
                    return Err(Error::invalid(format!(
                        "unknown ablation component {other:?} (expected sd, md, vel)"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Canonical text form; [`RunConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let (s, m, l, o) = (&self.scene, &self.model, &self.loss, &self.optim);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch", self.batch.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("data.train", self.train_sequences.to_string());
        kv("data.test", self.test_sequences.to_string());
        kv("scene.seed", s.seed.to_string());
        kv("scene.frames", s.frames.to_string());
        kv("scene.height", s.height.to_string());
        kv("scene.width", s.width.to_string());
        kv("scene.vertices", s.vertices.to_string());
        kv("scene.occlusion_level", s.occlusion_level.to_string());
        kv("scene.distractor", s.distractor.to_string());
        kv("scene.motion_scale", s.motion_scale.to_string());
        kv("scene.freq_min", s.freq_hz.0.to_string());
        kv("scene.freq_max", s.freq_hz.1.to_string());
        kv("scene.fps", s.fps.to_string());
        kv("scene.body_scale", s.body_scale.to_string());
        kv("model.backbone", join(&m.backbone));
        kv("model.layers", m.layers.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.dim", m.dim.to_string());
        kv("model.groups", m.groups.to_string());
        kv("model.norm_groups", m.norm_groups.to_string());
        kv("model.shared_params", m.shared_params.to_string());
        kv("model.md_groups", m.md_groups.to_string());
        kv("model.shuffle", m.shuffle.to_string());
        kv("model.order", order_name(m.order).to_string());
        kv("model.offset_scale", m.offset_scale.to_string());
        kv("model.sd_enabled", m.sd_enabled.to_string());
        kv("model.md_enabled", m.md_enabled.to_string());
        kv("loss.joints3d", l.weights.joints3d.to_string());
        kv("loss.joints2d", l.weights.joints2d.to_string());
        kv("loss.velocity", l.weights.velocity.to_string());
        kv("loss.vertices", l.weights.vertices.to_string());
        kv("loss.velocity_enabled", l.velocity_enabled.to_string());
        kv("loss.velocity_target", target_name(l.velocity_target).to_string());
        kv("loss.speed_norm", norm_name(l.speed_norm).to_string());
        kv("optim.lr", o.lr.to_string());
        kv("optim.weight_decay", o.weight_decay.to_string());
        kv("optim.beta1", o.beta1.to_string());
        kv("optim.beta2", o.beta2.to_string());
        kv("optim.eps", o.eps.to_string());
        kv("optim.decay_epoch", o.decay_epoch.to_string());
        kv("optim.decay_factor", o.decay_factor.to_string());
        out
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|msg| Error::Config { line: i + 1, msg })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "yes" | "1" | "on" => Ok(true),
                "false" | "no" | "0" | "off" => Ok(false),
                _ => Err(format!("{key}: expected a boolean, got {v:?}")),
            }
        }
        let (s, m, l, o) = (&mut self.scene, &mut self.model, &mut self.loss, &mut self.optim);
        match key {
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "data.train" => self.train_sequences = num(key, value)?,
            "data.test" => self.test_sequences = num(key, value)?,
            "scene.seed" => s.seed = num(key, value)?,
            "scene.frames" => s.frames = num(key, value)?,
            "scene.height" => s.height = num(key, value)?,
            "scene.width" => s.width = num(key, value)?,
            "scene.image_size" => {
                s.height = num(key, value)?;
                s.width = s.height;
            }
            "scene.vertices" => s.vertices = num(key, value)?,
            "scene.occlusion_level" => s.occlusion_level = num(key, value)?,
            "scene.distractor" => s.distractor = flag(key, value)?,
            "scene.motion_scale" => s.motion_scale = num(key, value)?,
            "scene.freq_min" => s.freq_hz.0 = num(key, value)?,
            "scene.freq_max" => s.freq_hz.1 = num(key, value)?,
            "scene.fps" => s.fps = num(key, value)?,
            "scene.body_scale" => s.body_scale = num(key, value)?,
            "model.backbone" => {
                m.backbone = value
                    .split(',')
                    .map(|x| num(key, x.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "model.layers" => m.layers = num(key, value)?,
            "model.heads" => m.heads = num(key, value)?,
            "model.dim" => m.dim = num(key, value)?,
            "model.groups" => m.groups = num(key, value)?,
            "model.norm_groups" => m.norm_groups = num(key, value)?,
            "model.shared_params" => m.shared_params = flag(key, value)?,
            "model.md_groups" => m.md_groups = num(key, value)?,
            "model.shuffle" => m.shuffle = flag(key, value)?,
            "model.order" => {
                m.order = match value {
                    "sequential" => BlockOrder::Sequential,
                    "parallel" => BlockOrder::Parallel,
                    _ => return Err(format!("{key}: expected sequential or parallel, got {value:?}")),
                }
            }
            "model.offset_scale" => m.offset_scale = num(key, value)?,
            "model.sd_enabled" => m.sd_enabled = flag(key, value)?,
            "model.md_enabled" => m.md_enabled = flag(key, value)?,
            "loss.joints3d" => l.weights.joints3d = num(key, value)?,
            "loss.joints2d" => l.weights.joints2d = num(key, value)?,
            "loss.velocity" => l.weights.velocity = num(key, value)?,
            "loss.vertices" => l.weights.vertices = num(key, value)?,
            "loss.velocity_enabled" => l.velocity_enabled = flag(key, value)?,
            "loss.velocity_target" => {
                l.velocity_target = match value {
                    "joints" => VelocityTarget::Joints,
                    "vertices" => VelocityTarget::Vertices,
                    _ => return Err(format!("{key}: expected joints or vertices, got {value:?}")),
                }
            }
            "loss.speed_norm" => {
                l.speed_norm = match value {
                    "frames" => SpeedNorm::JointsTimesFrames,
                    "intervals" => SpeedNorm::JointsTimesIntervals,
                    _ => return Err(format!("{key}: expected frames or intervals, got {value:?}")),
                }
            }
            "optim.lr" => o.lr = num(key, value)?,
            "optim.weight_decay" => o.weight_decay = num(key, value)?,
            "optim.beta1" => o.beta1 = num(key, value)?,
            "optim.beta2" => o.beta2 = num(key, value)?,
            "optim.eps" => o.eps = num(key, value)?,
            "optim.decay_epoch" => o.decay_epoch = num(key, value)?,
            "optim.decay_factor" => o.decay_factor = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }
}
