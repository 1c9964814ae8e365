//! Motion disentanglement block.
//!
//! Frames of a clip are moved onto a channel-like axis: `(B*S, C, H, W)`
//! becomes `(B*C, S, H, W)`, so each slab holds one feature channel across
//! all `S` frames. During training the frame order of every slab is shuffled
//! independently. The spatial-disentanglement stack then runs over the slabs
//! with `S` in the role of channels, the gated result is unshuffled, and the
//! layout is restored.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sd::{sd_forward, SdConfig, SdVars};
use crate::tensor::{inverse_perm, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `(B*S, C, H, W)`
    FrameMajor,
    /// `(B*C, S, H, W)`
    ChannelMajor,
}

/// A 4-D feature tensor tagged with its batch/frame layout.
#[derive(Clone, Copy, Debug)]
pub struct FeatureBatch<'t> {
    pub var: Var<'t>,
    pub layout: Layout,
    pub batch: usize,
    pub frames: usize,
    pub channels: usize,
}

impl<'t> FeatureBatch<'t> {
    pub fn frame_major(var: Var<'t>, batch: usize, frames: usize) -> Result<Self> {
        let s = var.shape();
        if s.len() != 4 || s[0] != batch * frames {
            return Err(Error::shape(
                "feature_batch",
                format!("leading axis of {s:?} must equal B*S = {batch}*{frames}"),
            ));
        }
        Ok(FeatureBatch {
            var,
            layout: Layout::FrameMajor,
            batch,
            frames,
            channels: s[1],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One frame permutation per (sequence, channel) slab.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShufflePlan {
    pub batch: usize,
    pub channels: usize,
    pub frames: usize,
    pub seed: u64,
    pub mode: Mode,
    perms: Vec<Vec<usize>>,
}

impl ShufflePlan {
    /// Training mode draws an independent uniform permutation for each
    /// `(b, c)` from a ChaCha stream keyed by `seed` and numbered by `(b, c)`,
    /// so plans never depend on generation order. Eval mode is the identity.
    pub fn new(batch: usize, channels: usize, frames: usize, seed: u64, mode: Mode) -> Self {
        let perms = (0..batch)
            .flat_map(|b| (0..channels).map(move |c| (b, c)))
            .map(|(b, c)| {
                let mut p: Vec<usize> = (0..frames).collect();
                if mode == Mode::Train {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(((b as u64) << 32) | c as u64);
                    p.shuffle(&mut rng);
                }
                p
            })
            .collect();
        ShufflePlan {
            batch,
            channels,
            frames,
            seed,
            mode,
            perms,
        }
    }

    pub fn identity(batch: usize, channels: usize, frames: usize) -> Self {
        Self::new(batch, channels, frames, 0, Mode::Eval)
    }

    /// Builds a plan from explicit permutations (row `b*C + c`).
    pub fn from_perms(batch: usize, channels: usize, frames: usize, perms: Vec<Vec<usize>>) -> Result<Self> {
        if perms.len() != batch * channels {
            return Err(Error::shape(
                "shuffle_plan",
                format!("{} permutations for B*C = {}", perms.len(), batch * channels),
            ));
        }
        for p in &perms {
            let mut seen = vec![false; frames];
            if p.len() != frames || p.iter().any(|&i| i >= frames || std::mem::replace(&mut seen[i], true)) {
                return Err(Error::invalid(format!("{p:?} is not a permutation of 0..{frames}")));
            }
        }
        Ok(ShufflePlan {
            batch,
            channels,
            frames,
            seed: 0,
            mode: Mode::Train,
            perms,
        })
    }

    pub fn perms(&self) -> &[Vec<usize>] {
        &self.perms
    }

    pub fn perm(&self, b: usize, c: usize) -> &[usize] {
        &self.perms[b * self.channels + c]
    }

    pub fn is_identity(&self) -> bool {
        self.perms
            .iter()
            .all(|p| p.iter().enumerate().all(|(i, &v)| i == v))
    }

    pub fn inverse(&self) -> ShufflePlan {
        ShufflePlan {
            perms: self.perms.iter().map(|p| inverse_perm(p)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MdConfig {
    /// Frames per sequence, S.
    pub frames: usize,
    /// Groups over the frame axis; must divide S.
    pub groups: usize,
    pub norm_groups: usize,
    pub shuffle: bool,
}

impl MdConfig {
    pub fn new(frames: usize) -> Self {
        MdConfig {
            frames,
            groups: 1,
            norm_groups: frames,
            shuffle: true,
        }
    }

    /// The spatial stack run over `(B*C, S, H, W)` slabs.
    pub fn interaction(&self) -> SdConfig {
        SdConfig {
            channels: self.frames,
            groups: self.groups,
            norm_groups: self.norm_groups,
            shared_params: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::invalid(format!("S = {} frames; need at least 2", self.frames)));
        }
        self.interaction().validate()
    }
}

/// `(B*S, C, H, W) -> (B*C, S, H, W)`; element `(b, s, c)` moves to row `b*C + c`, frame `s`.
pub fn temporal_regroup(x: FeatureBatch<'_>) -> Result<FeatureBatch<'_>> {
    if x.layout != Layout::FrameMajor {
        return Err(Error::invalid("temporal_regroup expects a frame-major batch"));
    }
    let s = x.var.shape();
    let (b, f, c) = (x.batch, x.frames, s[1]);
    if s[0] != b * f {
        return Err(Error::shape("temporal_regroup", format!("axis 0 = {} but B*S = {}", s[0], b * f)));
    }
    let hw = s[2] * s[3];
    let var = x
        .var
        .reshape([b, f, c, hw])?
        .permute(&[0, 2, 1, 3])?
        .reshape([b * c, f, s[2], s[3]])?;
    Ok(FeatureBatch {
        var,
        layout: Layout::ChannelMajor,
        ..x
    })
}

/// Inverse of [`temporal_regroup`].
pub fn inverse_regroup(x: FeatureBatch<'_>) -> Result<FeatureBatch<'_>> {
    if x.layout != Layout::ChannelMajor {
        return Err(Error::invalid("inverse_regroup expects a channel-major batch"));
    }
    let s = x.var.shape();
    let (b, c, f) = (x.batch, x.channels, x.frames);
    if s[0] != b * c || s[1] != f {
        return Err(Error::shape(
            "inverse_regroup",
            format!("{s:?} does not match B*C = {}, S = {f}", b * c),
        ));
    }
    let hw = s[2] * s[3];
    let var = x
        .var
        .reshape([b, c, f, hw])?
        .permute(&[0, 2, 1, 3])?
        .reshape([b * f, c, s[2], s[3]])?;
    Ok(FeatureBatch {
        var,
        layout: Layout::FrameMajor,
        ..x
    })
}

/// Reorders frames of every `(b, c)` slab: output frame `j` is input frame `plan.perm(b, c)[j]`.
pub fn apply_shuffle<'t>(x: FeatureBatch<'t>, plan: &ShufflePlan) -> Result<FeatureBatch<'t>> {
    if x.layout != Layout::ChannelMajor {
        return Err(Error::invalid("apply_shuffle expects a channel-major batch"));
    }
    if plan.batch != x.batch || plan.channels != x.channels || plan.frames != x.frames {
        return Err(Error::shape(
            "apply_shuffle",
            format!(
                "plan is B={}, C={}, S={} but features are B={}, C={}, S={}",
                plan.batch, plan.channels, plan.frames, x.batch, x.channels, x.frames
            ),
        ));
    }
    let var = x.var.gather_frames(Rc::new(plan.perms.clone()))?;
    Ok(FeatureBatch { var, ..x })
}

/// The full block on `(B*S, C, H, W)` features; output has the input shape.
pub fn md_forward<'t>(
    x: FeatureBatch<'t>,
    params: &[SdVars<'t>],
    cfg: &MdConfig,
    plan: &ShufflePlan,
) -> Result<FeatureBatch<'t>> {
    cfg.validate()?;
    if x.frames != cfg.frames {
        return Err(Error::shape(
            "md_forward",
            format!("S: batch has {} frames, config expects {}", x.frames, cfg.frames),
        ));
    }
    let slabs = temporal_regroup(x)?;
    let shuffled = cfg.shuffle && !plan.is_identity();
    let slabs = if shuffled { apply_shuffle(slabs, plan)? } else { slabs };
    let gated = sd_forward(slabs.var, params, &cfg.interaction())?;
    let mut out = FeatureBatch { var: gated, ..slabs };
    if shuffled {
        out = apply_shuffle(out, &plan.inverse())?;
    }
    inverse_regroup(out)
}
