//! Spatial disentanglement block.
//!
//! The channels of a `[C, H, W]` feature are split into `G` groups of `C/G`.
//! Each group is pooled along width and along height into two positional
//! descriptors, mixed by a 1x1 convolution into per-axis sigmoid gates, and
//! the gated feature is group-normalized (branch 1). A 3x3 convolution over
//! the same group gives branch 2. Each branch's softmaxed global average
//! weights the other branch's flattened map, and the sum of both products is
//! a single spatial attention map that gates the group through a sigmoid.
//!
//! Every function here is batched over leading frames: inputs are
//! `[N, C, H, W]` (or `[C, H, W]` for a single frame).

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{uniform_init, Bound, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SdConfig {
    pub channels: usize,
    pub groups: usize,
    /// Groups used by the normalization of branch 1; must divide `C/G`.
    pub norm_groups: usize,
    /// One parameter set for all groups (true) or one per group.
    pub shared_params: bool,
}

impl SdConfig {
    /// Defaults to per-channel normalization and shared parameters.
    pub fn new(channels: usize, groups: usize) -> Self {
        SdConfig {
            channels,
            groups,
            norm_groups: if groups > 0 { channels / groups } else { 0 },
            shared_params: true,
        }
    }

    pub fn group_channels(&self) -> usize {
        self.channels / self.groups
    }

    pub fn param_sets(&self) -> usize {
        if self.shared_params {
            1
        } else {
            self.groups
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.groups == 0 || self.channels % self.groups != 0 {
            return Err(Error::invalid(format!(
                "groups G = {} must divide channels C = {}",
                self.groups, self.channels
            )));
        }
        let cg = self.group_channels();
        if self.norm_groups == 0 || cg % self.norm_groups != 0 {
            return Err(Error::invalid(format!(
                "norm_groups = {} must divide C/G = {cg}",
                self.norm_groups
            )));
        }
        Ok(())
    }
}

/// Parameters for one group: both convolutions act on `C/G` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SdParams {
    pub w1x1: Tensor,
    pub w3x3: Tensor,
    pub norm_scale: Tensor,
    pub norm_shift: Tensor,
}

impl SdParams {
    pub fn init(group_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let cg = group_channels;
        SdParams {
            w1x1: uniform_init(&[cg, cg, 1, 1], cg, rng),
            w3x3: uniform_init(&[cg, cg, 3, 3], cg * 9, rng),
            norm_scale: Tensor::full([cg], 1.0),
            norm_shift: Tensor::zeros([cg]),
        }
    }

    pub fn zeros(group_channels: usize) -> Self {
        let cg = group_channels;
        SdParams {
            w1x1: Tensor::zeros([cg, cg, 1, 1]),
            w3x3: Tensor::zeros([cg, cg, 3, 3]),
            norm_scale: Tensor::zeros([cg]),
            norm_shift: Tensor::zeros([cg]),
        }
    }

    fn entries(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w1x1", &self.w1x1),
            ("w3x3", &self.w3x3),
            ("norm_scale", &self.norm_scale),
            ("norm_shift", &self.norm_shift),
        ]
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) {
        for (name, t) in self.entries() {
            store.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    /// Registers the parameter sets a block with `cfg` needs under `prefix`.
    pub fn register_block(sets: &[SdParams], store: &mut ParamStore, prefix: &str) {
        if sets.len() == 1 {
            sets[0].register(store, prefix);
        } else {
            for (g, p) in sets.iter().enumerate() {
                p.register(store, &format!("{prefix}.g{g}"));
            }
        }
    }
}

/// [`SdParams`] registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SdVars<'t> {
    pub w1x1: Var<'t>,
    pub w3x3: Var<'t>,
    pub norm_scale: Var<'t>,
    pub norm_shift: Var<'t>,
}

impl<'t> SdVars<'t> {
    pub fn from_bound(bound: &Bound<'t>, prefix: &str) -> Result<Self> {
        Ok(SdVars {
            w1x1: bound.get(&format!("{prefix}.w1x1"))?,
            w3x3: bound.get(&format!("{prefix}.w3x3"))?,
            norm_scale: bound.get(&format!("{prefix}.norm_scale"))?,
            norm_shift: bound.get(&format!("{prefix}.norm_shift"))?,
        })
    }

    /// Inverse of [`SdParams::register_block`].
    pub fn block_from_bound(bound: &Bound<'t>, prefix: &str, sets: usize) -> Result<Vec<Self>> {
        if sets == 1 {
            Ok(vec![Self::from_bound(bound, prefix)?])
        } else {
            (0..sets)
                .map(|g| Self::from_bound(bound, &format!("{prefix}.g{g}")))
                .collect()
        }
    }

    pub fn leaf(tape: &'t crate::tensor::Tape, p: &SdParams) -> Self {
        SdVars {
            w1x1: tape.leaf(p.w1x1.clone()),
            w3x3: tape.leaf(p.w3x3.clone()),
            norm_scale: tape.leaf(p.norm_scale.clone()),
            norm_shift: tape.leaf(p.norm_shift.clone()),
        }
    }
}

/// Outputs of the 1x1 directional branch.
pub struct Directional<'t> {
    pub gate_h: Var<'t>,
    pub gate_w: Var<'t>,
    pub branch1: Var<'t>,
}

fn as_batch<'t>(x: Var<'t>) -> Result<(Var<'t>, bool)> {
    match x.shape().len() {
        3 => {
            let s = x.shape();
            Ok((x.reshape([1, s[0], s[1], s[2]])?, true))
        }
        4 => Ok((x, false)),
        _ => Err(Error::shape(
            "sd",
            format!("expected [C,H,W] or [N,C,H,W], got {:?}", x.shape()),
        )),
    }
}

/// `[N, C, H, W] -> [N*G, C/G, H, W]`: group `g` channel `j` is input channel
/// `g*(C/G) + j`.
pub fn split_groups<'t>(x: Var<'t>, groups: usize) -> Result<Var<'t>> {
    let (x, _) = as_batch(x)?;
    let s = x.shape();
    if groups == 0 || s[1] % groups != 0 {
        return Err(Error::shape(
            "split_groups",
            format!("G = {groups} does not divide C = {}", s[1]),
        ));
    }
    x.reshape([s[0] * groups, s[1] / groups, s[2], s[3]])
}

/// Inverse of [`split_groups`].
pub fn ungroup<'t>(xg: Var<'t>, groups: usize) -> Result<Var<'t>> {
    let s = xg.shape();
    if s.len() != 4 || groups == 0 || s[0] % groups != 0 {
        return Err(Error::shape(
            "ungroup",
            format!("cannot ungroup {s:?} into {groups} groups"),
        ));
    }
    xg.reshape([s[0] / groups, s[1] * groups, s[2], s[3]])
}

/// Width-averaged descriptor `[.., C/G, H, W] -> [.., C/G, H]`.
pub fn pool_height_descriptor<'t>(xg: Var<'t>) -> Result<Var<'t>> {
    let nd = xg.shape().len();
    if nd < 2 {
        return Err(Error::shape("pool_height_descriptor", "need at least [H, W]"));
    }
    xg.mean_axis(nd - 1)
}

/// Height-averaged descriptor `[.., C/G, H, W] -> [.., C/G, W]`.
pub fn pool_width_descriptor<'t>(xg: Var<'t>) -> Result<Var<'t>> {
    let nd = xg.shape().len();
    if nd < 2 {
        return Err(Error::shape("pool_width_descriptor", "need at least [H, W]"));
    }
    xg.mean_axis(nd - 2)
}

/// 1x1 mixing of the concatenated `[.., C/G, H+W]` descriptors into axis gates,
/// then `branch1 = GN(x * gate_h * gate_w)`. Operates on `[M, C/G, H, W]`.
pub fn directional_interaction<'t>(
    xg: Var<'t>,
    zh: Var<'t>,
    zw: Var<'t>,
    p: &SdVars<'t>,
    norm_groups: usize,
) -> Result<Directional<'t>> {
    let s = xg.shape();
    let (m, cg, h, w) = (s[0], s[1], s[2], s[3]);
    if zh.shape() != [m, cg, h] || zw.shape() != [m, cg, w] {
        return Err(Error::shape(
            "directional_interaction",
            format!("descriptors {:?}, {:?} do not match feature {s:?}", zh.shape(), zw.shape()),
        ));
    }
    let joint = Var::concat(&[zh, zw], 2)?.reshape([m, cg, 1, h + w])?;
    let logits = joint.conv2d(p.w1x1, 1)?.reshape([m, cg, h + w])?;
    let gate_h = logits.slice(2, 0, h)?.sigmoid();
    let gate_w = logits.slice(2, h, w)?.sigmoid();
    let gated = xg
        .mul(gate_h.reshape([m, cg, h, 1])?)?
        .mul(gate_w.reshape([m, cg, 1, w])?)?;
    let branch1 = gated.group_norm(norm_groups, p.norm_scale, p.norm_shift)?;
    Ok(Directional {
        gate_h,
        gate_w,
        branch1,
    })
}

/// 3x3 same-padded convolution over each group.
pub fn local_interaction<'t>(xg: Var<'t>, p: &SdVars<'t>) -> Result<Var<'t>> {
    xg.conv2d(p.w3x3, 1)
}

/// Cross-branch alignment: `softmax(GAP(b1)) . flat(b2) + softmax(GAP(b2)) . flat(b1)`,
/// returned as pre-sigmoid logits `[M, 1, H, W]`.
pub fn spatial_alignment<'t>(branch1: Var<'t>, branch2: Var<'t>) -> Result<Var<'t>> {
    let s = branch1.shape();
    if s.len() != 4 || branch2.shape() != s {
        return Err(Error::shape(
            "spatial_alignment",
            format!("branches {s:?} and {:?} must match as [M, C/G, H, W]", branch2.shape()),
        ));
    }
    let (m, cg, h, w) = (s[0], s[1], s[2], s[3]);
    let descriptor = |b: Var<'t>| -> Result<Var<'t>> {
        b.global_avg_pool_2d()?.softmax(1)?.reshape([m, 1, cg])
    };
    let flat1 = branch1.reshape([m, cg, h * w])?;
    let flat2 = branch2.reshape([m, cg, h * w])?;
    let m1 = descriptor(branch1)?.matmul(flat2)?;
    let m2 = descriptor(branch2)?.matmul(flat1)?;
    m1.add(m2)?.reshape([m, 1, h, w])
}

/// Attention logits for grouped features `[M, C/G, H, W]` under one parameter set.
pub fn attention_logits<'t>(xg: Var<'t>, p: &SdVars<'t>, norm_groups: usize) -> Result<Var<'t>> {
    let zh = pool_height_descriptor(xg)?;
    let zw = pool_width_descriptor(xg)?;
    let dir = directional_interaction(xg, zh, zw, p, norm_groups)?;
    let branch2 = local_interaction(xg, p)?;
    spatial_alignment(dir.branch1, branch2)
}

fn gate_groups<'t>(xg: Var<'t>, p: &SdVars<'t>, norm_groups: usize) -> Result<Var<'t>> {
    let attn = attention_logits(xg, p, norm_groups)?;
    xg.mul(attn.sigmoid())
}

/// Full block: `y_g = x_g * sigmoid(attn_g)`, regrouped to the input shape.
pub fn sd_forward<'t>(x: Var<'t>, params: &[SdVars<'t>], cfg: &SdConfig) -> Result<Var<'t>> {
    cfg.validate()?;
    let (xb, single) = as_batch(x)?;
    let s = xb.shape();
    if s[1] != cfg.channels {
        return Err(Error::shape(
            "sd_forward",
            format!("C: input has {} channels, config expects {}", s[1], cfg.channels),
        ));
    }
    if params.len() != cfg.param_sets() {
        return Err(Error::invalid(format!(
            "sd_forward: {} parameter sets given, config needs {}",
            params.len(),
            cfg.param_sets()
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (g, cg) = (cfg.groups, cfg.group_channels());
    let y = if cfg.shared_params {
        let xg = split_groups(xb, g)?;
        ungroup(gate_groups(xg, &params[0], cfg.norm_groups)?, g)?
    } else {
        let rows = xb.reshape([n, g, cg * h * w])?;
        let parts = params
            .iter()
            .enumerate()
            .map(|(gi, p)| {
                let xg = rows.slice(1, gi, 1)?.reshape([n, cg, h, w])?;
                gate_groups(xg, p, cfg.norm_groups)?.reshape([n, 1, cg * h * w])
            })
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&parts, 1)?.reshape([n, c, h, w])?
    };
    if single {
        y.reshape([c, h, w])
    } else {
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut r = rng(seed);
        Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(SdConfig::new(32, 4).validate().is_ok());
        assert!(SdConfig::new(30, 4).validate().is_err());
        let mut c = SdConfig::new(8, 2);
        c.norm_groups = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn split_groups_assigns_contiguous_channels() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([4, 1, 1], |i| i as f64));
        let g = split_groups(x, 2).unwrap();
        assert_eq!(g.shape(), vec![2, 2, 1, 1]);
        assert_eq!(g.value().data(), &[0., 1., 2., 3.]);
        assert!(split_groups(x, 3).is_err());
        let one = split_groups(x, 1).unwrap();
        assert_eq!(one.value().data(), x.value().data());
    }

    #[test]
    fn split_then_ungroup_is_identity() {
        let tape = Tape::new();
        let x = tape.leaf(random(&[2, 8, 3, 5], 1));
        let back = ungroup(split_groups(x, 4).unwrap(), 4).unwrap();
        assert_eq!(back.to_tensor(), x.to_tensor());
    }

    #[test]
    fn descriptors_on_two_by_two() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new([1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        assert_eq!(pool_height_descriptor(x).unwrap().value().data(), &[1.5, 3.5]);
        assert_eq!(pool_width_descriptor(x).unwrap().value().data(), &[2.0, 3.0]);
        let c = tape.leaf(Tensor::full([3, 4, 5], 2.0));
        assert!(pool_height_descriptor(c).unwrap().value().data().iter().all(|&v| v == 2.0));
        assert!(pool_width_descriptor(c).unwrap().value().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_one_by_one_gives_half_gates() {
        let tape = Tape::new();
        let mut p = SdParams::init(2, &mut rng(3));
        p.w1x1 = Tensor::zeros([2, 2, 1, 1]);
        let v = SdVars::leaf(&tape, &p);
        let xg = tape.leaf(random(&[1, 2, 3, 5], 4));
        let zh = pool_height_descriptor(xg).unwrap();
        let zw = pool_width_descriptor(xg).unwrap();
        let d = directional_interaction(xg, zh, zw, &v, 2).unwrap();
        assert_eq!(d.gate_h.shape(), vec![1, 2, 3]);
        assert_eq!(d.gate_w.shape(), vec![1, 2, 5]);
        assert!(d.gate_h.value().data().iter().all(|&g| g == 0.5));
        assert!(d.gate_w.value().data().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn local_interaction_identity_and_zero() {
        let tape = Tape::new();
        let xg = tape.leaf(random(&[1, 3, 4, 4], 5));
        let mut p = SdParams::zeros(3);
        let zero = SdVars::leaf(&tape, &p);
        assert!(local_interaction(xg, &zero).unwrap().value().data().iter().all(|&v| v == 0.0));
        for c in 0..3 {
            p.w3x3.set(&[c, c, 1, 1], 1.0);
        }
        let id = SdVars::leaf(&tape, &p);
        assert_eq!(local_interaction(xg, &id).unwrap().to_tensor(), xg.to_tensor());
    }

    #[test]
    fn alignment_of_zero_and_constant_branches() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::zeros([1, 2, 3, 3]));
        assert!(spatial_alignment(z, z).unwrap().value().data().iter().all(|&v| v == 0.0));
        let b1 = tape.leaf(Tensor::from_fn([1, 2, 3, 3], |i| (i / 9) as f64 + 0.5));
        let b2 = tape.leaf(Tensor::from_fn([1, 2, 3, 3], |i| 2.0 - (i / 9) as f64));
        let a = spatial_alignment(b1, b2).unwrap().to_tensor();
        let first = a.data()[0];
        assert!(a.data().iter().all(|&v| (v - first).abs() < 1e-15));
    }

    #[test]
    fn zero_parameters_halve_the_input() {
        for shared in [true, false] {
            let tape = Tape::new();
            let mut cfg = SdConfig::new(8, 2);
            cfg.shared_params = shared;
            let sets: Vec<SdVars> = (0..cfg.param_sets())
                .map(|_| SdVars::leaf(&tape, &SdParams::zeros(4)))
                .collect();
            let x = tape.leaf(random(&[8, 5, 6], 7));
            let y = sd_forward(x, &sets, &cfg).unwrap();
            assert_eq!(y.shape(), vec![8, 5, 6]);
            for (a, b) in y.value().data().iter().zip(x.value().data()) {
                assert_eq!(*a, b * 0.5);
            }
        }
    }

    #[test]
    fn rejects_mismatched_channels() {
        let tape = Tape::new();
        let cfg = SdConfig::new(8, 2);
        let sets = vec![SdVars::leaf(&tape, &SdParams::zeros(4))];
        let x = tape.leaf(Tensor::zeros([6, 4, 4]));
        assert!(sd_forward(x, &sets, &cfg).is_err());
    }

    #[test]
    fn gates_never_increase_magnitude() {
        let tape = Tape::new();
        let cfg = SdConfig::new(8, 4);
        let p = SdParams::init(2, &mut rng(9));
        let sets = vec![SdVars::leaf(&tape, &p)];
        let x = tape.leaf(random(&[3, 8, 4, 4], 10).clone());
        let y = sd_forward(x, &sets, &cfg).unwrap();
        for (a, b) in y.value().data().iter().zip(x.value().data()) {
            assert!(a.abs() <= b.abs());
        }
    }
}
