//! Mesh regressor: conv backbone, spatial and motion disentanglement, and a
//! pre-norm transformer over grid tokens plus one query token per joint and
//! per vertex.
//!
//! Every query token is decoded by one shared linear head into a 3D offset from
//! the template body. A second linear head on the pooled feature predicts a
//! weak-perspective camera `(s, tx, ty)` as a correction to a fixed prior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::md::{md_forward, FeatureBatch, MdConfig, ShufflePlan};
use crate::params::{uniform_init, Bound, ParamStore};
use crate::sd::{sd_forward, SdConfig, SdParams, SdVars};
use crate::tensor::{Tape, Tensor, Var};

/// How the two disentanglement blocks are composed when both are enabled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockOrder {
    /// `md(sd(x))`
    #[default]
    Sequential,
    /// `(sd(x) + md(x)) / 2`
    Parallel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub in_channels: usize,
    /// Output channels of each stride-2 backbone stage; the last is C.
    pub backbone: Vec<usize>,
    pub joints: usize,
    pub vertices: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub sd: SdConfig,
    pub md: MdConfig,
    pub sd_enabled: bool,
    pub md_enabled: bool,
    pub order: BlockOrder,
    /// `[K, 3]`
    pub template_joints: Tensor,
    /// `[V, 3]`
    pub template_vertices: Tensor,
    /// Multiplier on the raw head output, in output units.
    pub offset_scale: f64,
    pub camera_prior: [f64; 3],
    /// Per-component multiplier on the raw camera head output.
    pub camera_step: [f64; 3],
}

impl ModelConfig {
    /// Desk-scale defaults around the synthetic body template.
    pub fn new(template_joints: Tensor, template_vertices: Tensor, camera_prior: [f64; 3]) -> Self {
        let channels = 32;
        ModelConfig {
            image_height: 64,
            image_width: 64,
            in_channels: 1,
            backbone: vec![16, 32, channels],
            joints: template_joints.shape()[0],
            vertices: template_vertices.shape()[0],
            layers: 2,
            heads: 2,
            dim: 64,
            sd: SdConfig::new(channels, 4),
            md: MdConfig::new(8),
            sd_enabled: true,
            md_enabled: true,
            order: BlockOrder::Sequential,
            template_joints,
            template_vertices,
            offset_scale: 100.0,
            camera_step: [0.1 * camera_prior[0], 1.0, 1.0],
            camera_prior,
        }
    }

    pub fn channels(&self) -> usize {
        *self.backbone.last().unwrap_or(&self.in_channels)
    }

    pub fn frames(&self) -> usize {
        self.md.frames
    }

    /// Spatial size of the backbone output.
    pub fn feature_size(&self) -> (usize, usize) {
        let mut hw = (self.image_height, self.image_width);
        for _ in &self.backbone {
            hw = (hw.0.div_ceil(2), hw.1.div_ceil(2));
        }
        hw
    }

    pub fn grid_tokens(&self) -> usize {
        let (h, w) = self.feature_size();
        h * w
    }

    pub fn queries(&self) -> usize {
        self.joints + self.vertices
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone.is_empty() || self.backbone.contains(&0) {
            return Err(Error::invalid("backbone needs at least one stage of nonzero width"));
        }
        if self.joints == 0 || self.vertices == 0 {
            return Err(Error::invalid("K and V must be >= 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.template_joints.shape() != [self.joints, 3] || self.template_vertices.shape() != [self.vertices, 3] {
            return Err(Error::invalid("template shapes do not match K and V"));
        }
        if self.sd.channels != self.channels() {
            return Err(Error::invalid(format!(
                "SD block expects {} channels, backbone produces {}",
                self.sd.channels,
                self.channels()
            )));
        }
        self.sd.validate()?;
        self.md.validate()?;
        Ok(())
    }
}

/// Per-frame predictions for `N = B * S` frames.
#[derive(Clone, Copy, Debug)]
pub struct MeshOutput<'t> {
    /// `[N, K, 3]`
    pub joints3d: Var<'t>,
    /// `[N, V, 3]`
    pub vertices3d: Var<'t>,
    /// `[N, 3]`
    pub camera: Var<'t>,
    /// `[N, K, 2]`
    pub joints2d: Var<'t>,
}

/// Intermediate `[N, C, h, w]` feature maps.
#[derive(Clone, Copy, Debug)]
pub struct FeatureTaps<'t> {
    pub backbone: Var<'t>,
    pub post_sd: Var<'t>,
    pub post_md: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
}

fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let n = b.shape()[0];
    let mut bshape = vec![1; x.shape().len()];
    *bshape.last_mut().expect("linear input has an axis") = n;
    x.matmul(w)?.add(b.reshape(bshape)?)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model { config })
    }

    /// Fresh parameters. Disabled blocks get none, but their draws are still
    /// taken so every other parameter matches across ablations for one seed.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();

        let mut cin = c.in_channels;
        for (i, &cout) in c.backbone.iter().enumerate() {
            p.insert(format!("backbone.{i}.weight"), uniform_init(&[cout, cin, 3, 3], cin * 9, &mut rng));
            p.insert(format!("backbone.{i}.bias"), Tensor::zeros([cout]));
            cin = cout;
        }
        let sd_sets: Vec<SdParams> = (0..c.sd.param_sets())
            .map(|_| SdParams::init(c.sd.group_channels(), &mut rng))
            .collect();
        if c.sd_enabled {
            SdParams::register_block(&sd_sets, &mut p, "sd");
        }
        let md_cfg = c.md.interaction();
        let md_sets: Vec<SdParams> = (0..md_cfg.param_sets())
            .map(|_| SdParams::init(md_cfg.group_channels(), &mut rng))
            .collect();
        if c.md_enabled {
            SdParams::register_block(&md_sets, &mut p, "md");
        }

        let (ch, d) = (c.channels(), c.dim);
        p.insert("tokens.weight", uniform_init(&[ch, d], ch, &mut rng));
        p.insert("tokens.bias", Tensor::zeros([d]));
        p.insert("tokens.position", uniform_init(&[c.grid_tokens(), d], d, &mut rng));
        p.insert("tokens.queries", uniform_init(&[c.queries(), d], d, &mut rng));

        for l in 0..c.layers {
            let pre = format!("layers.{l}");
            for ln in ["norm1", "norm2"] {
                p.insert(format!("{pre}.{ln}.gamma"), Tensor::full([d], 1.0));
                p.insert(format!("{pre}.{ln}.beta"), Tensor::zeros([d]));
            }
            for proj in ["q", "k", "v", "o"] {
                p.insert(format!("{pre}.attn.{proj}.weight"), uniform_init(&[d, d], d, &mut rng));
                // A key bias shifts every score of a query equally, so softmax ignores it.
                if proj != "k" {
                    p.insert(format!("{pre}.attn.{proj}.bias"), Tensor::zeros([d]));
                }
            }
            p.insert(format!("{pre}.ffn.0.weight"), uniform_init(&[d, 4 * d], d, &mut rng));
            p.insert(format!("{pre}.ffn.0.bias"), Tensor::zeros([4 * d]));
            p.insert(format!("{pre}.ffn.1.weight"), uniform_init(&[4 * d, d], 4 * d, &mut rng));
            p.insert(format!("{pre}.ffn.1.bias"), Tensor::zeros([d]));
        }
        p.insert("final_norm.gamma", Tensor::full([d], 1.0));
        p.insert("final_norm.beta", Tensor::zeros([d]));
        p.insert("head.weight", uniform_init(&[d, 3], d, &mut rng));
        p.insert("head.bias", Tensor::zeros([3]));
        p.insert("camera.weight", uniform_init(&[ch, 3], ch, &mut rng));
        p.insert("camera.bias", Tensor::zeros([3]));
        p
    }

    /// Zeroes the offset and camera heads, making the output the template.
    pub fn zero_heads(params: &mut ParamStore) {
        params.map_values(|name, t| {
            if name.starts_with("head.") || name.starts_with("camera.") {
                t.data_mut().fill(0.0);
            }
        });
    }

    /// Zeroes every SD and MD block parameter.
    pub fn zero_blocks(params: &mut ParamStore) {
        params.map_values(|name, t| {
            if name.starts_with("sd.") || name.starts_with("md.") {
                t.data_mut().fill(0.0);
            }
        });
    }

    /// Stride-2 3x3 convolutions with SiLU: `[N, ch, H, W] -> [N, C, H/8, W/8]`.
    pub fn extract_features<'t>(&self, images: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_height || s[3] != c.image_width {
            return Err(Error::shape(
                "extract_features",
                format!(
                    "images {s:?}, expected [N, {}, {}, {}]",
                    c.in_channels, c.image_height, c.image_width
                ),
            ));
        }
        let mut x = images;
        for (i, &cout) in c.backbone.iter().enumerate() {
            let w = p.get(&format!("backbone.{i}.weight"))?;
            let b = p.get(&format!("backbone.{i}.bias"))?.reshape([1, cout, 1, 1])?;
            x = x.conv2d(w, 2)?.add(b)?.silu();
        }
        Ok(x)
    }

    fn blocks<'t>(&self, f: Var<'t>, p: &Bound<'t>, batch: usize, plan: &ShufflePlan) -> Result<(Var<'t>, Var<'t>)> {
        let c = &self.config;
        let sd = |x: Var<'t>| -> Result<Var<'t>> {
            let vars = SdVars::block_from_bound(p, "sd", c.sd.param_sets())?;
            sd_forward(x, &vars, &c.sd)
        };
        let md = |x: Var<'t>| -> Result<Var<'t>> {
            let vars = SdVars::block_from_bound(p, "md", c.md.interaction().param_sets())?;
            let fb = FeatureBatch::frame_major(x, batch, c.frames())?;
            Ok(md_forward(fb, &vars, &c.md, plan)?.var)
        };
        match (c.sd_enabled, c.md_enabled, c.order) {
            (false, false, _) => Ok((f, f)),
            (true, false, _) => {
                let y = sd(f)?;
                Ok((y, y))
            }
            (false, true, _) => Ok((f, md(f)?)),
            (true, true, BlockOrder::Sequential) => {
                let y = sd(f)?;
                Ok((y, md(y)?))
            }
            (true, true, BlockOrder::Parallel) => {
                let y = sd(f)?;
                Ok((y, y.add(md(f)?)?.scale(0.5)))
            }
        }
    }

    fn encoder_layer<'t>(&self, x: Var<'t>, p: &Bound<'t>, l: usize) -> Result<Var<'t>> {
        let c = &self.config;
        let pre = format!("layers.{l}");
        let g = |n: &str| p.get(&format!("{pre}.{n}"));
        let s = x.shape();
        let (n, len, d) = (s[0], s[1], s[2]);
        let (h, dh) = (c.heads, c.dim / c.heads);

        let xn = x.layer_norm(g("norm1.gamma")?, g("norm1.beta")?)?;
        let split = |v: Var<'t>| v.reshape([n, len, h, dh])?.permute(&[0, 2, 1, 3]);
        let q = split(linear(xn, g("attn.q.weight")?, g("attn.q.bias")?)?)?;
        let k = xn
            .matmul(g("attn.k.weight")?)?
            .reshape([n, len, h, dh])?
            .permute(&[0, 2, 3, 1])?;
        let v = split(linear(xn, g("attn.v.weight")?, g("attn.v.bias")?)?)?;
        let attn = q.matmul(k)?.scale(1.0 / (dh as f64).sqrt()).softmax(3)?;
        let ctx = attn.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape([n, len, d])?;
        let x = x.add(linear(ctx, g("attn.o.weight")?, g("attn.o.bias")?)?)?;

        let xn = x.layer_norm(g("norm2.gamma")?, g("norm2.beta")?)?;
        let hidden = linear(xn, g("ffn.0.weight")?, g("ffn.0.bias")?)?.gelu();
        x.add(linear(hidden, g("ffn.1.weight")?, g("ffn.1.bias")?)?)
    }

    /// Full forward pass over `images: [B*S, ch, H, W]` (frames of each sequence contiguous).
    pub fn forward<'t>(
        &self,
        images: Var<'t>,
        p: &Bound<'t>,
        batch: usize,
        plan: &ShufflePlan,
    ) -> Result<MeshOutput<'t>> {
        Ok(self.forward_with_taps(images, p, batch, plan)?.0)
    }

    pub fn forward_with_taps<'t>(
        &self,
        images: Var<'t>,
        p: &Bound<'t>,
        batch: usize,
        plan: &ShufflePlan,
    ) -> Result<(MeshOutput<'t>, FeatureTaps<'t>)> {
        let c = &self.config;
        let n = images.shape()[0];
        if n != batch * c.frames() {
            return Err(Error::shape(
                "forward",
                format!("{n} frames given for {batch} sequences of {}", c.frames()),
            ));
        }
        let tape: &'t Tape = images.tape();
        let feat = self.extract_features(images, p)?;
        let (post_sd, post_md) = self.blocks(feat, p, batch, plan)?;

        let fs = post_md.shape();
        let (ch, cells) = (fs[1], fs[2] * fs[3]);
        let grid = post_md.reshape([n, ch, cells])?.permute(&[0, 2, 1])?;
        let grid = linear(grid, p.get("tokens.weight")?, p.get("tokens.bias")?)?
            .add(p.get("tokens.position")?.reshape([1, cells, c.dim])?)?;
        let nq = c.queries();
        let queries = tape
            .constant(Tensor::zeros([n, nq, c.dim]))
            .add(p.get("tokens.queries")?.reshape([1, nq, c.dim])?)?;
        let mut x = Var::concat(&[grid, queries], 1)?;
        for l in 0..c.layers {
            x = self.encoder_layer(x, p, l)?;
        }
        let x = x.layer_norm(p.get("final_norm.gamma")?, p.get("final_norm.beta")?)?;
        let q = x.slice(1, cells, nq)?;
        let offsets = linear(q, p.get("head.weight")?, p.get("head.bias")?)?.scale(c.offset_scale);

        let tj = tape.constant(c.template_joints.clone().reshape([1, c.joints, 3])?);
        let tv = tape.constant(c.template_vertices.clone().reshape([1, c.vertices, 3])?);
        let joints3d = tj.add(offsets.slice(1, 0, c.joints)?)?;
        let vertices3d = tv.add(offsets.slice(1, c.joints, c.vertices)?)?;

        let pooled = post_md.mean_axis(3)?.mean_axis(2)?;
        let raw = linear(pooled, p.get("camera.weight")?, p.get("camera.bias")?)?;
        let step = tape.constant(Tensor::new([1, 3], c.camera_step.to_vec())?);
        let prior = tape.constant(Tensor::new([1, 3], c.camera_prior.to_vec())?);
        let camera = raw.mul(step)?.add(prior)?;

        let joints2d = weak_perspective(joints3d, camera)?;
        let out = MeshOutput {
            joints3d,
            vertices3d,
            camera,
            joints2d,
        };
        let taps = FeatureTaps {
            backbone: feat,
            post_sd,
            post_md,
        };
        Ok((out, taps))
    }
}

/// `s * (x, y) + (tx, ty)` for `[N, K, 3]` points and `[N, 3]` cameras.
pub fn weak_perspective<'t>(joints3d: Var<'t>, camera: Var<'t>) -> Result<Var<'t>> {
    let n = camera.shape()[0];
    let xy = joints3d.slice(2, 0, 2)?;
    let s = camera.slice(1, 0, 1)?.reshape([n, 1, 1])?;
    let t = camera.slice(1, 1, 2)?.reshape([n, 1, 2])?;
    xy.mul(s)?.add(t)
}
