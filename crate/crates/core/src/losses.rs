//! Training objective: L1 joint/vertex terms and the sequence velocity loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub joints3d: f64,
    pub joints2d: f64,
    pub velocity: f64,
    /// Positional per-vertex L1; 0 gives the three-term objective.
    pub vertices: f64,
}

impl LossWeights {
    /// λ1 = λ2 = λ3 = 1 with no positional vertex term.
    pub fn three_term() -> Self {
        LossWeights {
            joints3d: 1.0,
            joints2d: 1.0,
            velocity: 1.0,
            vertices: 0.0,
        }
    }

    /// `λ1*l3d + λ2*l2d + λ3*lv + λ_vert*lvert`, skipping zero-weight terms in
    /// the same order as [`total_loss`].
    pub fn combine(&self, l3d: f64, l2d: f64, lv: f64, lvert: f64) -> f64 {
        let mut total: Option<f64> = None;
        for (term, weight) in [(l3d, self.joints3d), (l2d, self.joints2d), (lv, self.velocity), (lvert, self.vertices)] {
            if weight != 0.0 {
                let part = term * weight;
                total = Some(total.map_or(part, |acc| acc + part));
            }
        }
        total.unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("joints3d", self.joints3d),
            ("joints2d", self.joints2d),
            ("velocity", self.velocity),
            ("vertices", self.vertices),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            vertices: 1.0,
            ..Self::three_term()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l3d: f64,
    pub l2d: f64,
    pub lv: f64,
    pub lvert: f64,
    pub total: f64,
}

/// Divisor used by [`mean_speed`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpeedNorm {
    /// `K*T`, with `T-1` inter-frame terms in the sum.
    #[default]
    JointsTimesFrames,
    /// `K*(T-1)`: the true mean inter-frame displacement.
    JointsTimesIntervals,
}

/// Which point set the velocity term tracks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum VelocityTarget {
    #[default]
    Joints,
    Vertices,
}

fn l1_mean<'t>(op: &'static str, pred: Var<'t>, gt: Var<'t>) -> Result<Var<'t>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    Ok(pred.sub(gt)?.abs().mean())
}

/// Mean absolute error over every coordinate of `[S, K, 3]` joints.
pub fn l1_joints3d<'t>(pred: Var<'t>, gt: Var<'t>) -> Result<Var<'t>> {
    l1_mean("l1_joints3d", pred, gt)
}

/// Mean absolute error over `[S, K, 2]` image-plane joints.
pub fn l1_joints2d<'t>(pred: Var<'t>, gt: Var<'t>) -> Result<Var<'t>> {
    l1_mean("l1_joints2d", pred, gt)
}

/// Mean absolute error over `[S, V, 3]` vertices.
pub fn l1_vertices<'t>(pred: Var<'t>, gt: Var<'t>) -> Result<Var<'t>> {
    l1_mean("l1_vertices", pred, gt)
}

/// Per-sequence mean speed of `[N, T, K, 3]` trajectories, returned as `[N]`:
/// `(1/(K*T)) * sum_{t=2..T} sum_i |J[t,i] - J[t-1,i]|` under the default norm.
pub fn batched_mean_speed<'t>(points: Var<'t>, norm: SpeedNorm) -> Result<Var<'t>> {
    let s = points.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::shape("mean_speed", format!("expected [N, T, K, 3], got {s:?}")));
    }
    let t = s[1];
    if t < 2 {
        return Err(Error::invalid(format!("mean_speed needs T >= 2 frames, got {t}")));
    }
    let step = points.slice(1, 1, t - 1)?.sub(points.slice(1, 0, t - 1)?)?;
    // mean over (T-1) intervals and K joints
    let per_interval = step.norm_last()?.mean_axis(2)?.mean_axis(1)?;
    Ok(match norm {
        SpeedNorm::JointsTimesFrames => per_interval.scale((t - 1) as f64 / t as f64),
        SpeedNorm::JointsTimesIntervals => per_interval,
    })
}

/// Mean speed of a single `[T, K, 3]` trajectory (scalar).
pub fn mean_speed<'t>(points: Var<'t>, norm: SpeedNorm) -> Result<Var<'t>> {
    let s = points.shape();
    if s.len() != 3 {
        return Err(Error::shape("mean_speed", format!("expected [T, K, 3], got {s:?}")));
    }
    batched_mean_speed(points.reshape([1, s[0], s[1], s[2]])?, norm)?.reshape(Vec::<usize>::new())
}

/// `L_v = mean_s |V(pred_s) - V(gt_s)|` over `[N, T, K, 3]` batches. Speeds are
/// computed inside each sequence, so no frame pair crosses a sequence boundary.
pub fn sequence_velocity_loss<'t>(pred: Var<'t>, gt: Var<'t>, norm: SpeedNorm) -> Result<Var<'t>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "sequence_velocity_loss",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    let vp = batched_mean_speed(pred, norm)?;
    let vg = batched_mean_speed(gt, norm)?;
    Ok(vp.sub(vg)?.abs().mean())
}

/// Individual loss terms on one tape, before weighting.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub l3d: Var<'t>,
    pub l2d: Var<'t>,
    pub lv: Var<'t>,
    pub lvert: Var<'t>,
}

/// `λ1*l3d + λ2*l2d + λ3*lv + λ_vert*lvert`. Terms with zero weight are left
/// out of the graph, so they contribute neither value nor gradient.
pub fn total_loss<'t>(terms: &LossTerms<'t>, w: &LossWeights) -> Result<(Var<'t>, LossBreakdown)> {
    w.validate()?;
    let weighted = [
        (terms.l3d, w.joints3d),
        (terms.l2d, w.joints2d),
        (terms.lv, w.velocity),
        (terms.lvert, w.vertices),
    ];
    let tape = terms.l3d.tape();
    let mut total: Option<Var<'t>> = None;
    for (term, weight) in weighted {
        if weight == 0.0 {
            continue;
        }
        let part = term.scale(weight);
        total = Some(match total {
            Some(acc) => acc.add(part)?,
            None => part,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(crate::tensor::Tensor::scalar(0.0)),
    };
    let breakdown = LossBreakdown {
        l3d: terms.l3d.item(),
        l2d: terms.l2d.item(),
        lv: terms.lv.item(),
        lvert: terms.lvert.item(),
        total: total.item(),
    };
    Ok((total, breakdown))
}
