//! Evaluation in eval mode (identity shuffle plans).

use super::train::eval_forward;
use crate::error::{Error, Result};
use crate::metrics::{sequence_metrics, MetricReport};
use crate::model::{Model, ModelConfig};
use crate::parallel::{map_slice, Execution};
use crate::params::ParamStore;
use crate::synth::Sample;
use crate::tensor::{Tape, Tensor};

/// Model outputs for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub joints3d: Tensor,
    pub vertices3d: Tensor,
    pub joints2d: Tensor,
    pub camera: Tensor,
}

/// Checks that a sample's dimensions match what the model expects.
pub fn check_sample(c: &ModelConfig, s: &Sample) -> Result<()> {
    let want_img = [c.frames(), c.in_channels, c.image_height, c.image_width];
    let want_j = [c.frames(), c.joints, 3];
    let want_v = [c.frames(), c.vertices, 3];
    if s.images.shape() != want_img || s.body.joints3d.shape() != want_j || s.body.vertices3d.shape() != want_v {
        return Err(Error::shape(
            "dataset",
            format!(
                "sequence has images {:?}, joints {:?}, vertices {:?}; model expects {want_img:?}, {want_j:?}, {want_v:?}",
                s.images.shape(),
                s.body.joints3d.shape(),
                s.body.vertices3d.shape()
            ),
        ));
    }
    Ok(())
}

pub fn predict(model: &Model, params: &ParamStore, samples: &[Sample], exec: Execution) -> Result<Vec<Prediction>> {
    map_slice(exec, samples, |_, s| {
        check_sample(&model.config, s)?;
        let tape = Tape::new();
        let (out, _) = eval_forward(model, params, &tape, s)?;
        Ok(Prediction {
            joints3d: out.joints3d.to_tensor(),
            vertices3d: out.vertices3d.to_tensor(),
            joints2d: out.joints2d.to_tensor(),
            camera: out.camera.to_tensor(),
        })
    })
    .into_iter()
    .collect()
}

/// Per-frame MPJPE / PA-MPJPE / MPVPE and per-sequence acceleration error.
pub fn evaluate_predictions(preds: &[Prediction], samples: &[Sample], fps: f64, exec: Execution) -> Result<MetricReport> {
    if preds.len() != samples.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} sequences",
            preds.len(),
            samples.len()
        )));
    }
    let per: Vec<_> = map_slice(exec, samples, |i, s| {
        let p = &preds[i];
        sequence_metrics(i, &p.joints3d, &s.body.joints3d, &p.vertices3d, &s.body.vertices3d, fps)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(MetricReport::from_sequences(per))
}

pub fn evaluate(model: &Model, params: &ParamStore, samples: &[Sample], fps: f64, exec: Execution) -> Result<MetricReport> {
    let preds = predict(model, params, samples, exec)?;
    evaluate_predictions(&preds, samples, fps, exec)
}
