//! Channel-mean feature maps at the backbone, post-SD and post-MD taps, as CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::eval::check_sample;
use crate::error::{Error, Result};
use crate::md::ShufflePlan;
use crate::model::Model;
use crate::params::ParamStore;
use crate::synth::Sample;
use crate::tensor::{Tape, Tensor};

pub const TAPS: [&str; 3] = ["backbone", "post_sd", "post_md"];

/// Channel mean of frame `frame` of a `[S, C, h, w]` map, as `[h, w]`.
pub fn channel_mean(features: &Tensor, frame: usize) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 4 || frame >= s[0] {
        return Err(Error::shape("channel_mean", format!("frame {frame} of {s:?}")));
    }
    let (c, hw) = (s[1], s[2] * s[3]);
    let base = frame * c * hw;
    let mut out = vec![0.0; hw];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&features.data()[base + ch * hw..base + (ch + 1) * hw]) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= c as f64;
    }
    Tensor::new([s[2], s[3]], out)
}

/// CSV text: one header line, then `h` rows of `w` comma-separated values.
pub fn heatmap_csv(tap: &str, map: &Tensor) -> String {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("# tap={tap} shape={h}x{w}\n");
    for row in map.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

/// Maps at all three taps for one frame, in [`TAPS`] order.
pub fn heatmaps(model: &Model, params: &ParamStore, sample: &Sample, frame: usize) -> Result<[Tensor; 3]> {
    check_sample(&model.config, sample)?;
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let images = tape.constant(sample.images.clone());
    let plan = ShufflePlan::identity(1, model.config.channels(), model.config.frames());
    let (_, taps) = model.forward_with_taps(images, &bound, 1, &plan)?;
    let maps = [
        channel_mean(&taps.backbone.to_tensor(), frame)?,
        channel_mean(&taps.post_sd.to_tensor(), frame)?,
        channel_mean(&taps.post_md.to_tensor(), frame)?,
    ];
    Ok(maps)
}

/// Writes `seq{i}_frame{f}_{tap}.csv` for each `(sequence, frame)` request.
pub fn export_heatmaps(
    model: &Model,
    params: &ParamStore,
    samples: &[Sample],
    requests: &[(usize, usize)],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|source| Error::File {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    for &(seq, frame) in requests {
        let sample = samples
            .get(seq)
            .ok_or_else(|| Error::invalid(format!("sequence {seq} out of range ({} available)", samples.len())))?;
        let maps = heatmaps(model, params, sample, frame)?;
        for (tap, map) in TAPS.iter().zip(&maps) {
            let path = out_dir.join(format!("seq{seq}_frame{frame}_{tap}.csv"));
            std::fs::write(&path, heatmap_csv(tap, map)).map_err(|source| Error::File {
                path: path.clone(),
                source,
            })?;
            written.push(path);
        }
    }
    Ok(written)
}
