//! Evaluation metrics in millimetres: MPJPE, PA-MPJPE, MPVPE and acceleration error.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn point_cloud(op: &'static str, t: &Tensor) -> Result<Vec<Vector3<f64>>> {
    let s = t.shape();
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::shape(op, format!("expected [N, 3] points, got {s:?}")));
    }
    Ok(t.data().chunks_exact(3).map(Vector3::from_column_slice).collect())
}

fn paired(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    let p = point_cloud(op, pred)?;
    let g = point_cloud(op, gt)?;
    if p.is_empty() {
        return Err(Error::invalid(format!("{op}: empty point set")));
    }
    Ok((p, g))
}

fn mean_distance(p: &[Vector3<f64>], g: &[Vector3<f64>]) -> f64 {
    p.iter().zip(g).map(|(a, b)| (a - b).norm()).sum::<f64>() / p.len() as f64
}

/// Mean per-joint Euclidean distance of `[K, 3]` clouds.
pub fn mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (p, g) = paired("mpjpe", pred, gt)?;
    Ok(mean_distance(&p, &g))
}

/// Mean per-vertex Euclidean distance of `[V, 3]` clouds.
pub fn mpvpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (p, g) = paired("mpvpe", pred, gt)?;
    Ok(mean_distance(&p, &g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcrustesTransform {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
    /// Set when the source cloud has zero spread; the transform is then a pure translation.
    pub degenerate: bool,
}

impl ProcrustesTransform {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

fn centroid(pts: &[Vector3<f64>]) -> Vector3<f64> {
    pts.iter().fold(Vector3::zeros(), |acc, p| acc + p) / pts.len() as f64
}

/// Similarity transform minimising `sum |s R p_i + t - g_i|^2`, with the
/// rotation constrained to det = +1.
pub fn procrustes_align(pred: &Tensor, gt: &Tensor) -> Result<(ProcrustesTransform, Tensor)> {
    let (p, g) = paired("procrustes_align", pred, gt)?;
    let mp = centroid(&p);
    let mg = centroid(&g);
    let var_p: f64 = p.iter().map(|x| (x - mp).norm_squared()).sum();

    let transform = if var_p <= f64::MIN_POSITIVE {
        ProcrustesTransform {
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: mg - mp,
            degenerate: true,
        }
    } else {
        let mut cov = Matrix3::zeros();
        for (x, y) in p.iter().zip(&g) {
            cov += (y - mg) * (x - mp).transpose();
        }
        let svd = cov.svd(true, true);
        let u = svd.u.expect("svd computed with u");
        let v_t = svd.v_t.expect("svd computed with v_t");
        let mut sigma = svd.singular_values;
        // nalgebra does not sort singular values; flip the smallest one.
        let mut d = Vector3::new(1.0, 1.0, 1.0);
        if (u * v_t).determinant() < 0.0 {
            let (imin, _) = sigma.argmin();
            d[imin] = -1.0;
        }
        let rotation = u * Matrix3::from_diagonal(&d) * v_t;
        sigma.component_mul_assign(&d);
        let scale = sigma.sum() / var_p;
        ProcrustesTransform {
            rotation,
            scale,
            translation: mg - scale * (rotation * mp),
            degenerate: false,
        }
    };

    let mut aligned = Vec::with_capacity(p.len() * 3);
    for x in &p {
        aligned.extend_from_slice(transform.apply(x).as_slice());
    }
    Ok((transform, Tensor::from_parts(pred.shape().to_vec(), aligned)))
}

/// MPJPE after similarity alignment of the prediction onto the ground truth.
pub fn pa_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (_, aligned) = procrustes_align(pred, gt)?;
    mpjpe(&aligned, gt)
}

/// Mean norm of the second-difference acceleration error over `[T, K, 3]`
/// trajectories, in units per second squared.
pub fn accel_error(pred: &Tensor, gt: &Tensor, fps: f64) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "accel_error",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    let s = pred.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("accel_error", format!("expected [T, K, 3], got {s:?}")));
    }
    let (t, k) = (s[0], s[1]);
    if t < 3 {
        return Err(Error::invalid(format!("accel_error needs T >= 3 frames, got {t}")));
    }
    if !(fps > 0.0) {
        return Err(Error::invalid(format!("fps must be positive, got {fps}")));
    }
    let at = |d: &[f64], f: usize, j: usize| Vector3::from_column_slice(&d[(f * k + j) * 3..(f * k + j) * 3 + 3]);
    let fps2 = fps * fps;
    let mut total = 0.0;
    for f in 1..t - 1 {
        for j in 0..k {
            let acc = |d: &[f64]| (at(d, f + 1, j) - 2.0 * at(d, f, j) + at(d, f - 1, j)) * fps2;
            total += (acc(pred.data()) - acc(gt.data())).norm();
        }
    }
    Ok(total / ((t - 2) * k) as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub index: usize,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpvpe: f64,
    pub accel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpvpe: f64,
    pub accel_error: f64,
    pub sequences: Vec<SequenceMetrics>,
}

impl MetricReport {
    /// Frame-weighted means across sequences of equal length.
    pub fn from_sequences(sequences: Vec<SequenceMetrics>) -> Self {
        let n = sequences.len().max(1) as f64;
        let mean = |f: fn(&SequenceMetrics) -> f64| sequences.iter().map(f).sum::<f64>() / n;
        MetricReport {
            mpjpe: mean(|s| s.mpjpe),
            pa_mpjpe: mean(|s| s.pa_mpjpe),
            mpvpe: mean(|s| s.mpvpe),
            accel_error: mean(|s| s.accel_error),
            sequences,
        }
    }
}

/// Metrics for one sequence given `[T, K, 3]` joints and `[T, V, 3]` vertices.
pub fn sequence_metrics(
    index: usize,
    pred_joints: &Tensor,
    gt_joints: &Tensor,
    pred_vertices: &Tensor,
    gt_vertices: &Tensor,
    fps: f64,
) -> Result<SequenceMetrics> {
    let frames = |t: &Tensor| -> Result<Vec<Tensor>> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::shape("sequence_metrics", format!("expected [T, N, 3], got {s:?}")));
        }
        let per = s[1] * s[2];
        Ok(t.data()
            .chunks_exact(per)
            .map(|c| Tensor::from_parts(vec![s[1], s[2]], c.to_vec()))
            .collect())
    };
    let (pj, gj) = (frames(pred_joints)?, frames(gt_joints)?);
    let (pv, gv) = (frames(pred_vertices)?, frames(gt_vertices)?);
    if pj.len() != gj.len() || pv.len() != gv.len() || pj.len() != pv.len() {
        return Err(Error::shape("sequence_metrics", "frame counts differ".to_string()));
    }
    let t = pj.len() as f64;
    let mut m = SequenceMetrics {
        index,
        ..Default::default()
    };
    for i in 0..pj.len() {
        m.mpjpe += mpjpe(&pj[i], &gj[i])? / t;
        m.pa_mpjpe += pa_mpjpe(&pj[i], &gj[i])? / t;
        m.mpvpe += mpvpe(&pv[i], &gv[i])? / t;
    }
    m.accel_error = accel_error(pred_joints, gt_joints, fps)?;
    Ok(m)
}
