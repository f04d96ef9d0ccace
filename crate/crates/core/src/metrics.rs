//! Pose and mesh error metrics in millimetres.

use crate::graph::JointRegressor;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("alignment needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate point set: {0}")]
    Degenerate(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
}

type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// Scale, proper rotation and translation.
    #[default]
    Similarity,
    /// Proper rotation and translation only.
    Rigid,
}

/// `x ↦ s·R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::from(*p) * self.scale + self.translation;
        [v.x, v.y, v.z]
    }

    pub fn apply_all(&self, ps: &[[f64; 3]]) -> Vec<[f64; 3]> {
        ps.iter().map(|p| self.apply(p)).collect()
    }
}

fn check_finite(ps: &[[f64; 3]]) -> Result<()> {
    match ps.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        Some(i) => Err(MetricsError::NonFinite(i)),
        None => Ok(()),
    }
}

fn centroid(ps: &[[f64; 3]]) -> Vector3<f64> {
    ps.iter().map(|p| Vector3::from(*p)).sum::<Vector3<f64>>() / ps.len() as f64
}

/// Least-squares `(s, R, t)` minimising `Σ ‖s·R·p_i + t − q_i‖²` with
/// `det R = +1`.
pub fn procrustes_align(p: &[[f64; 3]], q: &[[f64; 3]], mode: AlignMode) -> Result<Similarity> {
    if p.len() != q.len() {
        return Err(MetricsError::Shape(format!("{} vs {} points", p.len(), q.len())));
    }
    if p.len() < 3 {
        return Err(MetricsError::TooFewPoints(p.len()));
    }
    check_finite(p)?;
    check_finite(q)?;
    let (mp, mq) = (centroid(p), centroid(q));
    let k = p.len() as f64;
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (a, b) in p.iter().zip(q) {
        let pa = Vector3::from(*a) - mp;
        let qb = Vector3::from(*b) - mq;
        cov += qb * pa.transpose();
        spread += pa * pa.transpose();
    }
    cov /= k;
    spread /= k;
    let var_p = spread.trace();
    let sv = spread.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if var_p <= 1e-300 || ev[1] <= 1e-12 * ev[0] {
        return Err(MetricsError::Degenerate(format!(
            "centered source has principal variances {ev:?}; need rank >= 2"
        )));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * vt).determinant().signum();
    let s_fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * s_fix * vt;
    let scale = match mode {
        AlignMode::Similarity => {
            let sig = svd.singular_values;
            (sig[0] + sig[1] + d * sig[2]) / var_p
        }
        AlignMode::Rigid => 1.0,
    };
    let translation = mq - rotation * mp * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Sum of squared distances `Σ ‖T(p_i) − q_i‖²`.
pub fn residual(p: &[[f64; 3]], q: &[[f64; 3]], t: &Similarity) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| {
            let x = t.apply(a);
            (0..3).map(|i| (x[i] - b[i]).powi(2)).sum::<f64>()
        })
        .sum()
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn mean_dist(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter().zip(b).map(|(x, y)| dist(x, y)).sum::<f64>() / a.len() as f64
}

/// Per-frame or averaged errors, millimetres.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub mpvpe: f64,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
}

impl PoseError {
    pub fn mean(errors: &[PoseError]) -> PoseError {
        let n = errors.len().max(1) as f64;
        PoseError {
            mpvpe: errors.iter().map(|e| e.mpvpe).sum::<f64>() / n,
            mpjpe: errors.iter().map(|e| e.mpjpe).sum::<f64>() / n,
            pa_mpjpe: errors.iter().map(|e| e.pa_mpjpe).sum::<f64>() / n,
        }
    }
}

/// Joint errors for one frame: root-translation aligned and Procrustes
/// aligned. Joint 0 is the root.
pub fn joint_errors(pred: &[[f64; 3]], gt: &[[f64; 3]], mode: AlignMode) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(MetricsError::Shape(format!("{} vs {} joints", pred.len(), gt.len())));
    }
    let off: Vec<f64> = (0..3).map(|i| gt[0][i] - pred[0][i]).collect();
    let rooted: Vec<[f64; 3]> = pred.iter().map(|p| [p[0] + off[0], p[1] + off[1], p[2] + off[2]]).collect();
    let mpjpe = mean_dist(&rooted, gt);
    let t = procrustes_align(pred, gt, mode)?;
    let pa = mean_dist(&t.apply_all(pred), gt);
    Ok((mpjpe, pa))
}

/// Averages over frames of flattened `T·n` vertex arrays.
pub fn compute_metrics(pred: &[[f64; 3]], gt: &[[f64; 3]], regressor: &JointRegressor) -> Result<PoseError> {
    compute_metrics_with(pred, gt, regressor, AlignMode::Similarity)
}

pub fn compute_metrics_with(pred: &[[f64; 3]], gt: &[[f64; 3]], regressor: &JointRegressor, mode: AlignMode) -> Result<PoseError> {
    let n = regressor.n_vertices();
    if pred.len() != gt.len() || pred.is_empty() || !pred.len().is_multiple_of(n) {
        return Err(MetricsError::Shape(format!(
            "pred has {} points, gt {}, frames of {n} vertices",
            pred.len(),
            gt.len()
        )));
    }
    check_finite(pred)?;
    check_finite(gt)?;
    let frames: Vec<PoseError> = pred
        .chunks(n)
        .zip(gt.chunks(n))
        .map(|(p, g)| {
            let (mpjpe, pa_mpjpe) = joint_errors(&regressor.regress(p), &regressor.regress(g), mode)?;
            Ok(PoseError {
                mpvpe: mean_dist(p, g),
                mpjpe,
                pa_mpjpe,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PoseError::mean(&frames))
}
