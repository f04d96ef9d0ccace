//! Part-wise probability losses over a labelled body mesh.

use crate::autodiff::{Tape, Var};
use crate::graph::MeshLevel;
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

/// Lower bound applied to predicted probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid part ranges: {0}")]
    Map(String),
    #[error("support mismatch: expected {expected}, got {got}")]
    Support { expected: usize, got: usize },
    #[error("features have {got} vertices, label map covers {expected}")]
    Resolution { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, LossError>;

/// Ordered, contiguous part ranges `(s_l, e_l)` (inclusive) with weights `λ_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartLabelMap {
    ranges: Vec<(usize, usize)>,
    n: usize,
    lambda: Vec<f64>,
}

impl PartLabelMap {
    /// Ranges must be sorted, disjoint and cover `0..n` exactly.
    pub fn new(ranges: Vec<(usize, usize)>, n: usize) -> Result<Self> {
        let mut next = 0;
        for &(s, e) in &ranges {
            if s != next || e < s {
                return Err(LossError::Map(format!("range ({s}, {e}) does not continue at {next}")));
            }
            next = e + 1;
        }
        if next != n || ranges.is_empty() {
            return Err(LossError::Map(format!("ranges cover 0..{next}, expected 0..{n}")));
        }
        let lambda = vec![1.0; ranges.len()];
        Ok(Self { ranges, n, lambda })
    }

    pub fn from_level(level: &MeshLevel) -> Result<Self> {
        let ranges = level
            .part_ranges()
            .ok_or_else(|| LossError::Map("part labels are not contiguous".into()))?;
        Self::new(ranges, level.n_vertices)
    }

    pub fn m(&self) -> usize {
        self.ranges.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.n
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn with_lambda(mut self, lambda: Vec<f64>) -> Result<Self> {
        if lambda.len() != self.m() {
            return Err(LossError::Support {
                expected: self.m(),
                got: lambda.len(),
            });
        }
        if lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(LossError::Map("weights must be finite and nonnegative".into()));
        }
        self.lambda = lambda;
        Ok(self)
    }

    /// Number of ranges `l` with `s_l ≤ s_p ≤ e_l`, where `s_p` is the first
    /// vertex of part `p`. A part contributes to the loss when this is nonzero.
    pub fn gate_count(&self, p: usize) -> usize {
        let Some(&(sp, _)) = self.ranges.get(p) else {
            return 0;
        };
        self.ranges.iter().filter(|&&(s, e)| sp >= s && sp <= e).count()
    }

    pub fn gate(&self, p: usize) -> bool {
        self.gate_count(p) > 0
    }

    /// Label of vertex `v`.
    pub fn part_of(&self, v: usize) -> Option<usize> {
        self.ranges.iter().position(|&(s, e)| v >= s && v <= e)
    }
}

/// Per-part probability vectors over each part's vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct PartDistribution {
    pub parts: Vec<Vec<f64>>,
}

/// `(x − c) − log Σ exp(x − c)` along `axis`, with `c` the axis maximum.
pub fn log_softmax_stable(x: &Tensor, axis: usize) -> Result<Tensor> {
    Ok(crate::autodiff::ops::softmax_tensor(x, axis, true)?)
}

/// `Σ y_true · (log y_true − log y_pred)` with `0·log 0 = 0` and `y_pred`
/// floored at [`PROB_FLOOR`].
pub fn part_kl(y_pred: &[f64], y_true: &[f64]) -> Result<f64> {
    if y_pred.len() != y_true.len() {
        return Err(LossError::Support {
            expected: y_true.len(),
            got: y_pred.len(),
        });
    }
    Ok(y_true
        .iter()
        .zip(y_pred)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &p)| t * (t.ln() - p.max(PROB_FLOOR).ln()))
        .sum())
}

fn vertex_scores(features: &Tensor) -> Vec<f64> {
    let c = *features.shape().last().unwrap();
    features.data().chunks(c).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

fn check_rows(features_rows: usize, map: &PartLabelMap) -> Result<()> {
    if features_rows != map.n_vertices() {
        return Err(LossError::Resolution {
            expected: map.n_vertices(),
            got: features_rows,
        });
    }
    Ok(())
}

/// Softmax of per-vertex L2 norms within each part. `features: [n, c]`.
pub fn softmax_pool(features: &Tensor, map: &PartLabelMap) -> Result<PartDistribution> {
    if features.rank() != 2 {
        return Err(LossError::Map(format!("expected [n, c] features, got {:?}", features.shape())));
    }
    check_rows(features.shape()[0], map)?;
    let scores = vertex_scores(features);
    let parts = map
        .ranges()
        .iter()
        .map(|&(s, e)| {
            let seg = &scores[s..=e];
            let mx = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = seg.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            ex.into_iter().map(|v| v / z).collect()
        })
        .collect();
    Ok(PartDistribution { parts })
}

/// `λ_p ∝ Var(features of part p)`, scaled so `Σ λ_p = m`; uniform when
/// every part has zero variance. `features: [n, c]` or `[F, n, c]`.
pub fn part_weights_from_variance(features: &Tensor, map: &PartLabelMap) -> Result<Vec<f64>> {
    let shape = features.shape();
    let (f, n, c) = match shape.len() {
        2 => (1, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        _ => return Err(LossError::Map(format!("expected rank 2 or 3 features, got {shape:?}"))),
    };
    check_rows(n, map)?;
    let d = features.data();
    let vars: Vec<f64> = map
        .ranges()
        .iter()
        .map(|&(s, e)| {
            let vals: Vec<f64> = (0..f)
                .flat_map(|fi| d[(fi * n + s) * c..(fi * n + e + 1) * c].iter().copied())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64
        })
        .collect();
    let total: f64 = vars.iter().sum();
    let m = map.m() as f64;
    if !(total > 0.0 && total.is_finite()) {
        return Ok(vec![1.0; map.m()]);
    }
    Ok(vars.iter().map(|v| m * v / total).collect())
}

/// Differentiable per-part log-probabilities. `features: [n, c]` or
/// `[F, n, c]`; each returned var is `[.., k_p]` along the vertex axis.
pub fn softmax_pool_log(tape: &mut Tape, features: Var, map: &PartLabelMap) -> Result<Vec<Var>> {
    let shape = tape.shape(features).to_vec();
    let vaxis = shape.len() - 2;
    check_rows(shape[vaxis], map)?;
    let sq = tape.square(features)?;
    let ss = tape.sum_axis(sq, shape.len() - 1)?;
    // keeps the norm differentiable at the origin
    let ss = tape.add_scalar(ss, 1e-12)?;
    let scores = tape.sqrt(ss)?;
    let mut out = Vec::with_capacity(map.m());
    for &(s, e) in map.ranges() {
        let seg = tape.slice(scores, vaxis, s, e + 1)?;
        let lp = tape.log_softmax(seg, vaxis)?;
        out.push(tape.clamp_min(lp, PROB_FLOOR.ln())?);
    }
    Ok(out)
}

/// `Σ_p gate(p) · λ_p · KL_p(y_true ‖ y_pred)` at one resolution, averaged
/// over frames. `y_true` is pooled from constant `true_features`.
pub fn hh_loss(tape: &mut Tape, pred_features: Var, true_features: &Tensor, map: &PartLabelMap) -> Result<Var> {
    if tape.shape(pred_features) != true_features.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "hh_loss",
            left: tape.shape(pred_features).to_vec(),
            right: true_features.shape().to_vec(),
        }
        .into());
    }
    let frames = if true_features.rank() == 3 { true_features.shape()[0] } else { 1 };
    let t = tape.constant(true_features.clone());
    let log_true = softmax_pool_log(tape, t, map)?;
    let log_pred = softmax_pool_log(tape, pred_features, map)?;
    let mut total: Option<Var> = None;
    for p in 0..map.m() {
        if !map.gate(p) {
            continue;
        }
        let lt = tape.value(log_true[p]).clone();
        // where y_true underflows to 0 the product vanishes, giving 0·log 0 = 0
        let yt_v = tape.constant(lt.map(f64::exp));
        let lt_v = tape.constant(lt);
        let d = tape.sub(lt_v, log_pred[p])?;
        let prod = tape.mul(yt_v, d)?;
        let kl = tape.sum(prod)?;
        let term = tape.scale(kl, map.lambda()[p] / frames as f64)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}
