//! Noise schedules, single forward/reverse diffusion steps, latent video
//! layouts and the temporally aligned diffusion block.

mod block;
mod layout;

pub use block::{
    sinusoidal_embedding, temporal_self_attention, tpdist_block, AttentionLayer, SemanticContext, TemporalDependencies, TemporalStack, TpDist, TpDistConfig,
    TpDistOutput,
};
pub use layout::{Dims, LatentVar, LatentVideo, Layout};

use crate::autodiff::{Tape, Var};
use crate::graph::GraphError;
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("schedule needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("alpha[{index}] = {value} outside (0, 1]")]
    InvalidAlpha { index: usize, value: f64 },
    #[error("step {t} outside 1..={n_steps}")]
    StepOutOfRange { t: usize, n_steps: usize },
    #[error("expected layout {expected:?}, got {got:?}")]
    Layout { expected: Layout, got: Layout },
    #[error("shape {shape:?} does not match layout {layout:?} with {dims:?}")]
    Shape { shape: Vec<usize>, layout: Layout, dims: Dims },
    #[error("invalid diffusion config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

type Result<T> = std::result::Result<T, DiffusionError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

/// Standard deviation used for the stochastic term of a reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReverseNoise {
    /// `√(1−α_t) · √(1−ᾱ_{t−1}) / √(1−ᾱ_t)`
    #[default]
    Posterior,
    /// `√(1−α_t)`
    Beta,
}

/// Per-step `α_t` and cumulative `ᾱ_t`, indexed from `t = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

const BETA_MAX: f64 = 0.999;

impl DiffusionSchedule {
    pub fn new(n_steps: usize, kind: ScheduleKind) -> Result<Self> {
        if n_steps < 2 {
            return Err(DiffusionError::TooFewSteps(n_steps));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                // the usual 1e-4..0.02 range is tuned for 1000 steps
                let scale = 1000.0 / n_steps as f64;
                (0..n_steps)
                    .map(|i| {
                        let b = 1e-4 + (0.02 - 1e-4) * i as f64 / (n_steps - 1) as f64;
                        (b * scale).min(BETA_MAX)
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| ((t / n_steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (1..=n_steps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, BETA_MAX))
                    .collect()
            }
        };
        Self::from_alphas(betas.iter().map(|b| 1.0 - b).collect())
    }

    /// Schedule from explicit `α_1..α_T`, each in `(0, 1]`.
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(DiffusionError::TooFewSteps(0));
        }
        if let Some((index, &value)) = alpha.iter().enumerate().find(|(_, &a)| !(a > 0.0 && a <= 1.0)) {
            return Err(DiffusionError::InvalidAlpha { index, value });
        }
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { alpha, alpha_bar })
    }

    pub fn n_steps(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.n_steps() {
            return Err(DiffusionError::StepOutOfRange { t, n_steps: self.n_steps() });
        }
        Ok(())
    }

    /// `α_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Coefficients `(1/√α_t, (1−α_t)/√(1−ᾱ_t), σ_t)` of the reverse update.
    /// Both correction terms are zero when `1−ᾱ_t = 0`, and `σ_1 = 0`.
    pub fn reverse_coefficients(&self, t: usize, noise: ReverseNoise) -> Result<(f64, f64, f64)> {
        self.check(t)?;
        let a = self.alpha(t);
        let one_minus_bar = 1.0 - self.alpha_bar(t);
        let inv_sqrt_a = 1.0 / a.sqrt();
        if one_minus_bar <= 0.0 {
            return Ok((inv_sqrt_a, 0.0, 0.0));
        }
        let eps_coef = (1.0 - a) / one_minus_bar.sqrt();
        let sigma = if t == 1 {
            0.0
        } else {
            match noise {
                ReverseNoise::Posterior => (1.0 - a).sqrt() * (1.0 - self.alpha_bar(t - 1)).sqrt() / one_minus_bar.sqrt(),
                ReverseNoise::Beta => (1.0 - a).sqrt(),
            }
        };
        Ok((inv_sqrt_a, eps_coef, sigma))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// `√(1−α)·ε + √α·x` for an explicit `α ∈ [0, 1]`.
pub fn noise_with_alpha(x_prev: &Tensor, alpha: f64, eps: &Tensor) -> Result<Tensor> {
    same_shape("forward_noise_step", x_prev, eps)?;
    let (ce, cx) = ((1.0 - alpha).sqrt(), alpha.sqrt());
    Ok(x_prev.zip_map(eps, |x, e| ce * e + cx * x)?)
}

/// One forward noising step `x_t = √(1−α_t)·ε + √α_t·x_{t−1}`.
pub fn forward_noise_step(x_prev: &Tensor, t: usize, schedule: &DiffusionSchedule, eps: &Tensor) -> Result<Tensor> {
    schedule.check(t)?;
    noise_with_alpha(x_prev, schedule.alpha(t), eps)
}

/// One reverse step
/// `z_{t−1} = (z_t − c_ε·ε̂)/√α_t + σ_t·I`.
pub fn reverse_step(
    z_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    schedule: &DiffusionSchedule,
    noise: &Tensor,
    kind: ReverseNoise,
) -> Result<Tensor> {
    same_shape("reverse_step", z_t, eps_pred)?;
    same_shape("reverse_step", z_t, noise)?;
    let (inv, ce, sigma) = schedule.reverse_coefficients(t, kind)?;
    let data = z_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .zip(noise.data())
        .map(|((z, e), i)| inv * (z - ce * e) + sigma * i)
        .collect();
    Ok(Tensor::new(z_t.shape(), data)?)
}

/// Differentiable forward step; `eps` is usually a constant.
pub fn forward_noise_var(tape: &mut Tape, x_prev: Var, t: usize, schedule: &DiffusionSchedule, eps: Var) -> Result<Var> {
    schedule.check(t)?;
    let a = schedule.alpha(t);
    let e = tape.scale(eps, (1.0 - a).sqrt())?;
    let x = tape.scale(x_prev, a.sqrt())?;
    Ok(tape.add(e, x)?)
}

/// Differentiable reverse step.
pub fn reverse_step_var(
    tape: &mut Tape,
    z_t: Var,
    t: usize,
    eps_pred: Var,
    schedule: &DiffusionSchedule,
    noise: Option<&Tensor>,
    kind: ReverseNoise,
) -> Result<Var> {
    let (inv, ce, sigma) = schedule.reverse_coefficients(t, kind)?;
    let corr = tape.scale(eps_pred, ce)?;
    let z = tape.sub(z_t, corr)?;
    let mut z = tape.scale(z, inv)?;
    if let (Some(n), true) = (noise, sigma != 0.0) {
        let n = tape.constant(n.map(|v| v * sigma));
        z = tape.add(z, n)?;
    }
    Ok(z)
}
