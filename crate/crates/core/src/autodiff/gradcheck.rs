//! Finite-difference verification of tape gradients.

use super::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Denominator floor for relative errors near zero gradients.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradLocation {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst: Option<GradLocation>,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error("step {0} outside [1e-6, 1e-3]")]
    BadStep(f64),
    #[error("non-finite {kind} gradient at input {input}, element {index}")]
    NonFinite {
        kind: &'static str,
        input: usize,
        index: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Compares tape gradients of `f` at `inputs` against central differences
/// `(f(x+h) - f(x-h)) / 2h`, element by element.
///
/// Non-scalar outputs are contracted with fixed pseudo-random weights so a
/// single backward pass covers every output element.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradcheckReport, GradcheckError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    gradcheck_with(
        f,
        inputs,
        GradcheckOptions {
            step: h,
            ..Default::default()
        },
    )
}

/// Central difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    ThreePoint,
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, for deep graphs
    /// where truncation and rounding error compete.
    FivePoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub stencil: Stencil,
    /// Smallest denominator in the relative error.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            stencil: Stencil::ThreePoint,
            floor: REL_ERROR_FLOOR,
        }
    }
}

pub fn gradcheck_with<F>(f: F, inputs: &[Tensor], opts: GradcheckOptions) -> Result<GradcheckReport, GradcheckError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let (h, stencil) = (opts.step, opts.stencil);
    if !(1e-6..=1e-3).contains(&h) {
        return Err(GradcheckError::BadStep(h));
    }
    let eval = |tape: &mut Tape, vals: &[Tensor]| -> Result<(Var, Vec<Var>), TensorError> {
        let vars: Vec<Var> = vals.iter().map(|t| tape.var(t.clone())).collect();
        let out = f(tape, &vars)?;
        Ok((contract(tape, out)?, vars))
    };

    let mut tape = Tape::new();
    let (loss, vars) = eval(&mut tape, inputs)?;
    let grads = tape.backward(loss)?;

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *var);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            let mut at = |x: f64| -> Result<f64, TensorError> {
                probe[i].data_mut()[j] = x;
                let mut tp = Tape::new();
                let (l, _) = eval(&mut tp, &probe)?;
                Ok(tp.value(l).item())
            };
            let numeric = match stencil {
                Stencil::ThreePoint => (at(orig + h)? - at(orig - h)?) / (2.0 * h),
                Stencil::FivePoint => {
                    let d1 = at(orig + h)? - at(orig - h)?;
                    let d2 = at(orig + 2.0 * h)? - at(orig - 2.0 * h)?;
                    (8.0 * d1 - d2) / (12.0 * h)
                }
            };
            probe[i].data_mut()[j] = orig;

            let a = analytic.data()[j];
            if !a.is_finite() {
                return Err(GradcheckError::NonFinite {
                    kind: "analytic",
                    input: i,
                    index: j,
                });
            }
            if !numeric.is_finite() {
                return Err(GradcheckError::NonFinite {
                    kind: "numeric",
                    input: i,
                    index: j,
                });
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(GradLocation {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}


fn contract(tape: &mut Tape, out: Var) -> Result<Var, TensorError> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let w = Tensor::uniform(tape.shape(out), 0.5, 1.5, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_sign_flipped_backward() {
        let x = Tensor::new(&[3], vec![0.5, -1.2, 2.0]).unwrap();
        let rep = gradcheck(
            |t, v| {
                let val = t.value(v[0]).map(|a| a * a);
                // correct vjp would be 2x·g; sign flipped on purpose
                t.custom(
                    &[v[0]],
                    val,
                    Box::new(|ins, _, g| vec![ins[0].data().iter().zip(g).map(|(x, g)| -2.0 * x * g).collect()]),
                )
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!((rep.max_rel_error - 2.0).abs() < 1e-6, "{rep:?}");
        assert!(!rep.passes(1e-4));
    }

    #[test]
    fn rejects_steps_outside_range() {
        let x = Tensor::scalar(1.0);
        assert!(matches!(
            gradcheck(|t, v| t.exp(v[0]), &[x], 1e-2),
            Err(GradcheckError::BadStep(_))
        ));
    }

    #[test]
    fn reports_non_finite_gradient_location() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = gradcheck(
            |t, v| {
                let val = t.value(v[0]).clone();
                t.custom(&[v[0]], val, Box::new(|_, _, _| vec![vec![1.0, f64::NAN]]))
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        // the tape refuses to carry a NaN gradient at all
        assert!(matches!(err, GradcheckError::Tensor(TensorError::NonFinite { .. }) | GradcheckError::NonFinite { .. }));
    }
}
