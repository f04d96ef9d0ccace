//! Gradient verification of every tape primitive and of the full model.

use super::{build_model, HarnessError, LossWeights, ModelConfig, Result, Sample};
use crate::autodiff::{attention, gradcheck, gradcheck_with, multi_head_attention, GradcheckOptions, Stencil, Tape, Var};
use crate::diffusion::{forward_noise_var, reverse_step_var, DiffusionSchedule, ReverseNoise, ScheduleKind};
use crate::graph::{build_adjacency, graph_conv, Normalization};
use crate::loss::{hh_loss, PartLabelMap};
use crate::nn::Activation;
use crate::synth::{generate_sequence, MotionConfig};
use crate::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Relative-error bound every entry must stay under.
pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Random shapes drawn per primitive.
pub const SHAPES_PER_OP: usize = 10;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub cases: usize,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl GradcheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < SUITE_TOLERANCE
    }
}

type Case = (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> std::result::Result<Var, TensorError>>);

fn lift(e: impl std::fmt::Display) -> TensorError {
    TensorError::InvalidArgument {
        op: "gradcheck",
        msg: e.to_string(),
    }
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero, for kinked or singular primitives.
fn away(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(lo..lo + 1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 0.3, 2.0, rng)
}

fn shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.random_range(1..=3);
    (0..rank).map(|_| dim(rng)).collect()
}

type Builder = fn(&mut ChaCha8Rng) -> Case;

fn unary(f: fn(&mut Tape, Var) -> std::result::Result<Var, TensorError>, x: Tensor) -> Case {
    (vec![x], Box::new(move |t, v| f(t, v[0])))
}

fn binary(f: fn(&mut Tape, Var, Var) -> std::result::Result<Var, TensorError>, a: Tensor, b: Tensor) -> Case {
    (vec![a, b], Box::new(move |t, v| f(t, v[0], v[1])))
}

fn primitives() -> Vec<(&'static str, Builder)> {
    vec![
        ("add", |r| {
            let s = shape(r);
            binary(Tape::add, randn(&s, r), randn(&s, r))
        }),
        ("sub", |r| {
            let s = shape(r);
            binary(Tape::sub, randn(&s, r), randn(&s, r))
        }),
        ("mul", |r| {
            let s = shape(r);
            binary(Tape::mul, randn(&s, r), randn(&s, r))
        }),
        ("add_bcast", |r| {
            let (a, b) = (dim(r), dim(r));
            binary(Tape::add_bcast, randn(&[a, b], r), randn(&[b], r))
        }),
        ("mul_bcast", |r| {
            let (a, b) = (dim(r), dim(r));
            binary(Tape::mul_bcast, randn(&[a, b], r), randn(&[a, 1], r))
        }),
        ("scale", |r| {
            let c = r.random_range(-2.0..2.0);
            (vec![randn(&shape(r), r)], Box::new(move |t, v| t.scale(v[0], c)))
        }),
        ("neg", |r| unary(Tape::neg, randn(&shape(r), r))),
        ("add_scalar", |r| {
            let c = r.random_range(-2.0..2.0);
            (vec![randn(&shape(r), r)], Box::new(move |t, v| t.add_scalar(v[0], c)))
        }),
        ("square", |r| unary(Tape::square, randn(&shape(r), r))),
        ("matmul", |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            binary(Tape::matmul, randn(&[m, k], r), randn(&[k, n], r))
        }),
        ("bmm", |r| {
            let (g, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
            binary(Tape::bmm, randn(&[g, m, k], r), randn(&[g, k, n], r))
        }),
        ("relu", |r| unary(Tape::relu, away(&shape(r), r, 0.1))),
        ("gelu", |r| unary(Tape::gelu, randn(&shape(r), r))),
        ("exp", |r| unary(Tape::exp, randn(&shape(r), r))),
        ("log", |r| unary(Tape::log, positive(&shape(r), r))),
        ("sqrt", |r| unary(Tape::sqrt, positive(&shape(r), r))),
        ("clamp_min", |r| (vec![away(&shape(r), r, 0.1)], Box::new(|t, v| t.clamp_min(v[0], 0.0)))),
        ("reshape", |r| {
            let (a, b) = (dim(r), dim(r));
            (vec![randn(&[a, b], r)], Box::new(move |t, v| t.reshape(v[0], &[b, a])))
        }),
        ("permute", |r| {
            let s = [dim(r), dim(r), dim(r)];
            (vec![randn(&s, r)], Box::new(|t, v| t.permute(v[0], &[2, 0, 1])))
        }),
        ("transpose_last", |r| unary(Tape::transpose_last, randn(&[dim(r), dim(r), dim(r)], r))),
        ("broadcast_to", |r| {
            let (a, b) = (dim(r), dim(r));
            (vec![randn(&[1, b], r)], Box::new(move |t, v| t.broadcast_to(v[0], &[a, b])))
        }),
        ("sum", |r| unary(Tape::sum, randn(&shape(r), r))),
        ("mean", |r| unary(Tape::mean, randn(&shape(r), r))),
        ("sum_axis", |r| {
            let s = shape(r);
            let ax = r.random_range(0..s.len());
            (vec![randn(&s, r)], Box::new(move |t, v| t.sum_axis(v[0], ax)))
        }),
        ("mean_axis", |r| {
            let s = shape(r);
            let ax = r.random_range(0..s.len());
            (vec![randn(&s, r)], Box::new(move |t, v| t.mean_axis(v[0], ax)))
        }),
        ("var_axis", |r| {
            let s = [dim(r), dim(r) + 1];
            let ax = r.random_range(0..2);
            let s = if ax == 0 { [s[1], s[0]] } else { s };
            (vec![randn(&s, r)], Box::new(move |t, v| t.var_axis(v[0], ax)))
        }),
        ("softmax", |r| {
            let s = shape(r);
            let ax = r.random_range(0..s.len());
            (vec![randn(&s, r)], Box::new(move |t, v| t.softmax(v[0], ax)))
        }),
        ("log_softmax", |r| {
            let s = shape(r);
            let ax = r.random_range(0..s.len());
            (vec![randn(&s, r)], Box::new(move |t, v| t.log_softmax(v[0], ax)))
        }),
        ("slice", |r| {
            let (a, b) = (dim(r) + 1, dim(r));
            let s = r.random_range(0..a - 1);
            let e = r.random_range(s + 1..=a);
            (vec![randn(&[a, b], r)], Box::new(move |t, v| t.slice(v[0], 0, s, e)))
        }),
        ("concat", |r| {
            let (a, b, c) = (dim(r), dim(r), dim(r));
            (vec![randn(&[a, c], r), randn(&[b, c], r)], Box::new(|t, v| t.concat(&[v[0], v[1]], 0)))
        }),
        ("conv3d", |r| {
            let (b, ci, co) = (r.random_range(1..=2), dim(r), dim(r));
            let (tt, h, w) = (dim(r), r.random_range(1..=3), r.random_range(1..=3));
            let k = [[1, 1, 1], [3, 1, 1], [3, 3, 1], [1, 3, 3], [3, 3, 3]][r.random_range(0..5)];
            binary(Tape::conv3d, randn(&[b, ci, tt, h, w], r), randn(&[co, ci, k[0], k[1], k[2]], r))
        }),
        ("layer_norm", |r| {
            let (a, d) = (dim(r), dim(r) + 1);
            (
                vec![randn(&[a, d], r), randn(&[d], r), randn(&[d], r)],
                Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
            )
        }),
        ("attention", |r| {
            let (g, lq, lk, d, dv) = (dim(r), dim(r), dim(r), dim(r), dim(r));
            (
                vec![randn(&[g, lq, d], r), randn(&[g, lk, d], r), randn(&[g, lk, dv], r)],
                Box::new(|t, v| attention(t, v[0], v[1], v[2])),
            )
        }),
        ("multi_head_attention", |r| {
            let (g, lq, lk, heads) = (dim(r), dim(r), dim(r), r.random_range(1..=2));
            let d = heads * dim(r);
            (
                vec![randn(&[g, lq, d], r), randn(&[g, lk, d], r), randn(&[g, lk, d], r)],
                Box::new(move |t, v| multi_head_attention(t, v[0], v[1], v[2], heads)),
            )
        }),
        ("graph_conv", |r| {
            let n = dim(r) + 1;
            let edges: Vec<(usize, usize)> = (1..n).map(|i| (r.random_range(0..i), i)).collect();
            let adj = build_adjacency(&edges, n, Normalization::Symmetric).expect("tree graph");
            let (f, ci, co) = (dim(r), dim(r), dim(r));
            (
                vec![randn(&[f, n, ci], r), randn(&[ci, co], r)],
                Box::new(move |t, v| {
                    let a = t.constant(adj.clone());
                    graph_conv(t, a, v[0], v[1], Activation::Gelu).map_err(lift)
                }),
            )
        }),
        ("hh_loss", |r| {
            let (f, c) = (dim(r), dim(r));
            let sizes: Vec<usize> = (0..dim(r)).map(|_| dim(r)).collect();
            let n: usize = sizes.iter().sum();
            let mut ranges = Vec::new();
            let mut s = 0;
            for k in sizes {
                ranges.push((s, s + k - 1));
                s += k;
            }
            let m = ranges.len();
            let lambda: Vec<f64> = (0..m).map(|_| r.random_range(0.2..2.0)).collect();
            let map = PartLabelMap::new(ranges, n).and_then(|p| p.with_lambda(lambda)).expect("valid map");
            let truth = randn(&[f, n, c], r);
            (
                vec![randn(&[f, n, c], r)],
                Box::new(move |t, v| hh_loss(t, v[0], &truth, &map).map_err(lift)),
            )
        }),
        ("forward_noise", |r| {
            let steps = r.random_range(2..=10);
            let sched = DiffusionSchedule::new(steps, ScheduleKind::Cosine).expect("schedule");
            let step = r.random_range(1..=steps);
            let s = shape(r);
            binary_with(randn(&s, r), randn(&s, r), move |t, v| {
                forward_noise_var(t, v[0], step, &sched, v[1]).map_err(lift)
            })
        }),
        ("reverse_step", |r| {
            let steps = r.random_range(2..=10);
            let sched = DiffusionSchedule::new(steps, ScheduleKind::Linear).expect("schedule");
            let step = r.random_range(1..=steps);
            let s = shape(r);
            let noise = randn(&s, r);
            binary_with(randn(&s, r), randn(&s, r), move |t, v| {
                reverse_step_var(t, v[0], step, v[1], &sched, Some(&noise), ReverseNoise::Posterior).map_err(lift)
            })
        }),
    ]
}

fn binary_with(
    a: Tensor,
    b: Tensor,
    f: impl Fn(&mut Tape, &[Var]) -> std::result::Result<Var, TensorError> + 'static,
) -> Case {
    (vec![a, b], Box::new(f))
}

/// Names of the primitives covered by [`gradcheck_suite`].
pub fn primitive_names() -> Vec<&'static str> {
    primitives().into_iter().map(|(n, _)| n).collect()
}

fn check_primitive(name: &str, build: Builder, seed: u64) -> Result<GradcheckEntry> {
    let mut entry = GradcheckEntry {
        name: name.into(),
        cases: 0,
        checked: 0,
        max_rel_error: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SHAPES_PER_OP {
        let (inputs, f) = build(&mut rng);
        let rep = gradcheck(|t, v| f(t, v), &inputs, STEP).map_err(|e| HarnessError::Config(format!("{name}: {e}")))?;
        entry.cases += 1;
        entry.checked += rep.checked;
        entry.max_rel_error = entry.max_rel_error.max(rep.max_rel_error);
    }
    Ok(entry)
}

/// Total-loss gradient of the miniature model with respect to every
/// parameter, both toggles on and part weights held at their base values.
pub fn model_gradcheck(seed: u64) -> Result<GradcheckEntry> {
    let cfg = ModelConfig { seed, ..ModelConfig::miniature() };
    let mut model = build_model(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    for v in model.store.values_mut() {
        let noise = Tensor::uniform(v.shape(), -0.05, 0.05, &mut rng);
        *v = v.zip_map(&noise, |a, b| a + b)?;
    }
    let motion = MotionConfig { frames: 2, ..Default::default() };
    let seq = generate_sequence(&model.body, &motion, seed)?;
    let mut seq = seq;
    for (i, m) in seq.mask.iter_mut().enumerate() {
        if i % 3 == 0 {
            *m = 0.0;
        }
    }
    let sample = Sample::from_sequence(&seq, cfg.unit_mm)?;
    let weights = LossWeights::default();
    let noise_seed = seed.wrapping_add(7);

    let lambda = {
        let mut tape = Tape::new();
        let p = model.store.bind_frozen(&mut tape);
        let x = tape.constant(sample.input.clone());
        let f = model.forward(&mut tape, &p, x, 1, 2, noise_seed)?;
        model.part_weights(&tape, &f)?
    };
    let ids: Vec<_> = model
        .store
        .iter()
        .map(|(n, _)| model.store.id_of(n).expect("own name"))
        .collect();
    let inputs: Vec<Tensor> = model.store.iter().map(|(_, t)| t.clone()).collect();
    let rep = gradcheck_with(
        |tape, v| {
            let mut p = model.store.bind_frozen(tape);
            for (id, &var) in ids.iter().zip(v) {
                p.replace(*id, var);
            }
            let x = tape.constant(sample.input.clone());
            let f = model.forward(tape, &p, x, 1, 2, noise_seed).map_err(lift)?;
            let l = model
                .loss_with(tape, &f, &sample.target, &weights, Some(&lambda))
                .map_err(lift)?;
            Ok(l.total)
        },
        &inputs,
        GradcheckOptions {
            step: 3e-4,
            stencil: Stencil::FivePoint,
            floor: 1e-5,
        },
    )
    .map_err(|e| HarnessError::Config(format!("model: {e}")))?;
    Ok(GradcheckEntry {
        name: "model".into(),
        cases: 1,
        checked: rep.checked,
        max_rel_error: rep.max_rel_error,
    })
}

/// One entry per primitive (over [`SHAPES_PER_OP`] random shapes each) plus
/// the end-to-end miniature model.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradcheckEntry>> {
    let mut out = primitives()
        .into_iter()
        .enumerate()
        .map(|(i, (name, build))| check_primitive(name, build, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    out.push(model_gradcheck(seed)?);
    Ok(out)
}
