//! Reference implementations written without the crate's kernels.
#![allow(dead_code)]

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Row-major `[m, k] × [k, n]` by triple loop.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Single-head attention for one query row over `l` keys of width `d`.
pub fn attention_row(q: &[f64], k: &[f64], v: &[f64], l: usize, d: usize, dv: usize) -> Vec<f64> {
    let scores: Vec<f64> = (0..l)
        .map(|j| (0..d).map(|i| q[i] * k[j * d + i]).sum::<f64>() / (d as f64).sqrt())
        .collect();
    let w = softmax(&scores);
    (0..dv).map(|c| (0..l).map(|j| w[j] * v[j * dv + c]).sum()).collect()
}

/// Uniform permutation of `0..n`.
pub fn permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// Haar-random proper rotation from a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    let q = Vector4::new(normal(rng), normal(rng), normal(rng), normal(rng));
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from_vector(q));
    q.to_rotation_matrix().into_inner()
}

pub fn random_cloud<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [scale * normal(rng), scale * normal(rng), scale * normal(rng)])
        .collect()
}

pub fn transform(ps: &[[f64; 3]], s: f64, r: &Matrix3<f64>, t: &Vector3<f64>) -> Vec<[f64; 3]> {
    ps.iter()
        .map(|p| {
            let v = r * Vector3::from(*p) * s + t;
            [v.x, v.y, v.z]
        })
        .collect()
}

pub fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn mean_dist(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    a.iter().zip(b).map(|(x, y)| dist(x, y)).sum::<f64>() / a.len() as f64
}

/// `Σ ‖R·(p − p̄) − (q − q̄)‖²` for a fixed rotation, unit scale.
pub fn rigid_residual(p: &[[f64; 3]], q: &[[f64; 3]], r: &Matrix3<f64>) -> f64 {
    let c = |xs: &[[f64; 3]]| xs.iter().map(|x| Vector3::from(*x)).sum::<Vector3<f64>>() / xs.len() as f64;
    let (cp, cq) = (c(p), c(q));
    p.iter()
        .zip(q)
        .map(|(a, b)| (r * (Vector3::from(*a) - cp) - (Vector3::from(*b) - cq)).norm_squared())
        .sum()
}

/// `α_t` products by repeated multiplication, `ᾱ_0 = 1`.
pub fn alpha_bar(alphas: &[f64], t: usize) -> f64 {
    alphas[..t].iter().product()
}

/// Scalar reverse update with the posterior standard deviation.
pub fn reverse_scalar(z: f64, eps: f64, noise: f64, t: usize, alphas: &[f64]) -> f64 {
    let a = alphas[t - 1];
    let bar = alpha_bar(alphas, t);
    let bar_prev = alpha_bar(alphas, t - 1);
    let mean = (z - (1.0 - a) / (1.0 - bar).sqrt() * eps) / a.sqrt();
    let sigma = if t == 1 { 0.0 } else { ((1.0 - a) * (1.0 - bar_prev) / (1.0 - bar)).sqrt() };
    mean + sigma * noise
}

/// Random simple graph on `n` vertices, each edge kept with probability `p`.
pub fn random_edges<R: Rng>(rng: &mut R, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                e.push((i, j));
            }
        }
    }
    e
}

/// Largest |graph_conv(P·Y) − P·graph_conv(Y)| over `trials` random
/// 5-vertex graphs and permutations, with the adjacency relabelled by `P`.
pub fn graph_conv_equivariance(seed: u64, trials: usize) -> f64 {
    use tempograph::autodiff::Tape;
    use tempograph::graph::{build_adjacency, graph_conv, Normalization};
    use tempograph::nn::Activation;
    use tempograph::tensor::Tensor;
    let mut rng = rng(seed);
    let (n, c_in, c_out) = (5, 3, 4);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let edges = random_edges(&mut rng, n, 0.5);
        let perm = permutation(&mut rng, n);
        let permuted: Vec<(usize, usize)> = edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let norm = if trial % 2 == 0 { Normalization::Symmetric } else { Normalization::Row };
        let act = [Activation::Identity, Activation::Relu, Activation::Gelu][trial % 3];
        let y = Tensor::randn(&[n, c_in], 1.0, &mut rng);
        let w = Tensor::randn(&[c_in, c_out], 1.0, &mut rng);
        // row perm[v] of the relabelled input holds row v of the original
        let mut py = Tensor::zeros(&[n, c_in]);
        for v in 0..n {
            for c in 0..c_in {
                py.set(&[perm[v], c], y.get(&[v, c]));
            }
        }
        let run = |edges: &[(usize, usize)], y: &Tensor| {
            let mut tape = Tape::new();
            let a = tape.constant(build_adjacency(edges, n, norm).unwrap());
            let yv = tape.constant(y.clone());
            let wv = tape.constant(w.clone());
            let out = graph_conv(&mut tape, a, yv, wv, act).unwrap();
            tape.value(out).clone()
        };
        let (base, moved) = (run(&edges, &y), run(&permuted, &py));
        for v in 0..n {
            for c in 0..c_out {
                worst = worst.max((moved.get(&[perm[v], c]) - base.get(&[v, c])).abs());
            }
        }
    }
    worst
}

/// Forward-noises a constant `x0` through `t` steps on `trials` independent
/// samples. Returns the mean and variance z-scores against `√ᾱ_t·x0` and
/// `1−ᾱ_t`.
pub fn forward_noise_zscores(x0: f64, alphas: &[f64], t: usize, trials: usize, seed: u64) -> (f64, f64) {
    use tempograph::diffusion::{forward_noise_step, DiffusionSchedule};
    use tempograph::tensor::Tensor;
    let schedule = DiffusionSchedule::from_alphas(alphas.to_vec()).unwrap();
    let mut rng = rng(seed);
    let mut x = Tensor::full(&[trials], x0);
    for s in 1..=t {
        let eps = Tensor::randn(&[trials], 1.0, &mut rng);
        x = forward_noise_step(&x, s, &schedule, &eps).unwrap();
    }
    let bar = alpha_bar(alphas, t);
    let n = trials as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = (1.0 - bar).sqrt();
    let z_mean = (mean - bar.sqrt() * x0) / (sd / n.sqrt());
    // Gaussian sample variance has standard error σ²·√(2/(n−1))
    let z_var = (var - (1.0 - bar)) / ((1.0 - bar) * (2.0 / (n - 1.0)).sqrt());
    (z_mean, z_var)
}

/// Largest |reverse_step − scalar oracle| over `count` random inputs.
pub fn reverse_step_deviation(count: usize, seed: u64) -> f64 {
    use tempograph::diffusion::{reverse_step, DiffusionSchedule, ReverseNoise};
    use tempograph::tensor::Tensor;
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let steps = rng.random_range(2..12);
        let alphas: Vec<f64> = (0..steps).map(|_| rng.random_range(0.05..0.999)).collect();
        let schedule = DiffusionSchedule::from_alphas(alphas.clone()).unwrap();
        let t = rng.random_range(1..=steps);
        let (z, e, i) = (normal(&mut rng), normal(&mut rng), normal(&mut rng));
        let one = |v: f64| Tensor::new(&[1], vec![v]).unwrap();
        let got = reverse_step(&one(z), t, &one(e), &schedule, &one(i), ReverseNoise::Posterior).unwrap();
        worst = worst.max((got.item() - reverse_scalar(z, e, i, t, &alphas)).abs());
    }
    worst
}

fn random_simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..k).map(|_| 2.0 * normal(rng)).collect();
    softmax(&logits)
}

/// Smallest KL over `pairs` random distinct pairs, and the largest |KL(p‖p)|.
pub fn kl_extremes(pairs: usize, seed: u64) -> (f64, f64) {
    use tempograph::loss::part_kl;
    let mut rng = rng(seed);
    let (mut min_kl, mut max_self) = (f64::INFINITY, 0f64);
    for _ in 0..pairs {
        let k = rng.random_range(2..10);
        let p = random_simplex(&mut rng, k);
        let q = random_simplex(&mut rng, k);
        min_kl = min_kl.min(part_kl(&p, &q).unwrap());
        max_self = max_self.max(part_kl(&p, &p).unwrap().abs());
    }
    (min_kl, max_self)
}

/// Largest |log_softmax(x + c) − log_softmax(x)| over random rows and shifts.
pub fn log_softmax_shift_deviation(trials: usize, seed: u64) -> f64 {
    use tempograph::loss::log_softmax_stable;
    use tempograph::tensor::Tensor;
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let k = rng.random_range(1..12);
        let x = Tensor::new(&[k], (0..k).map(|_| 3.0 * normal(&mut rng)).collect()).unwrap();
        let c: f64 = rng.random_range(-1e3..1e3);
        let shifted = x.map(|v| v + c);
        let (a, b) = (log_softmax_stable(&x, 0).unwrap(), log_softmax_stable(&shifted, 0).unwrap());
        worst = worst.max(a.max_abs_diff(&b));
    }
    worst
}

/// Random contiguous partition of `0..n` into `m` nonempty ranges.
pub fn random_partition<R: Rng>(rng: &mut R, n: usize, m: usize) -> Vec<(usize, usize)> {
    let mut cuts: Vec<usize> = (1..n).collect();
    for i in (1..cuts.len()).rev() {
        let j = rng.random_range(0..=i);
        cuts.swap(i, j);
    }
    let mut cuts: Vec<usize> = cuts[..m - 1].to_vec();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(m);
    let mut start = 0;
    for c in cuts.into_iter().chain(std::iter::once(n)) {
        out.push((start, c - 1));
        start = c;
    }
    out
}

/// Number of random maps on which some part is gated other than exactly once.
pub fn gate_violations(maps: usize, seed: u64) -> usize {
    use tempograph::loss::PartLabelMap;
    let mut rng = rng(seed);
    (0..maps)
        .filter(|_| {
            let n = rng.random_range(1..40);
            let m = rng.random_range(1..=n.min(10));
            let map = PartLabelMap::new(random_partition(&mut rng, n, m), n).unwrap();
            (0..map.m()).any(|p| map.gate_count(p) != 1)
        })
        .count()
}

/// Random similarity with scale in `[0.5, 2]` and translation up to 100.
pub fn random_similarity<R: Rng>(rng: &mut R) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let s = rng.random_range(0.5..2.0);
    let r = random_rotation(rng);
    let t = Vector3::new(
        rng.random_range(-100.0..100.0),
        rng.random_range(-100.0..100.0),
        rng.random_range(-100.0..100.0),
    );
    (s, r, t)
}

/// Largest change of PA-MPJPE when the prediction is moved by a random
/// similarity, over `trials` transforms. Errors are relative to the
/// untransformed value in millimetres.
pub fn pa_invariance_deviation(trials: usize, seed: u64) -> f64 {
    use tempograph::metrics::{joint_errors, AlignMode};
    let mut rng = rng(seed);
    let gt = random_cloud(&mut rng, 14, 300.0);
    let pred: Vec<[f64; 3]> = gt
        .iter()
        .map(|p| [p[0] + 20.0 * normal(&mut rng), p[1] + 20.0 * normal(&mut rng), p[2] + 20.0 * normal(&mut rng)])
        .collect();
    let (_, base) = joint_errors(&pred, &gt, AlignMode::Similarity).unwrap();
    (0..trials)
        .map(|_| {
            let (s, r, t) = random_similarity(&mut rng);
            let moved = transform(&pred, s, &r, &t);
            let (_, pa) = joint_errors(&moved, &gt, AlignMode::Similarity).unwrap();
            (pa - base).abs()
        })
        .fold(0.0, f64::max)
}

/// Worst parameter error when aligning a cloud to a known similarity of
/// itself: max of |Δs|, max |ΔR| entry, max |Δt| component.
pub fn similarity_recovery_error(trials: usize, seed: u64) -> f64 {
    use tempograph::metrics::{procrustes_align, AlignMode};
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let p = random_cloud(&mut rng, 10, 1.0);
        let (s, r, t) = random_similarity(&mut rng);
        let q = transform(&p, s, &r, &t);
        let est = procrustes_align(&p, &q, AlignMode::Similarity).unwrap();
        worst = worst
            .max((est.scale - s).abs())
            .max((est.rotation - r).abs().max())
            .max((est.translation - t).abs().max());
    }
    worst
}

/// Pairs among `pairs` random ones where PA-MPJPE exceeds MPJPE. Each
/// prediction is the ground truth under a random similarity plus per-joint
/// noise; with `misalign = false` only the noise is applied.
pub fn pa_exceeds_mpjpe(pairs: usize, seed: u64, misalign: bool) -> usize {
    use tempograph::metrics::{joint_errors, AlignMode};
    let mut rng = rng(seed);
    (0..pairs)
        .filter(|_| {
            let gt = random_cloud(&mut rng, 14, 300.0);
            let noise = rng.random_range(1.0..100.0);
            let (s, r, t) = if misalign { random_similarity(&mut rng) } else { (1.0, Matrix3::identity(), Vector3::zeros()) };
            let pred: Vec<[f64; 3]> = transform(&gt, s, &r, &t)
                .iter()
                .map(|p| [p[0] + noise * normal(&mut rng), p[1] + noise * normal(&mut rng), p[2] + noise * normal(&mut rng)])
                .collect();
            let (mpjpe, pa) = joint_errors(&pred, &gt, AlignMode::Similarity).unwrap();
            pa > mpjpe + 1e-9
        })
        .count()
}
