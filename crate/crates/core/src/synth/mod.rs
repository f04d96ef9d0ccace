//! Deterministic articulated motion with corrupted observations.
//!
//! Joint angles follow cubic Bézier curves, the rig is posed by forward
//! kinematics, and observations start as an exact copy of the ground-truth
//! vertices. [`corrupt_sequence`] then masks parts over contiguous frame
//! spans (occlusion) and box-filters frames along time (blur), recording
//! every touched `(frame, part)` in the corruption log.

mod io;

pub use io::{read_sequence, write_sequence, SequenceHeader, SEQUENCE_MAGIC, SEQUENCE_VERSION};

use crate::graph::ToyBody;
use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    pub frames: usize,
    /// Multiplier on every joint's angle range.
    pub amplitude: f64,
    /// Heading is drawn uniformly from `±root_yaw` radians.
    pub root_yaw: f64,
    /// Root drift range in millimetres.
    pub root_translation: f64,
    /// Maximum joint displacement between consecutive frames, millimetres.
    pub velocity_cap: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            amplitude: 1.0,
            root_yaw: std::f64::consts::PI,
            root_translation: 100.0,
            velocity_cap: 80.0,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(SynthError::Config(format!("need at least 2 frames, got {}", self.frames)));
        }
        let finite = [self.amplitude, self.root_yaw, self.root_translation, self.velocity_cap];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SynthError::Config("motion ranges must be finite and nonnegative".into()));
        }
        if self.velocity_cap <= 0.0 {
            return Err(SynthError::Config("velocity_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Which parts an occlusion event may hit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartSelection {
    /// Every part is occluded independently with `occlusion_prob`.
    EachPart,
    /// Only the listed part labels are candidates.
    Parts(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    pub occlusion_prob: f64,
    pub selection: PartSelection,
    /// Event span as a fraction of the sequence length, drawn uniformly.
    pub severity: [f64; 2],
    /// Odd box-filter width in frames; 1 disables blur.
    pub blur_width: usize,
    /// Probability that a sequence receives one blur span.
    pub blur_prob: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            occlusion_prob: 0.3,
            selection: PartSelection::EachPart,
            severity: [0.25, 0.6],
            blur_width: 1,
            blur_prob: 0.0,
        }
    }
}

impl CorruptionConfig {
    pub fn clean() -> Self {
        Self {
            occlusion_prob: 0.0,
            blur_width: 1,
            blur_prob: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self, frames: usize, n_parts: usize) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.occlusion_prob) || !prob(self.blur_prob) {
            return Err(SynthError::Config("probabilities must lie in [0, 1]".into()));
        }
        let [lo, hi] = self.severity;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(SynthError::Config(format!("severity range {:?} not within (0, 1]", self.severity)));
        }
        if self.blur_width.is_multiple_of(2) {
            return Err(SynthError::Config(format!("blur width {} must be odd", self.blur_width)));
        }
        if self.blur_width >= frames {
            return Err(SynthError::Config(format!(
                "blur width {} must be smaller than the {frames} frames",
                self.blur_width
            )));
        }
        if let PartSelection::Parts(ps) = &self.selection {
            if let Some(p) = ps.iter().find(|&&p| p >= n_parts) {
                return Err(SynthError::Config(format!("part {p} out of range 0..{n_parts}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    Occlusion,
    Blur,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionEvent {
    pub frame: usize,
    pub part: usize,
    pub kind: CorruptionKind,
    pub severity: f64,
}

/// Ground truth plus observations. Arrays are row-major: vertices
/// `[T, n, 3]`, joints `[T, J, 3]`, mask `[T, n]` with 1 for visible.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub frames: usize,
    pub n_vertices: usize,
    pub n_joints: usize,
    pub gt_vertices: Vec<f64>,
    pub gt_joints: Vec<f64>,
    pub observations: Vec<f64>,
    pub mask: Vec<f64>,
    pub corruption_log: Vec<CorruptionEvent>,
}

impl MotionSequence {
    /// Frame `f` of the ground-truth vertices as points.
    pub fn gt_frame(&self, f: usize) -> Vec<[f64; 3]> {
        points(&self.gt_vertices[f * self.n_vertices * 3..(f + 1) * self.n_vertices * 3])
    }

    pub fn gt_points(&self) -> Vec<[f64; 3]> {
        points(&self.gt_vertices)
    }

    pub fn joint_frame(&self, f: usize) -> Vec<[f64; 3]> {
        points(&self.gt_joints[f * self.n_joints * 3..(f + 1) * self.n_joints * 3])
    }

    /// Observations equal to the ground truth with everything visible.
    pub fn clean_observations(&mut self) {
        self.observations = self.gt_vertices.clone();
        self.mask = vec![1.0; self.frames * self.n_vertices];
        self.corruption_log.clear();
    }
}

pub fn points(flat: &[f64]) -> Vec<[f64; 3]> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Per-joint angle ranges `(lo, hi)` for rotations about x, y, z.
fn joint_ranges(name: &str) -> [(f64, f64); 3] {
    match name {
        "pelvis" => [(-0.15, 0.15), (0.0, 0.0), (-0.1, 0.1)],
        "neck" => [(-0.25, 0.25), (-0.3, 0.3), (-0.2, 0.2)],
        "l_shoulder" | "r_shoulder" => [(-1.0, 1.0), (-0.4, 0.4), (-0.8, 0.8)],
        "l_elbow" | "r_elbow" => [(-1.4, 0.0), (0.0, 0.0), (0.0, 0.0)],
        "l_wrist" | "r_wrist" => [(-0.4, 0.4), (-0.3, 0.3), (0.0, 0.0)],
        "l_hip" | "r_hip" => [(-0.8, 0.6), (-0.2, 0.2), (-0.3, 0.3)],
        "l_knee" | "r_knee" => [(0.0, 1.3), (0.0, 0.0), (0.0, 0.0)],
        "l_ankle" | "r_ankle" => [(-0.3, 0.3), (0.0, 0.0), (0.0, 0.0)],
        _ => [(0.0, 0.0); 3],
    }
}

/// Cubic Bézier with control points `c` at `s ∈ [0, 1]`.
pub fn bezier(c: [f64; 4], s: f64) -> f64 {
    let u = 1.0 - s;
    u * u * u * c[0] + 3.0 * u * u * s * c[1] + 3.0 * u * s * s * c[2] + s * s * s * c[3]
}

struct Curves {
    angles: Vec<[[f64; 4]; 3]>,
    yaw: f64,
    yaw_wobble: [f64; 4],
    drift: [[f64; 4]; 2],
}

fn draw_curves<R: Rng>(body: &ToyBody, cfg: &MotionConfig, rng: &mut R) -> Curves {
    let mut ctrl = |lo: f64, hi: f64| -> [f64; 4] {
        std::array::from_fn(|_| if hi > lo { rng.random_range(lo..hi) } else { lo })
    };
    let angles = body
        .rig
        .skeleton
        .names
        .iter()
        .map(|n| joint_ranges(n).map(|(lo, hi)| ctrl(lo, hi)))
        .collect();
    let yaw_wobble = ctrl(-0.4, 0.4);
    let drift = [ctrl(-1.0, 1.0), ctrl(-1.0, 1.0)];
    let yaw = if cfg.root_yaw > 0.0 {
        rng.random_range(-cfg.root_yaw..=cfg.root_yaw)
    } else {
        0.0
    };
    Curves {
        angles,
        yaw,
        yaw_wobble,
        drift,
    }
}

fn pose_frames(body: &ToyBody, cfg: &MotionConfig, c: &Curves, scale: f64) -> (Vec<f64>, Vec<f64>) {
    let t_len = cfg.frames;
    let mut verts = Vec::with_capacity(t_len * body.rig.rest_vertices.len() * 3);
    let mut joints = Vec::with_capacity(t_len * body.rig.skeleton.len() * 3);
    for f in 0..t_len {
        let s = f as f64 / (t_len - 1) as f64;
        let local: Vec<Rotation3<f64>> = c
            .angles
            .iter()
            .enumerate()
            .map(|(j, a)| {
                let [rx, ry, rz] = a.map(|cp| bezier(cp, s) * cfg.amplitude * scale);
                let base = Rotation3::from_euler_angles(rx, ry, rz);
                if j == 0 {
                    let yaw = c.yaw + bezier(c.yaw_wobble, s) * scale;
                    Rotation3::from_axis_angle(&Vector3::y_axis(), yaw) * base
                } else {
                    base
                }
            })
            .collect();
        let tr = cfg.root_translation * scale;
        let root = Vector3::new(bezier(c.drift[0], s) * tr, 0.0, bezier(c.drift[1], s) * tr);
        let (v, j) = body.rig.pose(&local, root);
        verts.extend(v.iter().flat_map(|p| [p.x, p.y, p.z]));
        joints.extend(j.iter().flat_map(|p| [p.x, p.y, p.z]));
    }
    (verts, joints)
}

fn max_step(joints: &[f64], per_frame: usize) -> f64 {
    joints
        .chunks(per_frame)
        .collect::<Vec<_>>()
        .windows(2)
        .flat_map(|w| {
            w[0].chunks(3)
                .zip(w[1].chunks(3))
                .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        })
        .fold(0.0, f64::max)
}

/// One clean sequence. Motion is shrunk by halves until the per-frame
/// joint displacement respects `velocity_cap`.
pub fn generate_sequence(body: &ToyBody, cfg: &MotionConfig, seed: u64) -> Result<MotionSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let curves = draw_curves(body, cfg, &mut rng);
    let n_joints = body.rig.skeleton.len();
    let mut scale = 1.0;
    let (verts, joints) = loop {
        let (v, j) = pose_frames(body, cfg, &curves, scale);
        if max_step(&j, n_joints * 3) <= cfg.velocity_cap {
            break (v, j);
        }
        scale *= 0.5;
        if scale < 1e-6 {
            return Err(SynthError::Config(format!("velocity cap {} unreachable", cfg.velocity_cap)));
        }
    };
    let n = body.rig.rest_vertices.len();
    let mut seq = MotionSequence {
        frames: cfg.frames,
        n_vertices: n,
        n_joints,
        gt_vertices: verts,
        gt_joints: joints,
        observations: Vec::new(),
        mask: Vec::new(),
        corruption_log: Vec::new(),
    };
    seq.clean_observations();
    Ok(seq)
}

/// Clamped-index box filter along time for frame `f`, from `src`.
fn box_frame(src: &[f64], frames: usize, row: usize, f: usize, width: usize) -> Vec<f64> {
    let r = (width / 2) as isize;
    let mut out = vec![0.0; row];
    for d in -r..=r {
        let g = (f as isize + d).clamp(0, frames as isize - 1) as usize;
        for (o, v) in out.iter_mut().zip(&src[g * row..(g + 1) * row]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= width as f64);
    out
}

fn span<R: Rng>(rng: &mut R, frames: usize, severity: f64) -> (usize, usize) {
    let len = ((severity * frames as f64).round() as usize).clamp(1, frames);
    let start = rng.random_range(0..=frames - len);
    (start, start + len)
}

fn draw_severity<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Applies blur then occlusion to a copy of `seq`; ground truth is untouched.
/// `parts` are inclusive vertex ranges, one per label.
pub fn corrupt_sequence(seq: &MotionSequence, parts: &[(usize, usize)], cfg: &CorruptionConfig, seed: u64) -> Result<MotionSequence> {
    cfg.validate(seq.frames, parts.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0c0_a11e);
    let mut out = seq.clone();
    let (t_len, n) = (seq.frames, seq.n_vertices);
    let row = n * 3;

    if cfg.blur_width > 1 && rng.random_bool(cfg.blur_prob) {
        let sev = draw_severity(&mut rng, cfg.severity);
        let (a, b) = span(&mut rng, t_len, sev);
        let src = out.observations.clone();
        for f in a..b {
            let blurred = box_frame(&src, t_len, row, f, cfg.blur_width);
            out.observations[f * row..(f + 1) * row].copy_from_slice(&blurred);
            for part in 0..parts.len() {
                out.corruption_log.push(CorruptionEvent {
                    frame: f,
                    part,
                    kind: CorruptionKind::Blur,
                    severity: sev,
                });
            }
        }
    }

    let candidates: Vec<usize> = match &cfg.selection {
        PartSelection::EachPart => (0..parts.len()).collect(),
        PartSelection::Parts(ps) => ps.clone(),
    };
    for part in candidates {
        if !rng.random_bool(cfg.occlusion_prob) {
            continue;
        }
        let sev = draw_severity(&mut rng, cfg.severity);
        let (a, b) = span(&mut rng, t_len, sev);
        let (s, e) = parts[part];
        for f in a..b {
            for v in s..=e {
                out.mask[f * n + v] = 0.0;
                out.observations[(f * n + v) * 3..(f * n + v) * 3 + 3].fill(0.0);
            }
            out.corruption_log.push(CorruptionEvent {
                frame: f,
                part,
                kind: CorruptionKind::Occlusion,
                severity: sev,
            });
        }
    }
    out.corruption_log.sort_by_key(|e| (e.frame, e.part, e.kind as u8));
    Ok(out)
}

/// Seed for sequence `index` of a dataset drawn with `seed`.
pub fn sequence_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.random()
}

/// `count` corrupted sequences, generated in parallel; order and content
/// depend only on `(configs, seed)`.
pub fn generate_dataset(
    body: &ToyBody,
    motion: &MotionConfig,
    corruption: &CorruptionConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<MotionSequence>> {
    let parts = body
        .graph
        .fine
        .part_ranges()
        .ok_or_else(|| SynthError::Config("body parts are not contiguous".into()))?;
    corruption.validate(motion.frames, parts.len())?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let s = sequence_seed(seed, i);
            let clean = generate_sequence(body, motion, s)?;
            corrupt_sequence(&clean, &parts, corruption, s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_toy_body, BodyConfig};

    fn body() -> ToyBody {
        generate_toy_body(&BodyConfig::default()).unwrap()
    }

    #[test]
    fn deterministic_and_sized() {
        let b = body();
        let cfg = MotionConfig::default();
        let a = generate_sequence(&b, &cfg, 11).unwrap();
        assert_eq!(a, generate_sequence(&b, &cfg, 11).unwrap());
        assert_eq!(a.frames, 16);
        assert_eq!(a.gt_vertices.len(), 16 * 96 * 3);
        assert_ne!(a, generate_sequence(&b, &cfg, 12).unwrap());
    }

    #[test]
    fn velocity_cap_respected() {
        let b = body();
        let cfg = MotionConfig {
            velocity_cap: 20.0,
            ..Default::default()
        };
        for seed in 0..5 {
            let s = generate_sequence(&b, &cfg, seed).unwrap();
            assert!(max_step(&s.gt_joints, s.n_joints * 3) <= 20.0);
        }
    }

    #[test]
    fn no_op_corruption() {
        let b = body();
        let s = generate_sequence(&b, &MotionConfig::default(), 1).unwrap();
        let parts = b.graph.fine.part_ranges().unwrap();
        let c = corrupt_sequence(&s, &parts, &CorruptionConfig::clean(), 5).unwrap();
        assert_eq!(c, s);
    }

    #[test]
    fn full_occlusion_of_one_part() {
        let b = body();
        let s = generate_sequence(&b, &MotionConfig::default(), 2).unwrap();
        let parts = b.graph.fine.part_ranges().unwrap();
        let cfg = CorruptionConfig {
            occlusion_prob: 1.0,
            selection: PartSelection::Parts(vec![2]),
            severity: [1.0, 1.0],
            ..CorruptionConfig::clean()
        };
        let c = corrupt_sequence(&s, &parts, &cfg, 0).unwrap();
        let (p0, p1) = parts[2];
        for f in 0..s.frames {
            for v in 0..s.n_vertices {
                let i = f * s.n_vertices + v;
                if (p0..=p1).contains(&v) {
                    assert_eq!(c.mask[i], 0.0);
                    assert_eq!(&c.observations[i * 3..i * 3 + 3], &[0.0; 3]);
                } else {
                    assert_eq!(c.mask[i], 1.0);
                    assert_eq!(&c.observations[i * 3..i * 3 + 3], &s.observations[i * 3..i * 3 + 3]);
                }
            }
        }
        assert_eq!(c.gt_vertices, s.gt_vertices);
        assert_eq!(c.corruption_log.len(), s.frames);
    }

    #[test]
    fn blur_preserves_linear_ramp_interior() {
        let frames = 8;
        let obs: Vec<f64> = (0..frames).flat_map(|f| [f as f64, 2.0 * f as f64 + 1.0, -3.0 * f as f64]).collect();
        for f in 1..frames - 1 {
            let b = box_frame(&obs, frames, 3, f, 3);
            for (x, y) in b.iter().zip(&obs[f * 3..f * 3 + 3]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_width_must_be_below_frames() {
        let cfg = CorruptionConfig {
            blur_width: 17,
            ..Default::default()
        };
        assert!(cfg.validate(16, 8).is_err());
        let even = CorruptionConfig {
            blur_width: 4,
            ..Default::default()
        };
        assert!(even.validate(16, 8).is_err());
    }
}
