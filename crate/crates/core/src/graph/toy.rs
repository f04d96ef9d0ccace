//! Procedural articulated body used in place of a licensed body model.
//!
//! A 19-joint kinematic skeleton carries eight labelled parts. Each part's
//! vertices are spread along its bones and rigidly bound to one bone frame,
//! so posing the skeleton moves every vertex rigidly.

use super::{BodyGraph, GraphError, Normalization};
use crate::tensor::Tensor;
use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// (name, parent, rest offset from parent in millimetres)
const JOINTS: [(&str, Option<usize>, [f64; 3]); 19] = [
    ("pelvis", None, [0.0, 950.0, 0.0]),
    ("neck", Some(0), [0.0, 500.0, 0.0]),
    ("head_top", Some(1), [0.0, 250.0, 0.0]),
    ("l_shoulder", Some(1), [180.0, -30.0, 0.0]),
    ("l_elbow", Some(3), [60.0, -280.0, 0.0]),
    ("l_wrist", Some(4), [30.0, -255.0, 20.0]),
    ("l_hand", Some(5), [10.0, -150.0, 10.0]),
    ("r_shoulder", Some(1), [-180.0, -30.0, 0.0]),
    ("r_elbow", Some(7), [-60.0, -280.0, 0.0]),
    ("r_wrist", Some(8), [-30.0, -255.0, 20.0]),
    ("r_hand", Some(9), [-10.0, -150.0, 10.0]),
    ("l_hip", Some(0), [100.0, -60.0, 0.0]),
    ("l_knee", Some(11), [10.0, -420.0, 10.0]),
    ("l_ankle", Some(12), [0.0, -410.0, -20.0]),
    ("l_toe", Some(13), [0.0, -60.0, 140.0]),
    ("r_hip", Some(0), [-100.0, -60.0, 0.0]),
    ("r_knee", Some(15), [-10.0, -420.0, 10.0]),
    ("r_ankle", Some(16), [0.0, -410.0, -20.0]),
    ("r_toe", Some(17), [0.0, -60.0, 140.0]),
];

/// Joints used for MPJPE-style evaluation, regressed from vertices.
pub const EVAL_JOINTS: [&str; 14] = [
    "pelvis",
    "head_top",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    Head,
    Torso,
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
    Hands,
    Feet,
}

impl BodyPart {
    pub const ALL: [BodyPart; 8] = [
        BodyPart::Head,
        BodyPart::Torso,
        BodyPart::LeftArm,
        BodyPart::RightArm,
        BodyPart::LeftLeg,
        BodyPart::RightLeg,
        BodyPart::Hands,
        BodyPart::Feet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BodyPart::Head => "head",
            BodyPart::Torso => "torso",
            BodyPart::LeftArm => "left_arm",
            BodyPart::RightArm => "right_arm",
            BodyPart::LeftLeg => "left_leg",
            BodyPart::RightLeg => "right_leg",
            BodyPart::Hands => "hands",
            BodyPart::Feet => "feet",
        }
    }

    /// Bones (start joint, end joint) covered by the part.
    fn segments(self) -> &'static [(usize, usize)] {
        match self {
            BodyPart::Head => &[(1, 2)],
            BodyPart::Torso => &[(0, 1)],
            BodyPart::LeftArm => &[(3, 4), (4, 5)],
            BodyPart::RightArm => &[(7, 8), (8, 9)],
            BodyPart::LeftLeg => &[(11, 12), (12, 13)],
            BodyPart::RightLeg => &[(15, 16), (16, 17)],
            BodyPart::Hands => &[(5, 6), (9, 10)],
            BodyPart::Feet => &[(13, 14), (17, 18)],
        }
    }

    fn radius(self) -> f64 {
        match self {
            BodyPart::Head => 90.0,
            BodyPart::Torso => 140.0,
            BodyPart::LeftArm | BodyPart::RightArm => 45.0,
            BodyPart::LeftLeg | BodyPart::RightLeg => 65.0,
            BodyPart::Hands => 35.0,
            BodyPart::Feet => 40.0,
        }
    }

    /// Order in which parts are stitched to the already-built mesh.
    fn stitch_rank(self) -> usize {
        match self {
            BodyPart::Torso => 0,
            BodyPart::Head => 1,
            BodyPart::LeftArm => 2,
            BodyPart::RightArm => 3,
            BodyPart::LeftLeg => 4,
            BodyPart::RightLeg => 5,
            BodyPart::Hands => 6,
            BodyPart::Feet => 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BodyConfig {
    pub parts: Vec<BodyPart>,
    pub vertices_per_part: usize,
    pub coarse_per_part: usize,
    pub normalization: Normalization,
    pub seed: u64,
}

impl Default for BodyConfig {
    fn default() -> Self {
        Self {
            parts: BodyPart::ALL.to_vec(),
            vertices_per_part: 12,
            coarse_per_part: 3,
            normalization: Normalization::Symmetric,
            seed: 0,
        }
    }
}

impl BodyConfig {
    pub fn n_vertices(&self) -> usize {
        self.parts.len() * self.vertices_per_part
    }

    pub fn n_coarse(&self) -> usize {
        self.parts.len() * self.coarse_per_part
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.parts.len() < 2 {
            return Err(GraphError::Config(format!("need at least 2 parts, got {}", self.parts.len())));
        }
        if self.vertices_per_part < 2 {
            return Err(GraphError::Config(format!(
                "need at least 2 vertices per part, got {}",
                self.vertices_per_part
            )));
        }
        if self.coarse_per_part == 0 || self.coarse_per_part > self.vertices_per_part {
            return Err(GraphError::Config(format!(
                "coarse_per_part must be in 1..={}, got {}",
                self.vertices_per_part, self.coarse_per_part
            )));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if self.parts[..i].contains(p) {
                return Err(GraphError::Config(format!("part {} listed twice", p.name())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub names: Vec<&'static str>,
    pub parents: Vec<Option<usize>>,
    /// Absolute rest positions, millimetres.
    pub rest: Vec<Vector3<f64>>,
}

impl Skeleton {
    pub fn standard() -> Self {
        let mut rest: Vec<Vector3<f64>> = Vec::with_capacity(JOINTS.len());
        for (_, parent, off) in JOINTS {
            let off = Vector3::from(off);
            rest.push(match parent {
                Some(p) => rest[p] + off,
                None => off,
            });
        }
        Self {
            names: JOINTS.iter().map(|j| j.0).collect(),
            parents: JOINTS.iter().map(|j| j.1).collect(),
            rest,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| *n == name)
    }

    /// (parent, child) joint pairs.
    pub fn bones(&self) -> Vec<(usize, usize)> {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.map(|p| (p, c)))
            .collect()
    }

    /// Forward kinematics. `local[j]` rotates joint `j`'s subtree; joints are
    /// topologically ordered so parents are always resolved first.
    pub fn pose(&self, local: &[Rotation3<f64>], root_translation: Vector3<f64>) -> (Vec<Rotation3<f64>>, Vec<Vector3<f64>>) {
        let n = self.len();
        let mut world_rot = Vec::with_capacity(n);
        let mut world_pos = Vec::with_capacity(n);
        for j in 0..n {
            match self.parents[j] {
                None => {
                    world_rot.push(local[j]);
                    world_pos.push(self.rest[j] + root_translation);
                }
                Some(p) => {
                    let r: Rotation3<f64> = world_rot[p];
                    let pos = world_pos[p] + r * (self.rest[j] - self.rest[p]);
                    world_rot.push(r * local[j]);
                    world_pos.push(pos);
                }
            }
        }
        (world_rot, world_pos)
    }
}

/// Skeleton plus rigid vertex binding.
#[derive(Clone, Debug, PartialEq)]
pub struct Rig {
    pub skeleton: Skeleton,
    /// Joint whose frame each vertex follows.
    pub vertex_joint: Vec<usize>,
    pub rest_vertices: Vec<Vector3<f64>>,
}

impl Rig {
    /// Posed vertices and joints for per-joint local rotations.
    pub fn pose(&self, local: &[Rotation3<f64>], root_translation: Vector3<f64>) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        let (rot, pos) = self.skeleton.pose(local, root_translation);
        let verts = self
            .rest_vertices
            .iter()
            .zip(&self.vertex_joint)
            .map(|(v, &j)| pos[j] + rot[j] * (v - self.skeleton.rest[j]))
            .collect();
        (verts, pos)
    }
}

/// Sparse-in-practice `n_joints × n_vertices` averaging matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct JointRegressor {
    pub matrix: Tensor,
    pub joint_names: Vec<&'static str>,
}

impl JointRegressor {
    pub fn n_joints(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn n_vertices(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Joints from one frame of vertices.
    pub fn regress(&self, vertices: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let n = self.n_vertices();
        assert_eq!(vertices.len(), n, "regressor vertex count");
        let m = self.matrix.data();
        (0..self.n_joints())
            .map(|j| {
                let mut acc = [0.0; 3];
                for (v, p) in vertices.iter().enumerate() {
                    let w = m[j * n + v];
                    if w != 0.0 {
                        for k in 0..3 {
                            acc[k] += w * p[k];
                        }
                    }
                }
                acc
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBody {
    pub config: BodyConfig,
    pub graph: BodyGraph,
    pub rig: Rig,
    pub regressor: JointRegressor,
}

/// Deterministic connected body mesh with contiguous per-part vertex ranges.
pub fn generate_toy_body(config: &BodyConfig) -> Result<ToyBody, GraphError> {
    config.validate()?;
    let skeleton = Skeleton::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_b0d7);
    let vpp = config.vertices_per_part;
    let n = config.n_vertices();

    let mut rest = vec![Vector3::zeros(); n];
    let mut vertex_joint = vec![0usize; n];
    let mut vertex_segment = vec![(0usize, 0usize); n];
    let mut part_labels = vec![0usize; n];
    let mut groups = vec![0usize; n];
    // per part: list of (segment, vertex index range)
    let mut part_segments: Vec<Vec<(usize, usize, std::ops::Range<usize>)>> = Vec::new();

    for (label, &part) in config.parts.iter().enumerate() {
        let base = label * vpp;
        let segs = part.segments();
        let mut placed = Vec::new();
        for (s, &(j0, j1)) in segs.iter().enumerate() {
            let lo = base + s * vpp / segs.len();
            let hi = base + (s + 1) * vpp / segs.len();
            let (a, b) = (skeleton.rest[j0], skeleton.rest[j1]);
            let axis = (b - a).normalize();
            let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let e1 = axis.cross(&helper).normalize();
            let e2 = axis.cross(&e1);
            let k = hi - lo;
            for (i, v) in (lo..hi).enumerate() {
                let u = (i as f64 + 0.5) / k as f64;
                let theta = i as f64 * 2.399_963_229_728_653 + rng.random_range(-0.2..0.2);
                let r = part.radius() * (1.0 + rng.random_range(-0.08..0.08));
                rest[v] = a + (b - a) * u + (e1 * theta.cos() + e2 * theta.sin()) * r;
                vertex_joint[v] = j0;
                vertex_segment[v] = (j0, j1);
            }
            placed.push((j0, j1, lo..hi));
        }
        for v in base..base + vpp {
            part_labels[v] = label;
            let local = v - base;
            groups[v] = label * config.coarse_per_part + local * config.coarse_per_part / vpp;
        }
        part_segments.push(placed);
    }

    // Chain edges inside segments, then stitch each segment to the nearest
    // vertex of the mesh built so far.
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut order: Vec<usize> = (0..config.parts.len()).collect();
    order.sort_by_key(|&p| config.parts[p].stitch_rank());
    let mut built: Vec<usize> = Vec::new();
    for &p in &order {
        for (_, _, range) in &part_segments[p] {
            let r: Vec<usize> = range.clone().collect();
            for i in 0..r.len() {
                if i + 1 < r.len() {
                    edges.push((r[i], r[i + 1]));
                }
                if i + 2 < r.len() {
                    edges.push((r[i], r[i + 2]));
                }
            }
            if !built.is_empty() {
                for &v in r.iter().take(2) {
                    let nearest = *built
                        .iter()
                        .min_by(|&&x, &&y| (rest[x] - rest[v]).norm().total_cmp(&(rest[y] - rest[v]).norm()))
                        .unwrap();
                    edges.push((nearest.min(v), nearest.max(v)));
                }
            }
            built.extend(r);
        }
    }
    edges.sort_unstable();
    edges.dedup();

    let part_names = config.parts.iter().map(|p| p.name().to_string()).collect();
    let graph = BodyGraph::from_groups(n, &edges, part_labels, &groups, part_names, config.normalization)?;

    let regressor = build_regressor(&skeleton, &rest, &vertex_segment);
    Ok(ToyBody {
        config: config.clone(),
        graph,
        rig: Rig {
            skeleton,
            vertex_joint,
            rest_vertices: rest,
        },
        regressor,
    })
}

fn build_regressor(skeleton: &Skeleton, rest: &[Vector3<f64>], segment: &[(usize, usize)]) -> JointRegressor {
    let n = rest.len();
    let mut matrix = Tensor::zeros(&[EVAL_JOINTS.len(), n]);
    for (row, name) in EVAL_JOINTS.iter().enumerate() {
        let j = skeleton.index_of(name).expect("eval joint in skeleton");
        let mut cand: Vec<usize> = (0..n).filter(|&v| segment[v].0 == j || segment[v].1 == j).collect();
        if cand.is_empty() {
            cand = (0..n).collect();
        }
        cand.sort_by(|&a, &b| {
            (rest[a] - skeleton.rest[j])
                .norm()
                .total_cmp(&(rest[b] - skeleton.rest[j]).norm())
                .then(a.cmp(&b))
        });
        let k = cand.len().min(4);
        for &v in &cand[..k] {
            matrix.set(&[row, v], 1.0 / k as f64);
        }
    }
    JointRegressor {
        matrix,
        joint_names: EVAL_JOINTS.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut q = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = q.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    q.push_back(w);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    #[test]
    fn default_body_layout() {
        let body = generate_toy_body(&BodyConfig::default()).unwrap();
        let g = &body.graph;
        assert_eq!(g.n_vertices(), 96);
        assert_eq!(g.n_coarse(), 24);
        let ranges = g.fine.part_ranges().unwrap();
        assert_eq!(ranges.len(), 8);
        assert_eq!(ranges[0].0, 0);
        assert_eq!(ranges[7].1, 95);
        for w in ranges.windows(2) {
            assert_eq!(w[0].1 + 1, w[1].0);
        }
        assert!(connected(96, &g.fine.edges));
        assert!(connected(24, &g.coarse.edges));
    }

    #[test]
    fn deterministic_per_config() {
        let cfg = BodyConfig {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(generate_toy_body(&cfg).unwrap(), generate_toy_body(&cfg).unwrap());
    }

    #[test]
    fn config_errors() {
        let one_part = BodyConfig {
            parts: vec![BodyPart::Torso],
            ..Default::default()
        };
        assert!(generate_toy_body(&one_part).is_err());
        let tiny = BodyConfig {
            vertices_per_part: 1,
            coarse_per_part: 1,
            ..Default::default()
        };
        assert!(generate_toy_body(&tiny).is_err());
    }

    #[test]
    fn miniature_body() {
        let cfg = BodyConfig {
            vertices_per_part: 2,
            coarse_per_part: 1,
            ..Default::default()
        };
        let body = generate_toy_body(&cfg).unwrap();
        assert_eq!(body.graph.n_vertices(), 16);
        assert_eq!(body.graph.n_coarse(), 8);
        assert!(connected(16, &body.graph.fine.edges));
    }

    #[test]
    fn regressor_rows_are_convex() {
        let body = generate_toy_body(&BodyConfig::default()).unwrap();
        let m = &body.regressor.matrix;
        for j in 0..14 {
            let row = &m.data()[j * 96..(j + 1) * 96];
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rest_pose_reproduces_rest_vertices() {
        let body = generate_toy_body(&BodyConfig::default()).unwrap();
        let ident = vec![Rotation3::identity(); body.rig.skeleton.len()];
        let (v, j) = body.rig.pose(&ident, Vector3::zeros());
        for (a, b) in v.iter().zip(&body.rig.rest_vertices) {
            assert!((a - b).norm() < 1e-12);
        }
        assert_eq!(j, body.rig.skeleton.rest);
    }
}
