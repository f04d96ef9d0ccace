//! Explicit body-mesh topology and graph convolution.
//!
//! A [`BodyGraph`] carries two resolutions of the same body: the fine mesh
//! and a coarse mesh obtained by uniform pooling of contiguous vertex groups.
//! Each level has its own normalized adjacency. `down` pools fine signals to
//! the coarse level; `up` is its Moore–Penrose pseudo-inverse.

mod io;
mod toy;

pub use io::GraphDocument;
pub use toy::{generate_toy_body, BodyConfig, BodyPart, JointRegressor, Rig, Skeleton, ToyBody, EVAL_JOINTS};

use crate::autodiff::{Tape, Var};
use crate::nn::{Activation, Bound, ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("edge ({0}, {1}) references a vertex outside 0..{2}")]
    VertexOutOfRange(usize, usize, usize),
    #[error("self-loop on vertex {0}; self-loops are added internally")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("invalid body config: {0}")]
    Config(String),
    #[error("{what}: expected {expected} rows, got {got}")]
    Resolution {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("graph document: {0}")]
    Document(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, GraphError>;

/// How `A + I` is normalized by vertex degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `D^{-1/2} (A + I) D^{-1/2}`
    #[default]
    Symmetric,
    /// `D^{-1} (A + I)`
    Row,
}

/// Sorted, deduplicated `(min, max)` edge list, validated against `n`.
pub fn canonical_edges(edges: &[(usize, usize)], n: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(edges.len());
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(GraphError::VertexOutOfRange(a, b, n));
        }
        if a == b {
            return Err(GraphError::SelfLoop(a));
        }
        out.push((a.min(b), a.max(b)));
    }
    out.sort_unstable();
    if let Some(w) = out.windows(2).find(|w| w[0] == w[1]) {
        return Err(GraphError::DuplicateEdge(w[0].0, w[0].1));
    }
    Ok(out)
}

/// Normalized adjacency with self-loops from an undirected edge list.
pub fn build_adjacency(edges: &[(usize, usize)], n: usize, norm: Normalization) -> Result<Tensor> {
    let edges = canonical_edges(edges, n)?;
    let mut a = Tensor::eye(n);
    for &(i, j) in &edges {
        a.set(&[i, j], 1.0);
        a.set(&[j, i], 1.0);
    }
    let deg: Vec<f64> = (0..n).map(|i| a.data()[i * n..(i + 1) * n].iter().sum()).collect();
    let data = a.data_mut();
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] *= match norm {
                Normalization::Symmetric => 1.0 / (deg[i] * deg[j]).sqrt(),
                Normalization::Row => 1.0 / deg[i],
            };
        }
    }
    Ok(a)
}

/// One resolution of the body mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshLevel {
    pub n_vertices: usize,
    pub edges: Vec<(usize, usize)>,
    pub adjacency: Tensor,
    pub part_labels: Vec<usize>,
}

impl MeshLevel {
    pub fn new(n_vertices: usize, edges: &[(usize, usize)], part_labels: Vec<usize>, norm: Normalization) -> Result<Self> {
        if part_labels.len() != n_vertices {
            return Err(GraphError::Resolution {
                what: "part labels",
                expected: n_vertices,
                got: part_labels.len(),
            });
        }
        let edges = canonical_edges(edges, n_vertices)?;
        let adjacency = build_adjacency(&edges, n_vertices, norm)?;
        Ok(Self {
            n_vertices,
            edges,
            adjacency,
            part_labels,
        })
    }

    /// Inclusive `(start, end)` vertex range of every part label, in label order.
    /// `None` if some label's vertices are not contiguous.
    pub fn part_ranges(&self) -> Option<Vec<(usize, usize)>> {
        let m = self.part_labels.iter().max().map_or(0, |&l| l + 1);
        let mut ranges = Vec::with_capacity(m);
        for label in 0..m {
            let s = self.part_labels.iter().position(|&l| l == label)?;
            let e = self.part_labels.iter().rposition(|&l| l == label)?;
            if self.part_labels[s..=e].iter().any(|&l| l != label) {
                return None;
            }
            ranges.push((s, e));
        }
        Some(ranges)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyGraph {
    pub fine: MeshLevel,
    pub coarse: MeshLevel,
    /// `n_coarse × n` pooling matrix.
    pub down: Tensor,
    /// `n × n_coarse` pseudo-inverse of `down`.
    pub up: Tensor,
    pub part_names: Vec<String>,
    pub normalization: Normalization,
}

impl BodyGraph {
    /// Builds both levels from fine connectivity and a fine→coarse group
    /// assignment; coarse vertices are connected when any fine edge joins
    /// their groups.
    pub fn from_groups(
        n: usize,
        edges: &[(usize, usize)],
        part_labels: Vec<usize>,
        groups: &[usize],
        part_names: Vec<String>,
        norm: Normalization,
    ) -> Result<Self> {
        if groups.len() != n {
            return Err(GraphError::Resolution {
                what: "coarse groups",
                expected: n,
                got: groups.len(),
            });
        }
        let fine = MeshLevel::new(n, edges, part_labels, norm)?;
        let nc = groups.iter().max().map_or(0, |&g| g + 1);
        let mut coarse_edges: Vec<(usize, usize)> = fine
            .edges
            .iter()
            .map(|&(a, b)| (groups[a].min(groups[b]), groups[a].max(groups[b])))
            .filter(|(a, b)| a != b)
            .collect();
        coarse_edges.sort_unstable();
        coarse_edges.dedup();
        let mut coarse_labels = vec![0; nc];
        let mut counts = vec![0usize; nc];
        for (v, &g) in groups.iter().enumerate() {
            coarse_labels[g] = fine.part_labels[v];
            counts[g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(GraphError::Config(format!("coarse vertex {empty} has no fine vertices")));
        }
        let coarse = MeshLevel::new(nc, &coarse_edges, coarse_labels, norm)?;
        let down = Tensor::from_fn(&[nc, n], |k| {
            let (c, v) = (k / n, k % n);
            if groups[v] == c {
                1.0 / counts[c] as f64
            } else {
                0.0
            }
        });
        let up = pseudo_inverse(&down)?;
        Ok(Self {
            fine,
            coarse,
            down,
            up,
            part_names,
            normalization: norm,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.fine.n_vertices
    }

    pub fn n_coarse(&self) -> usize {
        self.coarse.n_vertices
    }

    pub fn n_parts(&self) -> usize {
        self.part_names.len()
    }

    pub fn matrix(&self, dir: Direction) -> &Tensor {
        match dir {
            Direction::Down => &self.down,
            Direction::Up => &self.up,
        }
    }

    /// `M · Y` with the stored down/up matrix; `y` is `[n_src, c]` or `[F, n_src, c]`.
    pub fn resample(&self, tape: &mut Tape, y: Var, dir: Direction) -> Result<Var> {
        let m = tape.constant(self.matrix(dir).clone());
        resample_with(tape, m, y)
    }
}

/// `M · Y` with an explicit (possibly trainable) matrix `m: [n_dst, n_src]`.
pub fn resample_with(tape: &mut Tape, m: Var, y: Var) -> Result<Var> {
    let n_src = tape.shape(m)[1];
    let rows = row_count(tape.shape(y));
    if rows != n_src {
        return Err(GraphError::Resolution {
            what: "resample",
            expected: n_src,
            got: rows,
        });
    }
    Ok(left_multiply(tape, m, y)?)
}

fn row_count(shape: &[usize]) -> usize {
    match shape.len() {
        2 => shape[0],
        3 => shape[1],
        _ => 0,
    }
}

/// Applies `m: [p, n]` to every `[n, c]` slice of `y` (rank 2 or 3).
pub fn left_multiply(tape: &mut Tape, m: Var, y: Var) -> std::result::Result<Var, TensorError> {
    let shape = tape.shape(y).to_vec();
    match shape.len() {
        2 => tape.matmul(m, y),
        3 => {
            let (f, n, c) = (shape[0], shape[1], shape[2]);
            let p = tape.shape(m)[0];
            let yt = tape.permute(y, &[1, 0, 2])?;
            let yt = tape.reshape(yt, &[n, f * c])?;
            let out = tape.matmul(m, yt)?;
            let out = tape.reshape(out, &[p, f, c])?;
            tape.permute(out, &[1, 0, 2])
        }
        _ => Err(TensorError::InvalidArgument {
            op: "left_multiply",
            msg: format!("expected rank 2 or 3, got {shape:?}"),
        }),
    }
}

/// `σ(Ā · Y · W)`; `y` is `[n, c_in]` or `[F, n, c_in]`.
pub fn graph_conv(tape: &mut Tape, adjacency: Var, y: Var, weight: Var, act: Activation) -> Result<Var> {
    let n = tape.shape(adjacency)[0];
    let rows = row_count(tape.shape(y));
    if rows != n {
        return Err(GraphError::Resolution {
            what: "graph_conv input",
            expected: n,
            got: rows,
        });
    }
    let c_in = *tape.shape(y).last().unwrap();
    if tape.shape(weight)[0] != c_in {
        return Err(TensorError::ShapeMismatch {
            op: "graph_conv",
            left: tape.shape(y).to_vec(),
            right: tape.shape(weight).to_vec(),
        }
        .into());
    }
    let mixed = left_multiply(tape, adjacency, y)?;
    let shape = tape.shape(mixed).to_vec();
    let flat = tape.reshape(mixed, &[shape.iter().product::<usize>() / c_in, c_in])?;
    let out = tape.matmul(flat, weight)?;
    let c_out = tape.shape(weight)[1];
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = c_out;
    let out = tape.reshape(out, &out_shape)?;
    Ok(act.apply(tape, out)?)
}

/// Trainable `W_G` plus activation.
#[derive(Clone, Copy, Debug)]
pub struct GraphConvLayer {
    pub weight: ParamId,
    pub activation: Activation,
    pub c_in: usize,
    pub c_out: usize,
}

impl GraphConvLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (c_in + c_out) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[c_in, c_out], -limit, limit, rng));
        Self {
            weight,
            activation,
            c_in,
            c_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, adjacency: Var, y: Var) -> Result<Var> {
        graph_conv(tape, adjacency, y, p.var(self.weight), self.activation)
    }
}

pub(crate) fn pseudo_inverse(m: &Tensor) -> Result<Tensor> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mat = DMatrix::from_row_slice(r, c, m.data());
    let pinv = mat
        .pseudo_inverse(1e-12)
        .map_err(|e| GraphError::Config(format!("pseudo-inverse failed: {e}")))?;
    let mut data = Vec::with_capacity(r * c);
    for i in 0..c {
        for j in 0..r {
            data.push(pinv[(i, j)]);
        }
    }
    Ok(Tensor::new(&[c, r], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge_adjacency() {
        let a = build_adjacency(&[(0, 1)], 2, Normalization::Symmetric).unwrap();
        assert_eq!(a.data(), &[0.5; 4]);
    }

    #[test]
    fn no_edges_is_identity() {
        let a = build_adjacency(&[], 3, Normalization::Symmetric).unwrap();
        assert_eq!(a, Tensor::eye(3));
    }

    #[test]
    fn triangle_is_constant_third() {
        let a = build_adjacency(&[(0, 1), (1, 2), (2, 0)], 3, Normalization::Symmetric).unwrap();
        for v in a.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn path_graph_hand_values() {
        // degrees with self-loops: 2, 3, 2
        let a = build_adjacency(&[(0, 1), (1, 2)], 3, Normalization::Symmetric).unwrap();
        assert!((a.get(&[0, 0]) - 0.5).abs() < 1e-15);
        assert!((a.get(&[1, 1]) - 1.0 / 3.0).abs() < 1e-15);
        assert!((a.get(&[0, 1]) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert_eq!(a.get(&[0, 2]), 0.0);
        let r = build_adjacency(&[(0, 1), (1, 2)], 3, Normalization::Row).unwrap();
        assert!((r.get(&[1, 0]) - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.get(&[0, 1]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn adjacency_errors() {
        assert_eq!(
            build_adjacency(&[(0, 3)], 3, Normalization::Symmetric),
            Err(GraphError::VertexOutOfRange(0, 3, 3))
        );
        assert_eq!(build_adjacency(&[(1, 1)], 3, Normalization::Symmetric), Err(GraphError::SelfLoop(1)));
        assert_eq!(
            build_adjacency(&[(0, 1), (1, 0)], 3, Normalization::Symmetric),
            Err(GraphError::DuplicateEdge(0, 1))
        );
    }

    #[test]
    fn graph_conv_examples() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::eye(3));
        let y = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[0.0, 3.0], &[4.0, 0.5]]).unwrap());
        let w = tape.constant(Tensor::eye(2));
        let out = graph_conv(&mut tape, eye, y, w, Activation::Relu).unwrap();
        assert_eq!(tape.value(out), tape.value(y));

        let a = tape.constant(build_adjacency(&[(0, 1)], 2, Normalization::Symmetric).unwrap());
        let y = tape.constant(Tensor::from_rows(&[&[2.0], &[4.0]]).unwrap());
        let w = tape.constant(Tensor::from_rows(&[&[1.0]]).unwrap());
        let out = graph_conv(&mut tape, a, y, w, Activation::Relu).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 3.0]);
    }

    #[test]
    fn graph_conv_rejects_wrong_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::eye(3));
        let y = tape.constant(Tensor::ones(&[2, 2]));
        let w = tape.constant(Tensor::eye(2));
        assert!(matches!(
            graph_conv(&mut tape, a, y, w, Activation::Relu),
            Err(GraphError::Resolution { expected: 3, got: 2, .. })
        ));
    }

    #[test]
    fn part_ranges_detect_non_contiguous_labels() {
        let lvl = MeshLevel::new(4, &[(0, 1)], vec![0, 1, 0, 1], Normalization::Symmetric).unwrap();
        assert_eq!(lvl.part_ranges(), None);
        let lvl = MeshLevel::new(4, &[(0, 1)], vec![0, 0, 1, 1], Normalization::Symmetric).unwrap();
        assert_eq!(lvl.part_ranges(), Some(vec![(0, 1), (2, 3)]));
    }
}
