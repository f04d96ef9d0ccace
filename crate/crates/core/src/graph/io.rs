//! JSON export/import of a [`BodyGraph`].

use super::{BodyGraph, GraphError, MeshLevel, Normalization};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const GRAPH_FORMAT: &str = "tempograph.graph";
pub const GRAPH_VERSION: u32 = 1;

/// Serialized graph. Matrices are row-major nested arrays. Adjacency is
/// stored for inspection but rebuilt from the edges on import and compared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub format: String,
    pub version: u32,
    pub normalization: Normalization,
    pub n_vertices: usize,
    pub n_coarse: usize,
    pub part_names: Vec<String>,
    pub part_labels: Vec<usize>,
    pub coarse_part_labels: Vec<usize>,
    pub edges: Vec<[usize; 2]>,
    pub coarse_edges: Vec<[usize; 2]>,
    /// Rest positions in millimetres, when exported from a generated body.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertices: Option<Vec<[f64; 3]>>,
    pub adjacency: Vec<Vec<f64>>,
    pub coarse_adjacency: Vec<Vec<f64>>,
    pub down: Vec<Vec<f64>>,
    pub up: Vec<Vec<f64>>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

fn tensor(what: &str, m: &[Vec<f64>], r: usize, c: usize) -> Result<Tensor, GraphError> {
    if m.len() != r || m.iter().any(|row| row.len() != c) {
        return Err(GraphError::Document(format!("{what} must be {r}x{c}")));
    }
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GraphError::Document(format!("{what} contains non-finite values")));
    }
    Ok(Tensor::new(&[r, c], m.concat())?)
}

fn pairs(e: &[(usize, usize)]) -> Vec<[usize; 2]> {
    e.iter().map(|&(a, b)| [a, b]).collect()
}

fn tuples(e: &[[usize; 2]]) -> Vec<(usize, usize)> {
    e.iter().map(|&[a, b]| (a, b)).collect()
}

impl GraphDocument {
    pub fn from_graph(graph: &BodyGraph, vertices: Option<&[[f64; 3]]>) -> Self {
        Self {
            format: GRAPH_FORMAT.into(),
            version: GRAPH_VERSION,
            normalization: graph.normalization,
            n_vertices: graph.n_vertices(),
            n_coarse: graph.n_coarse(),
            part_names: graph.part_names.clone(),
            part_labels: graph.fine.part_labels.clone(),
            coarse_part_labels: graph.coarse.part_labels.clone(),
            edges: pairs(&graph.fine.edges),
            coarse_edges: pairs(&graph.coarse.edges),
            vertices: vertices.map(<[_]>::to_vec),
            adjacency: rows(&graph.fine.adjacency),
            coarse_adjacency: rows(&graph.coarse.adjacency),
            down: rows(&graph.down),
            up: rows(&graph.up),
        }
    }

    pub fn to_graph(&self) -> Result<BodyGraph, GraphError> {
        if self.format != GRAPH_FORMAT || self.version != GRAPH_VERSION {
            return Err(GraphError::Document(format!(
                "unsupported format {} v{}",
                self.format, self.version
            )));
        }
        let (n, nc) = (self.n_vertices, self.n_coarse);
        if let Some(v) = &self.vertices {
            if v.len() != n {
                return Err(GraphError::Document(format!("expected {n} vertices, got {}", v.len())));
            }
        }
        let fine = MeshLevel::new(n, &tuples(&self.edges), self.part_labels.clone(), self.normalization)?;
        let coarse = MeshLevel::new(nc, &tuples(&self.coarse_edges), self.coarse_part_labels.clone(), self.normalization)?;
        for (what, stored, level) in [
            ("adjacency", &self.adjacency, &fine),
            ("coarse_adjacency", &self.coarse_adjacency, &coarse),
        ] {
            let t = tensor(what, stored, level.n_vertices, level.n_vertices)?;
            if t.max_abs_diff(&level.adjacency) > 1e-12 {
                return Err(GraphError::Document(format!("{what} disagrees with edges")));
            }
        }
        let max_label = self.part_labels.iter().max().map_or(0, |&l| l + 1);
        if max_label != self.part_names.len() {
            return Err(GraphError::Document(format!(
                "{} part names for {max_label} labels",
                self.part_names.len()
            )));
        }
        Ok(BodyGraph {
            fine,
            coarse,
            down: tensor("down", &self.down, nc, n)?,
            up: tensor("up", &self.up, n, nc)?,
            part_names: self.part_names.clone(),
            normalization: self.normalization,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph document serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, GraphError> {
        serde_json::from_str(s).map_err(|e| GraphError::Document(e.to_string()))
    }
}
