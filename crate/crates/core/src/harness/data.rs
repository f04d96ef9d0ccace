//! Datasets on disk and their tensor form.

use super::{DataConfig, HarnessError, Result};
use crate::graph::{generate_toy_body, BodyConfig, GraphDocument, ToyBody};
use crate::synth::{generate_dataset, read_sequence, write_sequence, MotionSequence};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One sequence in model units: `input: [T, n·4]` holds masked coordinates
/// and the visibility flag per vertex; `target: [T, n, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub target: Tensor,
}

impl Sample {
    pub fn from_sequence(seq: &MotionSequence, unit_mm: f64) -> Result<Self> {
        let (t, n) = (seq.frames, seq.n_vertices);
        let mut input = Vec::with_capacity(t * n * 4);
        for i in 0..t * n {
            let m = seq.mask[i];
            for k in 0..3 {
                input.push(seq.observations[i * 3 + k] * m / unit_mm);
            }
            input.push(m);
        }
        Ok(Self {
            input: Tensor::new(&[t, n * 4], input)?,
            target: Tensor::new(&[t, n, 3], seq.gt_vertices.iter().map(|v| v / unit_mm).collect())?,
        })
    }

    pub fn frames(&self) -> usize {
        self.input.shape()[0]
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    body: BodyConfig,
    data: DataConfig,
    train: Vec<String>,
    test: Vec<String>,
}

const MANIFEST_FORMAT: &str = "tempograph.dataset";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub body: ToyBody,
    pub train: Vec<MotionSequence>,
    pub test: Vec<MotionSequence>,
}

impl Dataset {
    /// Train and test sequences come from one seeded stream, train first.
    pub fn generate(body: &BodyConfig, data: &DataConfig) -> Result<Self> {
        let body = generate_toy_body(body)?;
        let mut all = generate_dataset(&body, &data.motion, &data.corruption, data.train + data.test, data.seed)?;
        let test = all.split_off(data.train);
        Ok(Self { body, train: all, test })
    }

    /// Test sequences with uncorrupted observations.
    pub fn clean_test(&self) -> Vec<MotionSequence> {
        self.test
            .iter()
            .map(|s| {
                let mut c = s.clone();
                c.clean_observations();
                c
            })
            .collect()
    }

    pub fn save(&self, dir: &Path, data: &DataConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut names = (Vec::new(), Vec::new());
        for (split, seqs, out) in [("train", &self.train, &mut names.0), ("test", &self.test, &mut names.1)] {
            for (i, s) in seqs.iter().enumerate() {
                let stem = format!("{split}_{i:05}");
                write_sequence(s, &dir.join(&stem))?;
                out.push(stem);
            }
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            body: self.body.config.clone(),
            data: data.clone(),
            train: names.0,
            test: names.1,
        };
        std::fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&manifest).expect("manifest"))?;
        let verts: Vec<[f64; 3]> = self.body.rig.rest_vertices.iter().map(|v| [v.x, v.y, v.z]).collect();
        std::fs::write(dir.join("graph.json"), GraphDocument::from_graph(&self.body.graph, Some(&verts)).to_json())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("dataset.json"))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| HarnessError::Data(format!("manifest: {e}")))?;
        if m.format != MANIFEST_FORMAT || m.version != 1 {
            return Err(HarnessError::Data(format!("unsupported manifest {} v{}", m.format, m.version)));
        }
        let body = generate_toy_body(&m.body)?;
        let stored = GraphDocument::from_json(&std::fs::read_to_string(dir.join("graph.json"))?)?.to_graph()?;
        if stored.fine.edges != body.graph.fine.edges || stored.fine.part_labels != body.graph.fine.part_labels {
            return Err(HarnessError::Data("graph.json does not match the body config".into()));
        }
        let read = |names: &[String]| -> Result<Vec<MotionSequence>> {
            names
                .iter()
                .map(|s| {
                    let seq = read_sequence(&dir.join(s))?;
                    if seq.n_vertices != body.graph.n_vertices() {
                        return Err(HarnessError::Data(format!("{s} has {} vertices", seq.n_vertices)));
                    }
                    Ok(seq)
                })
                .collect()
        };
        Ok(Self {
            train: read(&m.train)?,
            test: read(&m.test)?,
            body,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip() {
        let data = DataConfig {
            train: 3,
            test: 2,
            ..Default::default()
        };
        let ds = Dataset::generate(&BodyConfig::default(), &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path(), &data).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn sample_masks_hidden_vertices() {
        let data = DataConfig {
            train: 1,
            test: 0,
            ..Default::default()
        };
        let ds = Dataset::generate(&BodyConfig::default(), &data).unwrap();
        let s = Sample::from_sequence(&ds.train[0], 100.0).unwrap();
        assert_eq!(s.input.shape(), &[16, 96 * 4]);
        let seq = &ds.train[0];
        for (i, m) in seq.mask.iter().enumerate() {
            assert_eq!(s.input.data()[i * 4 + 3], *m);
        }
    }
}
