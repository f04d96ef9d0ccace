//! Binary sequence container and its JSON corruption-log sidecar.

use super::{CorruptionEvent, MotionSequence, Result, SynthError};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SEQUENCE_MAGIC: [u8; 4] = *b"TGSQ";
pub const SEQUENCE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceHeader {
    pub version: u32,
    pub frames: u32,
    pub n_vertices: u32,
    pub n_joints: u32,
}

impl SequenceHeader {
    fn body_values(&self) -> usize {
        let (t, n, j) = (self.frames as usize, self.n_vertices as usize, self.n_joints as usize);
        t * n * 3 + t * j * 3 + t * n * 3 + t * n
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u32,
    frames: usize,
    events: Vec<CorruptionEvent>,
}

const SIDECAR_FORMAT: &str = "tempograph.corruption";

impl MotionSequence {
    /// Header followed by `gt_vertices`, `gt_joints`, `observations`, `mask`
    /// as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * (self.gt_vertices.len() * 2 + self.gt_joints.len() + self.mask.len()));
        out.extend_from_slice(&SEQUENCE_MAGIC);
        for v in [SEQUENCE_VERSION, self.frames as u32, self.n_vertices as u32, self.n_joints as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for arr in [&self.gt_vertices, &self.gt_joints, &self.observations, &self.mask] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses [`MotionSequence::to_bytes`] output; the corruption log is empty.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let h = parse_header(bytes)?;
        let expected = HEADER_LEN + 8 * h.body_values();
        if bytes.len() != expected {
            return Err(SynthError::Format(format!("expected {expected} bytes, got {}", bytes.len())));
        }
        let mut vals = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let (t, n, j) = (h.frames as usize, h.n_vertices as usize, h.n_joints as usize);
        let mut take = |k: usize| -> Vec<f64> { vals.by_ref().take(k).collect() };
        Ok(Self {
            frames: t,
            n_vertices: n,
            n_joints: j,
            gt_vertices: take(t * n * 3),
            gt_joints: take(t * j * 3),
            observations: take(t * n * 3),
            mask: take(t * n),
            corruption_log: Vec::new(),
        })
    }

    pub fn log_json(&self) -> String {
        serde_json::to_string_pretty(&Sidecar {
            format: SIDECAR_FORMAT.into(),
            version: SEQUENCE_VERSION,
            frames: self.frames,
            events: self.corruption_log.clone(),
        })
        .expect("sidecar serializes")
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<SequenceHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(SynthError::Format(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != SEQUENCE_MAGIC {
        return Err(SynthError::Format("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4-byte word"));
    let h = SequenceHeader {
        version: word(0),
        frames: word(1),
        n_vertices: word(2),
        n_joints: word(3),
    };
    if h.version != SEQUENCE_VERSION {
        return Err(SynthError::Format(format!("unsupported version {}", h.version)));
    }
    Ok(h)
}

/// Writes `<stem>.bin` and `<stem>.json` next to each other.
pub fn write_sequence(seq: &MotionSequence, stem: &Path) -> Result<()> {
    std::fs::write(stem.with_extension("bin"), seq.to_bytes())?;
    std::fs::write(stem.with_extension("json"), seq.log_json())?;
    Ok(())
}

pub fn read_sequence(stem: &Path) -> Result<MotionSequence> {
    let mut seq = MotionSequence::from_bytes(&std::fs::read(stem.with_extension("bin"))?)?;
    let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)
        .map_err(|e| SynthError::Format(format!("sidecar: {e}")))?;
    if side.format != SIDECAR_FORMAT || side.frames != seq.frames {
        return Err(SynthError::Format("sidecar does not match sequence".into()));
    }
    seq.corruption_log = side.events;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_toy_body, BodyConfig};
    use crate::synth::{generate_dataset, CorruptionConfig, MotionConfig};

    #[test]
    fn roundtrip_through_files() {
        let body = generate_toy_body(&BodyConfig::default()).unwrap();
        let seqs = generate_dataset(&body, &MotionConfig::default(), &CorruptionConfig::default(), 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (i, s) in seqs.iter().enumerate() {
            let stem = dir.path().join(format!("seq_{i:05}"));
            write_sequence(s, &stem).unwrap();
            assert_eq!(&read_sequence(&stem).unwrap(), s);
        }
    }

    #[test]
    fn header_layout() {
        let body = generate_toy_body(&BodyConfig::default()).unwrap();
        let s = &generate_dataset(&body, &MotionConfig::default(), &CorruptionConfig::clean(), 1, 0).unwrap()[0];
        let b = s.to_bytes();
        assert_eq!(&b[..4], b"TGSQ");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 16);
        assert_eq!(b.len(), 20 + 8 * (16 * 96 * 7 + 16 * 19 * 3));
        assert_eq!(f64::from_le_bytes(b[20..28].try_into().unwrap()), s.gt_vertices[0]);
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(MotionSequence::from_bytes(&bad).is_err());
        assert!(MotionSequence::from_bytes(&b[..b.len() - 1]).is_err());
    }
}
