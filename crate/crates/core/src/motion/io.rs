//! Motion container files and a tab-separated export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MotionPair, PoseLayout};
use crate::checkpoint::{atomic_write, decode_container, encode_container};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"IMMO";
const SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionHeader {
    pub joints: usize,
    pub frames: usize,
    pub fps: f64,
    pub label: usize,
    pub pose_dim: usize,
    pub persons: usize,
    /// Identifies the normalization statistics of the producing model.
    pub norm_stats_id: String,
}

/// Writes `pair` in physical units as little-endian f32, person-major.
pub fn write_motion(path: &Path, pair: &MotionPair, norm_stats_id: &str) -> Result<()> {
    let header = MotionHeader {
        joints: pair.joints,
        frames: pair.frames,
        fps: pair.fps,
        label: pair.label,
        pose_dim: pair.layout().width(),
        persons: 2,
        norm_stats_id: norm_stats_id.to_string(),
    };
    let mut payload = Vec::with_capacity(2 * pair.persons[0].len() * 4);
    for v in pair.persons.iter().flatten() {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    atomic_write(path, &encode_container(MAGIC, SCHEMA, &serde_json::to_vec(&header)?, &payload))
}

pub fn read_motion(path: &Path) -> Result<(MotionHeader, MotionPair)> {
    let bytes = std::fs::read(path)?;
    let (schema, header, payload) = decode_container(&bytes, MAGIC)?;
    if schema != SCHEMA {
        return Err(Error::Format(format!("motion schema {schema}, this build reads {SCHEMA}")));
    }
    let header: MotionHeader = serde_json::from_slice(header)?;
    let per_person = header.frames * header.pose_dim;
    if header.persons != 2 || header.pose_dim != (PoseLayout { joints: header.joints }).width() || payload.len() != 2 * per_person * 4 {
        return Err(Error::Format("motion header disagrees with payload".into()));
    }
    let values: Vec<f64> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    let pair = MotionPair {
        persons: [values[..per_person].to_vec(), values[per_person..].to_vec()],
        frames: header.frames,
        joints: header.joints,
        label: header.label,
        fps: header.fps,
    };
    Ok((header, pair))
}

/// One frame per line, prefixed by person and frame index.
pub fn write_tsv(path: &Path, pair: &MotionPair) -> Result<()> {
    let j = pair.joints;
    let mut cols = vec!["person".to_string(), "frame".to_string()];
    for (prefix, comps) in [("pos", 3), ("vel", 3)] {
        for k in 0..j {
            for a in ["x", "y", "z"].iter().take(comps) {
                cols.push(format!("{prefix}{k}_{a}"));
            }
        }
    }
    for k in 0..j {
        for i in 0..6 {
            cols.push(format!("rot{k}_{i}"));
        }
    }
    cols.extend((0..4).map(|c| format!("contact{c}")));

    let mut out = cols.join("\t");
    out.push('\n');
    for p in 0..2 {
        for t in 0..pair.frames {
            write!(out, "{p}\t{t}").expect("string write");
            for v in pair.frame(p, t) {
                write!(out, "\t{}", *v as f32).expect("string write");
            }
            out.push('\n');
        }
    }
    atomic_write(path, out.as_bytes())
}
