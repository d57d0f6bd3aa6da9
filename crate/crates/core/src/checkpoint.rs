//! Versioned binary checkpoint container.
//!
//! ```text
//! offset    size  field
//! 0         4     magic "PMCK"
//! 4         4     format version, u32 little-endian (currently 1)
//! 8         8     header length H, u64 little-endian
//! 16        H     header, UTF-8 JSON (see `Header`)
//! 16+H      8*K   payload: every entry's values as f64 little-endian,
//!                 concatenated in header order (K = total element count)
//! end-32    32    SHA-256 of every preceding byte
//! ```
//!
//! Entry names are `params/<group>/<layer>/<param>`,
//! `optim/velocity/<group>/<layer>/<param>`, `memory/rows` (`N x C`) and
//! `memory/class_seen` (`N`, stored as 0.0 / 1.0).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episodic::{EpisodeState, TrainMode};
use crate::error::{Error, Result};
use crate::graph::{Group, ParamRecord, ParamValues};
use crate::memory::MemoryMatrix;
use crate::nets::SegNetConfig;

pub const MAGIC: &[u8; 4] = b"PMCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    net: SegNetConfig,
    mode: TrainMode,
    iteration: usize,
    seed: u64,
    entries: Vec<EntryHeader>,
}

/// Everything needed to evaluate a model or resume its training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: SegNetConfig,
    pub mode: TrainMode,
    pub state: EpisodeState,
}

const PARAMS: &str = "params/";
const VELOCITY: &str = "optim/velocity/";
const MEMORY_ROWS: &str = "memory/rows";
const MEMORY_SEEN: &str = "memory/class_seen";

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
            entries.push(EntryHeader { name, shape });
            payload.extend_from_slice(data);
        };
        for r in &self.state.params.records {
            push(format!("{PARAMS}{}", r.name), r.shape.clone(), &r.data);
        }
        for r in &self.state.velocity.records {
            push(format!("{VELOCITY}{}", r.name), r.shape.clone(), &r.data);
        }
        if let Some(m) = &self.state.memory {
            push(MEMORY_ROWS.into(), vec![m.num_classes(), m.channels()], m.rows());
            let seen: Vec<f64> = m.class_seen().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            push(MEMORY_SEEN.into(), vec![m.num_classes()], &seen);
        }
        let header = Header {
            net: self.net.clone(),
            mode: self.mode,
            iteration: self.state.iteration,
            seed: self.state.seed,
            entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let bad = |detail: String| Error::Format { path: path.to_path_buf(), detail };
        if bytes.len() < 16 + DIGEST_LEN || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic or truncated)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("header overruns file".into()))?;
        let header: Header =
            serde_json::from_slice(&body[16..header_end]).map_err(|e| bad(format!("header: {e}")))?;
        let mut values = body[header_end..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        if (body.len() - header_end) % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values".into()));
        }

        let mut params = ParamValues::default();
        let mut velocity = ParamValues::default();
        let mut rows = None;
        let mut seen = None;
        for e in &header.entries {
            let n: usize = e.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(bad(format!("payload ends inside entry `{}`", e.name)));
            }
            let record = |name: &str| -> Result<ParamRecord> {
                let group = name.split('/').next().and_then(Group::parse).ok_or_else(|| bad(format!("entry `{}` has no group", e.name)))?;
                Ok(ParamRecord { group, name: name.to_string(), shape: e.shape.clone(), data: data.clone() })
            };
            if let Some(name) = e.name.strip_prefix(PARAMS) {
                params.records.push(record(name)?);
            } else if let Some(name) = e.name.strip_prefix(VELOCITY) {
                velocity.records.push(record(name)?);
            } else if e.name == MEMORY_ROWS {
                rows = Some((data, e.shape.clone()));
            } else if e.name == MEMORY_SEEN {
                seen = Some(data.iter().map(|&v| v != 0.0).collect::<Vec<bool>>());
            } else {
                return Err(bad(format!("unknown entry `{}`", e.name)));
            }
        }
        if values.next().is_some() {
            return Err(bad("trailing payload values".into()));
        }
        let memory = match (rows, seen) {
            (Some((data, shape)), Some(seen)) if shape.len() == 2 => {
                Some(MemoryMatrix::from_rows(data, shape[0], shape[1], seen).map_err(|e| bad(e.to_string()))?)
            }
            (None, None) => None,
            _ => return Err(bad("incomplete memory entries".into())),
        };
        if velocity.records.len() != params.records.len() {
            return Err(bad("optimizer state does not mirror the parameters".into()));
        }
        Ok(Checkpoint {
            net: header.net,
            mode: header.mode,
            state: EpisodeState { params, memory, velocity, iteration: header.iteration, seed: header.seed },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::raster::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
