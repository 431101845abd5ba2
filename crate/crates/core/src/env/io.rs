//! On-disk transition format: a little-endian `f32` record stream with a JSON
//! sidecar describing shapes.
//!
//! The data file starts with the 8-byte magic `CBMDATA1`, followed by
//! `n_transitions` records of `(s, a, r, s_next)` in declaration order. The
//! sidecar lives next to the data file at `<path>.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ReplayBuffer, Transition};
use crate::error::{Error, Result};

pub const BUFFER_MAGIC: &[u8; 8] = b"CBMDATA1";

/// Shape metadata stored beside the binary record stream.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct BufferSidecar {
    pub schema_version: u32,
    pub d_s: usize,
    pub d_a: usize,
    pub n_tasks: usize,
    pub n_transitions: usize,
    pub horizon: usize,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// Writes `buffer` to `path` and its sidecar to `<path>.json`.
pub fn save_buffer(buffer: &ReplayBuffer, path: &Path) -> Result<()> {
    let sidecar = BufferSidecar {
        schema_version: 1,
        d_s: buffer.d_s(),
        d_a: buffer.d_a(),
        n_tasks: buffer.n_tasks(),
        n_transitions: buffer.len(),
        horizon: buffer.horizon(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BUFFER_MAGIC)?;
    for t in buffer.iter() {
        for v in t.s.iter().chain(&t.a).chain(&t.r).chain(&t.s_next) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(sidecar_path(path))?), &sidecar)?;
    Ok(())
}

/// Loads a buffer written by [`save_buffer`]. Episode positions are
/// reconstructed as `index % horizon`, matching how collection lays out whole
/// episodes. `seed` initializes the returned buffer's sampling stream.
pub fn load_buffer(path: &Path, seed: u64) -> Result<ReplayBuffer> {
    let sidecar: BufferSidecar =
        serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
    if sidecar.schema_version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported buffer schema_version {}",
            sidecar.schema_version
        )));
    }
    if sidecar.horizon == 0 {
        return Err(Error::Checkpoint("buffer sidecar has zero horizon".into()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BUFFER_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a transition data file".into()));
    }
    let rec = sidecar.d_s * 2 + sidecar.d_a + sidecar.n_tasks;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != sidecar.n_transitions * rec * 4 {
        return Err(Error::Checkpoint(format!(
            "data length {} does not match sidecar ({} records of {} values)",
            bytes.len(),
            sidecar.n_transitions,
            rec
        )));
    }
    let mut buffer = ReplayBuffer::new(
        sidecar.d_s,
        sidecar.d_a,
        sidecar.n_tasks,
        sidecar.horizon,
        sidecar.n_transitions.max(1),
        seed,
    );
    let mut vals = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    for idx in 0..sidecar.n_transitions {
        let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
        buffer.push(Transition {
            s: take(sidecar.d_s),
            a: take(sidecar.d_a),
            r: take(sidecar.n_tasks),
            s_next: take(sidecar.d_s),
            t_in_episode: (idx % sidecar.horizon) as u32,
        })?;
    }
    Ok(buffer)
}
