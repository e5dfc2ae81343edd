//! Binary checkpoints.
//!
//! Layout: magic `EOS1`; eight little-endian `u32`s holding the input,
//! hidden, dense1 and dense2 widths followed by the scalar counts of the
//! LSTM, dense1, dense2 and output layers; then every tensor row-major as
//! little-endian `f64` in the order lstm_w, lstm_b, dense1_w, dense1_b,
//! dense2_w, dense2_b, out_w, out_b.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::params::{Dims, ModelParams};
use crate::error::{EosError, Result};

pub const MAGIC: &[u8; 4] = b"EOS1";
const HEADER_LEN: usize = 4 + 8 * 4;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let dims = params.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * dims.param_count());
    out.extend_from_slice(MAGIC);
    let counts = dims.layer_counts();
    for v in [dims.input, dims.hidden, dims.dense1, dims.dense2]
        .into_iter()
        .chain(counts)
    {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let fail = |message: String| EosError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic, not an EOS1 checkpoint".into()));
    }
    let word = |i: usize| {
        let at = 4 + 4 * i;
        u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
    };
    let dims = Dims {
        input: word(0),
        hidden: word(1),
        dense1: word(2),
        dense2: word(3),
    };
    if [dims.input, dims.hidden, dims.dense1, dims.dense2].contains(&0) {
        return Err(fail(format!("zero layer width in {dims:?}")));
    }
    let stored = [word(4), word(5), word(6), word(7)];
    if stored != dims.layer_counts() {
        return Err(fail(format!("layer counts {stored:?} disagree with widths {dims:?}")));
    }
    let expected = HEADER_LEN + 8 * dims.param_count();
    if bytes.len() != expected {
        return Err(fail(format!(
            "expected {expected} bytes for {dims:?}, found {}",
            bytes.len()
        )));
    }
    let mut params = ModelParams::zeros(dims);
    let mut at = HEADER_LEN;
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
            at += 8;
        }
    }
    if !params.is_finite() {
        return Err(fail("non-finite weight".into()));
    }
    Ok(params)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}

/// Write-then-rename so a partially written file is never visible at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}
