//! Raw little-endian float64 blob I/O.
//!
//! Dataset tensors and D2N measurements are stored as packed row-major `f64`
//! little-endian files with a JSON sidecar or `meta.json` describing shapes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};

/// Append `data` to `w` as packed little-endian f64.
pub fn write_f64_into<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Write `data` to `path`, replacing any existing file.
pub fn write_f64_file(path: &Path, data: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_f64_into(&mut w, data)?;
    w.flush()?;
    Ok(())
}

/// Read an entire f64 blob. If `expected_len` is given, the element count
/// must match exactly.
pub fn read_f64_file(path: &Path, expected_len: Option<usize>) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(CoreError::Format(format!(
            "{}: byte length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / 8;
    if let Some(want) = expected_len {
        if n != want {
            return Err(CoreError::Format(format!(
                "{}: expected {} f64 values, found {}",
                path.display(),
                want,
                n
            )));
        }
    }
    let mut out = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(8) {
        out.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(out)
}
