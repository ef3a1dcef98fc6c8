//! On-disk containers shared by checkpoints and volume dumps, and JSON-lines
//! helpers.
//!
//! A framed file is: `u64` header length, JSON header bytes, `u64` value
//! count, then that many little-endian `f64` values. All integers are
//! little-endian.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const MAX_HEADER_BYTES: u64 = 64 << 20;

pub fn write_framed<W: Write>(mut out: W, header: &[u8], values: &[f64]) -> Result<()> {
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(header)?;
    out.write_all(&(values.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_framed<R: Read>(mut input: R) -> Result<(Vec<u8>, Vec<f64>)> {
    let header_len = read_u64(&mut input)?;
    if header_len > MAX_HEADER_BYTES {
        return Err(Error::Format(format!("header length {header_len} is implausible")));
    }
    let mut header = vec![0u8; header_len as usize];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let count = read_u64(&mut input)?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    if payload.len() as u64 != count.saturating_mul(8) {
        return Err(Error::Format(format!(
            "expected {count} values ({} bytes), found {} bytes",
            count.saturating_mul(8),
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, values))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input
        .read_exact(&mut b)
        .map_err(|_| Error::Format("truncated file".into()))?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}
