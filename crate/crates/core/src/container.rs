//! The `IBRT` binary tensor container.
//!
//! Layout: magic bytes `IBRT`, `u32` LE version, then per-tensor records
//! (`u64` LE name length, UTF-8 name, `u64` LE rank, dims as `u64` LE, raw
//! f64 LE values), and a trailing CRC32 (`u32` LE, IEEE) over everything
//! before it. Non-tensor payloads (config snapshots, counters) ride along as
//! reserved `meta.*` records.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"IBRT";
pub const VERSION: u32 = 1;

pub fn write_container(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in records {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u64).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(tensor.shape.len() as u64).to_le_bytes());
        for &d in &tensor.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &tensor.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path)?;
    if buf.len() < MAGIC.len() + 4 + 4 {
        return Err(Error::Checkpoint(format!(
            "{}: too short ({} bytes)",
            path.display(),
            buf.len()
        )));
    }
    if &buf[..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic bytes",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {} unsupported (expected {})",
            path.display(),
            version,
            VERSION
        )));
    }
    let body_end = buf.len() - 4;
    let stored_crc = u32::from_le_bytes(buf[body_end..].try_into().expect("4 bytes"));
    let actual_crc = crc32fast::hash(&buf[..body_end]);
    if stored_crc != actual_crc {
        return Err(Error::Checkpoint(format!(
            "{}: checksum failure (stored {stored_crc:08x}, computed {actual_crc:08x})",
            path.display()
        )));
    }

    let mut records = Vec::new();
    let mut at = 8usize;
    let take = |at: &mut usize, n: usize| -> Result<std::ops::Range<usize>> {
        if *at + n > body_end {
            return Err(Error::Checkpoint(format!(
                "{}: truncated record at offset {}",
                path.display(),
                *at
            )));
        }
        let r = *at..*at + n;
        *at += n;
        Ok(r)
    };
    let take_u64 = |at: &mut usize, buf: &[u8]| -> Result<u64> {
        let r = take(at, 8)?;
        Ok(u64::from_le_bytes(buf[r].try_into().expect("8 bytes")))
    };
    while at < body_end {
        let name_len = take_u64(&mut at, &buf)? as usize;
        let name_range = take(&mut at, name_len)?;
        let name = std::str::from_utf8(&buf[name_range])
            .map_err(|_| Error::Checkpoint(format!("{}: non-UTF-8 tensor name", path.display())))?
            .to_string();
        let rank = take_u64(&mut at, &buf)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u64(&mut at, &buf)? as usize);
        }
        let numel: usize = shape.iter().product();
        let data_range = take(&mut at, numel * 8)?;
        let data: Vec<f64> = buf[data_range]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

/// Encode a UTF-8 string as a `meta.*` tensor (one byte per f64 entry).
pub fn string_record(name: &str, text: &str) -> (String, Tensor) {
    let data: Vec<f64> = text.bytes().map(f64::from).collect();
    let len = data.len().max(1);
    let tensor = if data.is_empty() {
        Tensor::zeros(vec![1])
    } else {
        Tensor {
            shape: vec![len],
            data,
        }
    };
    (name.to_string(), tensor)
}

/// Decode a [`string_record`] payload.
pub fn record_string(tensor: &Tensor) -> Result<String> {
    let bytes: Vec<u8> = tensor
        .data
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..256.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::Checkpoint(format!(
                    "meta record holds non-byte value {v}"
                )))
            }
        })
        .collect::<Result<_>>()?;
    String::from_utf8(bytes)
        .map_err(|_| Error::Checkpoint("meta record is not UTF-8".into()))
}
