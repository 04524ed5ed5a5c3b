use std::fs;
use std::path::Path;

use super::EmbeddingBank;
use crate::error::{Error, Result};

pub const BANK_MAGIC: &[u8; 4] = b"TAEB";

/// `TAEB`, u32 n, u32 d, n*d f32 rows, n u16 labels; all little-endian.
pub fn write_bank(bank: &EmbeddingBank, path: &Path) -> Result<()> {
    let n = u32::try_from(bank.len()).map_err(|_| Error::InvalidArgument("bank too large".into()))?;
    let d = u32::try_from(bank.dim()).map_err(|_| Error::InvalidArgument("bank too wide".into()))?;
    let mut buf = Vec::with_capacity(12 + 4 * bank.z.len() + 2 * bank.len());
    buf.extend_from_slice(BANK_MAGIC);
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    for &v in &bank.z {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in &bank.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_bank(path: &Path) -> Result<EmbeddingBank> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 12 || &buf[..4] != BANK_MAGIC {
        return Err(Error::format(path, "not an embedding bank (bad magic)"));
    }
    let u32_at = |o: usize| u32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]) as usize;
    let (n, d) = (u32_at(4), u32_at(8));
    let expected = 12 + 4 * n * d + 2 * n;
    if buf.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for n = {n}, d = {d}, found {}", buf.len()),
        ));
    }
    let z_end = 12 + 4 * n * d;
    let z = buf[12..z_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let labels = buf[z_end..].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    EmbeddingBank::new(d, z, labels).map_err(|e| Error::format(path, e.to_string()))
}
