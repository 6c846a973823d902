//! `.moeb` batch files, little-endian:
//!
//! ```text
//! "MOEB"          4 bytes
//! version         u16 = 1
//! n, d            u32, u32
//! has_ids         u8
//! values          n·d f32, row-major
//! ids             n u32 (only if has_ids != 0)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::routing::TokenBatch;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"MOEB";
pub const VERSION: u16 = 1;

pub fn encode_batch(batch: &TokenBatch) -> Result<Vec<u8>> {
    let (n, d) = batch.x.shape();
    let (n32, d32) = (u32::try_from(n), u32::try_from(d));
    let (Ok(n32), Ok(d32)) = (n32, d32) else {
        return Err(Error::Format(format!("batch {n}x{d} too large")));
    };
    let ids_len = batch.ids.as_ref().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(15 + 4 * (n * d + ids_len));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    out.push(u8::from(batch.ids.is_some()));
    for &v in batch.x.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(ids) = &batch.ids {
        for &id in ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_batch(mut r: impl Read) -> Result<TokenBatch> {
    let mut header = [0u8; 15];
    r.read_exact(&mut header).map_err(|_| Error::Format("truncated header".into()))?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
    let has_ids = header[14] != 0;

    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let want = 4 * n * d + if has_ids { 4 * n } else { 0 };
    if body.len() != want {
        return Err(Error::Format(format!("expected {want} payload bytes, found {}", body.len())));
    }
    let words: Vec<[u8; 4]> = body.chunks_exact(4).map(|c| c.try_into().unwrap()).collect();
    let values: Vec<f64> = words[..n * d].iter().map(|&w| f32::from_le_bytes(w) as f64).collect();
    let x = Matrix::from_vec(n, d, values).map_err(|_| Error::Format("non-finite value in batch".into()))?;
    if has_ids {
        let ids = words[n * d..].iter().map(|&w| u32::from_le_bytes(w)).collect();
        TokenBatch::with_ids(x, ids)
    } else {
        Ok(TokenBatch::new(x))
    }
}

pub fn write_batch(path: impl AsRef<Path>, batch: &TokenBatch) -> Result<()> {
    let bytes = encode_batch(batch)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_batch(path: impl AsRef<Path>) -> Result<TokenBatch> {
    decode_batch(fs::File::open(path)?)
}
