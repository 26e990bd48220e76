//! `.nmsk` persistence and PGM export.
//!
//! `.nmsk` layout, little-endian:
//!
//! ```text
//! 0    4   magic "NMSK"
//! 4    4   version u32 = 1
//! 8    8   heads u64
//! 16   8   rows u64
//! 24   8   cols u64
//! 32   ..  heads * rows * ceil(cols / 8) bytes; bit c of a row is
//!          bit (c % 8) of byte (c / 8), padding bits zero
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::BlockMask;
use crate::error::{bail, NablaError, Result};
use crate::io::{put_u32, put_u64, read_array, read_u32, read_u64};

pub const MASK_MAGIC: &[u8; 4] = b"NMSK";
pub const MASK_VERSION: u32 = 1;

pub fn encode_mask(m: &BlockMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + m.packed().len());
    out.extend_from_slice(MASK_MAGIC);
    put_u32(&mut out, MASK_VERSION);
    put_u64(&mut out, m.heads() as u64);
    put_u64(&mut out, m.rows() as u64);
    put_u64(&mut out, m.cols() as u64);
    out.extend_from_slice(m.packed());
    out
}

pub fn decode_mask(mut bytes: &[u8]) -> Result<BlockMask> {
    read_mask(&mut bytes)
}

fn read_mask<R: Read>(r: &mut R) -> Result<BlockMask> {
    let magic: [u8; 4] = read_array(r, "magic")?;
    if &magic != MASK_MAGIC {
        bail!(Format, "bad magic {:?}, expected \"NMSK\"", magic);
    }
    let version = read_u32(r, "version")?;
    if version != MASK_VERSION {
        bail!(Format, "unsupported mask version {}", version);
    }
    let heads = read_u64(r, "heads")? as usize;
    let rows = read_u64(r, "rows")? as usize;
    let cols = read_u64(r, "cols")? as usize;
    if heads == 0 || rows == 0 {
        bail!(Format, "empty mask header ({heads} heads, {rows} rows)");
    }
    if rows != cols {
        bail!(Format, "mask must be square, got {rows}x{cols}");
    }
    let stride = cols.div_ceil(8);
    let len = heads
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(stride))
        .ok_or_else(|| NablaError::Format("mask size overflow".into()))?;
    let mut bits = Vec::new();
    if r.take(len as u64).read_to_end(&mut bits)? != len {
        bail!(Format, "truncated mask payload: expected {len} bytes");
    }
    if r.read(&mut [0u8; 1])? != 0 {
        bail!(Format, "trailing bytes after mask payload");
    }
    if cols % 8 != 0 {
        let pad = !0u8 << (cols % 8);
        if bits.chunks_exact(stride).any(|row| row[stride - 1] & pad != 0) {
            bail!(Format, "non-zero padding bits");
        }
    }
    BlockMask::from_raw(heads, rows, bits)
}

pub fn save_mask(m: &BlockMask, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(&encode_mask(m))?;
    w.flush()?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BlockMask> {
    read_mask(&mut BufReader::new(File::open(path.as_ref())?))
}

/// Binary PGM (P5) of one head: a pixel per block, 255 attended, 0 masked.
pub fn encode_pgm(m: &BlockMask, head: usize) -> Result<Vec<u8>> {
    if head >= m.heads() {
        bail!(Param, "head {} out of range for a {}-head mask", head, m.heads());
    }
    let mut out = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    for r in 0..m.rows() {
        out.extend((0..m.cols()).map(|c| if m.get(head, r, c) { 255u8 } else { 0 }));
    }
    Ok(out)
}

pub fn export_mask_image(m: &BlockMask, head: usize, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_pgm(m, head)?;
    std::fs::write(path.as_ref(), bytes)?;
    Ok(())
}
