//! `.ntsr` tensor container and the little-endian byte helpers shared with
//! the `.nmsk` mask format.
//!
//! Layout, all multi-byte fields little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "NTSR"
//! 4       4           version u32 = 1
//! 8       1           dtype u8 = 1 (f32)
//! 9       1           rank u8 in 1..=4
//! 10      2           reserved, zero
//! 12      8 * rank    dims, u64 each
//! ...     4 * numel   payload, f32 row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{bail, NablaError, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const TENSOR_MAGIC: &[u8; 4] = b"NTSR";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let file = File::open(path.as_ref())?;
    read_tensor(&mut BufReader::new(file))
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_tensor(t)?;
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    t.check_finite()?;
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    put_u32(&mut out, TENSOR_VERSION);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in t.shape() {
        put_u64(&mut out, d as u64);
    }
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(mut bytes: &[u8]) -> Result<Tensor> {
    read_tensor(&mut bytes)
}

/// Parses one tensor and requires the stream to end right after its payload.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let magic: [u8; 4] = read_array(r, "magic")?;
    if &magic != TENSOR_MAGIC {
        bail!(Format, "bad magic {:?}, expected \"NTSR\"", magic);
    }
    let version = read_u32(r, "version")?;
    if version != TENSOR_VERSION {
        bail!(Format, "unsupported version {}", version);
    }
    let [dtype, rank, r0, r1]: [u8; 4] = read_array(r, "dtype/rank")?;
    if dtype != DTYPE_F32 {
        bail!(Format, "unsupported dtype {}", dtype);
    }
    if rank == 0 || rank as usize > MAX_RANK {
        bail!(Format, "rank {} outside 1..={}", rank, MAX_RANK);
    }
    if r0 != 0 || r1 != 0 {
        bail!(Format, "reserved header bytes must be zero");
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let d = read_u64(r, "dims")?;
        if d == 0 {
            bail!(Format, "zero extent in header");
        }
        dims.push(usize::try_from(d).map_err(|_| NablaError::Format("extent overflow".into()))?);
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or_else(|| NablaError::Format("element count overflow".into()))?;

    let mut payload = Vec::new();
    let got = r.take(4 * numel as u64).read_to_end(&mut payload)?;
    if got != 4 * numel {
        bail!(
            Format,
            "truncated payload: expected {} bytes, found {}",
            4 * numel,
            got
        );
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        bail!(Format, "trailing bytes after payload");
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let t = Tensor::new(dims, data)?;
    t.check_finite()?;
    Ok(t)
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn read_array<R: Read, const L: usize>(r: &mut R, what: &str) -> Result<[u8; L]> {
    let mut buf = [0u8; L];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => NablaError::Format(format!("truncated header ({what})")),
        _ => NablaError::Io(e),
    })?;
    Ok(buf)
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    read_array(r, what).map(u32::from_le_bytes)
}

pub(crate) fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    read_array(r, what).map(u64::from_le_bytes)
}
