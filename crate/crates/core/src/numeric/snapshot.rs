//! Tensor snapshot file format.
//!
//! Layout, all little-endian:
//!   bytes 0..4   magic "TPVT"
//!   u32          rank
//!   u32 * rank   extents
//!   f32 * n      values, row-major
//!
//! Values are stored as `f32` regardless of the in-memory scalar type; the
//! `f32` instantiation round-trips bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::scalar::Real;

use super::tensor::{NumericError, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"TPVT";

/// Limit on extents read back from disk, to fail fast on corrupt headers.
const MAX_EXTENT: u32 = 1 << 24;

pub fn write_tensor<S: Real, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<(), NumericError> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads one tensor record, leaving the stream positioned right after it.
/// Container formats that embed tensor records use this directly.
pub fn read_tensor_embedded<S: Real, R: Read>(r: &mut R) -> Result<Tensor<S>, NumericError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(NumericError::Snapshot(format!("bad magic {magic:?}, expected {TENSOR_MAGIC:?}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(NumericError::Snapshot(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf)?;
        let e = u32::from_le_bytes(u32buf);
        if e > MAX_EXTENT {
            return Err(NumericError::Snapshot(format!("implausible extent {e}")));
        }
        shape.push(e as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut u32buf)?;
        let v = f32::from_le_bytes(u32buf);
        data.push(S::from_f64_lossy(v as f64));
    }
    Tensor::from_vec(shape, data)
}

/// Reads a tensor that must span the rest of the stream.
pub fn read_tensor<S: Real, R: Read>(r: &mut R) -> Result<Tensor<S>, NumericError> {
    let t = read_tensor_embedded(r)?;
    // Trailing bytes indicate a header/payload mismatch.
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => {}
        _ => return Err(NumericError::Snapshot("trailing bytes after tensor payload".to_string())),
    }
    Ok(t)
}

pub fn save_tensor<S: Real>(path: &Path, t: &Tensor<S>) -> Result<(), NumericError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<S: Real>(path: &Path) -> Result<Tensor<S>, NumericError> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise_for_f32() {
        let t = Tensor::<f32>::from_vec(
            vec![2, 3],
            vec![1.0, -0.5, 3.25e-7, f32::MIN_POSITIVE, 1.5e30, -0.0],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout_is_stable() {
        let t = Tensor::<f32>::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[0..4], b"TPVT");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 24);
    }

    #[test]
    fn rank_zero_tensors_round_trip() {
        let t = Tensor::<f32>::scalar(7.5);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.rank(), 0);
        assert_eq!(back.item().unwrap(), 7.5);
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::<f32>::zeros(&[2])).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            read_tensor::<f32, _>(&mut bad_magic.as_slice()),
            Err(NumericError::Snapshot(_))
        ));
        let truncated = &buf[..buf.len() - 2];
        assert!(read_tensor::<f32, _>(&mut &truncated[..]).is_err());
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(matches!(
            read_tensor::<f32, _>(&mut trailing.as_slice()),
            Err(NumericError::Snapshot(_))
        ));
    }

    #[test]
    fn files_round_trip_via_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tpvt");
        let t = Tensor::<f32>::from_vec(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        save_tensor(&path, &t).unwrap();
        let back: Tensor<f32> = load_tensor(&path).unwrap();
        assert_eq!(back.data(), t.data());
    }
}
