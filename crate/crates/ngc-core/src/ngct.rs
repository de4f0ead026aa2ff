//! The NGCT tensor container: magic `NGCT`, u32 LE version (= 1), u32 rank,
//! one u32 per dimension, then the payload as little-endian f64, row-major.
//! Every persisted matrix in the project uses this format.

use crate::error::{NgcError, Result};
use crate::matrix::Matrix;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"NGCT";
const VERSION: u32 = 1;

pub fn write_tensor(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let expected: usize = dims.iter().product();
    if dims.is_empty() || expected != data.len() {
        return Err(NgcError::ShapeError(format!(
            "tensor dims {dims:?} do not match payload length {}",
            data.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NgcError::Format(format!("bad magic in {}", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NgcError::Format(format!("unsupported NGCT version {version}")));
    }
    let rank = read_u32(&mut r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(NgcError::Format(format!("implausible tensor rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(&mut r)? as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok((dims, data))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_tensor(path, &[m.rows(), m.cols()], m.data())
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let (dims, data) = read_tensor(path)?;
    match dims.as_slice() {
        [rows, cols] => Matrix::from_vec(*rows, *cols, data),
        [len] => Matrix::from_vec(1, *len, data),
        other => Err(NgcError::Format(format!(
            "expected rank-1 or rank-2 tensor, got rank {}",
            other.len()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ngct");
        let m = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.0, 3.25]]).unwrap();
        write_matrix(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"NGCT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..28], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 4 * 8);
    }

    #[test]
    fn rejects_corrupt_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ngct");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_matrix(&path), Err(NgcError::Format(_))));
        std::fs::write(&path, b"NGCT\x07\x00\x00\x00").unwrap();
        assert!(matches!(read_matrix(&path), Err(NgcError::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_preserves_bits(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::gaussian(rows, cols, 1.0, &mut rng);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.ngct");
            write_matrix(&path, &m).unwrap();
            let back = read_matrix(&path).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.data().iter().zip(m.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
