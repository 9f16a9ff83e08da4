//! Binary tensor serialization.
//!
//! Layout: magic `HTST`, version u16, rank u16, extents as u64, dtype tag u8
//! (1 = f32, 2 = f64), then the raw little-endian elements. All integers are
//! little-endian. Readers either return a complete tensor or an error; a
//! truncated or corrupt file never yields partial data.

use std::io::{Read, Write};

use thiserror::Error;

use crate::tensor::{Dtype, Element, Tensor};

pub const TENSOR_MAGIC: [u8; 4] = *b"HTST";
pub const TENSOR_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("dtype mismatch: file holds {found:?}, caller expects {expected:?}")]
    DtypeMismatch { expected: Dtype, found: Dtype },
    #[error("corrupt tensor file: {0}")]
    Corrupt(String),
}

pub fn write_tensor<E: Element, W: Write>(w: &mut W, t: &Tensor<E>) -> Result<(), FormatError> {
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    let rank = u16::try_from(t.rank()).map_err(|_| FormatError::Corrupt("rank > u16".into()))?;
    w.write_all(&rank.to_le_bytes())?;
    for &extent in t.shape() {
        w.write_all(&(extent as u64).to_le_bytes())?;
    }
    w.write_all(&[E::DTYPE as u8])?;
    let mut buf = Vec::with_capacity(t.numel() * E::BYTES);
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<E: Element, R: Read>(r: &mut R) -> Result<Tensor<E>, FormatError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != TENSOR_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = read_u16(r)?;
    if version != TENSOR_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let rank = read_u16(r)? as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let extent = read_u64(r)?;
        let extent = usize::try_from(extent)
            .map_err(|_| FormatError::Corrupt(format!("extent {extent} overflows usize")))?;
        numel = numel
            .checked_mul(extent)
            .ok_or_else(|| FormatError::Corrupt("element count overflow".into()))?;
        shape.push(extent);
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let dtype = Dtype::from_tag(tag[0]).ok_or(FormatError::UnknownDtype(tag[0]))?;
    if dtype != E::DTYPE {
        return Err(FormatError::DtypeMismatch {
            expected: E::DTYPE,
            found: dtype,
        });
    }
    let mut raw = vec![0u8; numel * E::BYTES];
    r.read_exact(&mut raw)?;
    let data: Vec<E> = raw.chunks_exact(E::BYTES).map(E::read_le).collect();
    Tensor::new(shape, data).map_err(|e| FormatError::Corrupt(e.to_string()))
}

pub fn write_tensor_file<E: Element>(
    path: &std::path::Path,
    t: &Tensor<E>,
) -> Result<(), FormatError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn read_tensor_file<E: Element>(path: &std::path::Path) -> Result<Tensor<E>, FormatError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, FormatError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, FormatError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Length-prefixed UTF-8 string, used by the checkpoint container.
pub fn write_string<W: Write>(w: &mut W, s: &str) -> Result<(), FormatError> {
    let len = u32::try_from(s.len()).map_err(|_| FormatError::Corrupt("string too long".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_string<R: Read>(r: &mut R) -> Result<String, FormatError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    let len = u32::from_le_bytes(b) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| FormatError::Corrupt(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use rand::Rng;

    fn random_tensor<E: Element>(shape: Vec<usize>, seed: u64) -> Tensor<E> {
        let mut rng = RngState::new(seed).stream();
        Tensor::from_fn(shape, |_| E::from_f64(rng.random_range(-3.0..3.0)))
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let t = random_tensor::<f32>(vec![3, 4, 2], 5);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let t64 = random_tensor::<f64>(vec![7], 6);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t64).unwrap();
        let back: Tensor<f64> = read_tensor(&mut buf.as_slice()).unwrap();
        for (a, b) in back.data().iter().zip(t64.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let t = random_tensor::<f32>(vec![4, 4], 9);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        for cut in [3, 9, buf.len() - 1] {
            let err = read_tensor::<f32, _>(&mut &buf[..cut]).unwrap_err();
            assert!(matches!(err, FormatError::Io(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &random_tensor::<f32>(vec![2], 1)).unwrap();
        buf[0] = b'X';
        assert!(matches!(
            read_tensor::<f32, _>(&mut buf.as_slice()).unwrap_err(),
            FormatError::BadMagic(_)
        ));
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &random_tensor::<f32>(vec![2], 1)).unwrap();
        assert!(matches!(
            read_tensor::<f64, _>(&mut buf.as_slice()).unwrap_err(),
            FormatError::DtypeMismatch { .. }
        ));
    }
}
