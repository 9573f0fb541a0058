//! Binary tensor container for extracted features.
//!
//! ```text
//! magic    4 bytes  "TFT1"
//! dtype    u8       0 = f32
//! rank     u8
//! dims     u32 × rank, little-endian
//! payload  f32 × product(dims), little-endian
//! ```

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"TFT1";
const DTYPE_F32: u8 = 0;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.shape().len())
        .map_err(|_| Error::Invalid("tensor rank above 255".into()))?;
    let mut out = Vec::with_capacity(6 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.push(rank);
    for &d in t.shape() {
        let d =
            u32::try_from(d).map_err(|_| Error::Invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let bad = |m: &str| Error::Format(format!("feature file: {m}"));
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(bad(&format!("unsupported dtype code {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let body = 6 + 4 * rank;
    if bytes.len() < body {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = bytes[6..body]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad("dimension product overflows"))?;
    if bytes.len() - body != n * 4 {
        return Err(bad(&format!(
            "payload holds {} bytes, dims {dims:?} need {}",
            bytes.len() - body,
            n * 4
        )));
    }
    let data = bytes[body..]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    Tensor::new(dims, data)
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn read<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let b = encode(&t).unwrap();
        assert_eq!(&b[..4], b"TFT1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(b.len(), 6 + 8 + 24);
        assert_eq!(decode::<f32>(&b).unwrap(), t);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let t = Tensor::<f32>::zeros(&[4]);
        let b = encode(&t).unwrap();
        assert!(decode::<f32>(&b[..b.len() - 1]).is_err());
        let mut m = b.clone();
        m[0] = b'X';
        assert!(decode::<f32>(&m).is_err());
        let mut d = b;
        d[4] = 9;
        assert!(decode::<f32>(&d).is_err());
    }
}
