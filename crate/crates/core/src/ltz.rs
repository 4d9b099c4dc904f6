//! LTZ binary tensor files.
//!
//! Layout: magic `LTZ1`, little-endian `u32` rank, one little-endian `u32`
//! per dimension, then the row-major payload as little-endian `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LTZ1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("LTZ: truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("LTZ: bad magic {magic:?}")));
    }
    let mut word = || -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Format("LTZ: truncated header".into()))?;
        Ok(u32::from_le_bytes(b))
    };
    let rank = word()? as usize;
    let shape = (0..rank)
        .map(|_| word().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let header = 8 + 4 * rank;
    let payload = &bytes[header..];
    if payload.len() != 4 * n {
        return Err(Error::Format(format!(
            "LTZ: shape {shape:?} needs {} payload bytes, found {}",
            4 * n,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(format!("LTZ: {e}")))
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"LTZ1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&b[20..24], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"LTZ0\0\0\0\0").is_err());
        assert!(decode(b"LT").is_err());
        let mut b = encode(&Tensor::zeros(&[3]));
        b.pop();
        assert!(decode(&b).is_err());
    }

    proptest! {
        #[test]
        fn f32_values_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((i as u32).wrapping_mul(seed) as f32 / 7.0) as f64).collect();
            let t = Tensor::new(shape, data).unwrap();
            prop_assert!(decode(&encode(&t)).unwrap().bit_eq(&t));
        }
    }
}
