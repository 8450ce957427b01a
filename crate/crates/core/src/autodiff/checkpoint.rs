//! `PTW1` parameter files.
//!
//! Layout: magic `PTW1`, little-endian `u32` array count, then per array a
//! `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32` dimensions
//! and the `f32` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::num::Scalar;

use super::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PTW1";

pub fn encode_checkpoint<T: Scalar>(arrays: &[(String, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let count = u32::try_from(arrays.len()).map_err(|_| Error::Format("too many arrays".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in arrays {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("name too long: {}", name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            let d =
                u32::try_from(d).map_err(|_| Error::Format("dimension overflows u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic, expected PTW1".into()));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        if !(1..=3).contains(&rank) {
            return Err(Error::Format(format!("array {} has rank {}", name, rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = r.u32()? as usize;
            n = n
                .checked_mul(d)
                .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
            shape.push(d);
        }
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("dimensions overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        out.push((
            name,
            Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?,
        ));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last array".into()));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    arrays: &[(String, &Tensor<T>)],
) -> Result<()> {
    fs::write(path, encode_checkpoint(arrays)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<T>)>> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_bit_exact(
            dims in proptest::collection::vec(1usize..5, 1..=3),
            seed in any::<u32>(),
            name in "[a-z.0-9_]{0,20}",
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff))
                .collect();
            let t = Tensor::new(&dims, data).unwrap();
            let bytes = encode_checkpoint(&[(name.clone(), &t)]).unwrap();
            let back = decode_checkpoint::<f32>(&bytes).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(back[0].1.shape(), t.shape());
            for (a, b) in back[0].1.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn layout() {
        let t = Tensor::<f32>::new(&[2], vec![1.0, -2.0]).unwrap();
        let bytes = encode_checkpoint(&[("w".to_string(), &t)]).unwrap();
        let mut expected = b"PTW1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'w');
        expected.push(1);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn corrupt() {
        let t = Tensor::<f32>::zeros(&[2, 2]);
        let bytes = encode_checkpoint(&[("a".to_string(), &t)]).unwrap();
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(decode_checkpoint::<f32>(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint::<f32>(&extra).is_err());
    }
}
