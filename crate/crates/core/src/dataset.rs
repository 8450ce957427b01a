//! `KSP1` dataset files: a stack of equally sized complete k-space slices.
//!
//! Layout: magic `KSP1`, then little-endian `u32` F, P and N, then N slices of
//! F*P samples in row-major order, each sample an `f32` real part followed by
//! an `f32` imaginary part.

use std::fs;
use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::kspace::KSpaceMatrix;
use crate::num::Scalar;

/// `(frequencies, phases)` and the slices.
pub type Dataset<T> = ((usize, usize), Vec<KSpaceMatrix<T>>);

pub const DATASET_MAGIC: &[u8; 4] = b"KSP1";

/// Serializes slices to bytes. An empty list needs the shape explicitly.
pub fn encode_dataset<T: Scalar>(
    shape: (usize, usize),
    slices: &[KSpaceMatrix<T>],
) -> Result<Vec<u8>> {
    let (f, p) = shape;
    for s in slices {
        if (s.rows(), s.cols()) != shape {
            return Err(Error::Size(format!(
                "slice is {}x{}, dataset is {}x{}",
                s.rows(),
                s.cols(),
                f,
                p
            )));
        }
    }
    let to_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| Error::Format(format!("dimension {} overflows u32", v)))
    };
    let mut out = Vec::with_capacity(16 + slices.len() * f * p * 8);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&to_u32(f)?.to_le_bytes());
    out.extend_from_slice(&to_u32(p)?.to_le_bytes());
    out.extend_from_slice(&to_u32(slices.len())?.to_le_bytes());
    for s in slices {
        for z in s.data() {
            out.extend_from_slice(&z.re.as_f32().to_le_bytes());
            out.extend_from_slice(&z.im.as_f32().to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a `KSP1` buffer into its shape and slices.
pub fn decode_dataset<T: Scalar>(bytes: &[u8]) -> Result<Dataset<T>> {
    if bytes.len() < 16 {
        return Err(Error::Format("file shorter than header".into()));
    }
    if &bytes[0..4] != DATASET_MAGIC {
        return Err(Error::Format("bad magic, expected KSP1".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as u64;
    let (f, p, n) = (word(4), word(8), word(12));
    let expected = f
        .checked_mul(p)
        .and_then(|v| v.checked_mul(n))
        .and_then(|v| v.checked_mul(8))
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    if expected != bytes.len() as u64 {
        return Err(Error::Format(format!(
            "expected {} bytes for {}x{}x{}, found {}",
            expected,
            f,
            p,
            n,
            bytes.len()
        )));
    }
    let (f, p, n) = (f as usize, p as usize, n as usize);
    if n > 0 && (f == 0 || p == 0) {
        return Err(Error::Format("zero-sized slices".into()));
    }
    let per = f * p;
    let mut slices = Vec::with_capacity(n);
    let mut floats = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for _ in 0..n {
        let mut data = Vec::with_capacity(per);
        for _ in 0..per {
            let re = floats.next().unwrap();
            let im = floats.next().unwrap();
            data.push(Complex::new(T::of(re as f64), T::of(im as f64)));
        }
        slices.push(KSpaceMatrix::new(f, p, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    Ok(((f, p), slices))
}

pub fn save_dataset<T: Scalar>(
    path: impl AsRef<Path>,
    shape: (usize, usize),
    slices: &[KSpaceMatrix<T>],
) -> Result<()> {
    let bytes = encode_dataset(shape, slices)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.flush()?;
    Ok(())
}

pub fn load_dataset<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<Dataset<T>> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::fft2_centered;
    use crate::phantom::{generate_phantom, PhantomSpec};

    fn slices(n: usize) -> Vec<KSpaceMatrix<f32>> {
        (0..n)
            .map(|i| {
                let img = generate_phantom(&PhantomSpec::random(8, 6, 4, i as u64)).unwrap();
                fft2_centered(&img).unwrap()
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = slices(3);
        let bytes = encode_dataset((8, 6), &s).unwrap();
        assert_eq!(bytes.len(), 16 + 3 * 48 * 8);
        let (shape, back) = decode_dataset::<f32>(&bytes).unwrap();
        assert_eq!(shape, (8, 6));
        for (a, b) in s.iter().zip(&back) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.re.to_bits(), y.re.to_bits());
                assert_eq!(x.im.to_bits(), y.im.to_bits());
            }
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_dataset::<f32>((640, 368), &[]).unwrap();
        assert_eq!(
            bytes,
            [b'K', b'S', b'P', b'1', 128, 2, 0, 0, 112, 1, 0, 0, 0, 0, 0, 0]
        );
        let (shape, back) = decode_dataset::<f32>(&bytes).unwrap();
        assert_eq!(shape, (640, 368));
        assert!(back.is_empty());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ksp");
        let s = slices(2);
        save_dataset(&path, (8, 6), &s).unwrap();
        let (_, back) = load_dataset::<f32>(&path).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut bytes = encode_dataset((8, 6), &slices(1)).unwrap();
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(
            decode_dataset::<f32>(truncated),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            decode_dataset::<f32>(&bytes[..10]),
            Err(Error::Format(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_dataset::<f32>(&bytes),
            Err(Error::Format(_))
        ));

        let mut huge = DATASET_MAGIC.to_vec();
        for _ in 0..3 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            decode_dataset::<f32>(&huge),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn shape_mismatch_rejected_on_save() {
        assert!(encode_dataset((8, 8), &slices(1)).is_err());
    }
}
