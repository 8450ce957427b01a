//! Complex images, centered k-space and phase masking.
//!
//! Matrices are `F x P`, stored row-major: rows index the frequency-encode
//! axis and columns the phase-encode axis, so one phase vector is one column.
//! k-space is kept in the centered convention with the DC sample at row
//! `F / 2`, column `P / 2`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{size_err, Error, Result};
use crate::num::Scalar;

macro_rules! complex_grid {
    ($name:ident) => {
        impl<T: Scalar> $name<T> {
            /// Wraps a row-major buffer, rejecting wrong lengths and non-finite samples.
            pub fn new(rows: usize, cols: usize, data: Vec<Complex<T>>) -> Result<Self> {
                if rows == 0 || cols == 0 {
                    return Err(size_err(format!("empty {}x{} matrix", rows, cols)));
                }
                if data.len() != rows * cols {
                    return Err(size_err(format!(
                        "buffer of {} samples for {}x{} matrix",
                        data.len(),
                        rows,
                        cols
                    )));
                }
                if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                    return Err(Error::Parameter("non-finite sample".into()));
                }
                Ok(Self { rows, cols, data })
            }

            pub fn zeros(rows: usize, cols: usize) -> Self {
                assert!(rows > 0 && cols > 0, "empty matrix");
                Self {
                    rows,
                    cols,
                    data: vec![Complex::new(T::zero(), T::zero()); rows * cols],
                }
            }

            /// Frequency count `F`.
            pub fn rows(&self) -> usize {
                self.rows
            }

            /// Phase count `P`.
            pub fn cols(&self) -> usize {
                self.cols
            }

            pub fn data(&self) -> &[Complex<T>] {
                &self.data
            }

            pub fn into_data(self) -> Vec<Complex<T>> {
                self.data
            }

            #[inline]
            pub fn get(&self, row: usize, col: usize) -> Complex<T> {
                self.data[row * self.cols + col]
            }

            /// True when every sample of column `col` is exactly zero.
            pub fn column_is_zero(&self, col: usize) -> bool {
                (0..self.rows).all(|r| {
                    let z = self.get(r, col);
                    z.re == T::zero() && z.im == T::zero()
                })
            }

            pub fn max_abs_diff(&self, other: &Self) -> f64 {
                self.data
                    .iter()
                    .zip(&other.data)
                    .map(|(a, b)| (*a - *b).norm().as_f64())
                    .fold(0.0, f64::max)
            }

            pub fn energy(&self) -> f64 {
                self.data.iter().map(|z| z.norm_sqr().as_f64()).sum()
            }
        }
    };
}

/// Image-domain complex samples (`I`, or the undersampled `Ī`).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage<T> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<T>>,
}

/// Centered k-space matrix, complete or with some phase columns zeroed.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<T>>,
}

complex_grid!(ComplexImage);
complex_grid!(KSpaceMatrix);

impl<T: Scalar> ComplexImage<T> {
    /// Builds a complex image with zero imaginary part.
    pub fn from_real(rows: usize, cols: usize, values: &[T]) -> Result<Self> {
        Self::new(
            rows,
            cols,
            values.iter().map(|&v| Complex::new(v, T::zero())).collect(),
        )
    }

    pub fn max_magnitude(&self) -> T {
        self.data
            .iter()
            .map(|z| z.norm())
            .fold(T::zero(), |a, b| a.max(b))
    }
}

impl<T: Scalar> KSpaceMatrix<T> {
    /// Column `j` as a phase vector of length `F`.
    pub fn column(&self, j: usize) -> Vec<Complex<T>> {
        (0..self.rows).map(|r| self.get(r, j)).collect()
    }

    /// Largest deviation from conjugate symmetry about the center, relative
    /// to the largest magnitude. Zero for the spectrum of a real image.
    pub fn hermitian_error(&self) -> f64 {
        let (f, p) = (self.rows, self.cols);
        let scale = self
            .data
            .iter()
            .map(|z| z.norm().as_f64())
            .fold(0.0, f64::max);
        if scale == 0.0 {
            return 0.0;
        }
        let (cf, cp) = (f / 2, p / 2);
        let mut worst = 0.0f64;
        for r in 0..f {
            let mr = (2 * cf + f - r) % f;
            for c in 0..p {
                let mc = (2 * cp + p - c) % p;
                let d = (self.get(r, c) - self.get(mr, mc).conj()).norm().as_f64();
                worst = worst.max(d);
            }
        }
        worst / scale
    }
}

/// Real-valued `F x P` matrix, used for normalized magnitude images.
#[derive(Clone, Debug, PartialEq)]
pub struct RealImage<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> RealImage<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(size_err(format!(
                "buffer of {} values for {}x{} image",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    pub fn max(&self) -> T {
        self.data.iter().fold(T::neg_infinity(), |a, &b| a.max(b))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Binary record of the acquired phases (`b̄`).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PhaseIndicator {
    bits: Vec<bool>,
}

impl PhaseIndicator {
    pub fn zeros(phases: usize) -> Self {
        Self {
            bits: vec![false; phases],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Indicator with the given phases set.
    pub fn from_phases(phases: usize, set: &[usize]) -> Result<Self> {
        let mut b = Self::zeros(phases);
        for &j in set {
            b = b.set_indicator(j)?;
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Indices with the bit set, ascending.
    pub fn ones(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&j| self.bits[j]).collect()
    }

    /// Indices with the bit clear, ascending.
    pub fn zeros_idx(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&j| !self.bits[j]).collect()
    }

    /// Marks phase `j` as acquired.
    pub fn set_indicator(&self, j: usize) -> Result<Self> {
        if j >= self.bits.len() {
            return Err(Error::Index {
                index: j,
                len: self.bits.len(),
            });
        }
        if self.bits[j] {
            return Err(Error::DoubleAcquisition(j));
        }
        let mut bits = self.bits.clone();
        bits[j] = true;
        Ok(Self { bits })
    }

    /// Elementwise OR; fails if the two indicators overlap.
    pub fn disjoint_union(&self, other: &Self) -> Result<Self> {
        if self.len() != other.len() {
            return Err(size_err("indicator lengths differ"));
        }
        let mut bits = self.bits.clone();
        for (j, (&a, &b)) in self.bits.iter().zip(&other.bits).enumerate() {
            if a && b {
                return Err(Error::DoubleAcquisition(j));
            }
            bits[j] = a || b;
        }
        Ok(Self { bits })
    }

    pub fn as_scalars<T: Scalar>(&self) -> Vec<T> {
        self.bits
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect()
    }
}

/// The `count` phase indices closest to the center column `phases / 2`,
/// ties broken toward the lower index. Returned ascending.
pub fn centered_phases(phases: usize, count: usize) -> Vec<usize> {
    let center = (phases / 2) as isize;
    let mut idx: Vec<usize> = (0..phases).collect();
    idx.sort_by_key(|&j| ((j as isize - center).abs(), j));
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

/// Reusable plans for centered, orthonormal 2D transforms of one shape.
#[derive(Clone)]
pub struct Fft2Plan<T: Scalar> {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Scalar> std::fmt::Debug for Fft2Plan<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2Plan({}x{})", self.rows, self.cols)
    }
}

impl<T: Scalar> Fft2Plan<T> {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(size_err(format!(
                "2D transform needs at least 2x2, got {}x{}",
                rows, cols
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn check(&self, rows: usize, cols: usize) -> Result<()> {
        if (rows, cols) != (self.rows, self.cols) {
            return Err(size_err(format!(
                "plan is {}x{}, input is {}x{}",
                self.rows, self.cols, rows, cols
            )));
        }
        Ok(())
    }

    fn transform(&self, buf: &mut [Complex<T>], forward: bool) {
        let (f, p) = (self.rows, self.cols);
        let (row_fft, col_fft) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        row_fft.process(buf);
        let mut t = transpose(buf, f, p);
        col_fft.process(&mut t);
        let back = transpose(&t, p, f);
        let scale = T::one() / T::of((f * p) as f64).sqrt();
        for (dst, src) in buf.iter_mut().zip(back) {
            *dst = src * scale;
        }
    }

    /// Image to centered k-space.
    pub fn forward(&self, image: &ComplexImage<T>) -> Result<KSpaceMatrix<T>> {
        self.check(image.rows(), image.cols())?;
        let mut buf = image.data().to_vec();
        self.transform(&mut buf, true);
        let data = shift(&buf, self.rows, self.cols, self.rows / 2, self.cols / 2);
        Ok(KSpaceMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Centered k-space back to the image domain.
    pub fn inverse(&self, k: &KSpaceMatrix<T>) -> Result<ComplexImage<T>> {
        self.check(k.rows(), k.cols())?;
        let (f, p) = (self.rows, self.cols);
        let mut buf = shift(k.data(), f, p, f - f / 2, p - p / 2);
        self.transform(&mut buf, false);
        Ok(ComplexImage {
            rows: f,
            cols: p,
            data: buf,
        })
    }
}

fn transpose<C: Copy>(src: &[C], rows: usize, cols: usize) -> Vec<C> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(src[r * cols + c]);
        }
    }
    out
}

fn shift<C: Copy>(src: &[C], rows: usize, cols: usize, dr: usize, dc: usize) -> Vec<C> {
    let mut out = src.to_vec();
    for r in 0..rows {
        let nr = (r + dr) % rows;
        for c in 0..cols {
            out[nr * cols + (c + dc) % cols] = src[r * cols + c];
        }
    }
    out
}

/// Orthonormal 2D DFT with the DC term moved to the center.
pub fn fft2_centered<T: Scalar>(image: &ComplexImage<T>) -> Result<KSpaceMatrix<T>> {
    Fft2Plan::new(image.rows(), image.cols())?.forward(image)
}

/// Inverse of [`fft2_centered`].
pub fn ifft2_centered<T: Scalar>(k: &KSpaceMatrix<T>) -> Result<ComplexImage<T>> {
    Fft2Plan::new(k.rows(), k.cols())?.inverse(k)
}

/// Keeps column `j` where `b_j = 1`, zeroes it otherwise.
pub fn apply_phase_mask<T: Scalar>(
    k: &KSpaceMatrix<T>,
    b: &PhaseIndicator,
) -> Result<KSpaceMatrix<T>> {
    if b.len() != k.cols() {
        return Err(size_err(format!(
            "indicator of length {} for {} phases",
            b.len(),
            k.cols()
        )));
    }
    let zero = Complex::new(T::zero(), T::zero());
    let mut out = k.clone();
    for r in 0..k.rows() {
        for c in 0..k.cols() {
            if !b.get(c) {
                out.data[r * k.cols + c] = zero;
            }
        }
    }
    Ok(out)
}

/// Copies phase column `j` of `k_full` into the (zero) column `j` of `k_partial`.
pub fn insert_phase<T: Scalar>(
    k_partial: &KSpaceMatrix<T>,
    k_full: &KSpaceMatrix<T>,
    j: usize,
) -> Result<KSpaceMatrix<T>> {
    if (k_partial.rows(), k_partial.cols()) != (k_full.rows(), k_full.cols()) {
        return Err(size_err("partial and full k-space shapes differ"));
    }
    if j >= k_full.cols() {
        return Err(Error::Index {
            index: j,
            len: k_full.cols(),
        });
    }
    if !k_partial.column_is_zero(j) {
        return Err(Error::DoubleAcquisition(j));
    }
    let mut out = k_partial.clone();
    for r in 0..k_full.rows() {
        out.data[r * k_full.cols + j] = k_full.get(r, j);
    }
    Ok(out)
}

/// `|z| / ref_max`, clipped to `[0, 1]`.
pub fn magnitude_normalize<T: Scalar>(image: &ComplexImage<T>, ref_max: T) -> Result<RealImage<T>> {
    if !(ref_max > T::zero()) || !ref_max.is_finite() {
        return Err(Error::Parameter(format!(
            "normalization reference must be positive, got {}",
            ref_max
        )));
    }
    let data = image
        .data()
        .iter()
        .map(|z| (z.norm() / ref_max).min(T::one()))
        .collect();
    RealImage::new(image.rows(), image.cols(), data)
}
