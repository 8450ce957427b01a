//! Sum-of-ellipses synthetic phantoms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kspace::ComplexImage;
use crate::num::Scalar;

/// One ellipse in normalized coordinates: both image axes span `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    /// Semi-axes along the rotated x (phase) and y (frequency) directions.
    pub semi_axes: (f64, f64),
    /// Rotation in radians.
    pub rotation: f64,
    pub intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let (a, b) = self.semi_axes;
        (u * u) / (a * a) + (v * v) / (b * b) <= 1.0
    }

    fn validate(&self) -> Result<()> {
        let (a, b) = self.semi_axes;
        let reach = a.max(b);
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::Parameter(
                "ellipse semi-axes must be positive".into(),
            ));
        }
        if self.center.0.abs() + reach > 1.0 || self.center.1.abs() + reach > 1.0 {
            return Err(Error::Parameter("ellipse extends beyond the image".into()));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::Parameter("ellipse intensity outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub rows: usize,
    pub cols: usize,
    pub ellipses: Vec<Ellipse>,
    pub seed: u64,
}

impl PhantomSpec {
    /// Samples `count` ellipses: a large body ellipse followed by smaller
    /// inclusions, all inside the image.
    pub fn random(rows: usize, cols: usize, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ellipses = Vec::with_capacity(count);
        for i in 0..count {
            let e = if i == 0 {
                let a = rng.random_range(0.55..0.85);
                let b = rng.random_range(0.55..0.85);
                let reach = f64::max(a, b);
                let slack = (1.0 - reach).min(0.1);
                Ellipse {
                    center: (
                        rng.random_range(-slack..=slack),
                        rng.random_range(-slack..=slack),
                    ),
                    semi_axes: (a, b),
                    rotation: rng.random_range(0.0..std::f64::consts::PI),
                    intensity: rng.random_range(0.5..0.9),
                }
            } else {
                let center: (f64, f64) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                let room = 1.0 - f64::max(center.0.abs(), center.1.abs());
                let hi = room.min(0.3);
                Ellipse {
                    center,
                    semi_axes: (rng.random_range(0.04..hi), rng.random_range(0.04..hi)),
                    rotation: rng.random_range(0.0..std::f64::consts::PI),
                    intensity: rng.random_range(0.0..1.0),
                }
            };
            ellipses.push(e);
        }
        Self {
            rows,
            cols,
            ellipses,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Parameter("phantom must be at least 1x1".into()));
        }
        self.ellipses.iter().try_for_each(Ellipse::validate)
    }
}

/// Rasterizes the phantom by point-sampling pixel centers.
pub fn generate_phantom<T: Scalar>(spec: &PhantomSpec) -> Result<ComplexImage<T>> {
    spec.validate()?;
    let (f, p) = (spec.rows, spec.cols);
    let mut values = vec![T::zero(); f * p];
    for r in 0..f {
        let y = (2 * r + 1) as f64 / f as f64 - 1.0;
        for c in 0..p {
            let x = (2 * c + 1) as f64 / p as f64 - 1.0;
            let v: f64 = spec
                .ellipses
                .iter()
                .filter(|e| e.contains(x, y))
                .map(|e| e.intensity)
                .sum();
            values[r * p + c] = T::of(v);
        }
    }
    ComplexImage::from_real(f, p, &values)
}
