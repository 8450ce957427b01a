//! Image-quality metrics and the per-step reward.
//!
//! All metrics accumulate in `f64` regardless of the image scalar type.

use crate::error::{size_err, Error, Result};
use crate::kspace::RealImage;
use crate::num::Scalar;

/// Value reported by [`psnr`] for identical inputs.
pub const PSNR_CAP_DB: f64 = 300.0;

/// Structural-similarity configuration: uniform `window x window` box,
/// stabilizers `K1`, `K2` and dynamic range `Lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn with_range(dynamic_range: f64) -> Self {
        Self {
            dynamic_range,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "SSIM window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::Parameter(
                "SSIM K1, K2 and dynamic range must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(x: &RealImage<T>, y: &RealImage<T>) -> Result<()> {
    if !x.same_shape(y) {
        return Err(size_err(format!(
            "{}x{} vs {}x{}",
            x.rows(),
            x.cols(),
            y.rows(),
            y.cols()
        )));
    }
    Ok(())
}

/// Summed-area table with a zero border row and column.
fn integral(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let w = cols + 1;
    let mut s = vec![0.0; (rows + 1) * w];
    for r in 0..rows {
        let mut run = 0.0;
        for c in 0..cols {
            run += f(r, c);
            s[(r + 1) * w + c + 1] = s[r * w + c + 1] + run;
        }
    }
    s
}

#[inline]
fn box_sum(s: &[f64], cols: usize, r: usize, c: usize, n: usize) -> f64 {
    let w = cols + 1;
    s[(r + n) * w + c + n] - s[r * w + c + n] - s[(r + n) * w + c] + s[r * w + c]
}

/// Mean structural similarity over every valid window position, using
/// sample (N - 1) covariance inside each window.
pub fn ssim<T: Scalar>(x: &RealImage<T>, y: &RealImage<T>, p: &SsimParams) -> Result<f64> {
    check_pair(x, y)?;
    p.validate()?;
    let (rows, cols, n) = (x.rows(), x.cols(), p.window);
    if rows < n || cols < n {
        return Err(size_err(format!(
            "{}x{} image smaller than {}x{} window",
            rows, cols, n, n
        )));
    }
    let xv = |r, c| x.get(r, c).as_f64();
    let yv = |r, c| y.get(r, c).as_f64();
    let sx = integral(rows, cols, xv);
    let sy = integral(rows, cols, yv);
    let sxx = integral(rows, cols, |r, c| xv(r, c) * xv(r, c));
    let syy = integral(rows, cols, |r, c| yv(r, c) * yv(r, c));
    let sxy = integral(rows, cols, |r, c| xv(r, c) * yv(r, c));

    let np = (n * n) as f64;
    let cov_norm = np / (np - 1.0);
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);

    let mut total = 0.0;
    let (nr, nc) = (rows - n + 1, cols - n + 1);
    for r in 0..nr {
        for c in 0..nc {
            let mx = box_sum(&sx, cols, r, c, n) / np;
            let my = box_sum(&sy, cols, r, c, n) / np;
            let vx = cov_norm * (box_sum(&sxx, cols, r, c, n) / np - mx * mx);
            let vy = cov_norm * (box_sum(&syy, cols, r, c, n) / np - my * my);
            let vxy = cov_norm * (box_sum(&sxy, cols, r, c, n) / np - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * vxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (nr * nc) as f64)
}

pub fn mse<T: Scalar>(x: &RealImage<T>, y: &RealImage<T>) -> Result<f64> {
    check_pair(x, y)?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(sum / x.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB; identical inputs report [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(x: &RealImage<T>, y: &RealImage<T>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Parameter(format!(
            "PSNR peak must be positive, got {}",
            peak
        )));
    }
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

/// `||x - ref||^2 / ||ref||^2`.
pub fn nmse<T: Scalar>(x: &RealImage<T>, reference: &RealImage<T>) -> Result<f64> {
    check_pair(x, reference)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in x.data().iter().zip(reference.data()) {
        let (a, b) = (a.as_f64(), b.as_f64());
        num += (a - b) * (a - b);
        den += b * b;
    }
    if den == 0.0 {
        return Err(Error::DegenerateReference);
    }
    Ok(num / den)
}

/// Quality improvement from `img_prev` to `img_t`, measured against `img_gt`.
pub fn reward<T: Scalar>(
    img_t: &RealImage<T>,
    img_prev: &RealImage<T>,
    img_gt: &RealImage<T>,
    p: &SsimParams,
) -> Result<f64> {
    check_pair(img_t, img_prev)?;
    Ok(ssim(img_t, img_gt, p)? - ssim(img_prev, img_gt, p)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> RealImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealImage::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    fn constant(rows: usize, cols: usize, v: f64) -> RealImage<f64> {
        RealImage::new(rows, cols, vec![v; rows * cols]).unwrap()
    }

    /// Window-by-window evaluation without summed-area tables.
    fn direct_ssim(x: &RealImage<f64>, y: &RealImage<f64>, p: &SsimParams) -> f64 {
        let n = p.window;
        let np = (n * n) as f64;
        let c1 = (p.k1 * p.dynamic_range).powi(2);
        let c2 = (p.k2 * p.dynamic_range).powi(2);
        let mut acc = 0.0;
        let mut count = 0;
        for r in 0..=x.rows() - n {
            for c in 0..=x.cols() - n {
                let mut xs = vec![];
                let mut ys = vec![];
                for i in 0..n {
                    for j in 0..n {
                        xs.push(x.get(r + i, c + j));
                        ys.push(y.get(r + i, c + j));
                    }
                }
                let mx = xs.iter().sum::<f64>() / np;
                let my = ys.iter().sum::<f64>() / np;
                let vx = xs.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (np - 1.0);
                let vy = ys.iter().map(|a| (a - my).powi(2)).sum::<f64>() / (np - 1.0);
                let vxy = xs
                    .iter()
                    .zip(&ys)
                    .map(|(a, b)| (a - mx) * (b - my))
                    .sum::<f64>()
                    / (np - 1.0);
                acc += ((2.0 * mx * my + c1) * (2.0 * vxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn identity() {
        let x = random(16, 12, 1);
        let s = ssim(&x, &x, &SsimParams::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_images_closed_form() {
        // mu_x = 0, mu_y = 1, no variance: SSIM = C1 / (1 + C1).
        let p = SsimParams::default();
        let s = ssim(&constant(8, 8, 0.0), &constant(8, 8, 1.0), &p).unwrap();
        let c1 = 1e-4;
        assert!((s - c1 / (1.0 + c1)).abs() < 1e-15);
    }

    #[test]
    fn matches_direct_window_evaluation() {
        let p = SsimParams::with_range(1.0);
        for seed in 0..5 {
            let x = random(13, 11, seed);
            let y = random(13, 11, seed + 100);
            let fast = ssim(&x, &y, &p).unwrap();
            let slow = direct_ssim(&x, &y, &p);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn errors() {
        let p = SsimParams::default();
        assert!(matches!(
            ssim(&random(8, 8, 0), &random(8, 9, 0), &p),
            Err(Error::Size(_))
        ));
        assert!(matches!(
            ssim(&random(6, 8, 0), &random(6, 8, 0), &p),
            Err(Error::Size(_))
        ));
        let even = SsimParams { window: 4, ..p };
        assert!(matches!(
            ssim(&random(8, 8, 0), &random(8, 8, 0), &even),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            nmse(&random(4, 4, 0), &constant(4, 4, 0.0)),
            Err(Error::DegenerateReference)
        ));
        assert!(psnr(&random(4, 4, 0), &random(4, 4, 1), 0.0).is_err());
    }

    #[test]
    fn psnr_values() {
        let x = random(4, 4, 3);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
        assert!(
            psnr(&constant(4, 4, 0.0), &constant(4, 4, 1.0), 1.0)
                .unwrap()
                .abs()
                < 1e-12
        );
        let a = constant(2, 2, 0.0);
        let b = RealImage::new(2, 2, vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        // MSE = 0.25 / 4 = 0.0625
        let expected = 10.0 * (1.0f64 / 0.0625).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 12.0412).abs() < 1e-4);
    }

    #[test]
    fn nmse_values() {
        let r = random(4, 4, 8);
        assert_eq!(nmse(&r, &r).unwrap(), 0.0);
        let doubled = RealImage::new(4, 4, r.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        assert!((nmse(&doubled, &r).unwrap() - 1.0).abs() < 1e-15);

        let x = random(4, 4, 9);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                num += (x.get(i, j) - r.get(i, j)).powi(2);
                den += r.get(i, j).powi(2);
            }
        }
        assert!((nmse(&x, &r).unwrap() - num / den).abs() < 1e-7);
    }

    #[test]
    fn reward_cases() {
        let p = SsimParams::default();
        let gt = random(10, 10, 1);
        let prev = random(10, 10, 2);
        assert_eq!(reward(&prev, &prev, &gt, &p).unwrap(), 0.0);
        let r = reward(&gt, &prev, &gt, &p).unwrap();
        let expected = 1.0 - ssim(&prev, &gt, &p).unwrap();
        assert!(r > 0.0);
        assert!((r - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(seed in 0u64..10_000) {
            let x = random(9, 10, seed);
            let y = random(9, 10, seed ^ 0xdead);
            let p = SsimParams::default();
            let a = ssim(&x, &y, &p).unwrap();
            let b = ssim(&y, &x, &p).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn nmse_scaling(a in -3.0f64..3.0, seed in 0u64..1000) {
            let r = random(5, 5, seed);
            let scaled = RealImage::new(5, 5, r.data().iter().map(|v| a * v).collect()).unwrap();
            let got = nmse(&scaled, &r).unwrap();
            prop_assert!((got - (a - 1.0).powi(2)).abs() < 1e-9);
        }
    }
}
