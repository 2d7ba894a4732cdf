//! Multiband image containers.
//!
//! Samples are stored row-major and band-interleaved by pixel: the value of
//! band `b` at `(row, col)` lives at `(row * width + col) * bands + b`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct MultibandImage<T = f32> {
    height: usize,
    width: usize,
    bands: usize,
    samples: Vec<T>,
}

/// `K` single-band feature maps sharing the spatial grid of an image.
///
/// Layout and arithmetic are identical to [`MultibandImage`]; the alias keeps
/// signatures readable where a value is a stack of coefficient maps rather
/// than an observation.
pub type FeatureStack<T = f32> = MultibandImage<T>;

impl<T: Scalar> MultibandImage<T> {
    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        Self {
            height,
            width,
            bands,
            samples: vec![T::zero(); height * width * bands],
        }
    }

    pub fn filled(height: usize, width: usize, bands: usize, value: T) -> Self {
        Self {
            height,
            width,
            bands,
            samples: vec![value; height * width * bands],
        }
    }

    pub fn from_vec(height: usize, width: usize, bands: usize, samples: Vec<T>) -> Result<Self> {
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(bands))
            .ok_or_else(|| Error::DimOverflow(format!("{height}x{width}x{bands}")))?;
        if samples.len() != expected {
            return Err(Error::shape(format!(
                "{height}x{width}x{bands} image needs {expected} samples, got {}",
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            height,
            width,
            bands,
            samples,
        })
    }

    /// Builds an image from a per-sample generator `f(row, col, band)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        bands: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut samples = Vec::with_capacity(height * width * bands);
        for r in 0..height {
            for c in 0..width {
                for b in 0..bands {
                    samples.push(f(r, c, b));
                }
            }
        }
        Self {
            height,
            width,
            bands,
            samples,
        }
    }

    pub fn random_uniform<R: Rng>(
        height: usize,
        width: usize,
        bands: usize,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        Self::from_fn(height, width, bands, |_, _, _| T::of(rng.gen_range(lo..hi)))
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn bands(&self) -> usize {
        self.bands
    }

    /// Number of feature maps when the value is used as a [`FeatureStack`].
    #[inline]
    pub fn count(&self) -> usize {
        self.bands
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    #[inline]
    pub fn samples_mut(&mut self) -> &mut [T] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> T {
        self.samples[(row * self.width + col) * self.bands + band]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, band: usize, value: T) {
        self.samples[(row * self.width + col) * self.bands + band] = value;
    }

    /// All bands of one pixel.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.bands;
        &self.samples[start..start + self.bands]
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_same_dims(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> MultibandImage<U> {
        MultibandImage {
            height: self.height,
            width: self.width,
            bands: self.bands,
            samples: self.samples.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Copies band `b` out as a single-band image.
    pub fn band(&self, b: usize) -> Self {
        Self::from_fn(self.height, self.width, 1, |r, c, _| self.get(r, c, b))
    }

    /// Consecutive bands `[start, start + len)` as a new image.
    pub fn band_range(&self, start: usize, len: usize) -> Self {
        Self::from_fn(self.height, self.width, len, |r, c, b| {
            self.get(r, c, start + b)
        })
    }

    /// Stacks images along the band axis, in argument order.
    pub fn concat_bands(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_bands needs at least one image"))?;
        let (h, w) = (first.height, first.width);
        if let Some(p) = parts.iter().find(|p| p.height != h || p.width != w) {
            return Err(Error::shape(format!(
                "concat_bands: spatial {h}x{w} vs {}x{}",
                p.height, p.width
            )));
        }
        let bands: usize = parts.iter().map(|p| p.bands).sum();
        let mut samples = Vec::with_capacity(h * w * bands);
        for px in 0..h * w {
            for p in parts {
                samples.extend_from_slice(&p.samples[px * p.bands..(px + 1) * p.bands]);
            }
        }
        Ok(Self {
            height: h,
            width: w,
            bands,
            samples,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bands: self.bands,
            samples: self.samples.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_dims(other, "elementwise op")?;
        Ok(Self {
            height: self.height,
            width: self.width,
            bands: self.bands,
            samples: self
                .samples
                .iter()
                .zip(&other.samples)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_same_dims(other, "axpy")?;
        for (a, &b) in self.samples.iter_mut().zip(&other.samples) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> T {
        self.samples.iter().map(|&v| v * v).sum()
    }

    pub fn l1_norm(&self) -> T {
        self.samples.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> T {
        self.samples
            .iter()
            .fold(T::zero(), |m, v| if v.abs() > m { v.abs() } else { m })
    }

    /// Largest elementwise absolute difference; `None` when dims differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if !self.same_dims(other) {
            return None;
        }
        Some(
            self.samples
                .iter()
                .zip(&other.samples)
                .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())),
        )
    }

    /// Crops the window `[row, row + height) x [col, col + width)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::shape(format!(
                "crop {height}x{width}@({row},{col}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, self.bands, |r, c, b| {
            self.get(row + r, col + c, b)
        }))
    }
}

/// Euclidean inner product `sum_i a_i * b_i`.
pub fn inner_product<T: Scalar>(a: &MultibandImage<T>, b: &MultibandImage<T>) -> Result<T> {
    a.check_same_dims(b, "inner_product")?;
    Ok(a.samples
        .iter()
        .zip(&b.samples)
        .map(|(&x, &y)| x * y)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inner_product_small() {
        let a = MultibandImage::<f64>::from_vec(1, 2, 1, vec![1.0, 2.0]).unwrap();
        let b = MultibandImage::<f64>::from_vec(1, 2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(inner_product(&a, &b).unwrap(), 11.0);
        let z = MultibandImage::<f64>::zeros(1, 2, 1);
        assert_eq!(inner_product(&a, &z).unwrap(), 0.0);
    }

    #[test]
    fn inner_product_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = MultibandImage::<f64>::random_uniform(8, 8, 1, -1.0, 1.0, &mut rng);
        let b = MultibandImage::<f64>::random_uniform(8, 8, 1, -1.0, 1.0, &mut rng);
        let mut expected = 0.0;
        for r in 0..8 {
            for c in 0..8 {
                expected += a.get(r, c, 0) * b.get(r, c, 0);
            }
        }
        assert_eq!(inner_product(&a, &b).unwrap(), expected);
        assert_eq!(inner_product(&a, &b).unwrap(), inner_product(&b, &a).unwrap());
        assert!(inner_product(&a, &a).unwrap() >= 0.0);
    }

    #[test]
    fn inner_product_rejects_mismatch() {
        let a = MultibandImage::<f32>::zeros(2, 2, 1);
        let b = MultibandImage::<f32>::zeros(2, 2, 2);
        assert!(matches!(inner_product(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn from_vec_validates() {
        assert!(matches!(
            MultibandImage::<f32>::from_vec(2, 2, 1, vec![0.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(MultibandImage::<f32>::from_vec(1, 1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn concat_and_band_range_are_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = MultibandImage::<f32>::random_uniform(3, 4, 1, 0.0, 1.0, &mut rng);
        let b = MultibandImage::<f32>::random_uniform(3, 4, 2, 0.0, 1.0, &mut rng);
        let n = MultibandImage::concat_bands(&[&a, &b]).unwrap();
        assert_eq!(n.bands(), 3);
        assert_eq!(n.band_range(0, 1), a);
        assert_eq!(n.band_range(1, 2), b);
    }
}
