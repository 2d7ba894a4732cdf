//! Zero-padded "same" cross-correlation, its exact adjoint, and the weight
//! gradient shared by both.
//!
//! A bank with spatial size `s` pads `(s - 1) / 2` rows/columns before the
//! image and `s / 2` after, so odd kernels are centred and even kernels lean
//! one tap towards the bottom-right. Every operator keeps the `height x width`
//! grid of its input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::MultibandImage;
use crate::scalar::Scalar;

/// A stack of `size x size` kernels mapping `in_bands` channels to
/// `out_bands` channels.
///
/// Weights are laid out `[row][col][in][out]` so the innermost loop of the
/// convolution walks contiguous output channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank<T = f32> {
    size: usize,
    in_bands: usize,
    out_bands: usize,
    weights: Vec<T>,
}

impl<T: Scalar> FilterBank<T> {
    pub fn zeros(size: usize, in_bands: usize, out_bands: usize) -> Self {
        assert!(size >= 1 && in_bands >= 1 && out_bands >= 1, "empty filter bank");
        Self {
            size,
            in_bands,
            out_bands,
            weights: vec![T::zero(); size * size * in_bands * out_bands],
        }
    }

    pub fn from_vec(size: usize, in_bands: usize, out_bands: usize, weights: Vec<T>) -> Result<Self> {
        if size == 0 || in_bands == 0 || out_bands == 0 {
            return Err(Error::invalid(format!(
                "filter bank needs positive dims, got s={size} in={in_bands} out={out_bands}"
            )));
        }
        let expected = size * size * in_bands * out_bands;
        if weights.len() != expected {
            return Err(Error::shape(format!(
                "filter bank {size}x{size}x{in_bands}->{out_bands} needs {expected} weights, got {}",
                weights.len()
            )));
        }
        Ok(Self {
            size,
            in_bands,
            out_bands,
            weights,
        })
    }

    /// Identity-like bank: a single 1 at the centre tap for every `i -> i`.
    pub fn delta(size: usize, bands: usize) -> Self {
        let mut bank = Self::zeros(size, bands, bands);
        let c = (size - 1) / 2;
        for b in 0..bands {
            bank.set(c, c, b, b, T::one());
        }
        bank
    }

    /// Weights drawn i.i.d. from `U(-half_width, half_width)`.
    pub fn random_uniform<R: Rng>(
        size: usize,
        in_bands: usize,
        out_bands: usize,
        half_width: f64,
        rng: &mut R,
    ) -> Self {
        let n = size * size * in_bands * out_bands;
        let weights = (0..n)
            .map(|_| {
                if half_width > 0.0 {
                    T::of(rng.gen_range(-half_width..half_width))
                } else {
                    T::zero()
                }
            })
            .collect();
        Self {
            size,
            in_bands,
            out_bands,
            weights,
        }
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn in_bands(&self) -> usize {
        self.in_bands
    }

    #[inline]
    pub fn out_bands(&self) -> usize {
        self.out_bands
    }

    /// Number of kernels per output channel (the feature count `K`).
    #[inline]
    pub fn count(&self) -> usize {
        self.in_bands
    }

    /// Fan-in of one output channel.
    pub fn fan_in(&self) -> usize {
        self.size * self.size * self.in_bands
    }

    #[inline]
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    #[inline]
    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    #[inline]
    fn index(&self, row: usize, col: usize, input: usize, output: usize) -> usize {
        ((row * self.size + col) * self.in_bands + input) * self.out_bands + output
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, input: usize, output: usize) -> T {
        self.weights[self.index(row, col, input, output)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, input: usize, output: usize, value: T) {
        let i = self.index(row, col, input, output);
        self.weights[i] = value;
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| *w == T::zero())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.size == other.size && self.in_bands == other.in_bands && self.out_bands == other.out_bands
    }

    pub fn cast<U: Scalar>(&self) -> FilterBank<U> {
        FilterBank {
            size: self.size,
            in_bands: self.in_bands,
            out_bands: self.out_bands,
            weights: self.weights.iter().map(|w| U::of(w.as_f64())).collect(),
        }
    }

    /// Concatenates banks along the output-channel axis, in argument order.
    pub fn concat_out(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_out needs at least one bank"))?;
        if let Some(p) = parts
            .iter()
            .find(|p| p.size != first.size || p.in_bands != first.in_bands)
        {
            return Err(Error::shape(format!(
                "concat_out: bank s={} in={} vs s={} in={}",
                first.size, first.in_bands, p.size, p.in_bands
            )));
        }
        let out_bands: usize = parts.iter().map(|p| p.out_bands).sum();
        let mut weights = Vec::with_capacity(first.size * first.size * first.in_bands * out_bands);
        for tap in 0..first.size * first.size * first.in_bands {
            for p in parts {
                weights.extend_from_slice(&p.weights[tap * p.out_bands..(tap + 1) * p.out_bands]);
            }
        }
        Ok(Self {
            size: first.size,
            in_bands: first.in_bands,
            out_bands,
            weights,
        })
    }

    /// Output channels `[start, start + len)` as a new bank.
    pub fn out_range(&self, start: usize, len: usize) -> Self {
        let mut weights = Vec::with_capacity(self.size * self.size * self.in_bands * len);
        for tap in 0..self.size * self.size * self.in_bands {
            let base = tap * self.out_bands + start;
            weights.extend_from_slice(&self.weights[base..base + len]);
        }
        Self {
            size: self.size,
            in_bands: self.in_bands,
            out_bands: len,
            weights,
        }
    }

    pub fn add_assign_scaled(&mut self, alpha: T, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.weights.iter_mut().zip(&other.weights) {
            *a += alpha * b;
        }
    }

    pub fn norm_sq(&self) -> T {
        self.weights.iter().map(|&w| w * w).sum()
    }
}

#[inline]
fn pad_before(size: usize) -> usize {
    (size - 1) / 2
}

/// Range of output coordinates whose tap `k` lands inside `[0, len)`.
#[inline]
fn valid_range(len: usize, k: usize, pad: usize) -> (usize, usize) {
    // input index = out + k - pad
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}

/// `y[r, c, o] = sum_{i, dr, dc} x[r + dr - p, c + dc - p, i] * W[dr, dc, i, o]`
/// with zeros outside the image.
pub fn conv2d_same<T: Scalar>(
    input: &MultibandImage<T>,
    bank: &FilterBank<T>,
) -> Result<MultibandImage<T>> {
    if input.bands() != bank.in_bands {
        return Err(Error::shape(format!(
            "conv2d_same: input has {} bands, bank expects {}",
            input.bands(),
            bank.in_bands
        )));
    }
    let (h, w, cin) = input.dims();
    let cout = bank.out_bands;
    let s = bank.size;
    let pad = pad_before(s);
    let mut out = MultibandImage::zeros(h, w, cout);
    let src = input.samples();
    let dst = out.samples_mut();
    for dr in 0..s {
        let (r_lo, r_hi) = valid_range(h, dr, pad);
        for dc in 0..s {
            let (c_lo, c_hi) = valid_range(w, dc, pad);
            let tap = &bank.weights[(dr * s + dc) * cin * cout..(dr * s + dc + 1) * cin * cout];
            for r in r_lo..r_hi {
                let ir = r + dr - pad;
                for c in c_lo..c_hi {
                    let ic = c + dc - pad;
                    let x = &src[(ir * w + ic) * cin..(ir * w + ic + 1) * cin];
                    let y = &mut dst[(r * w + c) * cout..(r * w + c + 1) * cout];
                    for (i, &xv) in x.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        let wrow = &tap[i * cout..(i + 1) * cout];
                        for (yo, &wv) in y.iter_mut().zip(wrow) {
                            *yo += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of [`conv2d_same`] in its image argument (the transposed
/// convolution): `<conv2d_same(x, W), y> = <x, conv2d_adjoint(y, W)>`.
pub fn conv2d_adjoint<T: Scalar>(
    input: &MultibandImage<T>,
    bank: &FilterBank<T>,
) -> Result<MultibandImage<T>> {
    if input.bands() != bank.out_bands {
        return Err(Error::shape(format!(
            "conv2d_adjoint: input has {} bands, bank produces {}",
            input.bands(),
            bank.out_bands
        )));
    }
    let (h, w, cout) = input.dims();
    let cin = bank.in_bands;
    let s = bank.size;
    let pad = pad_before(s);
    let mut out = MultibandImage::zeros(h, w, cin);
    let src = input.samples();
    let dst = out.samples_mut();
    for dr in 0..s {
        let (r_lo, r_hi) = valid_range(h, dr, pad);
        for dc in 0..s {
            let (c_lo, c_hi) = valid_range(w, dc, pad);
            let tap = &bank.weights[(dr * s + dc) * cin * cout..(dr * s + dc + 1) * cin * cout];
            for r in r_lo..r_hi {
                let ir = r + dr - pad;
                for c in c_lo..c_hi {
                    let ic = c + dc - pad;
                    let g = &src[(r * w + c) * cout..(r * w + c + 1) * cout];
                    let x = &mut dst[(ir * w + ic) * cin..(ir * w + ic + 1) * cin];
                    for (i, xi) in x.iter_mut().enumerate() {
                        let wrow = &tap[i * cout..(i + 1) * cout];
                        let mut acc = T::zero();
                        for (&gv, &wv) in g.iter().zip(wrow) {
                            acc += gv * wv;
                        }
                        *xi += acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `<conv2d_same(input, W), out_grad>` with respect to `W`.
///
/// The same routine gives the weight gradient of [`conv2d_adjoint`] with the
/// roles of the two images swapped.
pub fn conv2d_weight_grad<T: Scalar>(
    input: &MultibandImage<T>,
    out_grad: &MultibandImage<T>,
    size: usize,
) -> Result<FilterBank<T>> {
    if input.height() != out_grad.height() || input.width() != out_grad.width() {
        return Err(Error::shape(format!(
            "conv2d_weight_grad: spatial {:?} vs {:?}",
            input.dims(),
            out_grad.dims()
        )));
    }
    let (h, w, cin) = input.dims();
    let cout = out_grad.bands();
    let pad = pad_before(size);
    let mut grad = FilterBank::zeros(size, cin, cout);
    let src = input.samples();
    let g = out_grad.samples();
    for dr in 0..size {
        let (r_lo, r_hi) = valid_range(h, dr, pad);
        for dc in 0..size {
            let (c_lo, c_hi) = valid_range(w, dc, pad);
            let base = (dr * size + dc) * cin * cout;
            let tap = &mut grad.weights[base..base + cin * cout];
            for r in r_lo..r_hi {
                let ir = r + dr - pad;
                for c in c_lo..c_hi {
                    let ic = c + dc - pad;
                    let x = &src[(ir * w + ic) * cin..(ir * w + ic + 1) * cin];
                    let gy = &g[(r * w + c) * cout..(r * w + c + 1) * cout];
                    for (i, &xv) in x.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        let row = &mut tap[i * cout..(i + 1) * cout];
                        for (wo, &gv) in row.iter_mut().zip(gy) {
                            *wo += xv * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::inner_product;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop evaluation with explicit bounds checks.
    fn naive_conv(x: &MultibandImage<f64>, bank: &FilterBank<f64>) -> MultibandImage<f64> {
        let (h, w, cin) = x.dims();
        let s = bank.size() as isize;
        let pad = (s - 1) / 2;
        MultibandImage::from_fn(h, w, bank.out_bands(), |r, c, o| {
            let mut acc = 0.0;
            for dr in 0..s {
                for dc in 0..s {
                    let ir = r as isize + dr - pad;
                    let ic = c as isize + dc - pad;
                    if ir < 0 || ic < 0 || ir >= h as isize || ic >= w as isize {
                        continue;
                    }
                    for i in 0..cin {
                        acc += x.get(ir as usize, ic as usize, i)
                            * bank.get(dr as usize, dc as usize, i, o);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn scalar_case() {
        let x = MultibandImage::<f32>::from_vec(1, 1, 1, vec![2.0]).unwrap();
        let k = FilterBank::<f32>::from_vec(1, 1, 1, vec![3.0]).unwrap();
        assert_eq!(conv2d_same(&x, &k).unwrap().samples(), &[6.0]);
        let y = MultibandImage::<f32>::from_vec(1, 1, 1, vec![6.0]).unwrap();
        assert_eq!(conv2d_adjoint(&y, &k).unwrap().samples(), &[18.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for size in [1, 3, 4, 5, 8] {
            let x = MultibandImage::<f32>::random_uniform(7, 6, 3, -1.0, 1.0, &mut rng);
            let d = FilterBank::delta(size, 3);
            assert_eq!(conv2d_same(&x, &d).unwrap(), x);
            assert_eq!(conv2d_adjoint(&x, &d).unwrap(), x);
        }
    }

    #[test]
    fn zero_kernel_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = MultibandImage::<f32>::random_uniform(5, 5, 2, -1.0, 1.0, &mut rng);
        let z = FilterBank::zeros(3, 2, 4);
        let y = conv2d_same(&x, &z).unwrap();
        assert!(y.samples().iter().all(|&v| v == 0.0));
        assert_eq!(y.bands(), 4);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (h, w, cin, cout, s) in [(4, 4, 1, 1, 3), (6, 5, 3, 2, 4), (5, 7, 2, 3, 8), (3, 3, 1, 1, 5)] {
            let x = MultibandImage::<f64>::random_uniform(h, w, cin, -1.0, 1.0, &mut rng);
            let k = FilterBank::<f64>::random_uniform(s, cin, cout, 1.0, &mut rng);
            let fast = conv2d_same(&x, &k).unwrap();
            let slow = naive_conv(&x, &k);
            for (a, b) in fast.samples().iter().zip(slow.samples()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn adjoint_identity_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in [2, 3, 4] {
            let x = MultibandImage::<f64>::random_uniform(6, 5, 3, -1.0, 1.0, &mut rng);
            let y = MultibandImage::<f64>::random_uniform(6, 5, 2, -1.0, 1.0, &mut rng);
            let k = FilterBank::<f64>::random_uniform(s, 3, 2, 1.0, &mut rng);
            let lhs = inner_product(&conv2d_same(&x, &k).unwrap(), &y).unwrap();
            let rhs = inner_product(&x, &conv2d_adjoint(&y, &k).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * (lhs.abs() + 1.0));
        }
    }

    #[test]
    fn weight_grad_matches_inner_product_derivative() {
        // <conv(x, W), g> is linear in W, so its gradient is exact.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = MultibandImage::<f64>::random_uniform(5, 4, 2, -1.0, 1.0, &mut rng);
        let g = MultibandImage::<f64>::random_uniform(5, 4, 3, -1.0, 1.0, &mut rng);
        let k = FilterBank::<f64>::random_uniform(3, 2, 3, 1.0, &mut rng);
        let grad = conv2d_weight_grad(&x, &g, 3).unwrap();
        let base = inner_product(&conv2d_same(&x, &k).unwrap(), &g).unwrap();
        for idx in [0, 7, 20, 53] {
            let mut kp = k.clone();
            kp.weights_mut()[idx] += 1.0;
            let bumped = inner_product(&conv2d_same(&x, &kp).unwrap(), &g).unwrap();
            assert!((bumped - base - grad.weights()[idx]).abs() < 1e-10);
        }
    }

    #[test]
    fn shape_errors() {
        let x = MultibandImage::<f32>::zeros(3, 3, 2);
        let k = FilterBank::<f32>::zeros(3, 1, 1);
        assert!(matches!(conv2d_same(&x, &k), Err(Error::Shape(_))));
        assert!(matches!(conv2d_adjoint(&x, &k), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_out_then_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = FilterBank::<f32>::random_uniform(3, 4, 1, 1.0, &mut rng);
        let b = FilterBank::<f32>::random_uniform(3, 4, 2, 1.0, &mut rng);
        let l = FilterBank::concat_out(&[&a, &b]).unwrap();
        assert_eq!(l.out_bands(), 3);
        assert_eq!(l.out_range(0, 1), a);
        assert_eq!(l.out_range(1, 2), b);
    }
}
