//! Wald's-protocol degradation and the EXP interpolation baseline.

use crate::error::{Error, Result};
use crate::raster::MultibandImage;
use crate::scalar::Scalar;

/// Gaussian width at ratio 4; other ratios scale it proportionally.
pub const SIGMA_AT_RATIO_4: f64 = 1.7;

/// Normalised 1-D Gaussian taps, radius `ceil(3σ)`.
pub fn gaussian_taps(ratio: usize) -> Vec<f64> {
    let sigma = SIGMA_AT_RATIO_4 * ratio as f64 / 4.0;
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Filters every band along one axis with clamped (replicate) indexing,
/// keeping only output positions `0, step, 2·step, ...`.
fn filter_axis<T: Scalar>(img: &MultibandImage<T>, taps: &[f64], rows: bool, step: usize) -> MultibandImage<T> {
    let (h, w, b) = img.dims();
    let radius = (taps.len() / 2) as isize;
    let (oh, ow) = if rows { (h / step, w) } else { (h, w / step) };
    let mut out = MultibandImage::zeros(oh, ow, b);
    let len = if rows { h } else { w } as isize;
    let mut acc = vec![0.0f64; b];
    for r in 0..oh {
        for c in 0..ow {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let centre = if rows { r * step } else { c * step } as isize;
            for (k, t) in taps.iter().enumerate() {
                let idx = (centre + k as isize - radius).clamp(0, len - 1) as usize;
                let px = if rows { img.pixel(idx, c) } else { img.pixel(r, idx) };
                for (a, v) in acc.iter_mut().zip(px) {
                    *a += t * v.as_f64();
                }
            }
            for (k, a) in acc.iter().enumerate() {
                out.set(r, c, k, T::of(*a));
            }
        }
    }
    out
}

/// Separable Gaussian blur (replicate boundary) followed by keeping every
/// `ratio`-th row and column starting at 0.
pub fn blur_decimate<T: Scalar>(img: &MultibandImage<T>, ratio: usize) -> Result<MultibandImage<T>> {
    if ratio == 0 {
        return Err(Error::invalid("ratio must be >= 1"));
    }
    if img.height() % ratio != 0 || img.width() % ratio != 0 {
        return Err(Error::shape(format!(
            "{}x{} is not divisible by ratio {ratio}",
            img.height(),
            img.width()
        )));
    }
    if ratio == 1 {
        return Ok(img.clone());
    }
    let taps = gaussian_taps(ratio);
    let tmp = filter_axis(img, &taps, true, ratio);
    Ok(filter_axis(&tmp, &taps, false, ratio))
}

/// Keys cubic (a = −0.5) weights for the half-sample positions.
const NEAR: f64 = 0.5625;
const FAR: f64 = -0.0625;

fn double_axis<T: Scalar>(img: &MultibandImage<T>, rows: bool) -> MultibandImage<T> {
    let (h, w, b) = img.dims();
    let (oh, ow) = if rows { (2 * h, w) } else { (h, 2 * w) };
    let len = if rows { h } else { w } as isize;
    let mut out = MultibandImage::zeros(oh, ow, b);
    let at = |i: isize, other: usize| -> &[T] {
        let i = i.clamp(0, len - 1) as usize;
        if rows {
            img.pixel(i, other)
        } else {
            img.pixel(other, i)
        }
    };
    for r in 0..oh {
        for c in 0..ow {
            let (pos, other) = if rows { (r, c) } else { (c, r) };
            let i = (pos / 2) as isize;
            for k in 0..b {
                let v = if pos % 2 == 0 {
                    at(i, other)[k]
                } else {
                    let near = at(i, other)[k].as_f64() + at(i + 1, other)[k].as_f64();
                    let far = at(i - 1, other)[k].as_f64() + at(i + 2, other)[k].as_f64();
                    T::of(NEAR * near + FAR * far)
                };
                out.set(r, c, k, v);
            }
        }
    }
    out
}

/// EXP baseline: repeated ×2 zero insertion plus separable cubic
/// interpolation (clamped boundary). `ratio` must be a power of two.
pub fn exp_upsample<T: Scalar>(ms: &MultibandImage<T>, ratio: usize) -> Result<MultibandImage<T>> {
    if ratio == 0 || !ratio.is_power_of_two() {
        return Err(Error::invalid(format!("unsupported upsampling ratio {ratio}")));
    }
    let mut out = ms.clone();
    let mut r = ratio;
    while r > 1 {
        out = double_axis(&double_axis(&out, true), false);
        r /= 2;
    }
    Ok(out)
}

/// The four rasters of one reduced-resolution example.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedPair<T = f32> {
    pub pan: MultibandImage<T>,
    pub ms: MultibandImage<T>,
    pub ms_up: MultibandImage<T>,
    pub gt: MultibandImage<T>,
}

/// Degrades `gt` to the MS input and interpolates it back; `pan` is used as
/// is at the working scale.
pub fn make_reduced_pair<T: Scalar>(
    gt: &MultibandImage<T>,
    pan: &MultibandImage<T>,
    ratio: usize,
) -> Result<ReducedPair<T>> {
    if pan.bands() != 1 {
        return Err(Error::shape(format!("PAN must have one band, got {}", pan.bands())));
    }
    if (pan.height(), pan.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(format!("PAN {:?} vs reference {:?}", pan.dims(), gt.dims())));
    }
    let ms = blur_decimate(gt, ratio)?;
    let ms_up = exp_upsample(&ms, ratio)?;
    Ok(ReducedPair {
        pan: pan.clone(),
        ms,
        ms_up,
        gt: gt.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::scc;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn taps_are_normalised_and_symmetric() {
        for ratio in [2, 4, 8] {
            let t = gaussian_taps(ratio);
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert_eq!(t.len() % 2, 1);
            for i in 0..t.len() {
                assert_eq!(t[i], t[t.len() - 1 - i]);
            }
        }
        assert_eq!(gaussian_taps(4).len(), 2 * 6 + 1);
    }

    #[test]
    fn constants_survive_both_directions() {
        let c = MultibandImage::<f64>::filled(16, 12, 3, 0.7);
        let d = blur_decimate(&c, 4).unwrap();
        assert_eq!(d.dims(), (4, 3, 3));
        assert!(d.samples().iter().all(|v| (v - 0.7).abs() < 1e-12));
        let u = exp_upsample(&d, 4).unwrap();
        assert_eq!(u.dims(), (16, 12, 3));
        assert!(u.samples().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn indivisible_and_unsupported_ratios() {
        let img = MultibandImage::<f64>::zeros(10, 8, 1);
        assert!(matches!(blur_decimate(&img, 4), Err(Error::Shape(_))));
        assert!(exp_upsample(&img, 3).is_err());
        assert!(exp_upsample(&img, 0).is_err());
    }

    #[test]
    fn impulse_matches_direct_convolution() {
        let (h, w) = (40, 40);
        let (pr, pc) = (20, 17);
        let mut img = MultibandImage::<f64>::zeros(h, w, 1);
        img.set(pr, pc, 0, 1.0);
        let out = blur_decimate(&img, 4).unwrap();
        let sigma = 1.7;
        let g = |d: f64| (-d * d / (2.0 * sigma * sigma)).exp();
        let norm: f64 = (-6..=6).map(|i| g(i as f64)).sum();
        for r in 0..out.height() {
            for c in 0..out.width() {
                let (dr, dc) = ((4 * r) as f64 - pr as f64, (4 * c) as f64 - pc as f64);
                let want = if dr.abs() <= 6.0 && dc.abs() <= 6.0 { g(dr) * g(dc) / (norm * norm) } else { 0.0 };
                assert!((out.get(r, c, 0) - want).abs() < 1e-6, "({r},{c})");
            }
        }
    }

    #[test]
    fn ramp_and_quadratic_reproduced_in_interior() {
        // cubic convolution with a = −0.5 reproduces polynomials up to degree 2
        for f in [|x: f64| 0.3 * x + 1.0, |x: f64| 0.05 * x * x - 0.2 * x + 2.0] {
            let n = 12;
            let row = MultibandImage::<f64>::from_fn(1, n, 1, |_, c, _| f(c as f64));
            let up = exp_upsample(&row, 4).unwrap();
            assert_eq!(up.dims(), (4, 4 * n, 1));
            for c in 8..4 * (n - 3) {
                let want = f(c as f64 / 4.0);
                assert!((up.get(0, c, 0) - want).abs() < 1e-4, "col {c}");
            }
        }
    }

    #[test]
    fn reduced_pair_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = MultibandImage::<f32>::random_uniform(64, 64, 8, 0.0, 1.0, &mut rng);
        let pan = MultibandImage::<f32>::random_uniform(64, 64, 1, 0.0, 1.0, &mut rng);
        let p = make_reduced_pair(&gt, &pan, 4).unwrap();
        assert_eq!(p.ms.dims(), (16, 16, 8));
        assert_eq!(p.ms_up.dims(), (64, 64, 8));
        assert_eq!(p.pan, pan);
        assert!(make_reduced_pair(&gt, &gt, 4).is_err());
        assert!(make_reduced_pair(&gt, &pan.crop(0, 0, 32, 32).unwrap(), 4).is_err());
    }

    #[test]
    fn round_trip_correlates_with_smooth_reference() {
        let gt = MultibandImage::<f64>::from_fn(64, 64, 2, |r, c, b| {
            let (x, y) = (r as f64 / 64.0, c as f64 / 64.0);
            2.0 + (6.0 * x + b as f64).sin() * (5.0 * y).cos() + 0.5 * (13.0 * x * y).sin()
        });
        let back = exp_upsample(&blur_decimate(&gt, 4).unwrap(), 4).unwrap();
        assert!(scc(&back, &gt).unwrap() > 0.0);
    }
}
