//! Reduced-resolution (Q2n, SAM, ERGAS, SCC) and full-resolution
//! (D_λ, D_s, QNR) quality indexes.
//!
//! All accumulation is done in `f64` regardless of the image precision.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::MultibandImage;
use crate::scalar::Scalar;

/// Window side used by Q2n and the UIQI terms of D_λ / D_s.
pub const DEFAULT_BLOCK: usize = 32;

fn check_dims<T: Scalar>(a: &MultibandImage<T>, b: &MultibandImage<T>) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::shape(format!("fused {:?} vs reference {:?}", a.dims(), b.dims())))
    }
}

fn band_f64<T: Scalar>(img: &MultibandImage<T>, b: usize) -> Vec<f64> {
    let bands = img.bands();
    img.samples().iter().skip(b).step_by(bands).map(|v| v.as_f64()).collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Mean spectral angle in degrees. Pixels where either vector has zero norm
/// are skipped.
pub fn sam<T: Scalar>(fused: &MultibandImage<T>, reference: &MultibandImage<T>) -> Result<f64> {
    check_dims(fused, reference)?;
    if fused.bands() < 2 {
        return Err(Error::invalid("sam needs at least 2 bands"));
    }
    let bands = fused.bands();
    let mut total = 0.0;
    let mut used = 0usize;
    for (x, y) in fused.samples().chunks(bands).zip(reference.samples().chunks(bands)) {
        let nx = x.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            continue;
        }
        // 2·atan2(|x̂ − ŷ|, |x̂ + ŷ|) stays accurate for nearly parallel vectors
        let (mut d, mut s) = (0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            let (a, b) = (a.as_f64() / nx, b.as_f64() / ny);
            d += (a - b) * (a - b);
            s += (a + b) * (a + b);
        }
        total += 2.0 * d.sqrt().atan2(s.sqrt());
        used += 1;
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("sam: every pixel has zero norm".into()));
    }
    Ok((total / used as f64).to_degrees())
}

/// `100 / ratio · sqrt(mean_b (RMSE_b / μ_b)²)` with `μ_b` the reference band
/// mean.
pub fn ergas<T: Scalar>(fused: &MultibandImage<T>, reference: &MultibandImage<T>, ratio: usize) -> Result<f64> {
    check_dims(fused, reference)?;
    if ratio == 0 {
        return Err(Error::invalid("ratio must be >= 1"));
    }
    let bands = fused.bands();
    let mut acc = 0.0;
    for b in 0..bands {
        let f = band_f64(fused, b);
        let r = band_f64(reference, b);
        let mu = mean(&r);
        if mu == 0.0 {
            return Err(Error::UndefinedMetric(format!("ergas: reference band {b} has zero mean")));
        }
        let mse = f.iter().zip(&r).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / f.len() as f64;
        acc += mse / (mu * mu);
    }
    Ok(100.0 / ratio as f64 * (acc / bands as f64).sqrt())
}

/// 5-point Laplacian of one band with zero padding.
fn laplacian(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            x[r as usize * w + c as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            out[r as usize * w + c as usize] =
                4.0 * at(r, c) - at(r - 1, c) - at(r + 1, c) - at(r, c - 1) - at(r, c + 1);
        }
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
    }
}

/// Spatial correlation coefficient: band-averaged Pearson correlation of the
/// Laplacian-filtered images.
pub fn scc<T: Scalar>(fused: &MultibandImage<T>, reference: &MultibandImage<T>) -> Result<f64> {
    check_dims(fused, reference)?;
    let (h, w, bands) = fused.dims();
    let mut total = 0.0;
    for b in 0..bands {
        let f = laplacian(&band_f64(fused, b), h, w);
        let r = laplacian(&band_f64(reference, b), h, w);
        total += pearson(&f, &r)
            .ok_or_else(|| Error::UndefinedMetric(format!("scc: band {b} has a constant high-pass response")))?;
    }
    Ok(total / bands as f64)
}

/// Universal image quality index of two equally sized windows,
/// `4·σ_ab·ā·b̄ / ((σ_a² + σ_b²)(ā² + b̄²))`, with population moments. A zero
/// denominator yields 0.
pub fn uiqi_block(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("uiqi windows have {} and {} pixels", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("uiqi window needs at least 2 pixels"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let (sab, saa, sbb) = (sab / n, saa / n, sbb / n);
    let den = (saa + sbb) * (ma * ma + mb * mb);
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(4.0 * sab * ma * mb / den)
}

/// Top-left corners of the non-overlapping `block × block` windows; an image
/// smaller than one block in either direction is a single window.
fn windows(h: usize, w: usize, block: usize) -> (Vec<(usize, usize)>, usize, usize) {
    let bh = if h < block { h } else { block };
    let bw = if w < block { w } else { block };
    let mut out = Vec::new();
    for r in (0..=h - bh).step_by(bh) {
        for c in (0..=w - bw).step_by(bw) {
            out.push((r, c));
        }
    }
    (out, bh, bw)
}

fn window_values(x: &[f64], w: usize, r0: usize, c0: usize, bh: usize, bw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(bh * bw);
    for r in r0..r0 + bh {
        out.extend_from_slice(&x[r * w + c0..r * w + c0 + bw]);
    }
    out
}

/// UIQI averaged over non-overlapping `block × block` windows of two
/// single-band planes of size `h × w`.
fn blockwise_uiqi(a: &[f64], b: &[f64], h: usize, w: usize, block: usize) -> Result<f64> {
    let (corners, bh, bw) = windows(h, w, block);
    let mut total = 0.0;
    for &(r, c) in &corners {
        total += uiqi_block(&window_values(a, w, r, c, bh, bw), &window_values(b, w, r, c, bh, bw))?;
    }
    Ok(total / corners.len() as f64)
}

/// Cayley–Dickson product of two hypercomplex numbers of equal power-of-two
/// dimension: `(a, b)(c, d) = (ac − d*b, da + bc*)`.
pub fn cd_mul(x: &[f64], y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len();
    if n == 1 {
        return vec![x[0] * y[0]];
    }
    let h = n / 2;
    let (a, b) = x.split_at(h);
    let (c, d) = y.split_at(h);
    let ac = cd_mul(a, c);
    let db = cd_mul(&cd_conj(d), b);
    let da = cd_mul(d, a);
    let bc = cd_mul(b, &cd_conj(c));
    let mut out = Vec::with_capacity(n);
    out.extend(ac.iter().zip(&db).map(|(p, q)| p - q));
    out.extend(da.iter().zip(&bc).map(|(p, q)| p + q));
    out
}

/// Hypercomplex conjugate: real part kept, every imaginary part negated.
pub fn cd_conj(x: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = x.iter().map(|v| -v).collect();
    out[0] = x[0];
    out
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Hypercomplex quality of one window: pixels are `dim`-component vectors
/// stored row-major in `z` (reference) and `zh` (fused).
fn q2n_block(z: &[Vec<f64>], zh: &[Vec<f64>], dim: usize) -> f64 {
    let n = z.len() as f64;
    let mut mz = vec![0.0; dim];
    let mut mzh = vec![0.0; dim];
    let mut cross = vec![0.0; dim];
    let (mut ez, mut ezh) = (0.0, 0.0);
    for (p, q) in z.iter().zip(zh) {
        for k in 0..dim {
            mz[k] += p[k];
            mzh[k] += q[k];
        }
        ez += p.iter().map(|v| v * v).sum::<f64>();
        ezh += q.iter().map(|v| v * v).sum::<f64>();
        for (acc, v) in cross.iter_mut().zip(cd_mul(p, &cd_conj(q))) {
            *acc += v;
        }
    }
    for k in 0..dim {
        mz[k] /= n;
        mzh[k] /= n;
        cross[k] /= n;
    }
    let mean_prod = cd_mul(&mz, &cd_conj(&mzh));
    let cov: Vec<f64> = cross.iter().zip(&mean_prod).map(|(a, b)| a - b).collect();
    let (nmz, nmzh) = (norm(&mz), norm(&mzh));
    let var_z = (ez / n - nmz * nmz).max(0.0);
    let var_zh = (ezh / n - nmzh * nmzh).max(0.0);
    let den = (var_z + var_zh) * (nmz * nmz + nmzh * nmzh);
    if den == 0.0 {
        return 0.0;
    }
    4.0 * norm(&cov) * nmz * nmzh / den
}

/// Q2n: the UIQI generalised to hypercomplex pixels, averaged over
/// non-overlapping `block × block` windows (a trailing partial row or column
/// of windows is ignored). Bands are zero-padded to the next power of two and
/// the per-window value is the modulus of the hypercomplex index.
pub fn q2n<T: Scalar>(fused: &MultibandImage<T>, reference: &MultibandImage<T>, block: usize) -> Result<f64> {
    check_dims(fused, reference)?;
    if block < 2 {
        return Err(Error::invalid("q2n block must be >= 2"));
    }
    let (h, w, bands) = fused.dims();
    if h < block || w < block {
        return Err(Error::UndefinedMetric(format!("q2n: {h}x{w} image is smaller than one {block}x{block} block")));
    }
    let dim = bands.next_power_of_two();
    let pixel = |img: &MultibandImage<T>, r: usize, c: usize| -> Vec<f64> {
        let mut v: Vec<f64> = img.pixel(r, c).iter().map(|x| x.as_f64()).collect();
        v.resize(dim, 0.0);
        v
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in (0..=h - block).step_by(block) {
        for c0 in (0..=w - block).step_by(block) {
            let mut z = Vec::with_capacity(block * block);
            let mut zh = Vec::with_capacity(block * block);
            for r in r0..r0 + block {
                for c in c0..c0 + block {
                    z.push(pixel(reference, r, c));
                    zh.push(pixel(fused, r, c));
                }
            }
            total += q2n_block(&z, &zh, dim);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Spectral distortion `1/(B(B−1)) Σ_{b≠c} |Q(F_b,F_c) − Q(M_b,M_c)|`,
/// clamped to `[0, 1]`. `ms` may be at any spatial size.
pub fn d_lambda<T: Scalar>(fused: &MultibandImage<T>, ms: &MultibandImage<T>, block: usize) -> Result<f64> {
    let bands = fused.bands();
    if bands < 2 {
        return Err(Error::invalid("d_lambda needs at least 2 bands"));
    }
    if ms.bands() != bands {
        return Err(Error::shape(format!("fused has {bands} bands, MS has {}", ms.bands())));
    }
    let f: Vec<Vec<f64>> = (0..bands).map(|b| band_f64(fused, b)).collect();
    let m: Vec<Vec<f64>> = (0..bands).map(|b| band_f64(ms, b)).collect();
    let mut total = 0.0;
    for b in 0..bands {
        for c in 0..bands {
            if b == c {
                continue;
            }
            let qf = blockwise_uiqi(&f[b], &f[c], fused.height(), fused.width(), block)?;
            let qm = blockwise_uiqi(&m[b], &m[c], ms.height(), ms.width(), block)?;
            total += (qf - qm).abs();
        }
    }
    Ok((total / (bands * (bands - 1)) as f64).clamp(0.0, 1.0))
}

/// Spatial distortion `1/B Σ_b |Q(F_b, P) − Q(M_b, P_LR)|`, clamped to
/// `[0, 1]`. `ms` and `pan_lr` share one spatial size, `fused` and `pan`
/// another.
pub fn d_s<T: Scalar>(
    fused: &MultibandImage<T>,
    ms: &MultibandImage<T>,
    pan: &MultibandImage<T>,
    pan_lr: &MultibandImage<T>,
    block: usize,
) -> Result<f64> {
    if pan.bands() != 1 || pan_lr.bands() != 1 {
        return Err(Error::shape("PAN rasters must have one band"));
    }
    if (pan.height(), pan.width()) != (fused.height(), fused.width()) {
        return Err(Error::shape(format!("PAN {:?} vs fused {:?}", pan.dims(), fused.dims())));
    }
    if (pan_lr.height(), pan_lr.width()) != (ms.height(), ms.width()) {
        return Err(Error::shape(format!("low-res PAN {:?} vs MS {:?}", pan_lr.dims(), ms.dims())));
    }
    if ms.bands() != fused.bands() {
        return Err(Error::shape(format!("fused has {} bands, MS has {}", fused.bands(), ms.bands())));
    }
    let p = band_f64(pan, 0);
    let plr = band_f64(pan_lr, 0);
    let mut total = 0.0;
    for b in 0..fused.bands() {
        let qf = blockwise_uiqi(&band_f64(fused, b), &p, fused.height(), fused.width(), block)?;
        let qm = blockwise_uiqi(&band_f64(ms, b), &plr, ms.height(), ms.width(), block)?;
        total += (qf - qm).abs();
    }
    Ok((total / fused.bands() as f64).clamp(0.0, 1.0))
}

pub fn qnr(d_lambda: f64, d_s: f64) -> f64 {
    (1.0 - d_lambda) * (1.0 - d_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Reduced,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q2n: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sam_degrees: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ergas: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qnr: Option<f64>,
}

pub const CSV_HEADER: &str = "id,mode,q2n,sam_degrees,ergas,scc,d_lambda,d_s,qnr";

impl MetricsReport {
    fn fields(&self) -> [Option<f64>; 7] {
        [self.q2n, self.sam_degrees, self.ergas, self.scc, self.d_lambda, self.d_s, self.qnr]
    }

    /// One CSV row matching [`CSV_HEADER`]; absent metrics are empty cells.
    pub fn csv_row(&self, id: &str) -> String {
        let mut row = format!(
            "{id},{}",
            match self.mode {
                EvalMode::Reduced => "reduced",
                EvalMode::Full => "full",
            }
        );
        for f in self.fields() {
            row.push(',');
            if let Some(v) = f {
                let _ = write!(row, "{v}");
            }
        }
        row
    }

    pub fn json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Header plus one row per `(id, report)`.
pub fn reports_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a MetricsReport)>) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for (id, r) in rows {
        out.push_str(&r.csv_row(id));
        out.push('\n');
    }
    out
}

pub fn evaluate_reduced<T: Scalar>(
    fused: &MultibandImage<T>,
    reference: &MultibandImage<T>,
    ratio: usize,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        mode: EvalMode::Reduced,
        q2n: Some(q2n(fused, reference, DEFAULT_BLOCK)?),
        sam_degrees: Some(sam(fused, reference)?),
        ergas: Some(ergas(fused, reference, ratio)?),
        scc: Some(scc(fused, reference)?),
        d_lambda: None,
        d_s: None,
        qnr: None,
    })
}

pub fn evaluate_full<T: Scalar>(
    fused: &MultibandImage<T>,
    ms: &MultibandImage<T>,
    pan: &MultibandImage<T>,
    pan_lr: &MultibandImage<T>,
) -> Result<MetricsReport> {
    let dl = d_lambda(fused, ms, DEFAULT_BLOCK)?;
    let ds = d_s(fused, ms, pan, pan_lr, DEFAULT_BLOCK)?;
    Ok(MetricsReport {
        mode: EvalMode::Full,
        q2n: None,
        sam_degrees: None,
        ergas: None,
        scc: None,
        d_lambda: Some(dl),
        d_s: Some(ds),
        qnr: Some(qnr(dl, ds)),
    })
}

/// Mean and population standard deviation of one metric over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q2n: Option<Stat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sam_degrees: Option<Stat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ergas: Option<Stat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scc: Option<Stat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_lambda: Option<Stat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_s: Option<Stat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qnr: Option<Stat>,
}

fn stat(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    Some(Stat { mean: m, std: var.sqrt() })
}

/// Per-metric mean/std over the reports that carry that metric.
pub fn summarize(reports: &[MetricsReport]) -> BatchSummary {
    let col = |i: usize| -> Option<Stat> {
        let v: Vec<f64> = reports.iter().filter_map(|r| r.fields()[i]).collect();
        stat(&v)
    };
    BatchSummary {
        count: reports.len(),
        q2n: col(0),
        sam_degrees: col(1),
        ergas: col(2),
        scc: col(3),
        d_lambda: col(4),
        d_s: col(5),
        qnr: col(6),
    }
}
