//! Image quality: PSNR, windowed SSIM, and an eccentricity-pooled statistics error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Framebuffer;

/// PSNR value used in place of `+inf` when averaging over frames.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub psnr: f64,
    pub ssim: f64,
    pub eccq: f64,
}

fn check_dims(a: &Framebuffer, b: &Framebuffer) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

pub fn mse(a: &Framebuffer, b: &Framebuffer) -> Result<f64> {
    check_dims(a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .pixels()
        .zip(b.pixels())
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * a.len()) as f64)
}

/// MSE over pixels where `mask` holds (all pixels without a mask); 0 for an empty mask.
pub fn mse_masked(a: &Framebuffer, b: &Framebuffer, mask: Option<&[bool]>) -> Result<f64> {
    let Some(mask) = mask else { return mse(a, b) };
    check_dims(a, b)?;
    if mask.len() != a.len() {
        return Err(Error::Invalid("pixel mask length does not match image".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, q), &m) in a.pixels().zip(b.pixels()).zip(mask) {
        if m {
            sum += (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>();
            n += 3;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Peak signal-to-noise ratio in dB for `[0, 1]` images; `+inf` when identical.
pub fn psnr(a: &Framebuffer, b: &Framebuffer) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Mean PSNR over frame pairs with each value capped at [`PSNR_CAP_DB`].
pub fn mean_psnr(a: &[Framebuffer], b: &[Framebuffer]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Invalid("mean PSNR needs equal, non-empty frame lists".into()));
    }
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        sum += psnr(x, y)?.min(PSNR_CAP_DB);
    }
    Ok(sum / a.len() as f64)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Valid-region separable filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|j| k[j] * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), averaged over
/// channels and all fully contained window positions.
pub fn ssim(a: &Framebuffer, b: &Framebuffer) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { width: w, height: h, min: SSIM_WINDOW });
    }
    let k = gaussian_kernel();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let x: Vec<f64> = a.pixels().map(|p| p[c]).collect();
        let y: Vec<f64> = b.pixels().map(|p| p[c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let sxx = filter_valid(&xx, w, h, &k);
        let syy = filter_valid(&yy, w, h, &k);
        let sxy = filter_valid(&xy, w, h, &k);
        for i in 0..mx.len() {
            let (mu_x, mu_y) = (mx[i], my[i]);
            let var_x = sxx[i] - mu_x * mu_x;
            let var_y = syy[i] - mu_y * mu_y;
            let cov = sxy[i] - mu_x * mu_y;
            let num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Pool diameter as a linear function of eccentricity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolingMap {
    pub pixels_per_degree: f64,
    /// Diameter at the gaze point, pixels.
    pub base_diameter_px: f64,
    /// Diameter growth, pixels per degree of eccentricity.
    pub slope_px_per_degree: f64,
}

impl Default for PoolingMap {
    fn default() -> Self {
        // 1 px at the gaze, 32 px at 40 degrees.
        Self { pixels_per_degree: 10.0, base_diameter_px: 1.0, slope_px_per_degree: 31.0 / 40.0 }
    }
}

impl PoolingMap {
    /// Same pool size everywhere.
    pub fn constant(diameter_px: f64) -> Self {
        Self { pixels_per_degree: 1.0, base_diameter_px: diameter_px, slope_px_per_degree: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixels_per_degree > 0.0
            && self.base_diameter_px >= 1.0
            && self.slope_px_per_degree >= 0.0
            && self.slope_px_per_degree.is_finite())
        {
            return Err(Error::Config("invalid eccentricity pooling map".into()));
        }
        Ok(())
    }

    /// Eccentricity in degrees of the center of pixel `(x, y)`.
    pub fn eccentricity(&self, gaze: [f64; 2], x: usize, y: usize) -> f64 {
        let dx = x as f64 + 0.5 - gaze[0];
        let dy = y as f64 + 0.5 - gaze[1];
        dx.hypot(dy) / self.pixels_per_degree
    }

    pub fn diameter(&self, ecc_deg: f64) -> f64 {
        self.base_diameter_px + self.slope_px_per_degree * ecc_deg
    }

    /// Half-width of the square pool at a pixel.
    pub fn radius(&self, gaze: [f64; 2], x: usize, y: usize) -> usize {
        (0.5 * self.diameter(self.eccentricity(gaze, x, y))).floor() as usize
    }
}

/// Summed-area tables of a plane and of its square.
struct Integral {
    w: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Integral {
    fn new(plane: &[f64], w: usize, h: usize) -> Self {
        let stride = w + 1;
        let mut sum = vec![0.0; stride * (h + 1)];
        let mut sq = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let (mut rs, mut rq) = (0.0, 0.0);
            for x in 0..w {
                let v = plane[y * w + x];
                rs += v;
                rq += v * v;
                sum[(y + 1) * stride + x + 1] = sum[y * stride + x + 1] + rs;
                sq[(y + 1) * stride + x + 1] = sq[y * stride + x + 1] + rq;
            }
        }
        Self { w, sum, sq }
    }

    /// Mean and variance over the half-open rectangle.
    fn stats(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> (f64, f64) {
        let s = self.w + 1;
        let rect = |t: &[f64]| t[y1 * s + x1] - t[y0 * s + x1] - t[y1 * s + x0] + t[y0 * s + x0];
        let n = ((x1 - x0) * (y1 - y0)) as f64;
        if n == 1.0 {
            return (rect(&self.sum), 0.0);
        }
        let mean = rect(&self.sum) / n;
        let var = (rect(&self.sq) / n - mean * mean).max(0.0);
        (mean, var)
    }
}

/// Eccentricity-pooled error: the mean over pixels and channels of the squared
/// differences of local means plus squared differences of local variances, where
/// each pixel's square pool grows with its eccentricity from `gaze`.
///
/// Zero iff all pooled statistics agree. With unit pools it is the plain MSE.
pub fn ecc_quality(a: &Framebuffer, b: &Framebuffer, gaze: [f64; 2], pooling: &PoolingMap) -> Result<f64> {
    ecc_quality_masked(a, b, gaze, pooling, None)
}

/// As [`ecc_quality`], averaging only over pixels where `mask` is true.
/// Returns 0 for an empty mask.
pub fn ecc_quality_masked(
    a: &Framebuffer,
    b: &Framebuffer,
    gaze: [f64; 2],
    pooling: &PoolingMap,
    mask: Option<&[bool]>,
) -> Result<f64> {
    check_dims(a, b)?;
    pooling.validate()?;
    let (w, h) = (a.width, a.height);
    if !(gaze[0] >= 0.0 && gaze[0] <= w as f64 && gaze[1] >= 0.0 && gaze[1] <= h as f64) {
        return Err(Error::Invalid(format!("gaze ({}, {}) outside {w}x{h} image", gaze[0], gaze[1])));
    }
    if let Some(m) = mask {
        if m.len() != w * h {
            return Err(Error::Invalid("pixel mask length does not match image".into()));
        }
    }
    let tables: Vec<(Integral, Integral)> = (0..3)
        .map(|c| {
            let pa: Vec<f64> = a.pixels().map(|p| p[c]).collect();
            let pb: Vec<f64> = b.pixels().map(|p| p[c]).collect();
            (Integral::new(&pa, w, h), Integral::new(&pb, w, h))
        })
        .collect();

    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask.is_some_and(|m| !m[y * w + x]) {
                continue;
            }
            let r = pooling.radius(gaze, x, y);
            let x0 = x.saturating_sub(r);
            let y0 = y.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            let y1 = (y + r + 1).min(h);
            for (ta, tb) in &tables {
                let (ma, va) = ta.stats(x0, y0, x1, y1);
                let (mb, vb) = tb.stats(x0, y0, x1, y1);
                total += (ma - mb).powi(2) + (va - vb).powi(2);
            }
            count += 3;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
