//! PSNR and SSIM.

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Reported PSNR when the images are identical (and upper bound otherwise).
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if (a.channels(), a.height(), a.width()) != (b.channels(), b.height(), b.width()) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Mean squared error over every channel and pixel.
pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    sum / a.len() as f64
}

/// `10·log10(peak² / MSE)` computed on raw buffers, capped at [`PSNR_CAP_DB`].
pub fn psnr_slices(a: &[f32], b: &[f32], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} values",
            a.len(),
            b.len()
        )));
    }
    let e = mse(a, b);
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / e).log10()).min(PSNR_CAP_DB))
}

/// PSNR in dB with peak 1.0.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same(a, b)?;
    psnr_slices(a.data(), b.data(), 1.0)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * src[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Per-window SSIM values of one channel plane.
pub fn ssim_map(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<Vec<f64>> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };

    let mu_x = filter_valid(&x, h, w, &taps);
    let mu_y = filter_valid(&y, h, w, &taps);
    let e_xx = filter_valid(&prod(&x, &x), h, w, &taps);
    let e_yy = filter_valid(&prod(&y, &y), h, w, &taps);
    let e_xy = filter_valid(&prod(&x, &y), h, w, &taps);

    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    Ok((0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            let num = (2.0 * (mx * my) + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            num / den
        })
        .collect())
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, K1 = 0.01, K2 = 0.03, dynamic
/// range 1) over valid window positions, averaged over channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same(a, b)?;
    let (c, h, w) = (a.channels(), a.height(), a.width());
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let map = ssim_map(
            &a.data()[ch * plane..(ch + 1) * plane],
            &b.data()[ch * plane..(ch + 1) * plane],
            h,
            w,
        )?;
        total += map.iter().sum::<f64>() / map.len() as f64;
    }
    Ok(total / c as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores and their arithmetic means.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub images: Vec<ImageScore>,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, psnr: f64, ssim: f64) {
        self.images.push(ImageScore {
            name: name.into(),
            psnr,
            ssim,
        });
    }

    pub fn mean_psnr(&self) -> f64 {
        self.images.iter().map(|s| s.psnr).sum::<f64>() / self.images.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.images.iter().map(|s| s.ssim).sum::<f64>() / self.images.len() as f64
    }

    /// `image,psnr,ssim` rows followed by one `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,psnr,ssim\n");
        for s in &self.images {
            out.push_str(&format!("{},{:.6},{:.6}\n", s.name, s.psnr, s.ssim));
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6}\n",
            self.mean_psnr(),
            self.mean_ssim()
        ));
        out
    }
}
