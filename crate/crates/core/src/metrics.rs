//! PSNR and SSIM.

use crate::error::{MagnError, Result};
use crate::tensor::{Real, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MagnError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)` over all channels; `+inf` for identical inputs.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64().unwrap_or(f64::NAN) - y.to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum();
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Single-channel plane of an `[H, W, C]` image; colour uses BT.601 luma.
pub fn luminance<T: Real>(img: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w, c) = match *img.shape() {
        [h, w, c] => (h, w, c),
        [h, w] => (h, w, 1),
        ref s => return Err(MagnError::invalid("luminance", format!("expected an image, got {s:?}"))),
    };
    let d = img.to_f64_vec();
    let plane = match c {
        1 => d,
        3 => d
            .chunks(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect(),
        _ => return Err(MagnError::invalid("luminance", format!("unsupported channel count {c}"))),
    };
    Ok((h, w, plane))
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = taps.iter().enumerate().map(|(i, t)| t * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y0 + i) * ow + x0])
                .sum();
        }
    }
    out
}

/// Mean structural similarity over every fully covered 11×11 Gaussian window.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (h, w, x) = luminance(a)?;
    let (_, _, y) = luminance(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MagnError::invalid(
            "ssim",
            format!("image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    if x == y {
        return Ok(1.0);
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(&x, h, w, &taps);
    let my = filter_valid(&y, h, w, &taps);
    let mxx = filter_valid(&prod(&x, &x), h, w, &taps);
    let myy = filter_valid(&prod(&y, &y), h, w, &taps);
    let mxy = filter_valid(&prod(&x, &y), h, w, &taps);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityEntry {
    pub file: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QualityReport {
    pub entries: Vec<QualityEntry>,
}

pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

impl QualityReport {
    pub fn push(&mut self, file: impl Into<String>, psnr: f64, ssim: f64) {
        self.entries.push(QualityEntry {
            file: file.into(),
            psnr,
            ssim,
        });
    }

    pub fn mean_psnr(&self) -> f64 {
        self.entries.iter().map(|e| e.psnr).sum::<f64>() / self.entries.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.entries.iter().map(|e| e.ssim).sum::<f64>() / self.entries.len() as f64
    }

    /// `file,psnr,ssim` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("file,psnr,ssim\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{:.6}\n", e.file, format_db(e.psnr), e.ssim));
        }
        if !self.entries.is_empty() {
            s.push_str(&format!("mean,{},{:.6}\n", format_db(self.mean_psnr()), self.mean_ssim()));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!("{:<24} psnr={:>9} ssim={:.4}\n", e.file, format_db(e.psnr), e.ssim));
        }
        if !self.entries.is_empty() {
            s.push_str(&format!(
                "{:<24} psnr={:>9} ssim={:.4}\n",
                "mean",
                format_db(self.mean_psnr()),
                self.mean_ssim()
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images() {
        let a = Tensor::<f64>::from_fn(&[12, 12, 3], |i| (i % 7) as f64 / 7.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn uniform_offset() {
        let a = Tensor::<f64>::full(&[8, 8, 1], 0.5);
        let b = Tensor::<f64>::full(&[8, 8, 1], 0.5 + 1.0 / 255.0);
        assert!((psnr(&a, &b, 1.0).unwrap() - 48.1308).abs() < 1e-3);
    }

    #[test]
    fn small_images_rejected() {
        let a = Tensor::<f64>::zeros(&[10, 20, 1]);
        assert!(ssim(&a, &a, 1.0).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut r = QualityReport::default();
        r.push("a.png", f64::INFINITY, 1.0);
        r.push("b.png", 30.0, 0.5);
        let csv = r.to_csv();
        assert!(csv.starts_with("file,psnr,ssim\na.png,inf,1.000000\n"));
        assert!(csv.ends_with("mean,inf,0.750000\n"));
    }
}
