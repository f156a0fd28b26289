//! PNG input and output (8/16-bit, grayscale or RGB) as `[H, W, C]` tensors in [0, 1].

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{MagnError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadedImage<T: Real> {
    pub pixels: Tensor<T>,
    pub depth: BitDepth,
}

fn image_err(path: &Path, msg: impl ToString) -> MagnError {
    MagnError::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Reads a PNG. Gray images (with or without alpha) give one channel,
/// everything else three; alpha is dropped.
pub fn load_png<T: Real>(path: &Path) -> Result<LoadedImage<T>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let color = img.color();
    let depth = if color.bytes_per_pixel() / color.channel_count() >= 2 {
        BitDepth::Sixteen
    } else {
        BitDepth::Eight
    };
    let gray = !color.has_color();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw): (usize, Vec<f64>) = match (gray, depth) {
        (true, BitDepth::Eight) => (1, img.to_luma8().into_raw().into_iter().map(f64::from).collect()),
        (true, BitDepth::Sixteen) => (1, img.to_luma16().into_raw().into_iter().map(f64::from).collect()),
        (false, BitDepth::Eight) => (3, img.to_rgb8().into_raw().into_iter().map(f64::from).collect()),
        (false, BitDepth::Sixteen) => (3, img.to_rgb16().into_raw().into_iter().map(f64::from).collect()),
    };
    let scale = depth.max();
    let data = raw.into_iter().map(|v| T::from_f64_lossy(v / scale)).collect();
    let pixels = Tensor::new(&[h, w, channels], data).map_err(|e| image_err(path, e))?;
    Ok(LoadedImage { pixels, depth })
}

fn quantize<T: Real>(v: T, max: f64) -> f64 {
    let x = v.to_f64().unwrap_or(0.0);
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    (x * max).round()
}

/// Encodes `[H, W, 1|3]` values, clamped to [0, 1], as PNG bytes.
pub fn encode_png<T: Real>(img: &Tensor<T>, depth: BitDepth) -> Result<Vec<u8>> {
    let (h, w, c) = match *img.shape() {
        [h, w, c @ (1 | 3)] => (h as u32, w as u32, c),
        ref s => return Err(MagnError::invalid("encode_png", format!("expected [H, W, 1|3], got {s:?}"))),
    };
    let max = depth.max();
    let dynamic = match (c, depth) {
        (1, BitDepth::Eight) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, img.data().iter().map(|&v| quantize(v, max) as u8).collect())
                .expect("buffer size"),
        ),
        (1, BitDepth::Sixteen) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, img.data().iter().map(|&v| quantize(v, max) as u16).collect())
                .expect("buffer size"),
        ),
        (_, BitDepth::Eight) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, img.data().iter().map(|&v| quantize(v, max) as u8).collect())
                .expect("buffer size"),
        ),
        (_, BitDepth::Sixteen) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, img.data().iter().map(|&v| quantize(v, max) as u16).collect())
                .expect("buffer size"),
        ),
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| MagnError::invalid("encode_png", e.to_string()))?;
    Ok(out.into_inner())
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        w.write_all(bytes)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| MagnError::Io(e.error))?;
    Ok(())
}

pub fn save_png<T: Real>(path: &Path, img: &Tensor<T>, depth: BitDepth) -> Result<()> {
    let bytes = encode_png(img, depth)?;
    write_atomic(path, &bytes)
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(MagnError::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    out.sort();
    Ok(out)
}
