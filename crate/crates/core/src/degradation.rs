//! Synthetic degradations: additive Gaussian noise and Bayer mosaicking.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MagnError, Result};
use crate::tensor::{real, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DegradeKind {
    #[default]
    Gaussian,
    Mosaic,
}

impl fmt::Display for DegradeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DegradeKind::Gaussian => "gaussian",
            DegradeKind::Mosaic => "mosaic",
        })
    }
}

impl FromStr for DegradeKind {
    type Err = MagnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(DegradeKind::Gaussian),
            "mosaic" => Ok(DegradeKind::Mosaic),
            _ => Err(MagnError::Config(format!("unknown degradation `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradeSpec {
    pub kind: DegradeKind,
    /// Noise standard deviation on the 0–255 scale.
    pub sigma: f64,
    pub seed: u64,
}

impl DegradeSpec {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            kind: DegradeKind::Gaussian,
            sigma,
            seed,
        }
    }

    pub fn mosaic() -> Self {
        Self {
            kind: DegradeKind::Mosaic,
            sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(MagnError::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }

    /// The same degradation with a seed derived for one item of a stream.
    pub fn for_item(&self, index: u64) -> Self {
        Self {
            seed: derive_seed(self.seed, index),
            ..*self
        }
    }

    pub fn apply<T: Real>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        match self.kind {
            DegradeKind::Gaussian => Ok(add_gaussian_noise(img, self.sigma, self.seed)),
            DegradeKind::Mosaic => bayer_mosaic(img),
        }
    }
}

/// SplitMix64 mix of `seed` and `index`, for independent per-item streams.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `img + n` with `n ~ N(0, (sigma/255)²)` per element, not clamped.
pub fn add_gaussian_noise<T: Real>(img: &Tensor<T>, sigma: f64, seed: u64) -> Tensor<T> {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = sigma / 255.0;
    let mut out = img.clone();
    for v in out.data_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = *v + real::<T>(n * std);
    }
    out
}

/// RGGB colour filter array: each pixel keeps one channel, the rest are zeroed.
pub fn bayer_mosaic<T: Real>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = match *img.shape() {
        [h, w, 3] => (h, w),
        ref s => {
            return Err(MagnError::invalid(
                "bayer_mosaic",
                format!("expected an [H, W, 3] image, got {s:?}"),
            ))
        }
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(MagnError::invalid(
            "bayer_mosaic",
            format!("dimensions must be even, got {h}x{w}"),
        ));
    }
    mosaic_with_phase(img, (0, 0))
}

/// RGGB sampling of a crop whose top-left pixel sits at `phase` (row, column)
/// of the full image, so crops of any size share the full image's pattern.
pub fn mosaic_with_phase<T: Real>(img: &Tensor<T>, phase: (usize, usize)) -> Result<Tensor<T>> {
    let w = match *img.shape() {
        [_, w, 3] => w,
        ref s => {
            return Err(MagnError::invalid(
                "bayer_mosaic",
                format!("expected an [H, W, 3] image, got {s:?}"),
            ))
        }
    };
    let mut out = img.clone();
    for (p, px) in out.data_mut().chunks_mut(3).enumerate() {
        let keep = match ((p / w + phase.0) % 2, (p % w + phase.1) % 2) {
            (0, 0) => 0,
            (1, 1) => 2,
            _ => 1,
        };
        for (ch, v) in px.iter_mut().enumerate() {
            if ch != keep {
                *v = T::zero();
            }
        }
    }
    Ok(out)
}
