//! Sliding-window unfold and count-normalized fold.
//!
//! Windows are scanned row-major (left to right, then top to bottom). The
//! number of windows is
//! `L = ((H + 2·pad_h − win_h)/stride_h + 1) · ((W + 2·pad_w − win_w)/stride_w + 1)`,
//! and the geometry is only accepted when both divisions are exact.

use crate::error::{MagnError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub window: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// Source map extent `(H, W, C)`.
    pub source: (usize, usize, usize),
}

fn check_axis(
    axis: &'static str,
    extent: usize,
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let geometry_err = |suggestion: String| MagnError::Geometry {
        axis,
        extent,
        window,
        stride,
        padding,
        suggestion,
    };
    if window == 0 || stride == 0 || extent == 0 {
        return Err(geometry_err("extents and strides must be positive".into()));
    }
    if stride > window {
        return Err(geometry_err(format!(
            "stride must not exceed the window ({window}) or positions go uncovered"
        )));
    }
    let padded = extent + 2 * padding;
    if padded < window || (padded - window) % stride != 0 {
        return Err(geometry_err(suggest(extent, window, stride)));
    }
    Ok((padded - window) / stride + 1)
}

fn suggest(extent: usize, window: usize, stride: usize) -> String {
    let pad = (0..stride.max(window))
        .find(|&p| extent + 2 * p >= window && (extent + 2 * p - window) % stride == 0);
    let size = valid_extent_at_most(extent, window, stride)
        .map_or_else(|| window.to_string(), |s| s.to_string());
    match pad {
        Some(p) => format!("smallest valid padding is {p}, or crop to {size}"),
        None => format!("no padding fits this stride; crop to {size}"),
    }
}

/// Largest extent `≤ extent` that a zero-padding geometry tiles exactly.
pub fn valid_extent_at_most(extent: usize, window: usize, stride: usize) -> Option<usize> {
    if extent < window || stride == 0 {
        return None;
    }
    Some(window + (extent - window) / stride * stride)
}

impl PatchGeometry {
    pub fn new(
        source: (usize, usize, usize),
        window: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        check_axis("height", source.0, window.0, stride.0, padding.0)?;
        check_axis("width", source.1, window.1, stride.1, padding.1)?;
        if source.2 == 0 {
            return Err(MagnError::invalid("patch geometry", "zero channels"));
        }
        Ok(Self {
            window,
            stride,
            padding,
            source,
        })
    }

    /// Square window and stride without padding.
    pub fn square(h: usize, w: usize, c: usize, window: usize, stride: usize) -> Result<Self> {
        Self::new((h, w, c), (window, window), (stride, stride), (0, 0))
    }

    /// Window positions along height and width.
    pub fn grid(&self) -> (usize, usize) {
        let (h, w, _) = self.source;
        (
            (h + 2 * self.padding.0 - self.window.0) / self.stride.0 + 1,
            (w + 2 * self.padding.1 - self.window.1) / self.stride.1 + 1,
        )
    }

    /// Number of windows `L`.
    pub fn count(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Length of one flattened window, `win_h · win_w · C`.
    pub fn patch_len(&self) -> usize {
        self.window.0 * self.window.1 * self.source.2
    }

    /// Top-left corner of window `j` in unpadded source coordinates.
    pub fn origin(&self, j: usize) -> (isize, isize) {
        let (_, gw) = self.grid();
        let (gy, gx) = (j / gw, j % gw);
        (
            (gy * self.stride.0) as isize - self.padding.0 as isize,
            (gx * self.stride.1) as isize - self.padding.1 as isize,
        )
    }

    /// Same window layout applied to a map with a different channel count.
    pub fn with_channels(&self, c: usize) -> Self {
        Self {
            source: (self.source.0, self.source.1, c),
            ..*self
        }
    }

    fn check_source<T: Real>(&self, x: &Tensor<T>) -> Result<()> {
        let (h, w, c) = self.source;
        if x.shape() != [h, w, c] {
            return Err(MagnError::shape("unfold", x.shape(), &[h, w, c]));
        }
        Ok(())
    }

    /// Visits `(window, offset in window, source offset)` for every
    /// in-bounds element of every window.
    fn for_each_element(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w, c) = self.source;
        let (wh, ww) = self.window;
        for j in 0..self.count() {
            let (oy, ox) = self.origin(j);
            for py in 0..wh {
                let y = oy + py as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for px in 0..ww {
                    let x = ox + px as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    f(j, (py * ww + px) * c, (y as usize * w + x as usize) * c);
                }
            }
        }
    }
}

/// The `L` windows of one map together with the layout that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<T: Real> {
    /// `[win_h, win_w, C, L]`.
    pub patches: Tensor<T>,
    pub geometry: PatchGeometry,
}

impl<T: Real> PatchSet<T> {
    /// Builds a patch set from `[win_h, win_w, C, L]` patches.
    pub fn new(patches: Tensor<T>, geometry: PatchGeometry) -> Result<Self> {
        let (wh, ww) = geometry.window;
        let expect = [wh, ww, geometry.source.2, geometry.count()];
        if patches.shape() != expect {
            return Err(MagnError::shape("patch set", patches.shape(), &expect));
        }
        Ok(Self { patches, geometry })
    }

    /// One row per window: `[L, win_h·win_w·C]`.
    pub fn node_matrix(&self) -> Tensor<T> {
        let l = self.geometry.count();
        let len = self.geometry.patch_len();
        let src = self.patches.data();
        let mut out = vec![T::zero(); l * len];
        for e in 0..len {
            for j in 0..l {
                out[j * len + e] = src[e * l + j];
            }
        }
        Tensor::from_parts(vec![l, len], out)
    }

    pub fn from_node_matrix(nodes: &Tensor<T>, geometry: PatchGeometry) -> Result<Self> {
        let l = geometry.count();
        let len = geometry.patch_len();
        if nodes.shape() != [l, len] {
            return Err(MagnError::shape("patch set", nodes.shape(), &[l, len]));
        }
        let src = nodes.data();
        let mut out = vec![T::zero(); l * len];
        for j in 0..l {
            for e in 0..len {
                out[e * l + j] = src[j * len + e];
            }
        }
        let (wh, ww) = geometry.window;
        Ok(Self {
            patches: Tensor::from_parts(vec![wh, ww, geometry.source.2, l], out),
            geometry,
        })
    }
}

/// Extracts zero-padded windows as rows of an `[L, win_h·win_w·C]` matrix.
pub fn unfold_nodes<T: Real>(x: &Tensor<T>, geom: &PatchGeometry) -> Result<Tensor<T>> {
    geom.check_source(x)?;
    let (l, len, c) = (geom.count(), geom.patch_len(), geom.source.2);
    let mut out = vec![T::zero(); l * len];
    let src = x.data();
    geom.for_each_element(|j, e, s| {
        out[j * len + e..j * len + e + c].copy_from_slice(&src[s..s + c]);
    });
    Ok(Tensor::from_parts(vec![l, len], out))
}

/// Sums window rows back onto the source grid; padded contributions are
/// dropped. This is the adjoint of [`unfold_nodes`].
pub fn fold_sum_nodes<T: Real>(nodes: &Tensor<T>, geom: &PatchGeometry) -> Result<Tensor<T>> {
    let (h, w, c) = geom.source;
    let (l, len) = (geom.count(), geom.patch_len());
    if nodes.shape() != [l, len] {
        return Err(MagnError::shape("fold", nodes.shape(), &[l, len]));
    }
    let mut out = vec![T::zero(); h * w * c];
    let src = nodes.data();
    geom.for_each_element(|j, e, s| {
        for ch in 0..c {
            out[s + ch] = out[s + ch] + src[j * len + e + ch];
        }
    });
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

/// Number of windows covering each source position, `[H, W, 1]`.
pub fn overlap_counts<T: Real>(geom: &PatchGeometry) -> Tensor<T> {
    let (h, w, c) = geom.source;
    let mut counts = vec![T::zero(); h * w];
    geom.for_each_element(|_, _, s| {
        let p = s / c;
        counts[p] = counts[p] + T::one();
    });
    Tensor::from_parts(vec![h, w, 1], counts)
}

/// Folds window rows and divides by the overlap count, so that
/// `fold_nodes(unfold_nodes(x)) == x`.
pub fn fold_nodes<T: Real>(nodes: &Tensor<T>, geom: &PatchGeometry) -> Result<Tensor<T>> {
    let mut out = fold_sum_nodes(nodes, geom)?;
    divide_by_counts(&mut out, geom);
    Ok(out)
}

/// Adjoint of [`fold_nodes`].
pub fn fold_nodes_backward<T: Real>(grad: &Tensor<T>, geom: &PatchGeometry) -> Result<Tensor<T>> {
    let mut g = grad.clone();
    divide_by_counts(&mut g, geom);
    unfold_nodes(&g, geom)
}

fn divide_by_counts<T: Real>(x: &mut Tensor<T>, geom: &PatchGeometry) {
    let c = geom.source.2;
    let counts = overlap_counts::<T>(geom);
    for (px, &n) in x.data_mut().chunks_mut(c).zip(counts.data()) {
        if n > T::zero() {
            let inv = T::one() / n;
            px.iter_mut().for_each(|v| *v = *v * inv);
        }
    }
}

pub fn unfold<T: Real>(x: &Tensor<T>, geom: &PatchGeometry) -> Result<PatchSet<T>> {
    let nodes = unfold_nodes(x, geom)?;
    PatchSet::from_node_matrix(&nodes, *geom)
}

pub fn fold<T: Real>(p: &PatchSet<T>) -> Result<Tensor<T>> {
    PatchSet::new(p.patches.clone(), p.geometry)?;
    fold_nodes(&p.node_matrix(), &p.geometry)
}
