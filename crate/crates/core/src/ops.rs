//! Forward and backward kernels for every primitive the network uses.
//!
//! The functions here are pure: they take tensors and return new tensors.
//! [`crate::tape::GradTape`] records them and calls the matching `*_backward`
//! kernels during reverse accumulation.

use rayon::prelude::*;

use crate::error::{MagnError, Result};
use crate::tensor::{real, Real, Tensor};

/// Work size (multiply-adds) above which a kernel splits rows across threads.
const PAR_THRESHOLD: usize = 1 << 15;

/// Stability constant of [`feature_normalize`].
pub const NORM_EPS: f64 = 1e-5;

/// Offset subtracted from masked similarities before the row softmax.
pub const MASK_SENTINEL: f64 = 1e6;

/// Row-major `[m, k] x [k, n]` product into a fresh buffer.
pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            // attention rows are half zeros after masking
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

fn transpose_raw<T: Real>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn dims2<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(MagnError::invalid(
            op,
            format!("expected a matrix, got shape {:?}", t.shape()),
        )),
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(MagnError::shape("matmul", a.shape(), b.shape()));
    }
    Ok(Tensor::from_parts(vec![m, n], gemm(a.data(), b.data(), m, k, n)))
}

/// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul_nt")?;
    let (n, k2) = dims2(b, "matmul_nt")?;
    if k != k2 {
        return Err(MagnError::shape("matmul_nt", a.shape(), b.shape()));
    }
    let bt = transpose_raw(b.data(), n, k);
    Ok(Tensor::from_parts(vec![m, n], gemm(a.data(), &bt, m, k, n)))
}

/// `aᵀ · b` for `a: [k, m]`, `b: [k, n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = dims2(a, "matmul_tn")?;
    let (k2, n) = dims2(b, "matmul_tn")?;
    if k != k2 {
        return Err(MagnError::shape("matmul_tn", a.shape(), b.shape()));
    }
    if m * k * n >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        let at = transpose_raw(a.data(), k, m);
        return Ok(Tensor::from_parts(vec![m, n], gemm(&at, b.data(), m, k, n)));
    }
    // Same summation order as the transposed product, without the copy.
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let b_row = &bd[p * n..(p + 1) * n];
        for (i, &av) in ad[p * m..(p + 1) * m].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Gradients of `a · b` given the upstream gradient.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((matmul_nt(grad, b)?, matmul_tn(a, grad)?))
}

/// Adds `bias` (length = last extent of `x`) to every row of `x`.
pub fn add_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x.shape().last().unwrap_or(&0);
    if bias.len() != c {
        return Err(MagnError::shape("add_bias", x.shape(), bias.shape()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o = *o + b;
        }
    }
    Ok(out)
}

/// Sum of `grad` over all rows: the bias gradient of [`add_bias`].
pub fn sum_rows<T: Real>(grad: &Tensor<T>, c: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); c];
    for row in grad.data().chunks(c) {
        for (o, &g) in out.iter_mut().zip(row) {
            *o = *o + g;
        }
    }
    Tensor::from_parts(vec![c], out)
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub pad: (usize, usize),
    pub stride: (usize, usize),
}

impl ConvSpec {
    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self {
            pad: (kernel / 2, kernel / 2),
            stride: (1, 1),
        }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            pad: (0, 0),
            stride: (1, 1),
        }
    }
}

struct ConvDims {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, spec: ConvSpec) -> Result<ConvDims> {
    let [h, w, cin] = *input.shape() else {
        return Err(MagnError::invalid(
            "conv2d",
            format!("input must be [H, W, C], got {:?}", input.shape()),
        ));
    };
    let [kh, kw, kc, cout] = *kernel.shape() else {
        return Err(MagnError::invalid(
            "conv2d",
            format!("kernel must be [kh, kw, Cin, Cout], got {:?}", kernel.shape()),
        ));
    };
    if kc != cin {
        return Err(MagnError::shape("conv2d", input.shape(), kernel.shape()));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(MagnError::invalid("conv2d", format!("kernel {kh}x{kw} must be odd")));
    }
    if spec.stride.0 == 0 || spec.stride.1 == 0 {
        return Err(MagnError::invalid("conv2d", "stride must be positive"));
    }
    let (ph, pw) = (h + 2 * spec.pad.0, w + 2 * spec.pad.1);
    if ph < kh || pw < kw {
        return Err(MagnError::invalid(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"),
        ));
    }
    Ok(ConvDims {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        ho: (ph - kh) / spec.stride.0 + 1,
        wo: (pw - kw) / spec.stride.1 + 1,
    })
}

/// Gathers every receptive field into a row: `[Ho*Wo, kh*kw*Cin]`.
fn im2col<T: Real>(x: &[T], d: &ConvDims, spec: ConvSpec) -> Vec<T> {
    let kdim = d.kh * d.kw * d.cin;
    let mut cols = vec![T::zero(); d.ho * d.wo * kdim];
    let fill = |(o, row): (usize, &mut [T])| {
        let (oy, ox) = (o / d.wo, o % d.wo);
        for ky in 0..d.kh {
            let iy = (oy * spec.stride.0 + ky) as isize - spec.pad.0 as isize;
            if iy < 0 || iy >= d.h as isize {
                continue;
            }
            for kx in 0..d.kw {
                let ix = (ox * spec.stride.1 + kx) as isize - spec.pad.1 as isize;
                if ix < 0 || ix >= d.w as isize {
                    continue;
                }
                let src = (iy as usize * d.w + ix as usize) * d.cin;
                let dst = (ky * d.kw + kx) * d.cin;
                row[dst..dst + d.cin].copy_from_slice(&x[src..src + d.cin]);
            }
        }
    };
    if cols.len() >= PAR_THRESHOLD {
        cols.par_chunks_mut(kdim).enumerate().for_each(fill);
    } else {
        cols.chunks_mut(kdim).enumerate().for_each(fill);
    }
    cols
}

/// Scatter-adds column rows back onto the input grid.
fn col2im<T: Real>(cols: &[T], d: &ConvDims, spec: ConvSpec) -> Vec<T> {
    let kdim = d.kh * d.kw * d.cin;
    let mut x = vec![T::zero(); d.h * d.w * d.cin];
    for (o, row) in cols.chunks(kdim).enumerate() {
        let (oy, ox) = (o / d.wo, o % d.wo);
        for ky in 0..d.kh {
            let iy = (oy * spec.stride.0 + ky) as isize - spec.pad.0 as isize;
            if iy < 0 || iy >= d.h as isize {
                continue;
            }
            for kx in 0..d.kw {
                let ix = (ox * spec.stride.1 + kx) as isize - spec.pad.1 as isize;
                if ix < 0 || ix >= d.w as isize {
                    continue;
                }
                let dst = (iy as usize * d.w + ix as usize) * d.cin;
                let src = (ky * d.kw + kx) * d.cin;
                for c in 0..d.cin {
                    x[dst + c] = x[dst + c] + row[src + c];
                }
            }
        }
    }
    x
}

/// Zero-padded 2-D convolution (cross-correlation) of a channels-last map.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernel, spec)?;
    if bias.len() != d.cout {
        return Err(MagnError::shape("conv2d", kernel.shape(), bias.shape()));
    }
    let kdim = d.kh * d.kw * d.cin;
    let cols = im2col(input.data(), &d, spec);
    let mut out = gemm(&cols, kernel.data(), d.ho * d.wo, kdim, d.cout);
    for row in out.chunks_mut(d.cout) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o = *o + b;
        }
    }
    Ok(Tensor::from_parts(vec![d.ho, d.wo, d.cout], out))
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad: &Tensor<T>,
    spec: ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = conv_dims(input, kernel, spec)?;
    if grad.shape() != [d.ho, d.wo, d.cout] {
        return Err(MagnError::shape("conv2d_backward", grad.shape(), &[d.ho, d.wo, d.cout]));
    }
    let kdim = d.kh * d.kw * d.cin;
    let p = d.ho * d.wo;
    let cols = im2col(input.data(), &d, spec);
    let cols_t = transpose_raw(&cols, p, kdim);
    let d_kernel = gemm(&cols_t, grad.data(), kdim, p, d.cout);
    let kernel_t = transpose_raw(kernel.data(), kdim, d.cout);
    let d_cols = gemm(grad.data(), &kernel_t, p, d.cout, kdim);
    let d_input = col2im(&d_cols, &d, spec);
    Ok((
        Tensor::from_parts(input.shape().to_vec(), d_input),
        Tensor::from_parts(kernel.shape().to_vec(), d_kernel),
        sum_rows(grad, d.cout),
    ))
}

fn channel_extent<T: Real>(x: &Tensor<T>) -> usize {
    *x.shape().last().expect("tensor has rank >= 1")
}

/// Sign pattern used by PReLU: `true` where the identity branch applies.
pub fn prelu_branches<T: Real>(x: &Tensor<T>) -> Vec<bool> {
    x.data().iter().map(|&v| v >= T::zero()).collect()
}

/// PReLU with one slope per channel (last axis). `branches` selects the
/// identity branch per element; pass `None` to derive it from the sign of `x`.
pub fn prelu<T: Real>(x: &Tensor<T>, slope: &Tensor<T>, branches: Option<&[bool]>) -> Result<Tensor<T>> {
    let c = channel_extent(x);
    if slope.len() != c {
        return Err(MagnError::shape("prelu", x.shape(), slope.shape()));
    }
    if let Some(b) = branches {
        if b.len() != x.len() {
            return Err(MagnError::invalid("prelu", "branch pattern length mismatch"));
        }
    }
    let s = slope.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let pos = branches.map_or(v >= T::zero(), |b| b[i]);
            if pos {
                v
            } else {
                s[i % c] * v
            }
        })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Returns `(d_x, d_slope)`.
pub fn prelu_backward<T: Real>(
    x: &Tensor<T>,
    slope: &Tensor<T>,
    branches: &[bool],
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let c = slope.len();
    let s = slope.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut ds = vec![T::zero(); c];
    for (i, ((&v, &g), &pos)) in x.data().iter().zip(grad.data()).zip(branches).enumerate() {
        if pos {
            dx[i] = g;
        } else {
            dx[i] = s[i % c] * g;
            ds[i % c] = ds[i % c] + g * v;
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(slope.shape().to_vec(), ds),
    )
}

/// Row-wise softmax of a matrix, computed with the row maximum subtracted.
pub fn softmax_rows<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = dims2(m, "softmax_rows")?;
    let mut out = m.clone();
    softmax_rows_in_place(out.data_mut(), c);
    Ok(out)
}

fn softmax_rows_in_place<T: Real>(data: &mut [T], c: usize) {
    let row = |r: &mut [T]| {
        let max = r.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        let tiny = T::min_positive_value();
        for v in r.iter_mut() {
            // subnormal weights are flushed: they cost ~100x per multiply
            *v = if *v * inv < tiny { T::zero() } else { *v * inv };
        }
    };
    if data.len() >= PAR_THRESHOLD {
        data.par_chunks_mut(c).for_each(row);
    } else {
        data.chunks_mut(c).for_each(row);
    }
}

/// `softmax_rows(s − sentinel·mask)`. Masked entries sit at least the
/// sentinel below the unmasked row maximum, so their exponentials underflow
/// to exactly zero and are written directly.
fn masked_softmax_in_place<T: Real>(data: &mut [T], mask: &[bool], c: usize) {
    let sentinel = real::<T>(MASK_SENTINEL);
    // exp of anything below this is exactly zero in f32 and f64
    let underflow = real::<T>(-746.0);
    let row = |(r, mk): (&mut [T], &[bool])| {
        let max = r
            .iter()
            .zip(mk)
            .map(|(&v, &m)| if m { v - sentinel } else { v })
            .fold(T::neg_infinity(), |a, v| a.max(v));
        let mut sum = T::zero();
        for (v, &m) in r.iter_mut().zip(mk) {
            if m {
                let x = *v - sentinel - max;
                *v = if x < underflow { T::zero() } else { x.exp() };
                sum = sum + *v;
            } else {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
        }
        let inv = T::one() / sum;
        let tiny = T::min_positive_value();
        for v in r.iter_mut() {
            // subnormal weights are flushed: they cost ~100x per multiply
            *v = if *v * inv < tiny { T::zero() } else { *v * inv };
        }
    };
    if data.len() >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        data.par_chunks_mut(c).zip(mask.par_chunks(c)).for_each(row);
    } else {
        data.chunks_mut(c).zip(mask.chunks(c)).for_each(row);
    }
}

/// Gradient of a row softmax given its output `y`.
pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let c = channel_extent(y);
    let mut out = vec![T::zero(); y.len()];
    let row = |((o, yr), gr): ((&mut [T], &[T]), &[T])| {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    };
    if y.len() >= PAR_THRESHOLD {
        out.par_chunks_mut(c)
            .zip(y.data().par_chunks(c))
            .zip(grad.data().par_chunks(c))
            .for_each(row);
    } else {
        out.chunks_mut(c)
            .zip(y.data().chunks(c))
            .zip(grad.data().chunks(c))
            .for_each(row);
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

/// Per-row similarity mask: `true` where an entry lies strictly below its
/// row mean. The row maximum is never masked (it is at least the mean).
pub fn below_mean_mask<T: Real>(s: &Tensor<T>) -> Result<Vec<bool>> {
    let (_, c) = dims2(s, "below_mean_mask")?;
    let inv = T::one() / real::<T>(c as f64);
    let mut mask = Vec::with_capacity(s.len());
    for row in s.data().chunks(c) {
        let mean = row.iter().copied().sum::<T>() * inv;
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        mask.extend(row.iter().map(|&v| v < mean && v < max));
    }
    Ok(mask)
}

/// Adjacency from projected queries and keys: `softmax_rows(q·kᵀ·scale − 1e6·mask)`.
///
/// Returns the adjacency and the mask that was applied. Passing `mask`
/// replays a previously recorded selection instead of recomputing it.
pub fn masked_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    scale: T,
    mask: Option<&[bool]>,
) -> Result<(Tensor<T>, Vec<bool>)> {
    let (m, _) = dims2(q, "masked_attention")?;
    let (n, _) = dims2(k, "masked_attention")?;
    let mut s = matmul_nt(q, k)?;
    for v in s.data_mut() {
        *v = *v * scale;
    }
    if !s.all_finite() {
        return Err(MagnError::NonFinite { op: "masked_attention" });
    }
    let mask = match mask {
        Some(mk) if mk.len() == m * n => mk.to_vec(),
        Some(_) => return Err(MagnError::invalid("masked_attention", "mask length mismatch")),
        None => below_mean_mask(&s)?,
    };
    masked_softmax_in_place(s.data_mut(), &mask, n);
    Ok((s, mask))
}

/// Returns `(d_q, d_k)`; the mask is held constant.
pub fn masked_attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    scale: T,
    adjacency: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut ds = softmax_rows_backward(adjacency, grad);
    for v in ds.data_mut() {
        *v = *v * scale;
    }
    Ok((matmul(&ds, k)?, matmul_tn(&ds, q)?))
}

/// Statistics kept from the forward pass of [`feature_normalize`].
#[derive(Clone, Debug)]
pub struct NormStats<T: Real> {
    pub inv_std: Vec<T>,
}

/// Per-channel standardization over all positions: `(x − mean)/sqrt(var + ε)`.
pub fn feature_normalize<T: Real>(x: &Tensor<T>) -> (Tensor<T>, NormStats<T>) {
    let c = channel_extent(x);
    let n = x.len() / c;
    let inv_n = T::one() / real::<T>(n as f64);
    let eps = real::<T>(NORM_EPS);
    // shifted by the first row so constant channels center to exact zeros
    let shift = &x.data()[..c];
    let mut mean = vec![T::zero(); c];
    for row in x.data().chunks(c) {
        for ((m, &v), &s) in mean.iter_mut().zip(row).zip(shift) {
            *m = *m + (v - s);
        }
    }
    for (m, &s) in mean.iter_mut().zip(shift) {
        *m = s + *m * inv_n;
    }
    let mut var = vec![T::zero(); c];
    for row in x.data().chunks(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s = *s + (v - m) * (v - m);
        }
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&s| T::one() / (s * inv_n + eps).sqrt())
        .collect();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for ((v, &m), &is) in row.iter_mut().zip(&mean).zip(&inv_std) {
            *v = (*v - m) * is;
        }
    }
    (out, NormStats { inv_std })
}

/// Gradient of [`feature_normalize`] given its output `y`.
pub fn feature_normalize_backward<T: Real>(
    y: &Tensor<T>,
    stats: &NormStats<T>,
    grad: &Tensor<T>,
) -> Tensor<T> {
    let c = stats.inv_std.len();
    let n = y.len() / c;
    let inv_n = T::one() / real::<T>(n as f64);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gy = vec![T::zero(); c];
    for (yr, gr) in y.data().chunks(c).zip(grad.data().chunks(c)) {
        for ch in 0..c {
            sum_g[ch] = sum_g[ch] + gr[ch];
            sum_gy[ch] = sum_gy[ch] + gr[ch] * yr[ch];
        }
    }
    let mut out = vec![T::zero(); y.len()];
    for ((o, yr), gr) in out.chunks_mut(c).zip(y.data().chunks(c)).zip(grad.data().chunks(c)) {
        for ch in 0..c {
            o[ch] = stats.inv_std[ch] * (gr[ch] - sum_g[ch] * inv_n - yr[ch] * sum_gy[ch] * inv_n);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

/// Concatenates matrices `[m, w_i]` along columns.
pub fn concat_cols<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| MagnError::invalid("concat_cols", "no inputs"))?;
    let (m, _) = dims2(first, "concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, w) = dims2(p, "concat_cols")?;
        if r != m {
            return Err(MagnError::shape("concat_cols", first.shape(), p.shape()));
        }
        widths.push(w);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(m * total);
    for i in 0..m {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    Ok(Tensor::from_parts(vec![m, total], out))
}

/// Splits a column-concatenated gradient back into its parts.
pub fn split_cols<T: Real>(grad: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
    let m = grad.shape()[0];
    let total: usize = widths.iter().sum();
    let mut outs: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(m * w)).collect();
    for row in grad.data().chunks(total) {
        let mut off = 0;
        for (o, &w) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &w)| Tensor::from_parts(vec![m, w], d))
        .collect()
}

/// Mean squared error over all elements.
pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(MagnError::shape("mse_loss", pred.shape(), target.shape()));
    }
    let sum: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / real::<T>(pred.len() as f64))
}
