//! The end-to-end restoration network.

pub mod config;
pub mod network;
pub mod params;

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{MagnError, Result};
use crate::exec::{BranchMode, Eager, Exec};
use crate::ops;
use crate::tape::GradTape;
use crate::tensor::{Real, Tensor};

pub use config::{GraphStructure, ModelConfig, Precision};
pub use params::{layout, parameter_count, ModelParams, Network, ParamSpec};

/// Shares the parameter tensors with an eager backend.
pub fn eager_network<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig) -> Result<Network<Arc<Tensor<T>>>> {
    let (net, specs) = layout(cfg);
    check_params(params, &specs)?;
    let shared: Vec<_> = params.tensors().iter().cloned().map(Arc::new).collect();
    Ok(net.map(|&i| Arc::clone(&shared[i])))
}

fn check_params<T: Real>(params: &ModelParams<T>, specs: &[ParamSpec]) -> Result<()> {
    if params.len() != specs.len() {
        return Err(MagnError::Config(format!(
            "parameter set has {} tensors, config needs {}",
            params.len(),
            specs.len()
        )));
    }
    for (s, t) in specs.iter().zip(params.tensors()) {
        if t.shape() != s.shape.as_slice() {
            return Err(MagnError::shape("params", t.shape(), &s.shape));
        }
    }
    Ok(())
}

/// The residual `F(I)` predicted for `image`.
pub fn forward<T: Real>(image: &Tensor<T>, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let net = eager_network(params, cfg)?;
    forward_shared(image, &net, cfg, &mut Eager::new())
}

fn forward_shared<T: Real>(
    image: &Tensor<T>,
    net: &Network<Arc<Tensor<T>>>,
    cfg: &ModelConfig,
    ex: &mut Eager,
) -> Result<Tensor<T>> {
    let x = Arc::new(image.clone());
    let r = network::residual(ex, &x, net, cfg)?;
    if !r.all_finite() {
        return Err(MagnError::NonFinite { op: "forward" });
    }
    Ok(Arc::try_unwrap(r).unwrap_or_else(|a| (*a).clone()))
}

/// `clamp(I + F(I), 0, 1)` in a single pass.
pub fn restore<T: Real>(image: &Tensor<T>, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let r = forward(image, params, cfg)?;
    Ok(clamp_unit(&image.add(&r)?))
}

fn clamp_unit<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()).min(T::one()))
}

/// Mean squared error over every element.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    ops::mse(pred, target)
}

/// Largest extent `≤ n` the network accepts along one axis.
pub fn fit_extent(cfg: &ModelConfig, n: usize) -> Option<usize> {
    if cfg.graph_blocks > 0 && cfg.structure.patch_branches() > 0 {
        cfg.valid_extent(n)
    } else {
        Some(n)
    }
}

/// The `size` window of an `[H, W, C]` image starting at `origin`.
pub fn crop<T: Real>(image: &Tensor<T>, origin: (usize, usize), size: (usize, usize)) -> Result<Tensor<T>> {
    let (h, w, c) = match *image.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(MagnError::invalid("crop", format!("expected [H, W, C], got {s:?}"))),
    };
    if origin.0 + size.0 > h || origin.1 + size.1 > w {
        return Err(MagnError::invalid(
            "crop",
            format!("{size:?} at {origin:?} exceeds {h}x{w}"),
        ));
    }
    let d = image.data();
    let mut out = Vec::with_capacity(size.0 * size.1 * c);
    for y in origin.0..origin.0 + size.0 {
        let row = (y * w + origin.1) * c;
        out.extend_from_slice(&d[row..row + size.1 * c]);
    }
    Tensor::new(&[size.0, size.1, c], out)
}

fn tile_starts(extent: usize, tile: usize, step: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut p = 0;
    while p + tile < extent {
        starts.push(p);
        p += step;
    }
    starts.push(extent - tile);
    starts
}

/// Restores an image of any size by blending overlapping tiles.
///
/// Each tile is at most `tile` (height, width), shrunk to the nearest size
/// the patch geometry accepts. Neighbouring tiles overlap by at least one
/// window and their residuals are averaged before the final clamp. Tiles run
/// in parallel; the blend order is fixed, so the result is deterministic.
pub fn restore_image<T: Real>(
    image: &Tensor<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    tile: (usize, usize),
) -> Result<Tensor<T>> {
    let (h, w, c) = match *image.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(MagnError::invalid("restore_image", format!("expected [H, W, C], got {s:?}"))),
    };
    let uses_graph = cfg.graph_blocks > 0;
    let axis = |extent: usize, want: usize, name: &'static str| -> Result<(usize, Vec<usize>)> {
        if uses_graph && want < cfg.window {
            return Err(MagnError::invalid(
                "restore_image",
                format!("tile {name} {want} is smaller than the window {}", cfg.window),
            ));
        }
        let t = fit_extent(cfg, want.min(extent)).ok_or_else(|| {
            MagnError::invalid(
                "restore_image",
                format!("image {name} {extent} is too small for window {}", cfg.window),
            )
        })?;
        let step = if uses_graph {
            t.saturating_sub(cfg.window).max(1)
        } else {
            t
        };
        Ok((t, tile_starts(extent, t, step)))
    };
    let (th, ys) = axis(h, tile.0, "height")?;
    let (tw, xs) = axis(w, tile.1, "width")?;
    if uses_graph && cfg.structure.pixel_branches() > 0 && th * tw > cfg.node_budget {
        return Err(MagnError::NodeBudget {
            nodes: th * tw,
            budget: cfg.node_budget,
        });
    }

    let net = eager_network(params, cfg)?;
    let origins: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    let residuals = origins
        .par_iter()
        .map(|&(y0, x0)| {
            let crop = crop(image, (y0, x0), (th, tw))?;
            forward_shared(&crop, &net, cfg, &mut Eager::new())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut acc = vec![T::zero(); h * w * c];
    let mut hits = vec![0u32; h * w];
    for (&(y0, x0), r) in origins.iter().zip(&residuals) {
        let rd = r.data();
        for y in 0..th {
            for x in 0..tw {
                let p = (y0 + y) * w + x0 + x;
                hits[p] += 1;
                for ch in 0..c {
                    acc[p * c + ch] = acc[p * c + ch] + rd[(y * tw + x) * c + ch];
                }
            }
        }
    }
    let out: Vec<T> = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let n = T::from_u32(hits[i / c]).expect("count");
            let r = if hits[i / c] == 1 { acc[i] } else { acc[i] / n };
            (v + r).max(T::zero()).min(T::one())
        })
        .collect();
    Tensor::new(&[h, w, c], out)
}

/// Loss, parameter gradients and the branch decisions of one training pair.
pub struct PairGradient<T: Real> {
    pub loss: T,
    pub grads: Vec<Tensor<T>>,
    pub branches: BranchMode,
}

/// MSE between `input + F(input)` and `target`, differentiated with respect
/// to every parameter.
pub fn loss_and_gradients<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input: &Tensor<T>,
    target: &Tensor<T>,
    branches: BranchMode,
) -> Result<PairGradient<T>> {
    let (net, specs) = layout(cfg);
    check_params(params, &specs)?;
    let mut tape = GradTape::with_branches(branches);
    let leaves: Vec<_> = params.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
    let net = net.map(|&i| leaves[i]);
    let x = tape.constant(input.clone());
    let y = tape.constant(target.clone());
    let r = network::residual(&mut tape, &x, &net, cfg)?;
    let pred = tape.add(&x, &r)?;
    let loss = tape.mse(&pred, &y)?;
    let value = tape.get(loss).item();
    if !value.is_finite() {
        return Err(MagnError::NonFinite { op: "loss" });
    }
    let mut g = tape.backward(loss)?;
    let grads = leaves.iter().map(|&v| g.take(v)).collect();
    let branches = std::mem::take(&mut tape.branches);
    Ok(PairGradient {
        loss: value,
        grads,
        branches,
    })
}

/// Loss only, evaluated eagerly.
pub fn loss<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input: &Tensor<T>,
    target: &Tensor<T>,
    branches: BranchMode,
) -> Result<T> {
    let net = eager_network(params, cfg)?;
    let mut ex = Eager::with_branches(branches);
    let r = forward_shared(input, &net, cfg, &mut ex)?;
    mse_loss(&input.add(&r)?, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
        Tensor::from_fn(&[h, w, c], |i| {
            let k = (i as u64 * 131) ^ seed;
            ((k.wrapping_mul(2654435761) % 1000) as f64) / 1000.0
        })
    }

    #[test]
    fn fresh_network_is_identity() {
        let cfg = ModelConfig::micro();
        let p = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let x = image(15, 15, 3, 1);
        let r = forward(&x, &p, &cfg).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
        assert_eq!(restore(&x, &p, &cfg).unwrap(), x);
    }

    #[test]
    fn tile_starts_cover_extent() {
        assert_eq!(tile_starts(31, 31, 24), vec![0]);
        assert_eq!(tile_starts(62, 31, 24), vec![0, 24, 31]);
        assert_eq!(tile_starts(100, 63, 56), vec![0, 37]);
    }

    #[test]
    fn rejects_small_tiles_and_bad_sizes() {
        let cfg = ModelConfig::micro();
        let p = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let x = image(20, 20, 3, 1);
        assert!(restore_image(&x, &p, &cfg, (5, 5)).is_err());
        assert!(forward(&image(16, 16, 3, 1), &p, &cfg).is_err());
        assert!(restore_image(&x, &p, &cfg, (15, 15)).is_ok());
    }

    #[test]
    fn gradients_have_parameter_shapes() {
        let cfg = ModelConfig::micro();
        let p = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let x = image(15, 15, 3, 2);
        let y = image(15, 15, 3, 9);
        let g = loss_and_gradients(&p, &cfg, &x, &y, BranchMode::Free).unwrap();
        assert_eq!(g.grads.len(), p.len());
        for (g, t) in g.grads.iter().zip(p.tensors()) {
            assert_eq!(g.shape(), t.shape());
        }
        let l = loss(&p, &cfg, &x, &y, BranchMode::Free).unwrap();
        assert!((l - g.loss).abs() < 1e-12);
    }
}
