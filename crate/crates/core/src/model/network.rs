//! Network blocks written against [`Exec`], so the same code runs eagerly
//! for inference and on a [`crate::tape::GradTape`] for training.

use crate::error::{MagnError, Result};
use crate::exec::Exec;
use crate::graph_attention::multi_head_exec;
use crate::model::config::ModelConfig;
use crate::model::params::{Branch, GraphBlock, Network, ResBlock};
use crate::ops::ConvSpec;
use crate::patching::PatchGeometry;
use crate::tensor::{real, Real};

fn hwc<T: Real, E: Exec<T>>(ex: &E, x: &E::Value, op: &'static str) -> Result<(usize, usize, usize)> {
    match *ex.value(x).shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(MagnError::invalid(op, format!("expected [H, W, C], got {s:?}"))),
    }
}

/// `f₂(σ(f₁(x))) + x` with 3×3 convolutions and PReLU.
pub fn residual_block<T: Real, E: Exec<T>>(
    ex: &mut E,
    x: &E::Value,
    p: &ResBlock<E::Value>,
) -> Result<E::Value> {
    let same = ConvSpec::same(3);
    let h = ex.conv2d(x, &p.conv1_w, &p.conv1_b, same)?;
    let h = ex.prelu(&h, &p.act)?;
    let h = ex.conv2d(&h, &p.conv2_w, &p.conv2_b, same)?;
    ex.add(&h, x)
}

/// Pixel-level aggregation: every spatial position is a node.
pub fn pixel_aggregate<T: Real, E: Exec<T>>(
    ex: &mut E,
    x: &E::Value,
    branch: &Branch<E::Value>,
    node_budget: usize,
) -> Result<E::Value> {
    let (h, w, d) = hwc(ex, x, "pixel_aggregate")?;
    let m = h * w;
    if m > node_budget {
        return Err(MagnError::NodeBudget {
            nodes: m,
            budget: node_budget,
        });
    }
    let nodes = ex.reshape(x, &[m, d])?;
    let out = multi_head_exec(ex, &nodes, &branch.heads, &branch.act)?;
    ex.reshape(&out, &[h, w, d])
}

/// Patch-level aggregation: every sliding window is a node.
///
/// Queries and keys come from pointwise projections of the map, unfolded
/// and reduced by the fully connected layers. Each head mixes the unfolded
/// patches with its adjacency and maps channels `d → d/N`; the concatenated
/// heads go through the activation and are folded back onto the map.
pub fn patch_aggregate<T: Real, E: Exec<T>>(
    ex: &mut E,
    x: &E::Value,
    branch: &Branch<E::Value>,
    geom: &PatchGeometry,
) -> Result<E::Value> {
    let (h, w, d) = hwc(ex, x, "patch_aggregate")?;
    if geom.source != (h, w, d) {
        return Err(MagnError::shape(
            "patch_aggregate",
            &ex.shape(x),
            &[geom.source.0, geom.source.1, geom.source.2],
        ));
    }
    let l = geom.count();
    let p = geom.window.0 * geom.window.1;
    let heads = branch.heads.len();
    let width = d / heads;

    let flat = ex.reshape(x, &[h * w, d])?;
    let patches = ex.unfold(x, geom)?;
    let patch_rows = ex.reshape(&patches, &[l * p, d])?;

    let mut outs = Vec::with_capacity(heads);
    for head in &branch.heads {
        let project = |ex: &mut E, cw: &E::Value, cb: &E::Value, fw: &E::Value, fb: &E::Value| {
            let c = ex.matmul(&flat, cw)?;
            let c = ex.add_bias(&c, cb)?;
            let c = ex.reshape(&c, &[h, w, d])?;
            let u = ex.unfold(&c, geom)?;
            let f = ex.matmul(&u, fw)?;
            ex.add_bias(&f, fb)
        };
        let q = project(ex, &head.conv1_w, &head.conv1_b, &head.fc1_w, &head.fc1_b)?;
        let k = project(ex, &head.conv2_w, &head.conv2_b, &head.fc2_w, &head.fc2_b)?;
        let d1 = ex.value(&q).shape()[1];
        let a = ex.masked_attention(&q, &k, T::one() / real::<T>(d1 as f64).sqrt())?;

        let xw = ex.matmul(&patch_rows, &head.w)?;
        let xw = ex.reshape(&xw, &[l, p * width])?;
        let mixed = ex.matmul(&a, &xw)?;
        outs.push(ex.reshape(&mixed, &[l * p, width])?);
    }
    let cat = if outs.len() == 1 {
        outs.pop().expect("one head")
    } else {
        ex.concat_cols(&outs)?
    };
    let act = ex.prelu(&cat, &branch.act)?;
    let nodes = ex.reshape(&act, &[l, p * d])?;
    ex.fold(&nodes, geom)
}

/// `x + normalize(f(Σ patch terms + Σ pixel terms))`.
pub fn graph_block<T: Real, E: Exec<T>>(
    ex: &mut E,
    x: &E::Value,
    block: &GraphBlock<E::Value>,
    cfg: &ModelConfig,
) -> Result<E::Value> {
    let (h, w, _) = hwc(ex, x, "graph_block")?;
    let mut terms = Vec::new();
    if !block.patch.is_empty() {
        let geom = cfg.geometry(h, w)?;
        for b in &block.patch {
            terms.push(patch_aggregate(ex, x, b, &geom)?);
        }
    }
    for b in &block.pixel {
        terms.push(pixel_aggregate(ex, x, b, cfg.node_budget)?);
    }
    let mut acc = terms
        .pop()
        .ok_or_else(|| MagnError::Config("graph block without branches".into()))?;
    for t in terms.iter().rev() {
        acc = ex.add(t, &acc)?;
    }
    let fused = ex.conv2d(&acc, &block.fuse_w, &block.fuse_b, ConvSpec::same(3))?;
    let normed = ex.feature_normalize(&fused)?;
    ex.add(x, &normed)
}

/// The learned residual `F(I)` of an `[H, W, C]` image.
pub fn residual<T: Real, E: Exec<T>>(
    ex: &mut E,
    image: &E::Value,
    net: &Network<E::Value>,
    cfg: &ModelConfig,
) -> Result<E::Value> {
    let (h, w, c) = hwc(ex, image, "forward")?;
    if c != cfg.in_channels {
        return Err(MagnError::invalid(
            "forward",
            format!("image has {c} channels, model expects {}", cfg.in_channels),
        ));
    }
    cfg.check_size(h, w)?;
    let same = ConvSpec::same(3);
    let mut x = ex.conv2d(image, &net.head_w, &net.head_b, same)?;
    for b in &net.pre {
        x = residual_block(ex, &x, b)?;
    }
    for g in &net.graph {
        x = graph_block(ex, &x, g, cfg)?;
    }
    for b in &net.post {
        x = residual_block(ex, &x, b)?;
    }
    ex.conv2d(&x, &net.tail_w, &net.tail_b, same)
}
