//! Attention-built dynamic graphs and multi-head graph convolution.
//!
//! For node features `x: [m, d]` each head projects queries and keys
//! (`q = FC1(Conv1(x))`, `k = FC2(Conv2(x))`, both pointwise), scores
//! `S = q·kᵀ/√d₁`, masks every entry strictly below its row mean and takes a
//! row softmax of `S − 1e6·mask`. The head output is `A·x·W` with
//! `W: [d, d/N]`; head outputs are concatenated back to width `d` before the
//! activation.

use rand::Rng;

use crate::error::{MagnError, Result};
use crate::exec::{Eager, Exec};
use crate::tensor::{real, Real, Tensor};

/// Weights of one attention head. Generic over the value type so the same
/// layout serves plain tensors and recorded values.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<V> {
    /// Pointwise query convolution `[d, d]` and bias `[d]`.
    pub conv1_w: V,
    pub conv1_b: V,
    pub conv2_w: V,
    pub conv2_b: V,
    /// Query reduction `[node_dim, d₁]` and bias `[d₁]`.
    pub fc1_w: V,
    pub fc1_b: V,
    pub fc2_w: V,
    pub fc2_b: V,
    /// Graph-convolution weight `[d, d/N]`.
    pub w: V,
}

impl<V> HeadWeights<V> {
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> HeadWeights<U> {
        HeadWeights {
            conv1_w: f(&self.conv1_w),
            conv1_b: f(&self.conv1_b),
            conv2_w: f(&self.conv2_w),
            conv2_b: f(&self.conv2_b),
            fc1_w: f(&self.fc1_w),
            fc1_b: f(&self.fc1_b),
            fc2_w: f(&self.fc2_w),
            fc2_b: f(&self.fc2_b),
            w: f(&self.w),
        }
    }

    /// Fields in serialization order with their short names.
    pub fn named(&self) -> [(&'static str, &V); 9] {
        [
            ("conv1.w", &self.conv1_w),
            ("conv1.b", &self.conv1_b),
            ("conv2.w", &self.conv2_w),
            ("conv2.b", &self.conv2_b),
            ("fc1.w", &self.fc1_w),
            ("fc1.b", &self.fc1_b),
            ("fc2.w", &self.fc2_w),
            ("fc2.b", &self.fc2_b),
            ("w", &self.w),
        ]
    }
}

/// Shapes of one head's weights for channel width `d`, reduction input
/// `node_dim`, projected width `d1` and `heads` heads.
pub fn head_shapes(d: usize, node_dim: usize, d1: usize, heads: usize) -> HeadWeights<Vec<usize>> {
    HeadWeights {
        conv1_w: vec![d, d],
        conv1_b: vec![d],
        conv2_w: vec![d, d],
        conv2_b: vec![d],
        fc1_w: vec![node_dim, d1],
        fc1_b: vec![d1],
        fc2_w: vec![node_dim, d1],
        fc2_b: vec![d1],
        w: vec![d, d / heads],
    }
}

/// Parameters of a pixel-level graph generator plus its graph convolution.
#[derive(Clone, Debug)]
pub struct GraphGenParams<T: Real> {
    pub heads: Vec<HeadWeights<Tensor<T>>>,
    /// Node feature width `d`.
    pub dim: usize,
    /// Projected similarity width `d₁`.
    pub proj_dim: usize,
}

impl<T: Real> GraphGenParams<T> {
    pub fn new(heads: Vec<HeadWeights<Tensor<T>>>, dim: usize, proj_dim: usize) -> Result<Self> {
        validate_heads(dim, heads.len(), proj_dim)?;
        let expect = head_shapes(dim, dim, proj_dim, heads.len());
        for h in &heads {
            for ((name, t), (_, s)) in h.named().iter().zip(expect.named()) {
                if t.shape() != s.as_slice() {
                    return Err(MagnError::invalid(
                        "graph params",
                        format!("{name} has shape {:?}, expected {s:?}", t.shape()),
                    ));
                }
            }
        }
        Ok(Self {
            heads,
            dim,
            proj_dim,
        })
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn random(dim: usize, heads: usize, proj_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        validate_heads(dim, heads, proj_dim)?;
        let shapes = head_shapes(dim, dim, proj_dim, heads);
        let hs = (0..heads)
            .map(|_| shapes.map(|s| fan_in_uniform(s, rng)))
            .collect();
        Self::new(hs, dim, proj_dim)
    }

    /// Identity projections and graph weights (`Conv = I`, `FC = I` with
    /// `d₁ = d`, `W = I` restricted to the head's column block).
    pub fn identity(dim: usize, heads: usize) -> Result<Self> {
        validate_heads(dim, heads, dim)?;
        let width = dim / heads;
        let hs = (0..heads)
            .map(|h| HeadWeights {
                conv1_w: Tensor::eye(dim),
                conv1_b: Tensor::zeros(&[dim]),
                conv2_w: Tensor::eye(dim),
                conv2_b: Tensor::zeros(&[dim]),
                fc1_w: Tensor::eye(dim),
                fc1_b: Tensor::zeros(&[dim]),
                fc2_w: Tensor::eye(dim),
                fc2_b: Tensor::zeros(&[dim]),
                w: Tensor::from_fn(&[dim, width], |i| {
                    let (r, c) = (i / width, i % width);
                    if r == h * width + c {
                        T::one()
                    } else {
                        T::zero()
                    }
                }),
            })
            .collect();
        Self::new(hs, dim, dim)
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }
}

pub(crate) fn validate_heads(dim: usize, heads: usize, proj_dim: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(MagnError::Config(format!(
            "head count {heads} must divide the feature width {dim}"
        )));
    }
    if proj_dim == 0 {
        return Err(MagnError::Config("projected width must be at least 1".into()));
    }
    Ok(())
}

/// Uniform in `±1/√fan_in`, where fan-in is the product of all but the last
/// extent. Rank-1 tensors are biases and start at zero.
pub(crate) fn fan_in_uniform<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    if shape.len() <= 1 {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = shape[..shape.len() - 1].iter().product();
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| real(rng.gen_range(-bound..bound)))
}

/// Row-stochastic attention adjacency of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency<T: Real> {
    /// `[m, m]`.
    pub weights: Tensor<T>,
    pub head: usize,
}

impl<T: Real> Adjacency<T> {
    pub fn nodes(&self) -> usize {
        self.weights.shape()[0]
    }
}

/// `FC(Conv(x))` with both layers pointwise and affine.
pub fn project<T: Real, E: Exec<T>>(
    ex: &mut E,
    x: &E::Value,
    conv_w: &E::Value,
    conv_b: &E::Value,
    fc_w: &E::Value,
    fc_b: &E::Value,
) -> Result<E::Value> {
    let c = ex.matmul(x, conv_w)?;
    let c = ex.add_bias(&c, conv_b)?;
    let f = ex.matmul(&c, fc_w)?;
    ex.add_bias(&f, fc_b)
}

/// Masked attention adjacency from node features `x: [m, d]`.
pub fn head_adjacency<T: Real, E: Exec<T>>(
    ex: &mut E,
    x: &E::Value,
    head: &HeadWeights<E::Value>,
) -> Result<E::Value> {
    let q = project(ex, x, &head.conv1_w, &head.conv1_b, &head.fc1_w, &head.fc1_b)?;
    let k = project(ex, x, &head.conv2_w, &head.conv2_b, &head.fc2_w, &head.fc2_b)?;
    let d1 = ex.value(&q).shape()[1];
    ex.masked_attention(&q, &k, T::one() / real::<T>(d1 as f64).sqrt())
}

/// `A·x·w`, evaluated as `A·(x·w)`.
pub fn graph_conv_exec<T: Real, E: Exec<T>>(
    ex: &mut E,
    x: &E::Value,
    a: &E::Value,
    w: &E::Value,
) -> Result<E::Value> {
    let xw = ex.matmul(x, w)?;
    ex.matmul(a, &xw)
}

/// `σ(concat_i(A_i·x·W_i))` with `σ` a per-channel PReLU.
pub fn multi_head_exec<T: Real, E: Exec<T>>(
    ex: &mut E,
    x: &E::Value,
    heads: &[HeadWeights<E::Value>],
    slope: &E::Value,
) -> Result<E::Value> {
    let mut outs = Vec::with_capacity(heads.len());
    for head in heads {
        let a = head_adjacency(ex, x, head)?;
        outs.push(graph_conv_exec(ex, x, &a, &head.w)?);
    }
    let cat = if outs.len() == 1 {
        outs.pop().expect("one head")
    } else {
        ex.concat_cols(&outs)?
    };
    ex.prelu(&cat, slope)
}

fn check_nodes<T: Real>(x: &Tensor<T>, params: &GraphGenParams<T>) -> Result<()> {
    match *x.shape() {
        [m, d] if m >= 1 && d == params.dim => {}
        _ => {
            return Err(MagnError::shape(
                "graph attention",
                x.shape(),
                &[x.shape()[0], params.dim],
            ))
        }
    }
    if !x.all_finite() {
        return Err(MagnError::NonFinite { op: "build_adjacency" });
    }
    Ok(())
}

/// Adjacency of head `head` for node features `x: [m, d]`.
pub fn build_adjacency<T: Real>(
    x: &Tensor<T>,
    params: &GraphGenParams<T>,
    head: usize,
) -> Result<Adjacency<T>> {
    check_nodes(x, params)?;
    let hw = params
        .heads
        .get(head)
        .ok_or_else(|| MagnError::invalid("build_adjacency", format!("no head {head}")))?;
    let mut ex = Eager::new();
    let xv = ex.constant(x.clone());
    let hv = hw.map(|t| ex.constant(t.clone()));
    let a = head_adjacency(&mut ex, &xv, &hv)?;
    Ok(Adjacency {
        weights: (*a).clone(),
        head,
    })
}

/// `A·x·w` for a single head, without activation.
pub fn graph_conv<T: Real>(x: &Tensor<T>, a: &Adjacency<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let m = x.shape()[0];
    if a.weights.shape() != [m, m] {
        return Err(MagnError::shape("graph_conv", a.weights.shape(), x.shape()));
    }
    if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(MagnError::shape("graph_conv", x.shape(), w.shape()));
    }
    let mut ex = Eager::new();
    let (xv, av, wv) = (
        ex.constant(x.clone()),
        ex.constant(a.weights.clone()),
        ex.constant(w.clone()),
    );
    Ok((*graph_conv_exec(&mut ex, &xv, &av, &wv)?).clone())
}

/// Multi-head graph convolution with a per-channel PReLU (`slope: [d]`).
pub fn multi_head_graph_conv<T: Real>(
    x: &Tensor<T>,
    params: &GraphGenParams<T>,
    slope: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_nodes(x, params)?;
    let mut ex = Eager::new();
    let xv = ex.constant(x.clone());
    let heads: Vec<_> = params
        .heads
        .iter()
        .map(|h| h.map(|t| ex.constant(t.clone())))
        .collect();
    let sv = ex.constant(slope.clone());
    Ok((*multi_head_exec(&mut ex, &xv, &heads, &sv)?).clone())
}
