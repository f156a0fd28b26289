//! Reverse-mode differentiation over a linear record of operations.

use crate::error::{MagnError, Result};
use crate::exec::{BranchMode, Exec};
use crate::ops::{self, ConvSpec, NormStats};
use crate::patching::{self, PatchGeometry};
use crate::tensor::{real, Real, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Transpose(Var),
    AddBias(Var, Var),
    Reshape(Var),
    Conv2d { x: Var, k: Var, b: Var, spec: ConvSpec },
    Prelu { x: Var, slope: Var, branches: Vec<bool> },
    Softmax(Var),
    Attention { q: Var, k: Var, scale: T },
    Normalize { x: Var, stats: NormStats<T> },
    Unfold { x: Var, geom: PatchGeometry },
    Fold { x: Var, geom: PatchGeometry },
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    Mse(Var, Var),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations on tracked tensors; [`GradTape::backward`]
/// replays them in reverse to accumulate gradients.
#[derive(Default)]
pub struct GradTape<T: Real> {
    nodes: Vec<Node<T>>,
    pub branches: BranchMode,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros if `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl<T: Real> GradTape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branches: BranchMode::Free,
        }
    }

    pub fn with_branches(branches: BranchMode) -> Self {
        Self {
            nodes: Vec::new(),
            branches,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor whose gradient is wanted.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn get(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.rg(inputs);
        self.push(value, op, rg)
    }

    /// Accumulates `d loss / d v` for every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(MagnError::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.local_grads(node, &g)?;
            for (v, dv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dv),
                    slot @ None => *slot = Some(dv),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Matmul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if wants(a) {
                    out.push((*a, ops::matmul_nt(g, val(b))?));
                }
                if wants(b) {
                    out.push((*b, ops::matmul_tn(val(a), g)?));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-T::one()))],
            Op::Mul(a, b) => vec![(*a, g.mul(val(b))?), (*b, g.mul(val(a))?)],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Sum(a) => vec![(*a, Tensor::full(val(a).shape(), g.item()))],
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::AddBias(x, b) => {
                let c = val(b).len();
                vec![(*x, g.clone()), (*b, ops::sum_rows(g, c))]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(x).shape())?)],
            Op::Conv2d { x, k, b, spec } => {
                let (dx, dk, db) = ops::conv2d_backward(val(x), val(k), g, *spec)?;
                vec![(*x, dx), (*k, dk), (*b, db)]
            }
            Op::Prelu { x, slope, branches } => {
                let (dx, ds) = ops::prelu_backward(val(x), val(slope), branches, g);
                vec![(*x, dx), (*slope, ds)]
            }
            Op::Softmax(x) => {
                let _ = x;
                vec![(*x, ops::softmax_rows_backward(&node.value, g))]
            }
            Op::Attention { q, k, scale } => {
                let (dq, dk) = ops::masked_attention_backward(val(q), val(k), *scale, &node.value, g)?;
                vec![(*q, dq), (*k, dk)]
            }
            Op::Normalize { x, stats } => {
                vec![(*x, ops::feature_normalize_backward(&node.value, stats, g))]
            }
            Op::Unfold { x, geom } => vec![(*x, patching::fold_sum_nodes(g, geom)?)],
            Op::Fold { x, geom } => vec![(*x, patching::fold_nodes_backward(g, geom)?)],
            Op::Concat { parts, widths } => parts
                .iter()
                .copied()
                .zip(ops::split_cols(g, widths))
                .collect(),
            Op::Mse(p, t) => {
                let (pv, tv) = (val(p), val(t));
                let k = g.item() * real::<T>(2.0) / real::<T>(pv.len() as f64);
                let dp = pv.zip_map(tv, "mse_loss", |a, b| (a - b) * k)?;
                let dt = dp.scale(-T::one());
                vec![(*p, dp), (*t, dt)]
            }
        })
    }
}

impl<T: Real> Exec<T> for GradTape<T> {
    type Value = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = ops::matmul(self.get(*a), self.get(*b))?;
        Ok(self.record(v, Op::Matmul(*a, *b), &[*a, *b]))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.get(*a).add(self.get(*b))?;
        Ok(self.record(v, Op::Add(*a, *b), &[*a, *b]))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.get(*a).sub(self.get(*b))?;
        Ok(self.record(v, Op::Sub(*a, *b), &[*a, *b]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.get(*a).mul(self.get(*b))?;
        Ok(self.record(v, Op::Mul(*a, *b), &[*a, *b]))
    }

    fn scale(&mut self, a: &Var, s: T) -> Result<Var> {
        let v = self.get(*a).scale(s);
        Ok(self.record(v, Op::Scale(*a, s), &[*a]))
    }

    fn sum(&mut self, a: &Var) -> Result<Var> {
        let v = Tensor::scalar(self.get(*a).sum());
        Ok(self.record(v, Op::Sum(*a), &[*a]))
    }

    fn transpose(&mut self, a: &Var) -> Result<Var> {
        let v = self.get(*a).transpose()?;
        Ok(self.record(v, Op::Transpose(*a), &[*a]))
    }

    fn add_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        let v = ops::add_bias(self.get(*x), self.get(*bias))?;
        Ok(self.record(v, Op::AddBias(*x, *bias), &[*x, *bias]))
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let v = self.get(*x).reshape(shape)?;
        Ok(self.record(v, Op::Reshape(*x), &[*x]))
    }

    fn conv2d(&mut self, x: &Var, kernel: &Var, bias: &Var, spec: ConvSpec) -> Result<Var> {
        let v = ops::conv2d(self.get(*x), self.get(*kernel), self.get(*bias), spec)?;
        Ok(self.record(
            v,
            Op::Conv2d {
                x: *x,
                k: *kernel,
                b: *bias,
                spec,
            },
            &[*x, *kernel, *bias],
        ))
    }

    fn prelu(&mut self, x: &Var, slope: &Var) -> Result<Var> {
        let n = self.get(*x).len();
        let branches = match self.branches.next_replay(n)? {
            Some(b) => b,
            None => ops::prelu_branches(self.get(*x)),
        };
        self.branches.observe(&branches);
        let v = ops::prelu(self.get(*x), self.get(*slope), Some(&branches))?;
        Ok(self.record(
            v,
            Op::Prelu {
                x: *x,
                slope: *slope,
                branches,
            },
            &[*x, *slope],
        ))
    }

    fn softmax_rows(&mut self, x: &Var) -> Result<Var> {
        let v = ops::softmax_rows(self.get(*x))?;
        Ok(self.record(v, Op::Softmax(*x), &[*x]))
    }

    fn masked_attention(&mut self, q: &Var, k: &Var, scale: T) -> Result<Var> {
        let n = self.get(*q).shape()[0] * self.get(*k).shape()[0];
        let replay = self.branches.next_replay(n)?;
        let (v, mask) = ops::masked_attention(self.get(*q), self.get(*k), scale, replay.as_deref())?;
        self.branches.observe(&mask);
        Ok(self.record(v, Op::Attention { q: *q, k: *k, scale }, &[*q, *k]))
    }

    fn feature_normalize(&mut self, x: &Var) -> Result<Var> {
        let (v, stats) = ops::feature_normalize(self.get(*x));
        Ok(self.record(v, Op::Normalize { x: *x, stats }, &[*x]))
    }

    fn unfold(&mut self, x: &Var, geom: &PatchGeometry) -> Result<Var> {
        let v = patching::unfold_nodes(self.get(*x), geom)?;
        Ok(self.record(v, Op::Unfold { x: *x, geom: *geom }, &[*x]))
    }

    fn fold(&mut self, x: &Var, geom: &PatchGeometry) -> Result<Var> {
        let v = patching::fold_nodes(self.get(*x), geom)?;
        Ok(self.record(v, Op::Fold { x: *x, geom: *geom }, &[*x]))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.get(*p)).collect();
        let widths = refs.iter().map(|t| t.shape().get(1).copied().unwrap_or(0)).collect();
        let v = ops::concat_cols(&refs)?;
        Ok(self.record(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            parts,
        ))
    }

    fn mse(&mut self, pred: &Var, target: &Var) -> Result<Var> {
        let v = Tensor::scalar(ops::mse(self.get(*pred), self.get(*target))?);
        Ok(self.record(v, Op::Mse(*pred, *target), &[*pred, *target]))
    }
}
