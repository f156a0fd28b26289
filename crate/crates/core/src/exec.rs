//! Execution backends shared by the network code.
//!
//! Every layer is written once against [`Exec`]. [`Eager`] evaluates
//! immediately and drops intermediates as soon as they go out of scope, which
//! keeps full-size inference cheap. [`crate::tape::GradTape`] records the same
//! operations for reverse-mode differentiation.

use std::sync::Arc;

use crate::error::{MagnError, Result};
use crate::ops::{self, ConvSpec};
use crate::patching::{self, PatchGeometry};
use crate::tensor::{Real, Tensor};

/// How piecewise operations (PReLU sign, attention mask) pick their branch.
#[derive(Clone, Debug, Default)]
pub enum BranchMode {
    /// Decide from the current values.
    #[default]
    Free,
    /// Decide from the current values and keep every decision.
    Record(Vec<Vec<bool>>),
    /// Reuse decisions recorded by an earlier pass, in order.
    Replay { log: Arc<Vec<Vec<bool>>>, cursor: usize },
}

impl BranchMode {
    pub fn replay(log: Vec<Vec<bool>>) -> Self {
        BranchMode::Replay {
            log: Arc::new(log),
            cursor: 0,
        }
    }

    /// The next replayed pattern, if replaying.
    pub(crate) fn next_replay(&mut self, len: usize) -> Result<Option<Vec<bool>>> {
        match self {
            BranchMode::Replay { log, cursor } => {
                let pattern = log
                    .get(*cursor)
                    .ok_or_else(|| MagnError::invalid("branch replay", "log exhausted"))?;
                if pattern.len() != len {
                    return Err(MagnError::invalid("branch replay", "pattern length mismatch"));
                }
                *cursor += 1;
                Ok(Some(pattern.clone()))
            }
            _ => Ok(None),
        }
    }

    pub(crate) fn observe(&mut self, pattern: &[bool]) {
        if let BranchMode::Record(log) = self {
            log.push(pattern.to_vec());
        }
    }

    /// Recorded decisions, when recording.
    pub fn into_log(self) -> Option<Vec<Vec<bool>>> {
        match self {
            BranchMode::Record(log) => Some(log),
            _ => None,
        }
    }
}

pub trait Exec<T: Real> {
    type Value: Clone;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    fn shape(&self, v: &Self::Value) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Introduces a value that is not differentiated.
    fn constant(&mut self, t: Tensor<T>) -> Self::Value;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, s: T) -> Result<Self::Value>;
    fn sum(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn transpose(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn add_bias(&mut self, x: &Self::Value, bias: &Self::Value) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
    fn conv2d(
        &mut self,
        x: &Self::Value,
        kernel: &Self::Value,
        bias: &Self::Value,
        spec: ConvSpec,
    ) -> Result<Self::Value>;
    fn prelu(&mut self, x: &Self::Value, slope: &Self::Value) -> Result<Self::Value>;
    fn softmax_rows(&mut self, x: &Self::Value) -> Result<Self::Value>;
    /// `softmax_rows(q·kᵀ·scale − 1e6·mask)` with the below-row-mean mask.
    fn masked_attention(&mut self, q: &Self::Value, k: &Self::Value, scale: T) -> Result<Self::Value>;
    fn feature_normalize(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn unfold(&mut self, x: &Self::Value, geom: &PatchGeometry) -> Result<Self::Value>;
    fn fold(&mut self, x: &Self::Value, geom: &PatchGeometry) -> Result<Self::Value>;
    fn concat_cols(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn mse(&mut self, pred: &Self::Value, target: &Self::Value) -> Result<Self::Value>;
}

/// Immediate evaluation without gradient bookkeeping.
#[derive(Debug, Default)]
pub struct Eager {
    pub branches: BranchMode,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_branches(branches: BranchMode) -> Self {
        Self { branches }
    }
}

impl<T: Real> Exec<T> for Eager {
    type Value = Arc<Tensor<T>>;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T> {
        v
    }

    fn constant(&mut self, t: Tensor<T>) -> Self::Value {
        Arc::new(t)
    }

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(ops::matmul(a, b)?))
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(a.add(b)?))
    }

    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(a.sub(b)?))
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(a.mul(b)?))
    }

    fn scale(&mut self, a: &Self::Value, s: T) -> Result<Self::Value> {
        Ok(Arc::new(a.scale(s)))
    }

    fn sum(&mut self, a: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(Tensor::scalar(a.sum())))
    }

    fn transpose(&mut self, a: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(a.transpose()?))
    }

    fn add_bias(&mut self, x: &Self::Value, bias: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(ops::add_bias(x, bias)?))
    }

    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value> {
        Ok(Arc::new(x.reshape(shape)?))
    }

    fn conv2d(
        &mut self,
        x: &Self::Value,
        kernel: &Self::Value,
        bias: &Self::Value,
        spec: ConvSpec,
    ) -> Result<Self::Value> {
        Ok(Arc::new(ops::conv2d(x, kernel, bias, spec)?))
    }

    fn prelu(&mut self, x: &Self::Value, slope: &Self::Value) -> Result<Self::Value> {
        let branches = match self.branches.next_replay(x.len())? {
            Some(b) => b,
            None => ops::prelu_branches(x),
        };
        self.branches.observe(&branches);
        Ok(Arc::new(ops::prelu(x, slope, Some(&branches))?))
    }

    fn softmax_rows(&mut self, x: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(ops::softmax_rows(x)?))
    }

    fn masked_attention(&mut self, q: &Self::Value, k: &Self::Value, scale: T) -> Result<Self::Value> {
        let n = q.shape()[0] * k.shape()[0];
        let replay = self.branches.next_replay(n)?;
        let (a, mask) = ops::masked_attention(q, k, scale, replay.as_deref())?;
        self.branches.observe(&mask);
        Ok(Arc::new(a))
    }

    fn feature_normalize(&mut self, x: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(ops::feature_normalize(x).0))
    }

    fn unfold(&mut self, x: &Self::Value, geom: &PatchGeometry) -> Result<Self::Value> {
        Ok(Arc::new(patching::unfold_nodes(x, geom)?))
    }

    fn fold(&mut self, x: &Self::Value, geom: &PatchGeometry) -> Result<Self::Value> {
        Ok(Arc::new(patching::fold_nodes(x, geom)?))
    }

    fn concat_cols(&mut self, parts: &[Self::Value]) -> Result<Self::Value> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| p.as_ref()).collect();
        Ok(Arc::new(ops::concat_cols(&refs)?))
    }

    fn mse(&mut self, pred: &Self::Value, target: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(Tensor::scalar(ops::mse(pred, target)?)))
    }
}
