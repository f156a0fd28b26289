use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MagnError, Result};
use crate::graph_attention::{fan_in_uniform, head_shapes, HeadWeights};
use crate::model::config::ModelConfig;
use crate::tensor::{real, Real, Tensor};

/// Initial PReLU slope.
pub const INIT_SLOPE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<V> {
    pub conv1_w: V,
    pub conv1_b: V,
    pub act: V,
    pub conv2_w: V,
    pub conv2_b: V,
}

/// One graph aggregation branch: its heads and the activation slopes.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch<V> {
    pub heads: Vec<HeadWeights<V>>,
    pub act: V,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphBlock<V> {
    pub pixel: Vec<Branch<V>>,
    pub patch: Vec<Branch<V>>,
    pub fuse_w: V,
    pub fuse_b: V,
}

/// The whole network with every parameter slot holding a `V`. With
/// `V = usize` this is the layout of the flat parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<V> {
    pub head_w: V,
    pub head_b: V,
    pub pre: Vec<ResBlock<V>>,
    pub graph: Vec<GraphBlock<V>>,
    pub post: Vec<ResBlock<V>>,
    pub tail_w: V,
    pub tail_b: V,
}

impl<V> ResBlock<V> {
    fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> ResBlock<U> {
        ResBlock {
            conv1_w: f(&self.conv1_w),
            conv1_b: f(&self.conv1_b),
            act: f(&self.act),
            conv2_w: f(&self.conv2_w),
            conv2_b: f(&self.conv2_b),
        }
    }
}

impl<V> Branch<V> {
    fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> Branch<U> {
        Branch {
            heads: self.heads.iter().map(|h| h.map(&mut *f)).collect(),
            act: f(&self.act),
        }
    }
}

impl<V> Network<V> {
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> Network<U> {
        Network {
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
            pre: self.pre.iter().map(|b| b.map(&mut f)).collect(),
            graph: self
                .graph
                .iter()
                .map(|g| GraphBlock {
                    pixel: g.pixel.iter().map(|b| b.map(&mut f)).collect(),
                    patch: g.patch.iter().map(|b| b.map(&mut f)).collect(),
                    fuse_w: f(&g.fuse_w),
                    fuse_b: f(&g.fuse_b),
                })
                .collect(),
            post: self.post.iter().map(|b| b.map(&mut f)).collect(),
            tail_w: f(&self.tail_w),
            tail_b: f(&self.tail_b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Uniform in ±1/√fan_in (zeros for rank-1 tensors).
    FanIn,
    Slope,
    Zero,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, prefix: &str, k: usize, cin: usize, cout: usize, init: Init) -> (usize, usize) {
        (
            self.push(format!("{prefix}.w"), vec![k, k, cin, cout], init),
            self.push(format!("{prefix}.b"), vec![cout], Init::Zero),
        )
    }

    fn res_block(&mut self, prefix: &str, d: usize) -> ResBlock<usize> {
        let (conv1_w, conv1_b) = self.conv(&format!("{prefix}.conv1"), 3, d, d, Init::FanIn);
        let act = self.push(format!("{prefix}.act"), vec![d], Init::Slope);
        let (conv2_w, conv2_b) = self.conv(&format!("{prefix}.conv2"), 3, d, d, Init::FanIn);
        ResBlock {
            conv1_w,
            conv1_b,
            act,
            conv2_w,
            conv2_b,
        }
    }

    fn branch(&mut self, prefix: &str, d: usize, node_dim: usize, d1: usize, heads: usize) -> Branch<usize> {
        let shapes = head_shapes(d, node_dim, d1, heads);
        let heads = (0..heads)
            .map(|h| {
                let mut idx = Vec::with_capacity(9);
                for (field, shape) in shapes.named() {
                    idx.push(self.push(format!("{prefix}.h{h}.{field}"), shape.clone(), Init::FanIn));
                }
                HeadWeights {
                    conv1_w: idx[0],
                    conv1_b: idx[1],
                    conv2_w: idx[2],
                    conv2_b: idx[3],
                    fc1_w: idx[4],
                    fc1_b: idx[5],
                    fc2_w: idx[6],
                    fc2_b: idx[7],
                    w: idx[8],
                }
            })
            .collect();
        let act = self.push(format!("{prefix}.act"), vec![d], Init::Slope);
        Branch { heads, act }
    }
}

/// Parameter layout and per-slot specs of a configuration.
pub fn layout(cfg: &ModelConfig) -> (Network<usize>, Vec<ParamSpec>) {
    let d = cfg.channels;
    let c = cfg.in_channels;
    let mut b = LayoutBuilder::default();
    let (head_w, head_b) = b.conv("head", 3, c, d, Init::FanIn);
    let pre = (0..cfg.res_blocks_before)
        .map(|i| b.res_block(&format!("pre.{i}"), d))
        .collect();
    let patch_dim = cfg.window * cfg.window * d;
    let graph = (0..cfg.graph_blocks)
        .map(|g| {
            let pixel = (0..cfg.structure.pixel_branches())
                .map(|j| b.branch(&format!("graph.{g}.pixel{j}"), d, d, cfg.attn_dim, cfg.heads))
                .collect();
            let patch = (0..cfg.structure.patch_branches())
                .map(|j| {
                    b.branch(
                        &format!("graph.{g}.patch{j}"),
                        d,
                        patch_dim,
                        cfg.patch_attn_dim,
                        cfg.heads,
                    )
                })
                .collect();
            let (fuse_w, fuse_b) = b.conv(&format!("graph.{g}.fuse"), 3, d, d, Init::FanIn);
            GraphBlock {
                pixel,
                patch,
                fuse_w,
                fuse_b,
            }
        })
        .collect();
    let post = (0..cfg.res_blocks_after)
        .map(|i| b.res_block(&format!("post.{i}"), d))
        .collect();
    let (tail_w, tail_b) = b.conv("tail", 3, d, c, Init::Zero);
    (
        Network {
            head_w,
            head_b,
            pre,
            graph,
            post,
            tail_w,
            tail_b,
        },
        b.specs,
    )
}

/// Number of scalar parameters of a configuration.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    layout(cfg)
        .1
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// The ordered parameter tensors of one network instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Fan-in scaled weights, zero biases, PReLU slopes 0.25 and a zero tail
    /// convolution, so a fresh network restores its input unchanged.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, specs) = layout(cfg);
        let tensors = specs
            .iter()
            .map(|s| match s.init {
                Init::FanIn => fan_in_uniform(&s.shape, &mut rng),
                Init::Slope => Tensor::full(&s.shape, real(INIT_SLOPE)),
                Init::Zero => Tensor::zeros(&s.shape),
            })
            .collect();
        Ok(Self {
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
        })
    }

    /// Every parameter zero, including the PReLU slopes.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (_, specs) = layout(cfg);
        Ok(Self {
            tensors: specs.iter().map(|s| Tensor::zeros(&s.shape)).collect(),
            names: specs.into_iter().map(|s| s.name).collect(),
        })
    }

    /// Builds parameters from named tensors, checking names and shapes
    /// against the configuration's layout.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        cfg.validate()?;
        let (_, specs) = layout(cfg);
        if specs.len() != named.len() {
            return Err(MagnError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        for (s, (n, t)) in specs.iter().zip(&named) {
            if &s.name != n || s.shape != t.shape() {
                return Err(MagnError::Checkpoint(format!(
                    "parameter `{n}` {:?} does not match layout slot `{}` {:?}",
                    t.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}
