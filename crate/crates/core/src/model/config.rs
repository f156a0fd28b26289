use std::fmt;
use std::str::FromStr;

use crate::error::{MagnError, Result};
use crate::graph_attention::validate_heads;
use crate::kv::KvMap;
use crate::patching::{valid_extent_at_most, PatchGeometry};

/// Which graphs a graph block aggregates over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GraphStructure {
    /// Pixel-level and patch-level graphs.
    #[default]
    Full,
    /// Patch-level graph only.
    NoGlobal,
    /// Pixel-level graph only.
    NoLocal,
    /// Two independent patch-level graphs, no pixel graph.
    DoubleLocal,
}

impl GraphStructure {
    pub const ALL: [GraphStructure; 4] = [
        GraphStructure::NoGlobal,
        GraphStructure::NoLocal,
        GraphStructure::DoubleLocal,
        GraphStructure::Full,
    ];

    pub fn pixel_branches(self) -> usize {
        match self {
            GraphStructure::Full | GraphStructure::NoLocal => 1,
            _ => 0,
        }
    }

    pub fn patch_branches(self) -> usize {
        match self {
            GraphStructure::Full | GraphStructure::NoGlobal => 1,
            GraphStructure::DoubleLocal => 2,
            GraphStructure::NoLocal => 0,
        }
    }
}

impl fmt::Display for GraphStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphStructure::Full => "full",
            GraphStructure::NoGlobal => "no-global",
            GraphStructure::NoLocal => "no-local",
            GraphStructure::DoubleLocal => "double-local",
        })
    }
}

impl FromStr for GraphStructure {
    type Err = MagnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(GraphStructure::Full),
            "no-global" => Ok(GraphStructure::NoGlobal),
            "no-local" => Ok(GraphStructure::NoLocal),
            "double-local" => Ok(GraphStructure::DoubleLocal),
            _ => Err(MagnError::Config(format!("unknown graph structure `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = MagnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(MagnError::Config(format!("unknown precision `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature width `d` of the body.
    pub channels: usize,
    /// Image channels (1 or 3).
    pub in_channels: usize,
    pub res_blocks_before: usize,
    pub res_blocks_after: usize,
    pub graph_blocks: usize,
    /// Attention heads `N` per graph.
    pub heads: usize,
    /// Projected similarity width of the pixel graph.
    pub attn_dim: usize,
    /// Projected similarity width of the patch graph.
    pub patch_attn_dim: usize,
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
    pub structure: GraphStructure,
    /// Largest pixel graph (in nodes) a single forward pass may build.
    pub node_budget: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_width(64)
    }
}

pub(crate) const MODEL_KEYS: &[&str] = &[
    "channels",
    "in_channels",
    "res_blocks_before",
    "res_blocks_after",
    "graph_blocks",
    "heads",
    "attn_dim",
    "patch_attn_dim",
    "window",
    "stride",
    "padding",
    "structure",
    "node_budget",
    "precision",
];

impl ModelConfig {
    fn with_width(d: usize) -> Self {
        Self {
            channels: d,
            in_channels: 3,
            res_blocks_before: 16,
            res_blocks_after: 16,
            graph_blocks: 3,
            heads: 4,
            attn_dim: (d / 4).max(1),
            patch_attn_dim: (d / 2).max(1),
            window: 7,
            stride: 4,
            padding: 0,
            structure: GraphStructure::Full,
            node_budget: 4096,
            precision: Precision::F32,
        }
    }

    /// Small network used for end-to-end gradient checks.
    pub fn micro() -> Self {
        Self {
            res_blocks_before: 1,
            res_blocks_after: 1,
            graph_blocks: 1,
            heads: 2,
            precision: Precision::F64,
            ..Self::with_width(8)
        }
    }

    /// Desk-scale network for quick training runs.
    pub fn desk() -> Self {
        Self {
            res_blocks_before: 2,
            res_blocks_after: 2,
            graph_blocks: 1,
            ..Self::with_width(16)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MagnError::Config(m));
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if !matches!(self.in_channels, 1 | 3) {
            return bad(format!("in_channels must be 1 or 3, got {}", self.in_channels));
        }
        validate_heads(self.channels, self.heads, self.attn_dim)?;
        if self.patch_attn_dim == 0 {
            return bad("patch_attn_dim must be at least 1".into());
        }
        if self.window == 0 || self.stride == 0 || self.stride > self.window {
            return bad(format!(
                "need 1 <= stride <= window, got window {} stride {}",
                self.window, self.stride
            ));
        }
        if self.node_budget == 0 {
            return bad("node_budget must be positive".into());
        }
        Ok(())
    }

    /// Patch geometry for an `h × w` map of width `channels`.
    pub fn geometry(&self, h: usize, w: usize) -> Result<PatchGeometry> {
        PatchGeometry::new(
            (h, w, self.channels),
            (self.window, self.window),
            (self.stride, self.stride),
            (self.padding, self.padding),
        )
    }

    /// Whether an `h × w` image can go through the network in one pass.
    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        if self.graph_blocks > 0 && self.structure.patch_branches() > 0 {
            self.geometry(h, w)?;
        }
        Ok(())
    }

    /// Largest valid square extent `≤ n` for this window and stride.
    pub fn valid_extent(&self, n: usize) -> Option<usize> {
        valid_extent_at_most(n + 2 * self.padding, self.window, self.stride)
            .and_then(|e| e.checked_sub(2 * self.padding))
            .filter(|&e| e > 0)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("channels", self.channels);
        kv.insert("in_channels", self.in_channels);
        kv.insert("res_blocks_before", self.res_blocks_before);
        kv.insert("res_blocks_after", self.res_blocks_after);
        kv.insert("graph_blocks", self.graph_blocks);
        kv.insert("heads", self.heads);
        kv.insert("attn_dim", self.attn_dim);
        kv.insert("patch_attn_dim", self.patch_attn_dim);
        kv.insert("window", self.window);
        kv.insert("stride", self.stride);
        kv.insert("padding", self.padding);
        kv.insert("structure", self.structure);
        kv.insert("node_budget", self.node_budget);
        kv.insert("precision", self.precision);
        kv
    }

    /// Consumes the model keys of `kv`. Missing keys take the defaults of
    /// the full-size network; projected widths default from `channels`.
    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let channels = kv.take_or("channels", 64usize)?;
        let base = Self::with_width(channels);
        let cfg = Self {
            channels,
            in_channels: kv.take_or("in_channels", base.in_channels)?,
            res_blocks_before: kv.take_or("res_blocks_before", base.res_blocks_before)?,
            res_blocks_after: kv.take_or("res_blocks_after", base.res_blocks_after)?,
            graph_blocks: kv.take_or("graph_blocks", base.graph_blocks)?,
            heads: kv.take_or("heads", base.heads)?,
            attn_dim: kv.take_or("attn_dim", base.attn_dim)?,
            patch_attn_dim: kv.take_or("patch_attn_dim", base.patch_attn_dim)?,
            window: kv.take_or("window", base.window)?,
            stride: kv.take_or("stride", base.stride)?,
            padding: kv.take_or("padding", base.padding)?,
            structure: kv.take_or("structure", base.structure)?,
            node_budget: kv.take_or("node_budget", base.node_budget)?,
            precision: kv.take_or("precision", base.precision)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
