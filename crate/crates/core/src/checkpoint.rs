//! Versioned checkpoint container.
//!
//! ```text
//! MAGN1
//! [model]
//! channels=64
//! ...
//! [train]
//! lr=0.0001
//! ...
//! [state]
//! step=1000
//! [manifest]
//! param head.w 3x3x3x64 0 1728
//! adam_m head.w 3x3x3x64 1728 1728
//! ...
//! [data]
//! <little-endian f32 values in manifest order>
//! ```
//!
//! Offsets and counts are in values, not bytes.

use std::fs;
use std::path::Path;

use crate::error::{MagnError, Result};
use crate::imageio::write_atomic;
use crate::kv::KvMap;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &str = "MAGN1";
const DATA_MARK: &str = "[data]\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Training settings, echoed as written.
    pub train: KvMap,
    pub step: u64,
    pub params: ModelParams<f32>,
    /// Adam first and second moments, one tensor per parameter.
    pub moments: Option<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
}

fn bad(msg: impl Into<String>) -> MagnError {
    MagnError::Checkpoint(msg.into())
}

fn shape_text(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    pub fn new<T: Real>(model: &ModelConfig, train: KvMap, step: u64, params: &ModelParams<T>) -> Self {
        Self {
            model: model.clone(),
            train,
            step,
            params: params.cast(),
            moments: None,
        }
    }

    pub fn with_moments<T: Real>(mut self, m: &[Tensor<T>], v: &[Tensor<T>]) -> Self {
        self.moments = Some((m.iter().map(Tensor::cast).collect(), v.iter().map(Tensor::cast).collect()));
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\n[model]\n{}[train]\n{}", self.model.to_kv().to_text(), self.train.to_text());
        head.push_str(&format!("[state]\nstep={}\n[manifest]\n", self.step));
        let mut blocks: Vec<(&str, &str, &Tensor<f32>)> = Vec::new();
        for (name, t) in self.params.iter() {
            blocks.push(("param", name, t));
        }
        if let Some((m, v)) = &self.moments {
            for (kind, set) in [("adam_m", m), ("adam_v", v)] {
                for (name, t) in self.params.names().iter().zip(set) {
                    blocks.push((kind, name, t));
                }
            }
        }
        let mut offset = 0;
        for (kind, name, t) in &blocks {
            head.push_str(&format!("{kind} {name} {} {offset} {}\n", shape_text(t.shape()), t.len()));
            offset += t.len();
        }
        head.push_str(DATA_MARK);
        let mut bytes = head.into_bytes();
        bytes.reserve(offset * 4);
        for (_, _, t) in &blocks {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(DATA_MARK.len() + 1)
            .position(|w| w[0] == b'\n' && &w[1..] == DATA_MARK.as_bytes())
            .ok_or_else(|| bad("missing [data] section"))?
            + 1;
        let head = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
        let body = &bytes[split + DATA_MARK.len()..];
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad(format!("not a {MAGIC} checkpoint")));
        }
        let mut sections: Vec<(String, Vec<&str>)> = Vec::new();
        for line in lines {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                sections.push((name.to_string(), Vec::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                body.push(line);
            } else {
                return Err(bad(format!("line outside any section: `{line}`")));
            }
        }
        let section = |name: &str| -> Result<&Vec<&str>> {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, b)| b)
                .ok_or_else(|| bad(format!("missing [{name}] section")))
        };
        let mut mkv = KvMap::parse(&section("model")?.join("\n"))?;
        let model = ModelConfig::from_kv(&mut mkv)?;
        mkv.finish()?;
        let train = KvMap::parse(&section("train")?.join("\n"))?;
        let mut state = KvMap::parse(&section("state")?.join("\n"))?;
        let step = state.take("step")?.ok_or_else(|| bad("missing step"))?;

        let values: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if body.len() % 4 != 0 {
            return Err(bad("data section is not a whole number of f32 values"));
        }
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for line in section("manifest")? {
            let f: Vec<&str> = line.split_whitespace().collect();
            let [kind, name, shape, offset, count] = f[..] else {
                return Err(bad(format!("bad manifest line `{line}`")));
            };
            let shape: Vec<usize> = shape
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(format!("bad shape in `{line}`")))?;
            let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in `{line}`")))?;
            let count: usize = count.parse().map_err(|_| bad(format!("bad count in `{line}`")))?;
            let data = values
                .get(offset..offset + count)
                .ok_or_else(|| bad(format!("`{name}` runs past the end of the data")))?;
            let t = Tensor::new(&shape, data.to_vec()).map_err(|e| bad(format!("`{name}`: {e}")))?;
            match kind {
                "param" => params.push((name.to_string(), t)),
                "adam_m" => m.push(t),
                "adam_v" => v.push(t),
                _ => return Err(bad(format!("unknown manifest entry `{kind}`"))),
            }
        }
        let params = ModelParams::from_named(&model, params)?;
        let moments = match (m.len(), v.len()) {
            (0, 0) => None,
            (a, b) if a == params.len() && b == params.len() => Some((m, v)),
            _ => return Err(bad("optimizer moments do not match the parameters")),
        };
        Ok(Self {
            model,
            train,
            step,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let cfg = ModelConfig::micro();
        let p = ModelParams::<f32>::init(&cfg, 4).unwrap();
        let mut train = KvMap::default();
        train.insert("batch_size", 32);
        let m: Vec<_> = p.tensors().iter().map(|t| t.scale(0.5)).collect();
        let ck = Checkpoint::new(&cfg, train, 17, &p).with_moments(&m, &m);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.train.get("batch_size"), Some("32"));
    }

    #[test]
    fn rejects_corruption() {
        let cfg = ModelConfig::micro();
        let p = ModelParams::<f32>::init(&cfg, 4).unwrap();
        let bytes = Checkpoint::new(&cfg, KvMap::default(), 0, &p).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Checkpoint::from_bytes(b"MAGN0\n[data]\n").is_err());
        let mut wrong = bytes.clone();
        wrong[4] = b'2';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
    }
}
