//! Named parameter sets and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian `u32`, payload `f32` LE):
//!
//! ```text
//! "PBPARAM1" | count | { name_len | name (utf-8) | rank | dims[rank] | data }*
//! ```
//!
//! Tensors are written in name order. Freeze flags are runtime state and are
//! not persisted.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::array::Tensor;
use super::graph::{Gradients, Graph, NodeId};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PBPARAM1";

/// Which value of the parameter vector this is in the meta-learning loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    #[default]
    Global,
    Personalized,
    UpdatedGlobal,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
    pub role: ParamRole,
}

/// Graph node ids of a bound parameter set.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        match self.ids.get(name) {
            Some(id) => *id,
            None => panic!("parameter `{name}` was not bound"),
        }
    }
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn with_role(mut self, role: ParamRole) -> Self {
        self.role = role;
        self
    }

    /// Mark every tensor whose name starts with `prefix` as non-trainable.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<_> = self
            .tensors
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        self.frozen.extend(names);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys().filter(|n| !self.frozen.contains(*n))
    }

    /// Insert every tensor as a leaf; frozen ones become constants.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        let ids = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let id = if self.is_frozen(name) {
                    graph.input(t.clone())
                } else {
                    graph.param(t.clone())
                };
                (name.clone(), id)
            })
            .collect();
        Bound { ids }
    }

    /// Collect named gradients for every trainable tensor.
    pub fn collect_grads(&self, bound: &Bound, mut grads: Gradients) -> Grads {
        let map = self
            .trainable_names()
            .map(|name| {
                let g = grads
                    .take(bound.id(name))
                    .expect("trainable leaf always has a gradient slot");
                (name.clone(), g)
            })
            .collect();
        Grads(map)
    }

    /// Sum of squared differences against another parameter set with the
    /// same names.
    pub fn distance(&self, other: &ModelParams) -> f64 {
        self.tensors
            .iter()
            .map(|(n, a)| {
                let b = &other.tensors[n];
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| {
                        let d = (*x as f64) - (*y as f64);
                        d * d
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 8];
        bytes
            .read_exact(&mut magic)
            .map_err(|_| "truncated header".to_string())?;
        if &magic != CHECKPOINT_MAGIC {
            return Err("bad magic, not a parameter checkpoint".into());
        }
        let count = read_u32(&mut bytes)?;
        let mut params = ModelParams::new();
        for _ in 0..count {
            let name_len = read_u32(&mut bytes)? as usize;
            if name_len > bytes.len() {
                return Err("truncated tensor name".into());
            }
            let (name, rest) = bytes.split_at(name_len);
            let name = std::str::from_utf8(name)
                .map_err(|_| "tensor name is not utf-8".to_string())?
                .to_owned();
            bytes = rest;
            let rank = read_u32(&mut bytes)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(&mut bytes).map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            if numel * 4 > bytes.len() {
                return Err(format!("truncated payload for `{name}`"));
            }
            let data = bytes[..numel * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            bytes = &bytes[numel * 4..];
            let t = Tensor::new(shape, data).map_err(|e| format!("`{name}`: {e}"))?;
            params.insert(name, t);
        }
        if !bytes.is_empty() {
            return Err(format!("{} trailing bytes", bytes.len()));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }
}

fn read_u32(bytes: &mut &[u8]) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    bytes
        .read_exact(&mut b)
        .map_err(|_| "truncated checkpoint".to_string())?;
    Ok(u32::from_le_bytes(b))
}

/// Named gradients, one per trainable parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads(pub BTreeMap<String, Tensor>);

impl Grads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    /// Elementwise `self += other`; names absent from `self` are inserted.
    pub fn accumulate(&mut self, other: &Grads) {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.0.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.0
            .values()
            .map(|g| g.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
