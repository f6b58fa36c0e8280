use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which aggregation block a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Shared,
    Group(usize),
}

impl Partition {
    pub fn prefix(self) -> String {
        match self {
            Partition::Shared => "shared".to_string(),
            Partition::Group(k) => format!("group{k}"),
        }
    }

    /// Parses the partition label from a parameter name such as `group3/l7.weight`.
    pub fn of_name(name: &str) -> Result<Self> {
        let (head, _) = name
            .split_once('/')
            .ok_or_else(|| Error::Config(format!("parameter name `{name}` has no partition label")))?;
        if head == "shared" {
            return Ok(Partition::Shared);
        }
        head.strip_prefix("group")
            .and_then(|k| k.parse().ok())
            .map(Partition::Group)
            .ok_or_else(|| Error::Config(format!("unknown partition label `{head}` in `{name}`")))
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.prefix())
    }
}

/// Full parameter name for one tensor of layer `layer`.
pub fn param_name(partition: Partition, layer: usize, field: &str) -> String {
    format!("{}/l{layer}.{field}", partition.prefix())
}

/// Running statistics are aggregated but never trained.
pub fn is_buffer(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|f| f.starts_with("running_"))
}

/// Named-tensor parameter set of one model, keyed by `partition/layer.field`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        Partition::of_name(&name)?;
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Alignment(format!("missing parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
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

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Scalar count of trainable tensors (running statistics excluded).
    pub fn trainable_numel(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| !is_buffer(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn partitions(&self) -> BTreeSet<Partition> {
        self.tensors
            .keys()
            .map(|n| Partition::of_name(n).expect("validated on insert"))
            .collect()
    }

    /// Subset of tensors in one partition.
    pub fn block(&self, partition: Partition) -> ModelParams {
        let prefix = format!("{}/", partition.prefix());
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with(&prefix))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    /// Inserts every tensor of `other`, replacing same-named entries.
    pub fn merge(&mut self, other: ModelParams) {
        self.tensors.extend(other.tensors);
    }

    /// Order-independent digest of parameter names and shapes.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for (name, t) in &self.tensors {
            h.write(name.as_bytes());
            h.write(&[0]);
            for &d in t.shape() {
                h.write(&(d as u64).to_le_bytes());
            }
            h.write(&[0xff]);
        }
        h.finish()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            t.ensure_finite(name)?;
        }
        Ok(())
    }

    /// Largest absolute elementwise difference, `None` when names or shapes differ.
    pub fn max_abs_diff(&self, other: &ModelParams) -> Option<f64> {
        if self.fingerprint() != other.fingerprint() {
            return None;
        }
        let mut worst = 0.0f64;
        for (name, t) in &self.tensors {
            let o = &other.tensors[name];
            for (a, b) in t.data().iter().zip(o.data()) {
                worst = worst.max((*a as f64 - *b as f64).abs());
            }
        }
        Some(worst)
    }

    /// True when every tensor matches bit for bit.
    pub fn bitwise_eq(&self, other: &ModelParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl FromIterator<(String, Tensor)> for ModelParams {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ModelParams {
            tensors: iter.into_iter().collect(),
        }
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
