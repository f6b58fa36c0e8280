//! Federated data partitioning: stratified IID, class-restricted shards and
//! Dirichlet label skew.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Scheme {
    Iid,
    ClassesPerNode { classes: usize },
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub scheme: Scheme,
    pub nodes: usize,
    pub seed: u64,
}

/// One node's local dataset: indices into the parent dataset and the set
/// of labels they contain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodePartition {
    pub node: usize,
    pub indices: Vec<usize>,
    pub classes: BTreeSet<usize>,
}

impl NodePartition {
    fn from_indices(node: usize, mut indices: Vec<usize>, ds: &Dataset) -> Self {
        indices.sort_unstable();
        let classes = indices.iter().map(|&i| ds.labels[i]).collect();
        Self { node, indices, classes }
    }
}

/// Classes held by each node under the round-robin rule: node `i` takes
/// `k` consecutive entries of a seeded class permutation, starting where
/// the previous node stopped and shifting by one after each full pass.
pub fn round_robin_classes(classes: usize, nodes: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..classes).collect();
    perm.shuffle(&mut stream(seed, &[0xc1a5]));
    (0..nodes)
        .map(|i| {
            let start = i * k + (i * k) / classes;
            let mut set: Vec<usize> = (0..k).map(|j| perm[(start + j) % classes]).collect();
            set.sort_unstable();
            set
        })
        .collect()
}

/// Splits `items` into `parts` contiguous runs whose lengths differ by at most one.
fn equal_split(items: &[usize], parts: usize) -> Vec<&[usize]> {
    let (base, extra) = (items.len() / parts, items.len() % parts);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for j in 0..parts {
        let len = base + usize::from(j < extra);
        out.push(&items[start..start + len]);
        start += len;
    }
    out
}

pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<NodePartition>> {
    let n = spec.nodes;
    if n == 0 {
        return Err(Error::Partition("need at least one node".into()));
    }
    let mut by_class = ds.indices_by_class();
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut stream(spec.seed, &[0x5afe, c as u64]));
    }
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n];
    match spec.scheme {
        Scheme::Iid => {
            for (c, idx) in by_class.iter().enumerate() {
                // rotate which nodes receive the larger shards
                for (j, shard) in equal_split(idx, n).into_iter().enumerate() {
                    assigned[(j + c) % n].extend_from_slice(shard);
                }
            }
        }
        Scheme::ClassesPerNode { classes: k } => {
            if k == 0 || k > ds.classes {
                return Err(Error::Partition(format!(
                    "classes_per_node={k} must lie in 1..={}",
                    ds.classes
                )));
            }
            let sets = round_robin_classes(ds.classes, n, k, spec.seed);
            let mut demand = vec![Vec::new(); ds.classes];
            for (node, set) in sets.iter().enumerate() {
                for &c in set {
                    demand[c].push(node);
                }
            }
            let short: Vec<String> = demand
                .iter()
                .enumerate()
                .filter(|(c, d)| by_class[*c].len() < d.len())
                .map(|(c, d)| format!("class {c}: {} samples for {} shards", by_class[c].len(), d.len()))
                .collect();
            if !short.is_empty() {
                return Err(Error::Partition(format!("infeasible shard demand: {}", short.join("; "))));
            }
            for (c, nodes) in demand.iter().enumerate() {
                if nodes.is_empty() {
                    continue;
                }
                for (shard, &node) in equal_split(&by_class[c], nodes.len()).into_iter().zip(nodes) {
                    assigned[node].extend_from_slice(shard);
                }
            }
        }
        Scheme::Dirichlet { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::Partition(format!("dirichlet alpha must be positive, got {alpha}")));
            }
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Partition(e.to_string()))?;
            for (c, idx) in by_class.iter().enumerate() {
                let mut rng = stream(spec.seed, &[0xd1c1, c as u64]);
                let draws: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = draws.iter().sum();
                let mut cum = 0.0;
                let mut start = 0;
                for (node, d) in draws.iter().enumerate() {
                    cum += if total > 0.0 { d / total } else { 1.0 / n as f64 };
                    let end = if node + 1 == n {
                        idx.len()
                    } else {
                        ((cum * idx.len() as f64).round() as usize).clamp(start, idx.len())
                    };
                    assigned[node].extend_from_slice(&idx[start..end]);
                    start = end;
                }
            }
        }
    }
    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(node, idx)| NodePartition::from_indices(node, idx, ds))
        .collect())
}
