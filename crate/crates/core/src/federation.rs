//! Synchronous federated training: local SGD on each node, then FedAvg,
//! FedProx or group-matched aggregation into a global model.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::encoded_len;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{apply_running_updates, Mode, Network};
use crate::optim::Sgd;
use crate::params::{is_buffer, ModelParams, Partition};
use crate::partition::NodePartition;
use crate::psinet::{GroupMapping, TrimMask};
use crate::rng::stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Fedavg,
    Fedprox { mu: f32 },
    Psinet,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Fedavg => "fedavg",
            Strategy::Fedprox { .. } => "fedprox",
            Strategy::Psinet => "psinet",
        }
    }
}

/// What to do with a group no node retained in a round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyGroupPolicy {
    #[default]
    CarryForward,
    Error,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f32,
    #[serde(default)]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    pub batch_size: usize,
    pub strategy: Strategy,
    /// Drop groups whose classes a node does not hold (Ψ-Net only).
    #[serde(default = "default_true")]
    pub trimming: bool,
    /// Weight averages by node sample counts instead of uniformly.
    #[serde(default)]
    pub weighted: bool,
    #[serde(default)]
    pub empty_group: EmptyGroupPolicy,
    pub seed: u64,
    /// Worker threads for node training; 0 uses every core.
    #[serde(default)]
    pub threads: usize,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.rounds == 0 {
            return bad("rounds", "must be at least 1".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive and finite, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if let Strategy::Fedprox { mu } = self.strategy {
            if !(mu >= 0.0 && mu.is_finite()) {
                return bad("strategy.mu", format!("must be non-negative, got {mu}"));
            }
        }
        Ok(())
    }
}

/// Loss, trainable-parameter gradients and side outputs of one batch.
pub struct BatchGradients {
    pub loss: f32,
    pub correct: usize,
    pub grads: BTreeMap<String, Tensor>,
    pub running_updates: Vec<(String, Tensor)>,
}

/// Cross-entropy on one batch plus, when `prox` is given, the proximal term
/// `(mu/2)·Σ‖w − w_anchor‖²` over every trainable parameter.
pub fn batch_gradients(
    net: &Network,
    params: &ModelParams,
    images: &Tensor,
    labels: &[usize],
    prox: Option<(&ModelParams, f32)>,
) -> Result<BatchGradients> {
    let mut tape = Tape::new();
    let pass = net.forward(&mut tape, params, images, Mode::Train)?;
    let correct = count_correct(tape.value(pass.logits), labels);
    let mut loss = tape.softmax_cross_entropy(pass.logits, labels)?;
    if let Some((anchor, mu)) = prox {
        let mut total = None;
        for (name, &var) in &pass.param_vars {
            if is_buffer(name) {
                continue;
            }
            let a = tape.constant(anchor.require(name)?.clone())?;
            let d = tape.sub(var, a)?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum(sq)?;
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        if let Some(t) = total {
            let term = tape.scale(t, mu / 2.0)?;
            loss = tape.add(loss, term)?;
        }
    }
    let value = tape.value(loss).item()?;
    let g = tape.backward(loss)?;
    let grads = pass
        .param_vars
        .iter()
        .filter(|(n, _)| !is_buffer(n))
        .map(|(n, &v)| (n.clone(), g.get_or_zeros(v)))
        .collect();
    Ok(BatchGradients {
        loss: value,
        correct,
        grads,
        running_updates: pass.running_updates,
    })
}

/// Samples whose highest logit (lowest index on ties) is the label.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == l
        })
        .count()
}

/// Result of one node's local training.
#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub params: ModelParams,
    /// Mean training loss and accuracy over the final local epoch.
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

/// Runs `local_epochs` epochs of SGD from `start` on the node's shard. The
/// shuffling stream derives from `(seed, node, round)`; optimizer momentum
/// starts from zero every round.
pub fn local_train(
    net: &Network,
    start: &ModelParams,
    ds: &Dataset,
    part: &NodePartition,
    cfg: &FederationConfig,
    round: usize,
) -> Result<LocalOutcome> {
    if part.indices.is_empty() {
        return Err(Error::Partition(format!("node {} has no training samples", part.node)));
    }
    let mut rng = stream(cfg.seed, &[0x10ca1, part.node as u64, round as u64]);
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut params = start.clone();
    let prox_mu = match cfg.strategy {
        Strategy::Fedprox { mu } => Some(mu),
        _ => None,
    };
    let mut order = part.indices.clone();
    let (mut loss_sum, mut correct) = (0.0f64, 0usize);
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        loss_sum = 0.0;
        correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = ds.batch(chunk)?;
            let out = batch_gradients(net, &params, &x, &y, prox_mu.map(|mu| (start, mu)))?;
            loss_sum += out.loss as f64 * chunk.len() as f64;
            correct += out.correct;
            apply_running_updates(&mut params, out.running_updates)?;
            sgd.step(&mut params, &out.grads)?;
        }
    }
    params.ensure_finite()?;
    let n = order.len() as f64;
    Ok(LocalOutcome {
        params,
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
        samples: order.len(),
    })
}

/// Mean loss and accuracy of `params` on `ds` in evaluation mode.
pub fn evaluate(net: &Network, params: &ModelParams, ds: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = ds.batch(chunk)?;
        let mut tape = Tape::new();
        let pass = net.forward(&mut tape, params, &x, Mode::Eval)?;
        correct += count_correct(tape.value(pass.logits), &y);
        let l = tape.softmax_cross_entropy(pass.logits, &y)?;
        loss += tape.value(l).item()? as f64 * chunk.len() as f64;
    }
    let n = ds.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Elementwise average in 64 bits, accumulating in ascending node order so
/// the result does not depend on the order of `models`.
fn average(models: &[(usize, &ModelParams)], weights: Option<&[f64]>) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::Config("cannot average zero models".into()))?;
    let fp = first.1.fingerprint();
    if let Some((node, _)) = models.iter().find(|(_, m)| m.fingerprint() != fp) {
        return Err(Error::Alignment(format!(
            "node {node} has a different parameter layout; averaging needs identical fingerprints"
        )));
    }
    if let Some(w) = weights {
        if w.len() != models.len() || w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("invalid aggregation weights {w:?}")));
        }
    }
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by_key(|&i| models[i].0);
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = order.iter().map(|&i| weight(i)).sum();
    let mut out = ModelParams::new();
    for (name, t) in first.1.iter() {
        let mut acc = vec![0.0f64; t.numel()];
        for &i in &order {
            let w = weight(i);
            let src = models[i].1.require(name)?.data();
            for (a, &v) in acc.iter_mut().zip(src) {
                *a += w * v as f64;
            }
        }
        let data = acc.iter().map(|a| (a / total) as f32).collect();
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Coordinate-wise (optionally weighted) average of homogeneous models,
/// running statistics included. Models are `(node id, params)`.
pub fn aggregate_fedavg(models: &[(usize, &ModelParams)], weights: Option<&[f64]>) -> Result<ModelParams> {
    average(models, weights)
}

/// Global parameter collection: a shared block plus one block per group,
/// with the nodes that produced each block.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModel {
    pub shared: ModelParams,
    pub groups: BTreeMap<usize, ModelParams>,
    /// Contributing nodes and round of each block's latest update.
    pub provenance: BTreeMap<Partition, (usize, BTreeSet<usize>)>,
}

impl GlobalModel {
    /// Splits a full parameter set into blocks.
    pub fn from_params(params: &ModelParams, round: usize, nodes: BTreeSet<usize>) -> Self {
        let mut shared = ModelParams::new();
        let mut groups: BTreeMap<usize, ModelParams> = BTreeMap::new();
        for part in params.partitions() {
            let block = params.block(part);
            match part {
                Partition::Shared => shared = block,
                Partition::Group(k) => {
                    groups.insert(k, block);
                }
            }
        }
        let provenance = params
            .partitions()
            .into_iter()
            .map(|p| (p, (round, nodes.clone())))
            .collect();
        Self {
            shared,
            groups,
            provenance,
        }
    }

    /// Every block merged into one parameter set.
    pub fn assemble(&self) -> ModelParams {
        let mut out = self.shared.clone();
        for g in self.groups.values() {
            out.merge(g.clone());
        }
        out
    }

    pub fn contributors(&self, part: Partition) -> Option<&BTreeSet<usize>> {
        self.provenance.get(&part).map(|(_, s)| s)
    }
}

/// One node's contribution to group-matched aggregation.
pub struct NodeUpdate<'a> {
    pub node: usize,
    pub params: &'a ModelParams,
    pub mask: &'a TrimMask,
}

/// Averages shared blocks over all nodes and each group's block over the
/// nodes that kept that group. A group kept by no node is carried forward
/// from `previous` or rejected, per `policy`.
pub fn aggregate_psinet(
    updates: &[NodeUpdate<'_>],
    mapping: &GroupMapping,
    previous: Option<&GlobalModel>,
    policy: EmptyGroupPolicy,
    weights: Option<&[f64]>,
    round: usize,
) -> Result<GlobalModel> {
    if updates.is_empty() {
        return Err(Error::Config("no node updates to aggregate".into()));
    }
    let shared_blocks: Vec<ModelParams> = updates.iter().map(|u| u.params.block(Partition::Shared)).collect();
    let all: Vec<(usize, &ModelParams)> = updates.iter().map(|u| u.node).zip(&shared_blocks).collect();
    let shared = average(&all, weights)?;
    let mut provenance = BTreeMap::new();
    provenance.insert(Partition::Shared, (round, updates.iter().map(|u| u.node).collect()));
    let mut groups = BTreeMap::new();
    for k in 0..mapping.group_count() {
        let members: Vec<usize> = (0..updates.len()).filter(|&i| updates[i].mask.keeps(k)).collect();
        if members.is_empty() {
            let carried = match policy {
                EmptyGroupPolicy::CarryForward => previous.and_then(|p| {
                    p.groups
                        .get(&k)
                        .map(|b| (b.clone(), p.provenance.get(&Partition::Group(k)).cloned()))
                }),
                EmptyGroupPolicy::Error => None,
            };
            let (block, prov) = carried.ok_or_else(|| {
                Error::Config(format!(
                    "no node retains group {k} (classes {:?}) in round {round}",
                    mapping.classes_of(k)
                ))
            })?;
            groups.insert(k, block);
            if let Some(p) = prov {
                provenance.insert(Partition::Group(k), p);
            }
            continue;
        }
        let blocks: Vec<ModelParams> = members.iter().map(|&i| updates[i].params.block(Partition::Group(k))).collect();
        if blocks.iter().any(ModelParams::is_empty) {
            return Err(Error::Alignment(format!("a node keeping group {k} holds no parameters for it")));
        }
        let list: Vec<(usize, &ModelParams)> = members.iter().map(|&i| updates[i].node).zip(&blocks).collect();
        let w: Option<Vec<f64>> = weights.map(|w| members.iter().map(|&i| w[i]).collect());
        groups.insert(k, average(&list, w.as_deref())?);
        provenance.insert(
            Partition::Group(k),
            (round, members.iter().map(|&i| updates[i].node).collect()),
        );
    }
    Ok(GlobalModel {
        shared,
        groups,
        provenance,
    })
}

/// Parameters sent to a node: the shared block plus exactly the groups its
/// mask keeps, with the payload size in bytes.
pub fn distribute(global: &GlobalModel, mask: Option<&TrimMask>) -> Result<(ModelParams, usize)> {
    let mut payload = global.shared.clone();
    match mask {
        None => {
            for g in global.groups.values() {
                payload.merge(g.clone());
            }
        }
        Some(mask) => {
            for k in mask.kept() {
                let block = global
                    .groups
                    .get(&k)
                    .ok_or_else(|| Error::Alignment(format!("global model has no block for group {k}")))?;
                payload.merge(block.clone());
            }
        }
    }
    let bytes = encoded_len(&payload);
    Ok((payload, bytes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeReport {
    pub node: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
    /// Trainable parameter count of the node's (possibly trimmed) model.
    pub params: usize,
    pub bytes_up: usize,
    pub bytes_down: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub strategy: String,
    pub nodes: Vec<NodeReport>,
    pub global_loss: f64,
    pub global_accuracy: f64,
    /// Nodes whose parameters entered each block this round.
    pub provenance: BTreeMap<Partition, BTreeSet<usize>>,
    pub wall_ms: u64,
}

/// A node's network and parameters after its last local training.
#[derive(Clone, Debug)]
pub struct LocalModel {
    pub node: usize,
    pub net: Network,
    pub params: ModelParams,
}

pub struct FederationRun {
    pub reports: Vec<RoundReport>,
    pub global: GlobalModel,
    pub locals: Vec<LocalModel>,
}

/// Runs `cfg.rounds` synchronous rounds of distribute → local training →
/// aggregation → evaluation. `net` is the full global network: regulated
/// for the Ψ-Net strategy, usually plain for the baselines. `on_round`
/// observes each finished round with the new global model.
pub fn run_federation(
    cfg: &FederationConfig,
    net: &Network,
    train: &Dataset,
    partitions: &[NodePartition],
    test: &Dataset,
    mut on_round: impl FnMut(&RoundReport, &GlobalModel) -> Result<()>,
) -> Result<FederationRun> {
    cfg.validate()?;
    if partitions.is_empty() {
        return Err(Error::Config("federation needs at least one node".into()));
    }
    let psinet = cfg.strategy == Strategy::Psinet;
    let mapping = net.mapping().cloned();
    if psinet && mapping.is_none() {
        return Err(Error::Config("the psinet strategy needs a regulated network".into()));
    }
    // per-node network and mask
    let mut nodes = Vec::with_capacity(partitions.len());
    for part in partitions {
        let (node_net, mask) = match (&mapping, psinet && cfg.trimming) {
            (Some(m), true) => {
                let mask = m.trim_mask(&part.classes);
                if mask.kept().is_empty() {
                    return Err(Error::Config(format!(
                        "node {} holds no class of any structure group",
                        part.node
                    )));
                }
                (net.with_mask(&mask)?, Some(mask))
            }
            (Some(m), false) if psinet => (net.clone(), Some(TrimMask::none(m.group_count()))),
            _ => (net.clone(), None),
        };
        nodes.push((part, node_net, mask));
    }
    let weights: Option<Vec<f64>> = cfg
        .weighted
        .then(|| partitions.iter().map(|p| p.indices.len() as f64).collect());
    let all_nodes: BTreeSet<usize> = partitions.iter().map(|p| p.node).collect();
    let mut global = GlobalModel::from_params(&net.init_params(cfg.seed), 0, BTreeSet::new());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut reports = Vec::with_capacity(cfg.rounds);
    let mut locals = Vec::new();
    for round in 0..cfg.rounds {
        let started = Instant::now();
        let outcomes: Vec<Result<(LocalOutcome, usize)>> = pool.install(|| {
            nodes
                .par_iter()
                .map(|(part, node_net, mask)| {
                    let (payload, down) = distribute(&global, mask.as_ref())?;
                    let out = local_train(node_net, &payload, train, part, cfg, round)?;
                    Ok((out, down))
                })
                .collect()
        });
        let outcomes: Vec<(LocalOutcome, usize)> = outcomes.into_iter().collect::<Result<_>>()?;
        let next = if psinet {
            let updates: Vec<NodeUpdate<'_>> = nodes
                .iter()
                .zip(&outcomes)
                .map(|((part, _, mask), (out, _))| NodeUpdate {
                    node: part.node,
                    params: &out.params,
                    mask: mask.as_ref().expect("psinet nodes carry masks"),
                })
                .collect();
            aggregate_psinet(
                &updates,
                mapping.as_ref().expect("checked above"),
                Some(&global),
                cfg.empty_group,
                weights.as_deref(),
                round,
            )?
        } else {
            let models: Vec<(usize, &ModelParams)> = nodes
                .iter()
                .zip(&outcomes)
                .map(|((part, _, _), (out, _))| (part.node, &out.params))
                .collect();
            let avg = aggregate_fedavg(&models, weights.as_deref())?;
            GlobalModel::from_params(&avg, round, all_nodes.clone())
        };
        let (global_loss, global_accuracy) = evaluate(net, &next.assemble(), test, 256)?;
        let report = RoundReport {
            round,
            strategy: cfg.strategy.name().to_string(),
            nodes: nodes
                .iter()
                .zip(&outcomes)
                .map(|((part, _, _), (out, down))| NodeReport {
                    node: part.node,
                    loss: out.loss,
                    accuracy: out.accuracy,
                    samples: out.samples,
                    params: out.params.trainable_numel(),
                    bytes_up: encoded_len(&out.params),
                    bytes_down: *down,
                })
                .collect(),
            global_loss,
            global_accuracy,
            provenance: next
                .provenance
                .iter()
                .filter(|(_, (r, _))| *r == round)
                .map(|(p, (_, s))| (*p, s.clone()))
                .collect(),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        on_round(&report, &next)?;
        reports.push(report);
        global = next;
        if round + 1 == cfg.rounds {
            locals = nodes
                .iter()
                .zip(outcomes)
                .map(|((part, node_net, _), (out, _))| LocalModel {
                    node: part.node,
                    net: node_net.clone(),
                    params: out.params,
                })
                .collect();
        }
    }
    Ok(FederationRun {
        reports,
        global,
        locals,
    })
}
