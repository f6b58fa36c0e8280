//! Neuron interpretation: class preference vectors, top-response classes,
//! per-layer total variance and structural alignment scores.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{ArchitectureSpec, LayerDescriptor};
use crate::model::{LayerOutput, Mode, Network};
use crate::params::ModelParams;
use crate::psinet::GroupMapping;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Probe inputs: `B` batches of images for every class.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    per_class: Vec<Vec<Tensor>>,
}

impl ProbeSet {
    pub fn new(per_class: Vec<Vec<Tensor>>) -> Result<Self> {
        for (c, batches) in per_class.iter().enumerate() {
            if batches.iter().all(|b| b.shape().first().copied().unwrap_or(0) == 0) {
                return Err(Error::Config(format!("class {c} has no probe samples")));
            }
        }
        Ok(Self { per_class })
    }

    /// Takes up to `batches × batch_size` samples of each class, in dataset
    /// order, split into at most `batches` batches.
    pub fn from_dataset(ds: &Dataset, batches: usize, batch_size: usize) -> Result<Self> {
        let mut per_class = Vec::with_capacity(ds.classes);
        for (c, idx) in ds.indices_by_class().into_iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::Config(format!("class {c} has no probe samples")));
            }
            let take = &idx[..idx.len().min(batches * batch_size)];
            let mut out = Vec::new();
            for chunk in take.chunks(batch_size.max(1)) {
                out.push(ds.batch(chunk)?.0);
            }
            per_class.push(out);
        }
        Self::new(per_class)
    }

    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn batches(&self, class: usize) -> &[Tensor] {
        &self.per_class[class]
    }

    /// Every probe batch, for calibrating normalization statistics.
    pub fn all_batches(&self) -> Vec<Tensor> {
        self.per_class.iter().flatten().cloned().collect()
    }
}

/// Class preferences `p_c` of one channel (or unit) of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceVector {
    pub layer: usize,
    /// Channel index in the full (untrimmed) layer.
    pub channel: usize,
    /// Structure group holding the channel; `None` for shared layers.
    pub group: Option<usize>,
    pub p: Vec<f64>,
}

impl PreferenceVector {
    /// Preferences with negatives clamped to zero, scaled to sum to one.
    /// A channel with no positive preference maps to the uniform vector.
    pub fn normalized(&self) -> Vec<f64> {
        let clamped: Vec<f64> = self.p.iter().map(|&v| v.max(0.0)).collect();
        let total: f64 = clamped.iter().sum();
        if total > 0.0 {
            clamped.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / self.p.len() as f64; self.p.len()]
        }
    }

    pub fn top_class(&self) -> Option<usize> {
        top_response_class(&self.p)
    }
}

/// Argmax of the preference vector, ties toward the lowest class. `None`
/// is the no-preference sentinel, returned when no entry is positive.
pub fn top_response_class(p: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (c, &v) in p.iter().enumerate() {
        if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
            best = Some((c, v));
        }
    }
    best.map(|(c, _)| c)
}

/// Layers whose activations represent each conv block: the ReLU following
/// each conv layer, or the conv itself when no ReLU follows before the next
/// parametric layer.
pub fn probe_layers(arch: &ArchitectureSpec) -> Vec<usize> {
    let layers = &arch.layers;
    let mut out = Vec::new();
    for (i, l) in layers.iter().enumerate() {
        if !l.is_conv() {
            continue;
        }
        let mut pick = i;
        for (j, next) in layers.iter().enumerate().skip(i + 1) {
            if next.is_conv() || next.is_linear() {
                break;
            }
            if matches!(next, LayerDescriptor::Relu) {
                pick = j;
                break;
            }
        }
        out.push(pick);
    }
    out
}

/// Computes preference vectors for several layers at once.
///
/// `p_c = (1/B) Σ_b mean_{x∈b} A(x)·∂Z_c/∂A(x)`, where `A` is the spatial
/// mean of the channel and `Z_c` the pre-softmax logit. The derivative with
/// respect to the spatial mean is the sum of the per-position gradients.
pub fn preferences(
    net: &Network,
    params: &ModelParams,
    probe: &ProbeSet,
    layers: &[usize],
) -> Result<Vec<Vec<PreferenceVector>>> {
    let classes = net.classes();
    if probe.classes() != classes {
        return Err(Error::Config(format!(
            "probe set covers {} classes, network has {classes}",
            probe.classes()
        )));
    }
    let depth = net.arch().layers.len();
    if let Some(&bad) = layers.iter().find(|&&l| l >= depth) {
        return Err(Error::Config(format!("layer {bad} not found; network has layers 0..{depth}")));
    }
    // per class: per requested layer: (channel, group) -> preference
    let per_class: Vec<Vec<BTreeMap<usize, (Option<usize>, f64)>>> = (0..classes)
        .into_par_iter()
        .map(|c| class_column(net, params, probe.batches(c), layers, c))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(layers.len());
    for (li, &layer) in layers.iter().enumerate() {
        let channels = &per_class[0][li];
        let prefs = channels
            .iter()
            .map(|(&channel, &(group, _))| PreferenceVector {
                layer,
                channel,
                group,
                p: per_class.iter().map(|col| col[li][&channel].1).collect(),
            })
            .collect();
        out.push(prefs);
    }
    Ok(out)
}

fn class_column(
    net: &Network,
    params: &ModelParams,
    batches: &[Tensor],
    layers: &[usize],
    class: usize,
) -> Result<Vec<BTreeMap<usize, (Option<usize>, f64)>>> {
    let mut acc: Vec<BTreeMap<usize, (Option<usize>, f64)>> = vec![BTreeMap::new(); layers.len()];
    let used: Vec<&Tensor> = batches.iter().filter(|b| b.shape()[0] > 0).collect();
    for x in &used {
        let mut tape = Tape::new();
        let pass = net.forward(&mut tape, params, x, Mode::Eval)?;
        let column = tape.slice_dim1(pass.logits, class, 1)?;
        let z = tape.sum(column)?;
        let grads = tape.backward(z)?;
        for (li, &layer) in layers.iter().enumerate() {
            let parts: Vec<(Option<usize>, crate::tape::Var)> = match &pass.layer_outputs[layer] {
                LayerOutput::Single(v) => vec![(None, *v)],
                LayerOutput::Groups(g) => g.iter().map(|&(k, v)| (Some(k), v)).collect(),
            };
            for (group, var) in parts {
                let act = tape.value(var);
                let grad = grads.get_or_zeros(var);
                let s = act.shape();
                let (n, ch) = (s[0], s[1]);
                let plane: usize = s[2..].iter().product();
                let offset = group.map_or(0, |k| k * ch);
                for j in 0..ch {
                    let mut total = 0.0f64;
                    for i in 0..n {
                        let base = (i * ch + j) * plane;
                        let a: f64 = act.data()[base..base + plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
                        let g: f64 = grad.data()[base..base + plane].iter().map(|&v| v as f64).sum();
                        total += a * g;
                    }
                    let entry = acc[li].entry(offset + j).or_insert((group, 0.0));
                    entry.1 += total / n as f64;
                }
            }
        }
    }
    let b = used.len() as f64;
    for layer in &mut acc {
        for v in layer.values_mut() {
            v.1 /= b;
        }
    }
    Ok(acc)
}

/// Preference vectors of every channel of one layer.
pub fn class_preference(
    net: &Network,
    params: &ModelParams,
    probe: &ProbeSet,
    layer: usize,
) -> Result<Vec<PreferenceVector>> {
    Ok(preferences(net, params, probe, &[layer])?.remove(0))
}

/// Spread of normalized preferences over one layer's channels:
/// `(1/L) Σ_i ‖P̂_i − mean(P̂)‖₂`.
///
/// Accumulation runs in 64 bits over the normalized vectors sorted into a
/// canonical order, so the result is bitwise independent of channel order.
pub fn total_variance(prefs: &[PreferenceVector]) -> f64 {
    if prefs.is_empty() {
        return 0.0;
    }
    let mut rows: Vec<Vec<f64>> = prefs.iter().map(PreferenceVector::normalized).collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    let l = rows.len() as f64;
    let dims = rows[0].len();
    let mean: Vec<f64> = (0..dims)
        .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / l)
        .collect();
    rows.iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>().sqrt())
        .sum::<f64>()
        / l
}

/// Per-layer total variance over the probe layers of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceProfile {
    pub layers: Vec<usize>,
    pub tv: Vec<f64>,
    pub neurons: Vec<usize>,
}

pub fn total_variance_profile(net: &Network, params: &ModelParams, probe: &ProbeSet) -> Result<DivergenceProfile> {
    let layers = probe_layers(net.arch());
    let prefs = preferences(net, params, probe, &layers)?;
    Ok(DivergenceProfile {
        tv: prefs.iter().map(|p| total_variance(p)).collect(),
        neurons: prefs.iter().map(Vec::len).collect(),
        layers,
    })
}

/// Position in `tv` of the last layer to share: the one before the first
/// layer whose TV reaches `alpha · max(TV)`, clamped to the first layer.
pub fn select_shared_depth(tv: &[f64], alpha: f64) -> Result<usize> {
    let max = tv.iter().copied().fold(0.0f64, f64::max);
    if tv.is_empty() || max <= 0.0 {
        return Err(Error::Config(
            "total variance profile is empty or flat zero; set shared_depth manually".into(),
        ));
    }
    let first = tv
        .iter()
        .position(|&v| v >= alpha * max)
        .expect("the maximum always reaches alpha·max for alpha ≤ 1");
    Ok(first.saturating_sub(1))
}

impl DivergenceProfile {
    /// Layer index of the block boundary closing probe layer `position`,
    /// usable as a shared depth.
    pub fn boundary_layer(&self, arch: &ArchitectureSpec, position: usize) -> Result<usize> {
        let probe = *self
            .layers
            .get(position)
            .ok_or_else(|| Error::Config(format!("profile has no layer at position {position}")))?;
        arch.block_boundaries()
            .into_iter()
            .find(|&b| b >= probe && b + 1 < arch.layers.len())
            .ok_or_else(|| Error::Config(format!("no block boundary after layer {probe}")))
    }
}

/// Channels counted by an alignment score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AlignmentScore {
    pub aligned: usize,
    pub counted: usize,
    /// Channels without any positive preference (excluded from the score).
    pub no_preference: usize,
}

impl AlignmentScore {
    /// Fraction of counted channels whose top class lies in their group;
    /// 1.0 when nothing was counted.
    pub fn score(&self) -> f64 {
        if self.counted == 0 {
            1.0
        } else {
            self.aligned as f64 / self.counted as f64
        }
    }
}

/// Alignment of grouped-layer preference vectors with the class mapping.
pub fn alignment_of(prefs: &[PreferenceVector], mapping: &GroupMapping) -> AlignmentScore {
    let mut s = AlignmentScore::default();
    for p in prefs {
        let Some(k) = p.group else { continue };
        match p.top_class() {
            None => s.no_preference += 1,
            Some(c) => {
                s.counted += 1;
                if mapping.group_of(c) == k {
                    s.aligned += 1;
                }
            }
        }
    }
    s
}

/// Alignment over every grouped probe layer of a regulated network.
pub fn group_alignment_score(net: &Network, params: &ModelParams, probe: &ProbeSet) -> Result<AlignmentScore> {
    let mapping = net
        .mapping()
        .ok_or_else(|| Error::Config("alignment needs a regulated network".into()))?;
    let layers: Vec<usize> = probe_layers(net.arch())
        .into_iter()
        .filter(|&l| net.is_grouped_layer(l))
        .collect();
    let prefs = preferences(net, params, probe, &layers)?;
    Ok(alignment_of(&prefs.concat(), mapping))
}

/// Mean over channel coordinates `(layer, channel)` of the fraction of node
/// pairs whose top-response classes agree. Coordinates present on fewer than
/// two nodes, and no-preference channels, are skipped.
pub fn cross_node_agreement(per_node: &[Vec<PreferenceVector>]) -> Option<f64> {
    let mut tops: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for prefs in per_node {
        for p in prefs {
            if let Some(c) = p.top_class() {
                tops.entry((p.layer, p.channel)).or_default().push(c);
            }
        }
    }
    let mut total = 0.0;
    let mut coords = 0usize;
    for classes in tops.values().filter(|v| v.len() >= 2) {
        let (mut agree, mut pairs) = (0usize, 0usize);
        for i in 0..classes.len() {
            for j in i + 1..classes.len() {
                pairs += 1;
                agree += usize::from(classes[i] == classes[j]);
            }
        }
        total += agree as f64 / pairs as f64;
        coords += 1;
    }
    (coords > 0).then(|| total / coords as f64)
}
