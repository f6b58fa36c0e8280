//! Executable networks: parameter layout, initialization, forward pass and
//! trimming of structure groups.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::layers::{ArchitectureSpec, LayerDescriptor};
use crate::params::{param_name, ModelParams, Partition};
use crate::psinet::{GroupMapping, RegulatedSpec, TrimMask};
use crate::rng::stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Logit emitted for classes whose structure group was trimmed away.
pub const TRIMMED_LOGIT: f32 = -1e9;

/// Batch-norm running statistics momentum.
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
struct Grouping {
    mapping: GroupMapping,
    kept: Vec<usize>,
}

/// A plain or regulated network, possibly with trimmed groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: ArchitectureSpec,
    grouping: Option<Grouping>,
}

/// Output of one layer: one tensor, or one tensor per kept group.
#[derive(Clone, Debug)]
pub enum LayerOutput {
    Single(Var),
    Groups(Vec<(usize, Var)>),
}

pub struct ForwardPass {
    pub logits: Var,
    pub layer_outputs: Vec<LayerOutput>,
    /// Tape leaves of every parameter, by name.
    pub param_vars: BTreeMap<String, Var>,
    /// New running statistics computed in training mode.
    pub running_updates: Vec<(String, Tensor)>,
}

/// Name and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub layer: usize,
    pub group: Option<usize>,
}

impl Network {
    /// Unregulated network; every layer belongs to the shared block.
    pub fn plain(arch: ArchitectureSpec) -> Result<Self> {
        arch.validate()?;
        // grouped wiring exists only as per-group tensors of a regulated network
        if let Some(i) = arch.layers.iter().position(|l| {
            matches!(l, LayerDescriptor::GroupedConv { groups, .. } | LayerDescriptor::GroupedLinear { groups, .. } if *groups > 1)
        }) {
            return Err(Error::Config(format!(
                "layer {i} ({}) is grouped; build a regulated network instead",
                arch.layers[i].tag()
            )));
        }
        Ok(Self { arch, grouping: None })
    }

    /// Full (untrimmed) regulated network.
    pub fn regulated(spec: RegulatedSpec) -> Result<Self> {
        spec.arch.validate()?;
        let kept = (0..spec.mapping.group_count()).collect();
        Ok(Self {
            arch: spec.arch,
            grouping: Some(Grouping {
                mapping: spec.mapping,
                kept,
            }),
        })
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn mapping(&self) -> Option<&GroupMapping> {
        self.grouping.as_ref().map(|g| &g.mapping)
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    /// Global group identities present in this network.
    pub fn kept_groups(&self) -> &[usize] {
        self.grouping.as_ref().map(|g| g.kept.as_slice()).unwrap_or(&[])
    }

    pub fn trim_mask(&self) -> Option<TrimMask> {
        self.grouping.as_ref().map(|g| TrimMask {
            trimmed: (0..g.mapping.group_count()).map(|k| !g.kept.contains(&k)).collect(),
        })
    }

    /// Index of the last shared layer.
    pub fn shared_depth(&self) -> usize {
        match &self.grouping {
            Some(g) => g.mapping.shared_depth(),
            None => self.arch.layers.len() - 1,
        }
    }

    pub fn is_grouped_layer(&self, layer: usize) -> bool {
        self.grouping.is_some() && layer > self.shared_depth()
    }

    /// Classes that still produce real logits.
    pub fn live_classes(&self) -> BTreeSet<usize> {
        match &self.grouping {
            None => (0..self.arch.classes).collect(),
            Some(g) => g
                .kept
                .iter()
                .flat_map(|&k| g.mapping.classes_of(k).iter().copied())
                .collect(),
        }
    }

    fn group_count(&self) -> usize {
        self.grouping.as_ref().map_or(1, |g| g.mapping.group_count())
    }

    /// Parameter tensors of one layer for one group (or the whole layer
    /// when `group` is `None`), with fan-in for initialization.
    fn layer_slots(&self, layer: usize, group: Option<usize>) -> Vec<(String, Vec<usize>, usize)> {
        let g = if group.is_some() { self.group_count() } else { 1 };
        let part = group.map_or(Partition::Shared, Partition::Group);
        let name = |field: &str| param_name(part, layer, field);
        let last = layer + 1 == self.arch.layers.len();
        match self.arch.layers[layer] {
            LayerDescriptor::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            }
            | LayerDescriptor::GroupedConv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let (ci, co) = (in_channels / g, out_channels / g);
                vec![
                    (name("weight"), vec![co, ci, kernel, kernel], ci * kernel * kernel),
                    (name("bias"), vec![co], 0),
                ]
            }
            LayerDescriptor::Linear {
                in_features,
                out_features,
            }
            | LayerDescriptor::GroupedLinear {
                in_features,
                out_features,
                ..
            } => {
                let fi = in_features / g;
                let fo = match (group, last, &self.grouping) {
                    (Some(k), true, Some(gr)) => gr.mapping.classes_of(k).len(),
                    _ => out_features / g,
                };
                vec![(name("weight"), vec![fo, fi], fi), (name("bias"), vec![fo], 0)]
            }
            LayerDescriptor::BatchNorm { channels } => {
                let c = channels / g;
                vec![
                    (name("gamma"), vec![c], 0),
                    (name("beta"), vec![c], 0),
                    (name("running_mean"), vec![c], 0),
                    (name("running_var"), vec![c], 0),
                    (name("running_count"), vec![1], 0),
                ]
            }
            LayerDescriptor::GroupNorm { channels, .. } => {
                let c = channels / g;
                vec![(name("gamma"), vec![c], 0), (name("beta"), vec![c], 0)]
            }
            _ => vec![],
        }
    }

    /// Every parameter this network holds, in layer then group order.
    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let mut out = Vec::new();
        for layer in 0..self.arch.layers.len() {
            let groups: Vec<Option<usize>> = if self.is_grouped_layer(layer) {
                self.kept_groups().iter().map(|&k| Some(k)).collect()
            } else {
                vec![None]
            };
            for group in groups {
                for (name, shape, _) in self.layer_slots(layer, group) {
                    out.push(ParamSlot {
                        name,
                        shape,
                        layer,
                        group,
                    });
                }
            }
        }
        out
    }

    /// Fingerprint of the parameter layout this network expects.
    pub fn fingerprint(&self) -> u64 {
        self.param_slots()
            .into_iter()
            .map(|s| (s.name, Tensor::zeros(&s.shape)))
            .collect::<ModelParams>()
            .fingerprint()
    }

    /// He-uniform weights, zero biases, unit norm scales. Each layer draws
    /// from its own stream and generates all groups in order, so a trimmed
    /// network holds exactly the untrimmed values of its kept groups and a
    /// single-group network matches its plain counterpart.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut params = ModelParams::new();
        for layer in 0..self.arch.layers.len() {
            let mut rng = stream(seed, &[0x1a7e, layer as u64]);
            let groups: Vec<Option<usize>> = if self.is_grouped_layer(layer) {
                (0..self.group_count()).map(Some).collect()
            } else {
                vec![None]
            };
            for group in groups {
                let keep = group.is_none_or(|k| self.kept_groups().contains(&k));
                for (name, shape, fan_in) in self.layer_slots(layer, group) {
                    let numel: usize = shape.iter().product();
                    let field = name.rsplit('.').next().unwrap_or("");
                    let data: Vec<f32> = match field {
                        "weight" => {
                            let bound = (6.0 / fan_in.max(1) as f32).sqrt();
                            (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
                        }
                        "gamma" | "running_var" => vec![1.0; numel],
                        _ => vec![0.0; numel],
                    };
                    if keep {
                        params
                            .insert(name, Tensor::new(shape, data).expect("slot shape"))
                            .expect("valid name");
                    }
                }
            }
        }
        params
    }

    /// Checks that `params` holds exactly this network's layout.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let slots = self.param_slots();
        for s in &slots {
            let t = params.require(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Alignment(format!(
                    "`{}` has shape {:?}, network expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        if params.len() != slots.len() {
            let expected: BTreeSet<&str> = slots.iter().map(|s| s.name.as_str()).collect();
            let extra: Vec<&String> = params.names().filter(|n| !expected.contains(n.as_str())).collect();
            return Err(Error::Alignment(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }

    /// Records a forward pass of `input: [N, C, H, W]` on `tape`.
    pub fn forward(&self, tape: &mut Tape, params: &ModelParams, input: &Tensor, mode: Mode) -> Result<ForwardPass> {
        self.check_params(params)?;
        let expected: Vec<usize> = self.arch.input_shape.clone();
        if input.rank() != 4 || input.shape()[1..] != expected[..] {
            return Err(shape_err!(
                "network expects [N, {:?}] input, got {:?}",
                expected,
                input.shape()
            ));
        }
        let mut param_vars = BTreeMap::new();
        for (name, t) in params.iter() {
            let trainable = !crate::params::is_buffer(name);
            param_vars.insert(name.clone(), tape.leaf(t.clone(), trainable)?);
        }
        let x = tape.constant(input.clone())?;
        let mut state = LayerOutput::Single(x);
        let mut outputs = Vec::with_capacity(self.arch.layers.len());
        let mut running_updates = Vec::new();
        let last = self.arch.layers.len() - 1;
        for (i, layer) in self.arch.layers.iter().enumerate() {
            if self.is_grouped_layer(i) {
                let parts = match state {
                    LayerOutput::Single(v) => self.split_groups(tape, v)?,
                    LayerOutput::Groups(p) => p,
                };
                let mut next = Vec::with_capacity(parts.len());
                for (k, v) in parts {
                    let y = self.apply(
                        tape,
                        params,
                        &param_vars,
                        layer,
                        Partition::Group(k),
                        i,
                        v,
                        mode,
                        &mut running_updates,
                    )?;
                    next.push((k, y));
                }
                if i == last {
                    let grouping = self.grouping.as_ref().expect("grouped layer");
                    let cols: Vec<(Var, Vec<usize>)> = next
                        .iter()
                        .map(|&(k, v)| (v, grouping.mapping.classes_of(k).to_vec()))
                        .collect();
                    let logits = tape.assemble_columns(&cols, self.arch.classes, TRIMMED_LOGIT)?;
                    outputs.push(LayerOutput::Groups(next));
                    state = LayerOutput::Single(logits);
                } else {
                    outputs.push(LayerOutput::Groups(next.clone()));
                    state = LayerOutput::Groups(next);
                }
            } else {
                let v = match state {
                    LayerOutput::Single(v) => v,
                    LayerOutput::Groups(_) => unreachable!("shared layer above grouped layers"),
                };
                let y = self.apply(
                    tape,
                    params,
                    &param_vars,
                    layer,
                    Partition::Shared,
                    i,
                    v,
                    mode,
                    &mut running_updates,
                )?;
                outputs.push(LayerOutput::Single(y));
                state = LayerOutput::Single(y);
            }
        }
        let logits = match state {
            LayerOutput::Single(v) => v,
            LayerOutput::Groups(_) => unreachable!("final layer assembles logits"),
        };
        Ok(ForwardPass {
            logits,
            layer_outputs: outputs,
            param_vars,
            running_updates,
        })
    }

    fn split_groups(&self, tape: &mut Tape, v: Var) -> Result<Vec<(usize, Var)>> {
        let width = tape.shape(v)[1];
        let g = self.group_count();
        let block = width / g;
        self.kept_groups()
            .iter()
            .map(|&k| Ok((k, tape.slice_dim1(v, k * block, block)?)))
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn apply(
        &self,
        tape: &mut Tape,
        params: &ModelParams,
        vars: &BTreeMap<String, Var>,
        layer: &LayerDescriptor,
        part: Partition,
        index: usize,
        x: Var,
        mode: Mode,
        updates: &mut Vec<(String, Tensor)>,
    ) -> Result<Var> {
        let var = |field: &str| -> Result<Var> {
            let name = param_name(part, index, field);
            vars.get(&name)
                .copied()
                .ok_or_else(|| Error::Alignment(format!("missing parameter `{name}`")))
        };
        match *layer {
            LayerDescriptor::Conv { stride, pad, .. } | LayerDescriptor::GroupedConv { stride, pad, .. } => {
                tape.conv2d(x, var("weight")?, Some(var("bias")?), stride, pad, 1)
            }
            LayerDescriptor::Linear { .. } | LayerDescriptor::GroupedLinear { .. } => {
                tape.linear(x, var("weight")?, Some(var("bias")?))
            }
            LayerDescriptor::BatchNorm { .. } => {
                let (g, b) = (var("gamma")?, var("beta")?);
                let rm_name = param_name(part, index, "running_mean");
                let rv_name = param_name(part, index, "running_var");
                let rc_name = param_name(part, index, "running_count");
                match mode {
                    Mode::Train => {
                        let (y, stats) = tape.batch_norm_train(x, g, b)?;
                        let blend = |old: &Tensor, new: &[f32]| {
                            let data = old
                                .data()
                                .iter()
                                .zip(new)
                                .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                                .collect();
                            Tensor::new(old.shape().to_vec(), data).expect("same shape")
                        };
                        updates.push((rm_name.clone(), blend(params.require(&rm_name)?, &stats.mean)));
                        updates.push((rv_name.clone(), blend(params.require(&rv_name)?, &stats.var)));
                        let count = params.require(&rc_name)?.data()[0] + 1.0;
                        updates.push((rc_name, Tensor::from_vec(vec![count])));
                        Ok(y)
                    }
                    Mode::Eval => {
                        if params.require(&rc_name)?.data()[0] <= 0.0 {
                            return Err(Error::State(format!(
                                "batch norm layer {index} ({part}) evaluated before any training step"
                            )));
                        }
                        let rm = params.require(&rm_name)?.data().to_vec();
                        let rv = params.require(&rv_name)?.data().to_vec();
                        tape.batch_norm_eval(x, g, b, &rm, &rv)
                    }
                }
            }
            LayerDescriptor::GroupNorm { groups, .. } => {
                // a grouped layer's tensor already holds exactly one group
                let g = if part == Partition::Shared { groups } else { 1 };
                tape.group_norm(x, var("gamma")?, var("beta")?, g)
            }
            LayerDescriptor::Relu => tape.relu(x),
            LayerDescriptor::MaxPool { kernel, stride } => tape.maxpool2d(x, kernel, stride.unwrap_or(kernel)),
            LayerDescriptor::Flatten => tape.flatten(x),
        }
    }

    /// Removes every structure group whose classes are all absent from
    /// `local_classes`; shared layers are untouched and kept groups retain
    /// their global identity.
    pub fn trim(&self, params: &ModelParams, local_classes: &BTreeSet<usize>) -> Result<(Network, ModelParams, TrimMask)> {
        let grouping = self
            .grouping
            .as_ref()
            .ok_or_else(|| Error::Config("only regulated networks can be trimmed".into()))?;
        self.check_params(params)?;
        let full = grouping.mapping.trim_mask(local_classes);
        let mask = TrimMask {
            trimmed: full
                .trimmed
                .iter()
                .enumerate()
                .map(|(k, &t)| t || !grouping.kept.contains(&k))
                .collect(),
        };
        let kept = mask.kept();
        if kept.is_empty() {
            return Err(Error::Config(format!(
                "every structure group is trimmed for local classes {local_classes:?}; the node has no learnable task"
            )));
        }
        let net = Network {
            arch: self.arch.clone(),
            grouping: Some(Grouping {
                mapping: grouping.mapping.clone(),
                kept,
            }),
        };
        let trimmed: ModelParams = params
            .iter()
            .filter(|(name, _)| match Partition::of_name(name) {
                Ok(Partition::Group(k)) => mask.keeps(k),
                _ => true,
            })
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        Ok((net, trimmed, mask))
    }

    /// The same architecture restricted to the groups `mask` keeps.
    pub fn with_mask(&self, mask: &TrimMask) -> Result<Network> {
        let grouping = self
            .grouping
            .as_ref()
            .ok_or_else(|| Error::Config("only regulated networks carry trim masks".into()))?;
        if mask.trimmed.len() != grouping.mapping.group_count() {
            return Err(Error::Config(format!(
                "mask covers {} groups, mapping has {}",
                mask.trimmed.len(),
                grouping.mapping.group_count()
            )));
        }
        Ok(Network {
            arch: self.arch.clone(),
            grouping: Some(Grouping {
                mapping: grouping.mapping.clone(),
                kept: mask.kept(),
            }),
        })
    }

    /// Evaluation-mode logits for a batch, without gradients.
    pub fn predict(&self, params: &ModelParams, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, params, input, Mode::Eval)?;
        Ok(tape.value(pass.logits).clone())
    }
}

impl Network {
    /// Fills batch-norm running statistics by training-mode passes over
    /// `batches` without touching any trainable parameter.
    pub fn calibrate(&self, params: &mut ModelParams, batches: &[Tensor]) -> Result<()> {
        for x in batches {
            let mut tape = Tape::new();
            let pass = self.forward(&mut tape, params, x, Mode::Train)?;
            apply_running_updates(params, pass.running_updates)?;
        }
        Ok(())
    }
}

/// Writes running-statistic updates from a training pass into `params`.
pub fn apply_running_updates(params: &mut ModelParams, updates: Vec<(String, Tensor)>) -> Result<()> {
    for (name, t) in updates {
        let slot = params
            .get_mut(&name)
            .ok_or_else(|| Error::Alignment(format!("missing running statistic `{name}`")))?;
        *slot = t;
    }
    Ok(())
}
