//! Layer descriptors, architecture specs and layer-level operations.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One layer of an architecture, before or after regulation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDescriptor {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    GroupedConv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        groups: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    GroupedLinear {
        in_features: usize,
        out_features: usize,
        groups: usize,
    },
    BatchNorm {
        channels: usize,
    },
    GroupNorm {
        channels: usize,
        groups: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    Flatten,
}

fn one() -> usize {
    1
}

impl LayerDescriptor {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, pad: usize) -> Self {
        LayerDescriptor::Conv {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            pad,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerDescriptor::Linear {
            in_features,
            out_features,
        }
    }

    pub fn max_pool(kernel: usize) -> Self {
        LayerDescriptor::MaxPool {
            kernel,
            stride: None,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LayerDescriptor::Conv { .. } => "conv",
            LayerDescriptor::GroupedConv { .. } => "grouped_conv",
            LayerDescriptor::Linear { .. } => "linear",
            LayerDescriptor::GroupedLinear { .. } => "grouped_linear",
            LayerDescriptor::BatchNorm { .. } => "batch_norm",
            LayerDescriptor::GroupNorm { .. } => "group_norm",
            LayerDescriptor::Relu => "relu",
            LayerDescriptor::MaxPool { .. } => "maxpool",
            LayerDescriptor::Flatten => "flatten",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerDescriptor::Conv { .. } | LayerDescriptor::GroupedConv { .. })
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, LayerDescriptor::Linear { .. } | LayerDescriptor::GroupedLinear { .. })
    }

    pub fn is_norm(&self) -> bool {
        matches!(self, LayerDescriptor::BatchNorm { .. } | LayerDescriptor::GroupNorm { .. })
    }

    /// Group count of grouped layers, 1 otherwise.
    pub fn groups(&self) -> usize {
        match self {
            LayerDescriptor::GroupedConv { groups, .. }
            | LayerDescriptor::GroupedLinear { groups, .. }
            | LayerDescriptor::GroupNorm { groups, .. } => *groups,
            _ => 1,
        }
    }

    pub fn has_params(&self) -> bool {
        self.is_conv() || self.is_linear() || self.is_norm()
    }

    /// Checks the layer's own constraints (divisibility, non-zero sizes).
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            LayerDescriptor::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 => {
                bad(format!("conv with zero-sized dimension: {self:?}"))
            }
            LayerDescriptor::GroupedConv {
                in_channels,
                out_channels,
                groups,
                kernel,
                stride,
                ..
            } => {
                if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
                    bad(format!(
                        "grouped_conv channels in={in_channels} out={out_channels} not divisible by g={groups}"
                    ))
                } else if kernel == 0 || stride == 0 || in_channels == 0 {
                    bad(format!("grouped_conv with zero-sized dimension: {self:?}"))
                } else {
                    Ok(())
                }
            }
            LayerDescriptor::GroupedLinear {
                in_features,
                out_features,
                groups,
            } => {
                if groups == 0 || in_features % groups != 0 || out_features < groups {
                    bad(format!(
                        "grouped_linear in={in_features} out={out_features} incompatible with g={groups}"
                    ))
                } else {
                    Ok(())
                }
            }
            LayerDescriptor::GroupNorm { channels, groups } if groups == 0 || channels % groups != 0 => {
                bad(format!("group_norm: {channels} channels not divisible by g={groups}"))
            }
            LayerDescriptor::MaxPool { kernel, stride } if kernel == 0 || stride == Some(0) => {
                bad(format!("maxpool with zero window or stride: {self:?}"))
            }
            _ => Ok(()),
        }
    }

    /// Output shape (without the batch dimension) for input shape `input`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            match input {
                [c, h, w] => Ok((*c, *h, *w)),
                _ => Err(shape_err!("{what} expects [C, H, W] input, got {:?}", input)),
            }
        };
        match *self {
            LayerDescriptor::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            }
            | LayerDescriptor::GroupedConv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                ..
            } => {
                let (c, h, w) = spatial(self.tag())?;
                if c != in_channels {
                    return Err(shape_err!("{} expects {in_channels} channels, got {c}", self.tag()));
                }
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(shape_err!("{} kernel {kernel} does not fit {h}x{w}", self.tag()));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ])
            }
            LayerDescriptor::Linear {
                in_features,
                out_features,
            }
            | LayerDescriptor::GroupedLinear {
                in_features,
                out_features,
                ..
            } => match input {
                [f] if *f == in_features => Ok(vec![out_features]),
                _ => Err(shape_err!("{} expects [{in_features}] input, got {:?}", self.tag(), input)),
            },
            LayerDescriptor::BatchNorm { channels } | LayerDescriptor::GroupNorm { channels, .. } => {
                if input.first() != Some(&channels) {
                    return Err(shape_err!("{} expects {channels} channels, got {:?}", self.tag(), input));
                }
                Ok(input.to_vec())
            }
            LayerDescriptor::Relu => Ok(input.to_vec()),
            LayerDescriptor::MaxPool { kernel, stride } => {
                let (c, h, w) = spatial("maxpool")?;
                let s = stride.unwrap_or(kernel);
                if h < kernel || w < kernel {
                    return Err(shape_err!("maxpool window {kernel} does not fit {h}x{w}"));
                }
                Ok(vec![c, (h - kernel) / s + 1, (w - kernel) / s + 1])
            }
            LayerDescriptor::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// An ordered layer list for a base or regulated network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    /// `[C, H, W]` of one input sample.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerDescriptor>,
}

impl ArchitectureSpec {
    /// Runs shape propagation, returning each layer's output shape.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::Config(format!("layer {i} ({}): {e}", layer.tag())))?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Type-checks the layer sequence and the single classifier head.
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("{} classes; need at least 2", self.classes)));
        }
        let shapes = self.layer_shapes()?;
        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::Config("architecture has no layers".into()))?;
        if !last.is_linear() || shapes.last() != Some(&vec![self.classes]) {
            return Err(Error::Config(format!(
                "architecture `{}` must end in one classifier head producing {} logits",
                self.name, self.classes
            )));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if let (LayerDescriptor::GroupedConv { groups, .. }, LayerDescriptor::GroupNorm { groups: gn, .. }) =
                (&pair[0], &pair[1])
            {
                if groups != gn {
                    return Err(Error::Config(format!(
                        "group_norm at layer {} has g={gn} but preceding grouped_conv has g={groups}",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Indices `i` after which a new conv or classifier block starts; these
    /// are the admissible shared-depth boundaries.
    pub fn block_boundaries(&self) -> Vec<usize> {
        (0..self.layers.len().saturating_sub(1))
            .filter(|&i| {
                matches!(
                    self.layers[i + 1],
                    LayerDescriptor::Conv { .. }
                        | LayerDescriptor::GroupedConv { .. }
                        | LayerDescriptor::Flatten
                        | LayerDescriptor::Linear { .. }
                        | LayerDescriptor::GroupedLinear { .. }
                ) && !self.layers[i].is_conv()
            })
            .collect()
    }

    /// Indices of conv layers in order.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_conv())
            .map(|(i, _)| i)
            .collect()
    }

    /// Small VGG-style network for desk-scale runs: three conv blocks and a
    /// linear head.
    pub fn tiny_vgg(input_shape: [usize; 3], classes: usize, widths: [usize; 3]) -> Self {
        let [c, h, w] = input_shape;
        let [w0, w1, w2] = widths;
        use LayerDescriptor as L;
        let layers = vec![
            L::conv(c, w0, 3, 1),
            L::BatchNorm { channels: w0 },
            L::Relu,
            L::max_pool(2),
            L::conv(w0, w1, 3, 1),
            L::BatchNorm { channels: w1 },
            L::Relu,
            L::conv(w1, w2, 3, 1),
            L::BatchNorm { channels: w2 },
            L::Relu,
            L::max_pool(2),
            L::Flatten,
            L::linear(w2 * (h / 4) * (w / 4), classes),
        ];
        Self {
            name: "tiny_vgg".into(),
            input_shape: input_shape.to_vec(),
            classes,
            layers,
        }
    }

    /// VGG9 with channel widths scaled by `width / 32` relative to the
    /// 32-64-128-128-256-256 convolutional trunk and two 512-unit FC layers.
    pub fn vgg9(input_shape: [usize; 3], classes: usize, width: usize) -> Self {
        let scale = |c: usize| (c * width / 32).max(1);
        let convs: &[&[usize]] = &[&[32, 64], &[128, 128], &[256, 256]];
        Self::vgg_family("vgg9", input_shape, classes, convs, &[scale(512), scale(512)], &scale)
    }

    /// VGG16 trunk (13 conv layers, five pooling stages) with width scaling.
    pub fn vgg16(input_shape: [usize; 3], classes: usize, width: usize) -> Self {
        let scale = |c: usize| (c * width / 64).max(1);
        let convs: &[&[usize]] = &[
            &[64, 64],
            &[128, 128],
            &[256, 256, 256],
            &[512, 512, 512],
            &[512, 512, 512],
        ];
        Self::vgg_family("vgg16", input_shape, classes, convs, &[scale(512), scale(512)], &scale)
    }

    fn vgg_family(
        name: &str,
        input_shape: [usize; 3],
        classes: usize,
        stages: &[&[usize]],
        fc: &[usize],
        scale: &dyn Fn(usize) -> usize,
    ) -> Self {
        use LayerDescriptor as L;
        let [mut c, mut h, mut w] = input_shape;
        let mut layers = Vec::new();
        for stage in stages {
            for &out in *stage {
                let out = scale(out);
                layers.push(L::conv(c, out, 3, 1));
                layers.push(L::BatchNorm { channels: out });
                layers.push(L::Relu);
                c = out;
            }
            if h >= 2 && w >= 2 {
                layers.push(L::max_pool(2));
                h /= 2;
                w /= 2;
            }
        }
        layers.push(L::Flatten);
        let mut f = c * h * w;
        for &units in fc {
            layers.push(L::linear(f, units));
            layers.push(L::Relu);
            f = units;
        }
        layers.push(L::linear(f, classes));
        Self {
            name: name.into(),
            input_shape: input_shape.to_vec(),
            classes,
            layers,
        }
    }
}

/// Parameter tensors of one full layer (all groups together).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerParams {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
    pub running_mean: Option<Tensor>,
    pub running_var: Option<Tensor>,
}

fn need<'a>(t: &'a Option<Tensor>, what: &str, layer: &LayerDescriptor) -> Result<&'a Tensor> {
    t.as_ref()
        .ok_or_else(|| Error::Config(format!("{} layer is missing its {what}", layer.tag())))
}

/// Grouped convolution: output block `k` reads only input block `k`.
pub fn grouped_conv_forward(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Var> {
    let cin = tape.shape(x).get(1).copied().unwrap_or(0);
    let cout = tape.shape(weight).first().copied().unwrap_or(0);
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::Config(format!(
            "grouped conv: channels in={cin} out={cout} not divisible by g={groups}"
        )));
    }
    tape.conv2d(x, weight, bias, stride, pad, groups)
}

/// Class-mapped grouped linear head. `class_groups[k]` lists the classes
/// whose logits read feature block `k`; `weight` rows are in class order and
/// have `F / G` columns. Logits of class `c` never connect to other blocks.
pub fn grouped_linear_forward(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    class_groups: &[Vec<usize>],
    classes: usize,
) -> Result<Var> {
    let g = class_groups.len();
    let f = tape.shape(x).get(1).copied().unwrap_or(0);
    if g == 0 || f % g != 0 {
        return Err(Error::Config(format!("grouped linear: {f} features not divisible into {g} blocks")));
    }
    let mut covered = vec![false; classes];
    for &c in class_groups.iter().flatten() {
        if c >= classes || covered[c] {
            return Err(Error::Config(format!("grouped linear: class {c} mapped twice or out of range")));
        }
        covered[c] = true;
    }
    if let Some(c) = covered.iter().position(|&v| !v) {
        return Err(Error::Config(format!("grouped linear: class {c} has no mapped group")));
    }
    let block = f / g;
    if tape.shape(weight) != [classes, block] {
        return Err(shape_err!(
            "grouped linear weight {:?}, expected [{classes}, {block}]",
            tape.shape(weight)
        ));
    }
    let mut parts = Vec::with_capacity(g);
    for (k, cls) in class_groups.iter().enumerate() {
        if cls.is_empty() {
            continue;
        }
        let xs = tape.slice_dim1(x, k * block, block)?;
        let wk = tape.gather_rows(weight, cls)?;
        let bk = bias.map(|b| tape.gather_rows(b, cls)).transpose()?;
        let y = tape.linear(xs, wk, bk)?;
        parts.push((y, cls.clone()));
    }
    tape.assemble_columns(&parts, classes, 0.0)
}

/// Applies one full layer (all groups) to `x`. Batch norm uses batch
/// statistics when `train` is set and stored statistics otherwise.
pub fn apply_layer(
    tape: &mut Tape,
    layer: &LayerDescriptor,
    params: &LayerParams,
    x: Var,
    train: bool,
) -> Result<Var> {
    let leaf = |tape: &mut Tape, t: &Tensor| tape.leaf(t.clone(), true);
    match *layer {
        LayerDescriptor::Conv { stride, pad, .. } => {
            let w = leaf(tape, need(&params.weight, "weight", layer)?)?;
            let b = params.bias.as_ref().map(|b| leaf(tape, b)).transpose()?;
            tape.conv2d(x, w, b, stride, pad, 1)
        }
        LayerDescriptor::GroupedConv {
            stride, pad, groups, ..
        } => {
            let w = leaf(tape, need(&params.weight, "weight", layer)?)?;
            let b = params.bias.as_ref().map(|b| leaf(tape, b)).transpose()?;
            grouped_conv_forward(tape, x, w, b, stride, pad, groups)
        }
        LayerDescriptor::Linear { .. } => {
            let w = leaf(tape, need(&params.weight, "weight", layer)?)?;
            let b = params.bias.as_ref().map(|b| leaf(tape, b)).transpose()?;
            tape.linear(x, w, b)
        }
        LayerDescriptor::GroupedLinear {
            in_features,
            out_features,
            groups,
        } => {
            // block-diagonal wiring as a 1x1 grouped convolution
            let n = tape.shape(x)[0];
            let x4 = tape.reshape(x, vec![n, in_features, 1, 1])?;
            let wt = need(&params.weight, "weight", layer)?;
            let w = leaf(tape, &wt.clone().reshape(vec![out_features, in_features / groups, 1, 1])?)?;
            let b = params.bias.as_ref().map(|b| leaf(tape, b)).transpose()?;
            let y = tape.conv2d(x4, w, b, 1, 0, groups)?;
            tape.reshape(y, vec![n, out_features])
        }
        LayerDescriptor::BatchNorm { .. } => {
            let g = leaf(tape, need(&params.gamma, "gamma", layer)?)?;
            let b = leaf(tape, need(&params.beta, "beta", layer)?)?;
            if train {
                Ok(tape.batch_norm_train(x, g, b)?.0)
            } else {
                let rm = need(&params.running_mean, "running_mean", layer)?;
                let rv = need(&params.running_var, "running_var", layer)?;
                tape.batch_norm_eval(x, g, b, rm.data(), rv.data())
            }
        }
        LayerDescriptor::GroupNorm { groups, .. } => {
            let g = leaf(tape, need(&params.gamma, "gamma", layer)?)?;
            let b = leaf(tape, need(&params.beta, "beta", layer)?)?;
            tape.group_norm(x, g, b, groups)
        }
        LayerDescriptor::Relu => tape.relu(x),
        LayerDescriptor::MaxPool { kernel, stride } => tape.maxpool2d(x, kernel, stride.unwrap_or(kernel)),
        LayerDescriptor::Flatten => tape.flatten(x),
    }
}

/// Consistently reorders the neurons between two adjacent parameterized
/// layers: output units of `first` (and every interposed norm layer) and
/// the matching input units of `next`. New unit `i` takes old unit `perm[i]`.
///
/// For grouped layers the permutation must map every group block onto itself.
pub fn permute_neurons(
    first: (&LayerDescriptor, &mut LayerParams),
    interposed: &mut [(&LayerDescriptor, &mut LayerParams)],
    next: (&LayerDescriptor, &mut LayerParams),
    perm: &[usize],
) -> Result<()> {
    let units = perm.len();
    let mut seen = vec![false; units];
    for &p in perm {
        if p >= units || seen[p] {
            return Err(Error::Config(format!("permutation {perm:?} is not a bijection")));
        }
        seen[p] = true;
    }
    let (first_desc, first_params) = first;
    let (next_desc, next_params) = next;
    let block_of = |desc: &LayerDescriptor| -> Option<usize> {
        match *desc {
            LayerDescriptor::GroupedConv { groups, .. }
            | LayerDescriptor::GroupNorm { groups, .. }
            | LayerDescriptor::GroupedLinear { groups, .. }
                if groups > 1 =>
            {
                Some(units / groups)
            }
            _ => None,
        }
    };
    let mut blocks: Vec<usize> = vec![first_desc, next_desc].into_iter().filter_map(block_of).collect();
    blocks.extend(interposed.iter().filter_map(|(d, _)| block_of(d)));
    for block in blocks {
        if let Some(i) = (0..units).find(|&i| i / block != perm[i] / block) {
            return Err(Error::InvarianceViolation(format!(
                "unit {i} receives unit {} across a group boundary (block size {block})",
                perm[i]
            )));
        }
    }
    let permute_out = |p: &mut LayerParams| -> Result<()> {
        for t in [&mut p.weight, &mut p.bias, &mut p.gamma, &mut p.beta, &mut p.running_mean, &mut p.running_var]
            .into_iter()
            .flatten()
        {
            if t.shape().first() != Some(&units) {
                return Err(shape_err!("tensor {:?} has no {units}-unit output axis", t.shape()));
            }
            *t = t.permute_axis(0, perm)?;
        }
        Ok(())
    };
    if !first_desc.has_params() || !next_desc.has_params() {
        return Err(Error::Config("permute_neurons needs parameterized endpoint layers".into()));
    }
    permute_out(first_params)?;
    for (_, p) in interposed.iter_mut() {
        permute_out(p)?;
    }
    let w = next_params
        .weight
        .as_mut()
        .ok_or_else(|| Error::Config(format!("{} layer has no weight", next_desc.tag())))?;
    match *next_desc {
        LayerDescriptor::Conv { .. } => *w = w.permute_axis(1, perm)?,
        LayerDescriptor::GroupedConv { groups, .. } => {
            // input axis holds only the block-local index within each group
            let cin_g = units / groups;
            let local: Vec<usize> = (0..cin_g).collect();
            let cout = w.shape()[0];
            let cout_g = cout / groups;
            let mut out = w.clone();
            let inner: usize = w.shape()[2..].iter().product();
            for g in 0..groups {
                let mapping: Vec<usize> = local.iter().map(|&j| perm[g * cin_g + j] - g * cin_g).collect();
                for oc in g * cout_g..(g + 1) * cout_g {
                    for (j, &src) in mapping.iter().enumerate() {
                        let dst = (oc * cin_g + j) * inner;
                        let from = (oc * cin_g + src) * inner;
                        out.data_mut()[dst..dst + inner].copy_from_slice(&w.data()[from..from + inner]);
                    }
                }
            }
            *w = out;
        }
        LayerDescriptor::Linear { in_features, .. } | LayerDescriptor::GroupedLinear { in_features, .. } => {
            // after a flatten, each unit owns a contiguous run of spatial features
            if in_features % units != 0 {
                return Err(shape_err!("{in_features} input features do not split over {units} units"));
            }
            let span = in_features / units;
            let expanded: Vec<usize> = perm.iter().flat_map(|&p| p * span..(p + 1) * span).collect();
            if let LayerDescriptor::GroupedLinear { groups, out_features, .. } = *next_desc {
                let local = in_features / groups;
                let out_g = out_features / groups;
                let mut out = w.clone();
                for g in 0..groups {
                    for o in g * out_g..(g + 1) * out_g {
                        for j in 0..local {
                            let src = expanded[g * local + j] - g * local;
                            out.data_mut()[o * local + j] = w.data()[o * local + src];
                        }
                    }
                }
                *w = out;
            } else {
                *w = w.permute_axis(1, &expanded)?;
            }
        }
        _ => return Err(Error::Config(format!("cannot permute inputs of a {} layer", next_desc.tag()))),
    }
    Ok(())
}
