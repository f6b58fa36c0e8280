//! Ψ-Net regulation: class-to-group mapping, architecture rewriting and
//! per-node trimming of structure groups.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ArchitectureSpec, LayerDescriptor};

/// Disjoint assignment of classes to structure groups plus the index of the
/// last shared layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMapping {
    classes: usize,
    shared_depth: usize,
    groups: Vec<Vec<usize>>,
    class_to_group: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MappingMode {
    OneToOne,
    OneToMany,
}

impl GroupMapping {
    /// Builds a mapping from explicit class sets. Sets must be pairwise
    /// disjoint, cover `0..classes`, and be balanced (sizes ⌈C/G⌉ or ⌊C/G⌋).
    pub fn new(classes: usize, groups: Vec<Vec<usize>>, shared_depth: usize) -> Result<Self> {
        let g = groups.len();
        if g == 0 || g > classes {
            return Err(Error::Config(format!(
                "group count {g} must lie in 1..={classes}; a group without classes receives no gradient"
            )));
        }
        let mut class_to_group = vec![usize::MAX; classes];
        for (k, set) in groups.iter().enumerate() {
            for &c in set {
                if c >= classes {
                    return Err(Error::Config(format!("group {k} maps class {c} outside 0..{classes}")));
                }
                if class_to_group[c] != usize::MAX {
                    return Err(Error::Config(format!(
                        "class {c} mapped to both group {} and group {k}",
                        class_to_group[c]
                    )));
                }
                class_to_group[c] = k;
            }
        }
        if let Some(c) = class_to_group.iter().position(|&k| k == usize::MAX) {
            return Err(Error::Config(format!("class {c} is not mapped to any group")));
        }
        let (lo, hi) = (classes / g, classes.div_ceil(g));
        if let Some((k, set)) = groups.iter().enumerate().find(|(_, s)| s.len() < lo || s.len() > hi) {
            return Err(Error::Config(format!(
                "group {k} holds {} classes; balanced sizes are {lo}..={hi}",
                set.len()
            )));
        }
        let groups = groups
            .into_iter()
            .map(|mut s| {
                s.sort_unstable();
                s
            })
            .collect();
        Ok(Self {
            classes,
            shared_depth,
            groups,
            class_to_group,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn shared_depth(&self) -> usize {
        self.shared_depth
    }

    pub fn with_shared_depth(mut self, depth: usize) -> Self {
        self.shared_depth = depth;
        self
    }

    /// Sorted classes mapped to group `k`.
    pub fn classes_of(&self, k: usize) -> &[usize] {
        &self.groups[k]
    }

    pub fn group_of(&self, class: usize) -> usize {
        self.class_to_group[class]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn mode(&self) -> MappingMode {
        if self.groups.iter().all(|s| s.len() == 1) {
            MappingMode::OneToOne
        } else {
            MappingMode::OneToMany
        }
    }

    /// Relabels classes: position `i` of the contiguous layout holds class `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.classes];
        if order.len() != self.classes || order.iter().any(|&c| c >= self.classes || std::mem::replace(&mut seen[c], true)) {
            return Err(Error::Config(format!("class order {order:?} is not a permutation of 0..{}", self.classes)));
        }
        let groups = self
            .groups
            .iter()
            .map(|s| s.iter().map(|&i| order[i]).collect())
            .collect();
        Self::new(self.classes, groups, self.shared_depth)
    }

    /// Groups whose class sets meet `local_classes`; the rest are trimmed.
    pub fn trim_mask(&self, local_classes: &BTreeSet<usize>) -> TrimMask {
        TrimMask {
            trimmed: self
                .groups
                .iter()
                .map(|s| s.iter().all(|c| !local_classes.contains(c)))
                .collect(),
        }
    }
}

/// Contiguous balanced assignment: the first `C mod G` groups take ⌈C/G⌉
/// classes, the rest ⌊C/G⌋.
pub fn default_mapping(classes: usize, groups: usize) -> Result<GroupMapping> {
    if groups == 0 || groups > classes {
        return Err(Error::Config(format!(
            "cannot map {classes} classes onto {groups} groups (need 1 <= G <= C)"
        )));
    }
    let (base, extra) = (classes / groups, classes % groups);
    let mut start = 0;
    let sets = (0..groups)
        .map(|k| {
            let len = base + usize::from(k < extra);
            let set: Vec<usize> = (start..start + len).collect();
            start += len;
            set
        })
        .collect();
    GroupMapping::new(classes, sets, 0)
}

/// Per-group trimmed flags for one node; `true` means the group is removed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrimMask {
    pub trimmed: Vec<bool>,
}

impl TrimMask {
    pub fn none(groups: usize) -> Self {
        Self {
            trimmed: vec![false; groups],
        }
    }

    pub fn kept(&self) -> Vec<usize> {
        self.trimmed
            .iter()
            .enumerate()
            .filter(|(_, &t)| !t)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn keeps(&self, group: usize) -> bool {
        !self.trimmed[group]
    }

    pub fn any_trimmed(&self) -> bool {
        self.trimmed.iter().any(|&t| t)
    }
}

/// Normalization placed after a conv layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormChoice {
    BatchNorm,
    #[default]
    GroupNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Normalization after grouped convolutions.
    pub grouped_norm: NormChoice,
    /// Replace shared-layer batch norm by single-group group norm.
    pub shared_group_norm: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            grouped_norm: NormChoice::GroupNorm,
            shared_group_norm: false,
        }
    }
}

/// A regulated architecture together with its class mapping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegulatedSpec {
    pub arch: ArchitectureSpec,
    pub mapping: GroupMapping,
}

impl RegulatedSpec {
    pub fn is_shared(&self, layer: usize) -> bool {
        layer <= self.mapping.shared_depth
    }
}

/// Rewrites `spec` into a Ψ-Net: layers up to `mapping.shared_depth()` stay
/// shared, conv layers above become `G`-group convolutions followed by
/// group norm, and linear layers become grouped linear layers whose final
/// instance wires each class logit to its mapped group only.
pub fn build_psinet(spec: &ArchitectureSpec, mapping: &GroupMapping, options: BuildOptions) -> Result<RegulatedSpec> {
    spec.validate()?;
    if mapping.classes() != spec.classes {
        return Err(Error::Config(format!(
            "mapping covers {} classes, architecture has {}",
            mapping.classes(),
            spec.classes
        )));
    }
    let depth = mapping.shared_depth();
    if depth + 1 >= spec.layers.len() {
        return Err(Error::Config(format!(
            "shared_depth {depth} out of range for {} layers",
            spec.layers.len()
        )));
    }
    if !spec.block_boundaries().contains(&depth) {
        return Err(Error::Config(format!(
            "shared_depth {depth} is not a block boundary; admissible: {:?}",
            spec.block_boundaries()
        )));
    }
    let g = mapping.group_count();
    let shapes = spec.layer_shapes()?;
    let mut offending = Vec::new();
    let entry = &shapes[depth];
    if entry[0] % g != 0 {
        offending.push(format!("layer {depth} output ({} channels/features)", entry[0]));
    }
    let last = spec.layers.len() - 1;
    for (i, layer) in spec.layers.iter().enumerate().skip(depth + 1) {
        match *layer {
            LayerDescriptor::Conv {
                in_channels,
                out_channels,
                ..
            } if in_channels % g != 0 || out_channels % g != 0 => {
                offending.push(format!("layer {i} conv {in_channels}->{out_channels}"));
            }
            LayerDescriptor::Linear {
                in_features,
                out_features,
            } if in_features % g != 0 || (i != last && out_features % g != 0) => {
                offending.push(format!("layer {i} linear {in_features}->{out_features}"));
            }
            _ => {}
        }
    }
    if !offending.is_empty() {
        return Err(Error::Config(format!(
            "channel counts not divisible by G={g}: {}",
            offending.join(", ")
        )));
    }

    // A single group keeps batch norm so the regulated net computes the same function.
    let grouped_norm = if g == 1 { NormChoice::BatchNorm } else { options.grouped_norm };
    let mut layers = Vec::with_capacity(spec.layers.len() + 4);
    for (i, layer) in spec.layers.iter().enumerate() {
        if i <= depth {
            match *layer {
                LayerDescriptor::BatchNorm { channels } if options.shared_group_norm => {
                    layers.push(LayerDescriptor::GroupNorm { channels, groups: 1 })
                }
                _ => layers.push(layer.clone()),
            }
            continue;
        }
        match *layer {
            LayerDescriptor::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                layers.push(LayerDescriptor::GroupedConv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    groups: g,
                });
                let followed_by_norm = spec.layers.get(i + 1).is_some_and(LayerDescriptor::is_norm);
                if !followed_by_norm {
                    layers.push(norm_layer(grouped_norm, out_channels, g));
                }
            }
            LayerDescriptor::BatchNorm { channels } | LayerDescriptor::GroupNorm { channels, .. }
                if spec.layers[i - 1].is_conv() =>
            {
                layers.push(norm_layer(grouped_norm, channels, g));
            }
            LayerDescriptor::Linear {
                in_features,
                out_features,
            } => layers.push(LayerDescriptor::GroupedLinear {
                in_features,
                out_features,
                groups: g,
            }),
            _ => layers.push(layer.clone()),
        }
    }
    let arch = ArchitectureSpec {
        name: format!("{}-psinet-g{g}", spec.name),
        input_shape: spec.input_shape.clone(),
        classes: spec.classes,
        layers,
    };
    arch.validate()?;
    Ok(RegulatedSpec {
        arch,
        mapping: mapping.clone(),
    })
}

fn norm_layer(choice: NormChoice, channels: usize, groups: usize) -> LayerDescriptor {
    match choice {
        NormChoice::BatchNorm => LayerDescriptor::BatchNorm { channels },
        NormChoice::GroupNorm => LayerDescriptor::GroupNorm { channels, groups },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_to_one_singletons() {
        let m = default_mapping(10, 10).unwrap();
        assert_eq!(m.mode(), MappingMode::OneToOne);
        for k in 0..10 {
            assert_eq!(m.classes_of(k), &[k]);
        }
    }

    #[test]
    fn contiguous_blocks_of_ten() {
        let m = default_mapping(100, 10).unwrap();
        assert_eq!(m.classes_of(0), (0..10).collect::<Vec<_>>().as_slice());
        assert_eq!(m.classes_of(9), (90..100).collect::<Vec<_>>().as_slice());
        assert_eq!(m.group_of(57), 5);
    }

    #[test]
    fn balanced_remainder() {
        let m = default_mapping(10, 3).unwrap();
        let sizes: Vec<usize> = m.groups().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    #[test]
    fn more_groups_than_classes_is_error() {
        assert!(default_mapping(3, 4).is_err());
        assert!(default_mapping(3, 0).is_err());
    }

    #[test]
    fn overlapping_sets_rejected() {
        assert!(GroupMapping::new(4, vec![vec![0, 1], vec![1, 2, 3]], 0).is_err());
        assert!(GroupMapping::new(4, vec![vec![0, 1], vec![2]], 0).is_err());
    }

    #[test]
    fn permuted_mapping_relabels() {
        let m = default_mapping(4, 2).unwrap().permuted(&[3, 2, 1, 0]).unwrap();
        assert_eq!(m.classes_of(0), &[2, 3]);
        assert_eq!(m.group_of(0), 1);
    }

    #[test]
    fn trim_mask_one_to_many() {
        let m = default_mapping(100, 10).unwrap();
        let mask = m.trim_mask(&BTreeSet::from([5]));
        assert_eq!(mask.kept(), vec![0]);
    }

    proptest! {
        #[test]
        fn default_mapping_is_a_disjoint_cover(c in 1usize..200, g_frac in 0.0f64..1.0) {
            let g = 1 + ((c - 1) as f64 * g_frac) as usize;
            let m = default_mapping(c, g).unwrap();
            let mut all: Vec<usize> = m.groups().iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..c).collect::<Vec<_>>());
            for k in 0..g {
                for &cls in m.classes_of(k) {
                    prop_assert_eq!(m.group_of(cls), k);
                }
            }
        }
    }
}
