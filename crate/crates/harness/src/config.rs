//! Experiment configuration files (JSON).

use std::path::{Path, PathBuf};

use psinet::federation::{EmptyGroupPolicy, FederationConfig, Strategy};
use psinet::layers::ArchitectureSpec;
use psinet::partition::{PartitionSpec, Scheme};
use psinet::psinet::{build_psinet, default_mapping, BuildOptions, GroupMapping, NormChoice};
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

/// Environment variable naming the directory with CIFAR binary batches.
pub const DATA_DIR_ENV: &str = "PSINET_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub mapping: MappingConfig,
    pub partition: PartitionConfig,
    pub federation: FederationSettings,
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub probe: ProbeConfig,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        height: usize,
        width: usize,
    },
    Cifar10 {
        /// Falls back to `$PSINET_DATA_DIR`.
        #[serde(default)]
        dir: Option<PathBuf>,
        /// Keep only the first `n` training samples of each class.
        #[serde(default)]
        limit_per_class: Option<usize>,
        #[serde(default)]
        test_limit_per_class: Option<usize>,
        #[serde(default)]
        standardize: bool,
    },
    Cifar100 {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default)]
        limit_per_class: Option<usize>,
        #[serde(default)]
        test_limit_per_class: Option<usize>,
        #[serde(default)]
        standardize: bool,
    },
}

impl DatasetConfig {
    pub fn classes(&self) -> usize {
        match self {
            DatasetConfig::Synthetic { classes, .. } => *classes,
            DatasetConfig::Cifar10 { .. } => 10,
            DatasetConfig::Cifar100 { .. } => 100,
        }
    }

    /// `[C, H, W]` of one sample.
    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            DatasetConfig::Synthetic { height, width, .. } => [1, *height, *width],
            _ => [3, 32, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchitectureConfig {
    TinyVgg { widths: [usize; 3] },
    Vgg9 { width: usize },
    Vgg16 { width: usize },
    Custom { spec: ArchitectureSpec },
}

impl ArchitectureConfig {
    pub fn build(&self, input: [usize; 3], classes: usize) -> ArchitectureSpec {
        match self {
            ArchitectureConfig::TinyVgg { widths } => ArchitectureSpec::tiny_vgg(input, classes, *widths),
            ArchitectureConfig::Vgg9 { width } => ArchitectureSpec::vgg9(input, classes, *width),
            ArchitectureConfig::Vgg16 { width } => ArchitectureSpec::vgg16(input, classes, *width),
            ArchitectureConfig::Custom { spec } => spec.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoDepth {
    Auto,
}

/// Layer index of the last shared layer, or `"auto"` to pick it from the
/// total-variance profile of a centrally pre-trained model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SharedDepth {
    Layer(usize),
    Auto(AutoDepth),
}

fn default_alpha() -> f64 {
    0.5
}

fn default_pretrain() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingConfig {
    /// Structure group count; defaults to one group per class.
    #[serde(default)]
    pub groups: Option<usize>,
    pub shared_depth: SharedDepth,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Central pre-training epochs before automatic depth selection.
    #[serde(default = "default_pretrain")]
    pub pretrain_epochs: usize,
    /// Relabels classes before contiguous assignment: class `order[i]`
    /// takes the slot of class `i`.
    #[serde(default)]
    pub order: Option<Vec<usize>>,
    #[serde(default)]
    pub grouped_norm: NormChoice,
    #[serde(default)]
    pub shared_group_norm: bool,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            groups: None,
            shared_depth: SharedDepth::Auto(AutoDepth::Auto),
            alpha: default_alpha(),
            pretrain_epochs: default_pretrain(),
            order: None,
            grouped_norm: NormChoice::default(),
            shared_group_norm: false,
        }
    }
}

impl MappingConfig {
    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            grouped_norm: self.grouped_norm,
            shared_group_norm: self.shared_group_norm,
        }
    }

    /// The class mapping with a concrete shared depth.
    pub fn mapping(&self, classes: usize, depth: usize) -> psinet::Result<GroupMapping> {
        let base = default_mapping(classes, self.groups.unwrap_or(classes))?;
        let base = match &self.order {
            Some(order) => base.permuted(order)?,
            None => base,
        };
        Ok(base.with_shared_depth(depth))
    }
}

/// Unknown keys are not rejected here: serde cannot combine that with the
/// flattened scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    #[serde(flatten)]
    pub scheme: Scheme,
    pub nodes: usize,
}

fn default_true() -> bool {
    true
}

/// Federation settings shared by every strategy of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSettings {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f32,
    #[serde(default)]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub trimming: bool,
    #[serde(default)]
    pub weighted: bool,
    #[serde(default)]
    pub empty_group: EmptyGroupPolicy,
    #[serde(default)]
    pub threads: usize,
}

fn default_probe_batches() -> usize {
    2
}

fn default_probe_batch() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_batches")]
    pub batches: usize,
    #[serde(default = "default_probe_batch")]
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            batches: default_probe_batches(),
            batch_size: default_probe_batch(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn classes(&self) -> usize {
        self.dataset.classes()
    }

    pub fn arch(&self) -> ArchitectureSpec {
        self.architecture.build(self.dataset.input_shape(), self.classes())
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            scheme: self.partition.scheme.clone(),
            nodes: self.partition.nodes,
            seed: self.seed,
        }
    }

    pub fn federation(&self, strategy: &Strategy) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            lr: f.lr,
            momentum: f.momentum,
            weight_decay: f.weight_decay,
            batch_size: f.batch_size,
            strategy: strategy.clone(),
            trimming: f.trimming,
            weighted: f.weighted,
            empty_group: f.empty_group,
            seed: self.seed,
            threads: f.threads,
        }
    }

    pub fn uses_psinet(&self) -> bool {
        self.strategies.contains(&Strategy::Psinet)
    }

    /// Cross-field checks that need no data; reports every problem found.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut problems = Vec::new();
        let classes = self.classes();
        if classes < 2 {
            problems.push(format!("dataset.classes: need at least 2, got {classes}"));
        }
        if self.strategies.is_empty() {
            problems.push("strategies: list at least one strategy".to_string());
        }
        if self.partition.nodes == 0 {
            problems.push("partition.nodes: must be at least 1".to_string());
        }
        match self.partition.scheme {
            Scheme::ClassesPerNode { classes: k } if k == 0 || k > classes => {
                problems.push(format!("partition.classes: must lie in 1..={classes}, got {k}"))
            }
            Scheme::Dirichlet { alpha } if !(alpha > 0.0) => {
                problems.push(format!("partition.alpha: must be positive, got {alpha}"))
            }
            _ => {}
        }
        if let DatasetConfig::Synthetic {
            per_class,
            test_per_class,
            height,
            width,
            ..
        } = self.dataset
        {
            if per_class == 0 || test_per_class == 0 {
                problems.push("dataset: per_class and test_per_class must be positive".to_string());
            }
            if height < 4 || width < 4 {
                problems.push(format!("dataset: images must be at least 4x4, got {height}x{width}"));
            }
        }
        for s in &self.strategies {
            if let Err(e) = self.federation(s).validate() {
                problems.push(format!("federation.{}", HarnessError::from(e).detail()));
            }
        }
        let arch = self.arch();
        if arch.classes != classes || arch.input_shape != self.dataset.input_shape() {
            problems.push(format!(
                "architecture: expects input {:?} and {} classes, dataset gives {:?} and {classes}",
                arch.input_shape,
                arch.classes,
                self.dataset.input_shape()
            ));
        } else if let Err(e) = arch.validate() {
            problems.push(format!("architecture: {}", HarnessError::from(e).detail()));
        } else if self.uses_psinet() {
            if let Some(g) = self.mapping.groups {
                if g == 0 || g > classes {
                    problems.push(format!("mapping.groups: must lie in 1..={classes}, got {g}"));
                }
            }
            if !(self.mapping.alpha > 0.0 && self.mapping.alpha <= 1.0) {
                problems.push(format!("mapping.alpha: must lie in (0, 1], got {}", self.mapping.alpha));
            }
            let depths: Vec<usize> = match self.mapping.shared_depth {
                SharedDepth::Layer(d) => vec![d],
                // every candidate boundary must be buildable
                SharedDepth::Auto(_) => arch
                    .block_boundaries()
                    .into_iter()
                    .filter(|&b| b + 1 < arch.layers.len())
                    .collect(),
            };
            if problems.is_empty() {
                for d in depths {
                    let built = self
                        .mapping
                        .mapping(classes, d)
                        .and_then(|m| build_psinet(&arch, &m, self.mapping.build_options()));
                    if let Err(e) = built {
                        let field = match self.mapping.shared_depth {
                            SharedDepth::Layer(_) => "mapping",
                            SharedDepth::Auto(_) => "mapping (auto depth candidate)",
                        };
                        problems.push(format!("{field}: {}", HarnessError::from(e).detail()));
                        break;
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Config(problems.join("; ")))
        }
    }
}
