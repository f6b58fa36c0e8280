//! Experiment orchestration: data, partitions, depth selection, one
//! federation run per strategy under shared seeds, and artifact emission.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use log::{info, warn};
use psinet::checkpoint;
use psinet::data::{load_cifar10, load_cifar100, synthesize_dataset, Dataset};
use psinet::federation::{local_train, run_federation, FederationConfig, FederationRun, Strategy};
use psinet::interpret::{
    cross_node_agreement, group_alignment_score, preferences, probe_layers, select_shared_depth,
    total_variance_profile, ProbeSet,
};
use psinet::layers::ArchitectureSpec;
use psinet::model::Network;
use psinet::params::ModelParams;
use psinet::partition::{partition, NodePartition};
use psinet::psinet::build_psinet;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, ExperimentConfig, SharedDepth, DATA_DIR_ENV};
use crate::error::HarnessError;
use crate::output::{self, MetricsWriter};
use crate::Result;

/// Offset between the train and test seeds of synthetic data.
const TEST_SEED_OFFSET: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    /// Subdirectory holding this run's artifacts, relative to the output dir.
    pub dir: String,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub best_accuracy: f64,
    pub bytes_up_total: usize,
    pub bytes_down_total: usize,
    /// Fraction of grouped channels whose top class belongs to their group
    /// (regulated networks only).
    pub group_alignment: Option<f64>,
    /// Mean pairwise agreement of per-channel top classes across the final
    /// local models.
    pub node_agreement: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSelection {
    pub probe_layers: Vec<usize>,
    pub total_variance: Vec<f64>,
    pub alpha: f64,
    pub shared_depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub seed: u64,
    pub shared_depth: Option<usize>,
    pub depth_selection: Option<DepthSelection>,
    pub strategies: Vec<StrategySummary>,
}

impl ExperimentSummary {
    pub fn strategy(&self, name: &str) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy.name() == name)
    }
}

fn take_per_class(ds: &Dataset, limit: Option<usize>) -> Result<Dataset> {
    let Some(limit) = limit else {
        return Ok(ds.clone());
    };
    let mut keep: Vec<usize> = ds
        .indices_by_class()
        .into_iter()
        .flat_map(|idx| idx.into_iter().take(limit))
        .collect();
    keep.sort_unstable();
    Ok(ds.subset(&keep)?)
}

fn data_dir(dir: &Option<PathBuf>) -> Result<PathBuf> {
    dir.clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| HarnessError::Config(format!("dataset.dir: not set and ${DATA_DIR_ENV} is unset")))
}

/// Train and test splits described by the config.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test, standardize) = match &cfg.dataset {
        DatasetConfig::Synthetic {
            classes,
            per_class,
            test_per_class,
            height,
            width,
        } => {
            let train = synthesize_dataset(*classes, *per_class, (*height, *width), cfg.seed)?;
            let test = synthesize_dataset(
                *classes,
                *test_per_class,
                (*height, *width),
                cfg.seed.wrapping_add(TEST_SEED_OFFSET),
            )?;
            (train, test, false)
        }
        DatasetConfig::Cifar10 {
            dir,
            limit_per_class,
            test_limit_per_class,
            standardize,
        }
        | DatasetConfig::Cifar100 {
            dir,
            limit_per_class,
            test_limit_per_class,
            standardize,
        } => {
            let dir = data_dir(dir)?;
            let (train, test) = if matches!(cfg.dataset, DatasetConfig::Cifar10 { .. }) {
                load_cifar10(&dir)?
            } else {
                load_cifar100(&dir)?
            };
            (
                take_per_class(&train, *limit_per_class)?,
                take_per_class(&test, *test_limit_per_class)?,
                *standardize,
            )
        }
    };
    let (mut train, mut test) = (train, test);
    if standardize {
        train.standardize();
        let stats = train.standardization.clone().expect("standardize records statistics");
        test.apply_standardization(&stats);
    }
    Ok((train, test))
}

/// Pre-trains the plain network centrally and picks the shared depth from
/// its total-variance profile.
pub fn select_depth(cfg: &ExperimentConfig, arch: &ArchitectureSpec, train: &Dataset, probe: &ProbeSet) -> Result<DepthSelection> {
    let net = Network::plain(arch.clone())?;
    let mut params = net.init_params(cfg.seed);
    if cfg.mapping.pretrain_epochs > 0 {
        let mut central = cfg.federation(&Strategy::Fedavg);
        central.local_epochs = cfg.mapping.pretrain_epochs;
        let everything = NodePartition {
            node: 0,
            indices: (0..train.len()).collect(),
            classes: (0..train.classes).collect(),
        };
        params = local_train(&net, &params, train, &everything, &central, 0)?.params;
    }
    let profile = total_variance_profile(&net, &params, probe)?;
    let position = select_shared_depth(&profile.tv, cfg.mapping.alpha)?;
    let depth = profile.boundary_layer(arch, position)?;
    info!(
        "total variance {:?} at layers {:?}; shared depth {depth}",
        profile.tv, profile.layers
    );
    Ok(DepthSelection {
        probe_layers: profile.layers,
        total_variance: profile.tv,
        alpha: cfg.mapping.alpha,
        shared_depth: depth,
    })
}

pub fn regulated_network(cfg: &ExperimentConfig, depth: usize) -> Result<Network> {
    let mapping = cfg.mapping.mapping(cfg.classes(), depth)?;
    Ok(Network::regulated(build_psinet(&cfg.arch(), &mapping, cfg.mapping.build_options())?)?)
}

/// Baselines train the unregulated network; Ψ-Net its regulated form.
pub fn network_for(cfg: &ExperimentConfig, strategy: &Strategy, depth: Option<usize>) -> Result<Network> {
    match (strategy, depth) {
        (Strategy::Psinet, Some(d)) => regulated_network(cfg, d),
        (Strategy::Psinet, None) => Err(HarnessError::Config("mapping.shared_depth: unresolved".into())),
        _ => Ok(Network::plain(cfg.arch())?),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))
}

fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let tmp = path.with_extension("psnf.tmp");
    checkpoint::save(&tmp, params)?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

fn strategy_dirs(strategies: &[Strategy]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    strategies
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let base = s.name().to_string();
            if seen.insert(base.clone()) {
                base
            } else {
                format!("{base}_{i}")
            }
        })
        .collect()
}

/// Runs every strategy of `cfg` with the same data, partitions and seeds,
/// writing artifacts under `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let arch = cfg.arch();
    let (train, test) = load_datasets(cfg)?;
    if train.sample_shape() != arch.input_shape.as_slice() {
        return Err(HarnessError::Config(format!(
            "architecture: input {:?} does not match dataset samples {:?}",
            arch.input_shape,
            train.sample_shape()
        )));
    }
    let partitions = partition(&train, &cfg.partition_spec())?;
    for p in &partitions {
        info!("node {}: {} samples, classes {:?}", p.node, p.indices.len(), p.classes);
    }
    let probe = ProbeSet::from_dataset(&test, cfg.probe.batches, cfg.probe.batch_size)?;

    let mut resolved = cfg.clone();
    let (depth, selection) = match (cfg.uses_psinet(), cfg.mapping.shared_depth) {
        (false, _) => (None, None),
        (true, SharedDepth::Layer(d)) => (Some(d), None),
        (true, SharedDepth::Auto(_)) => {
            let sel = select_depth(cfg, &arch, &train, &probe)?;
            resolved.mapping.shared_depth = SharedDepth::Layer(sel.shared_depth);
            (Some(sel.shared_depth), Some(sel))
        }
    };
    create_dir(&cfg.output_dir)?;
    output::write_json(&cfg.output_dir.join(output::RESOLVED_CONFIG_FILE), &resolved)?;

    let mut summaries = Vec::new();
    for (strategy, dir) in cfg.strategies.iter().zip(strategy_dirs(&cfg.strategies)) {
        let net = network_for(cfg, strategy, depth)?;
        let fed = cfg.federation(strategy);
        let out = cfg.output_dir.join(&dir);
        create_dir(&out)?;
        info!("running {} for {} rounds into {}", strategy.name(), fed.rounds, out.display());
        let run = run_strategy(&fed, &net, &train, &partitions, &test, &out)?;
        let summary = summarize(strategy, &dir, &net, &run, &probe, &out, cfg.classes())?;
        info!(
            "{}: final accuracy {:.4}, alignment {:?}, node agreement {:?}",
            strategy.name(),
            summary.final_accuracy,
            summary.group_alignment,
            summary.node_agreement
        );
        summaries.push(summary);
    }
    let summary = ExperimentSummary {
        name: cfg.name.clone(),
        seed: cfg.seed,
        shared_depth: depth,
        depth_selection: selection,
        strategies: summaries,
    };
    output::write_json(&cfg.output_dir.join(output::SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// One federation run streaming metrics and the latest global checkpoint
/// into `out`. On failure the checkpoint of the last good round remains.
pub fn run_strategy(
    fed: &FederationConfig,
    net: &Network,
    train: &Dataset,
    partitions: &[NodePartition],
    test: &Dataset,
    out: &Path,
) -> Result<FederationRun> {
    let mut metrics = MetricsWriter::create(&out.join(output::METRICS_FILE))?;
    let ckpt = out.join(output::CHECKPOINT_FILE);
    let mut sink_error = None;
    let result = run_federation(fed, net, train, partitions, test, |report, global| {
        let written = metrics
            .append(report)
            .and_then(|_| save_checkpoint(&ckpt, &global.assemble()));
        match written {
            Ok(()) => Ok(()),
            Err(e) => {
                let message = e.to_string();
                sink_error = Some(e);
                Err(psinet::Error::State(message))
            }
        }
    });
    match (result, sink_error) {
        (Ok(run), _) => Ok(run),
        (Err(_), Some(e)) => Err(e),
        (Err(e), None) => {
            warn!("run failed; {} holds the last completed round", ckpt.display());
            Err(e.into())
        }
    }
}

fn summarize(
    strategy: &Strategy,
    dir: &str,
    net: &Network,
    run: &FederationRun,
    probe: &ProbeSet,
    out: &Path,
    classes: usize,
) -> Result<StrategySummary> {
    let last = run
        .reports
        .last()
        .ok_or_else(|| HarnessError::Config("federation.rounds: must be at least 1".into()))?;
    let layers = probe_layers(net.arch());
    let global = run.global.assemble();
    let global_prefs = preferences(net, &global, probe, &layers)?;
    output::write_featuremap(&out.join(output::FEATUREMAP_FILE), classes, &global_prefs)?;
    let mut per_node = Vec::with_capacity(run.locals.len());
    for local in &run.locals {
        per_node.push((local.node, preferences(&local.net, &local.params, probe, &layers)?));
    }
    output::write_node_featuremap(&out.join(output::NODE_FEATUREMAP_FILE), classes, &per_node)?;
    let flat: Vec<Vec<_>> = per_node.into_iter().map(|(_, l)| l.into_iter().flatten().collect()).collect();
    let group_alignment = match net.mapping() {
        Some(_) => Some(group_alignment_score(net, &global, probe)?.score()),
        None => None,
    };
    Ok(StrategySummary {
        strategy: strategy.clone(),
        dir: dir.to_string(),
        rounds: run.reports.len(),
        final_accuracy: last.global_accuracy,
        final_loss: last.global_loss,
        best_accuracy: run.reports.iter().map(|r| r.global_accuracy).fold(f64::NEG_INFINITY, f64::max),
        bytes_up_total: run.reports.iter().flat_map(|r| &r.nodes).map(|n| n.bytes_up).sum(),
        bytes_down_total: run.reports.iter().flat_map(|r| &r.nodes).map(|n| n.bytes_down).sum(),
        group_alignment,
        node_agreement: cross_node_agreement(&flat),
    })
}

/// Writes the preference rows of one layer of a checkpointed model.
///
/// The network is rebuilt from `cfg` (which must have a concrete shared
/// depth when the checkpoint holds grouped parameters), and the checkpoint
/// must match it tensor for tensor.
pub fn diag_featuremap(cfg: &ExperimentConfig, ckpt: &Path, layer: usize, out: &Path) -> Result<usize> {
    let params = checkpoint::load(ckpt)?;
    let grouped = params.names().any(|n| n.starts_with("group"));
    let net = if grouped {
        match cfg.mapping.shared_depth {
            SharedDepth::Layer(d) => regulated_network(cfg, d)?,
            SharedDepth::Auto(_) => {
                return Err(HarnessError::Config(
                    "mapping.shared_depth: a grouped checkpoint needs a concrete depth; use the run's resolved_config.json"
                        .into(),
                ))
            }
        }
    } else {
        Network::plain(cfg.arch())?
    };
    let layers = &net.arch().layers;
    if layer >= layers.len() {
        let listing: Vec<String> = layers.iter().enumerate().map(|(i, l)| format!("{i} {}", l.tag())).collect();
        return Err(HarnessError::Config(format!(
            "layer {layer} not found; layers are: {}",
            listing.join(", ")
        )));
    }
    let params = checkpoint::conform(&net, &params).map_err(|e| {
        HarnessError::Config(format!("checkpoint {} does not match the configured network: {e}", ckpt.display()))
    })?;
    let (_, test) = load_datasets(cfg)?;
    let probe = ProbeSet::from_dataset(&test, cfg.probe.batches, cfg.probe.batch_size)?;
    let prefs = preferences(&net, &params, &probe, &[layer])?;
    output::write_featuremap(out, cfg.classes(), &prefs)?;
    Ok(prefs[0].len())
}
