//! Property checks shared by the integration tests and the acceptance
//! report. Each returns raw measurements; callers apply tolerances.

use std::collections::{BTreeMap, BTreeSet};

use psinet::data::{synthesize_dataset, Dataset};
use psinet::federation::{
    aggregate_fedavg, aggregate_psinet, batch_gradients, local_train, run_federation, EmptyGroupPolicy,
    FederationConfig, NodeUpdate, Strategy,
};
use psinet::interpret::{preferences, probe_layers, total_variance, PreferenceVector, ProbeSet};
use psinet::layers::{apply_layer, permute_neurons, ArchitectureSpec, LayerDescriptor as L, LayerParams};
use psinet::model::{Mode, Network};
use psinet::params::{ModelParams, Partition};
use psinet::partition::NodePartition;
use psinet::psinet::{build_psinet, default_mapping, BuildOptions, TrimMask};
use psinet::{Tape, Tensor};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

pub fn random_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Adds uniform noise of the given amplitude to every trainable tensor.
pub fn jitter(params: &ModelParams, rng: &mut StdRng, amplitude: f32) -> ModelParams {
    let mut out = params.clone();
    for (name, t) in out.iter_mut() {
        if name.rsplit('.').next().is_some_and(|f| f.starts_with("running_")) {
            continue;
        }
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-amplitude..amplitude));
    }
    out
}

pub fn regulated(arch: &ArchitectureSpec, groups: usize, depth: usize) -> Network {
    let mapping = default_mapping(arch.classes, groups).unwrap().with_shared_depth(depth);
    Network::regulated(build_psinet(arch, &mapping, BuildOptions::default()).unwrap()).unwrap()
}

pub fn small_arch(classes: usize) -> ArchitectureSpec {
    ArchitectureSpec::tiny_vgg([1, 8, 8], classes, [4, 8, 8])
}

// ---------------------------------------------------------------- isolation

#[derive(Debug, Default)]
pub struct Isolation {
    /// Grouped tensors that must have zero gradient, over all classes.
    pub checked: usize,
    /// Of those, how many had any nonzero entry.
    pub violations: usize,
    /// Classes whose own group received no gradient at all (vacuity guard).
    pub dead_own_groups: usize,
}

/// Differentiates each logit separately and inspects every grouped
/// parameter tensor of the other groups.
pub fn gradient_isolation(seed: u64) -> Isolation {
    let mut rng = StdRng::seed_from_u64(seed);
    let classes = 4;
    let arch = small_arch(classes);
    let mut out = Isolation::default();
    for depth in [3, 6, 10] {
        let net = regulated(&arch, classes, depth);
        let mapping = net.mapping().unwrap().clone();
        let params = jitter(&net.init_params(seed), &mut rng, 0.05);
        let x = random_tensor(&mut rng, &[3, 1, 8, 8]);
        for c in 0..classes {
            let mut tape = Tape::new();
            let pass = net.forward(&mut tape, &params, &x, Mode::Train).unwrap();
            let col = tape.slice_dim1(pass.logits, c, 1).unwrap();
            let z = tape.sum(col).unwrap();
            let grads = tape.backward(z).unwrap();
            let own = mapping.group_of(c);
            let mut own_nonzero = false;
            for (name, &var) in &pass.param_vars {
                let Ok(Partition::Group(k)) = Partition::of_name(name) else {
                    continue;
                };
                let g = grads.get_or_zeros(var);
                let nonzero = g.data().iter().any(|&v| v != 0.0);
                if k == own {
                    own_nonzero |= nonzero;
                } else {
                    out.checked += 1;
                    out.violations += usize::from(nonzero);
                }
            }
            out.dead_own_groups += usize::from(!own_nonzero);
        }
    }
    out
}

// ------------------------------------------------------------- permutations

/// Random parameters for one layer; running variances stay positive.
/// Weights are scaled by `1/sqrt(fan_in)` so activations stay O(1).
fn random_layer(rng: &mut StdRng, layer: &L) -> LayerParams {
    let mut t = |shape: &[usize]| {
        let mut w = random_tensor(rng, shape);
        if shape.len() > 1 {
            let scale = 1.0 / (shape[1..].iter().product::<usize>() as f32).sqrt();
            w.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        Some(w)
    };
    match *layer {
        L::Conv { in_channels, out_channels, kernel, .. } => LayerParams {
            weight: t(&[out_channels, in_channels, kernel, kernel]),
            bias: t(&[out_channels]),
            ..Default::default()
        },
        L::GroupedConv { in_channels, out_channels, kernel, groups, .. } => LayerParams {
            weight: t(&[out_channels, in_channels / groups, kernel, kernel]),
            bias: t(&[out_channels]),
            ..Default::default()
        },
        L::Linear { in_features, out_features } => LayerParams {
            weight: t(&[out_features, in_features]),
            bias: t(&[out_features]),
            ..Default::default()
        },
        L::GroupedLinear { in_features, out_features, groups } => LayerParams {
            weight: t(&[out_features, in_features / groups]),
            bias: t(&[out_features]),
            ..Default::default()
        },
        L::BatchNorm { channels } => {
            let mut var = random_tensor(rng, &[channels]);
            var.data_mut().iter_mut().for_each(|v| *v = 0.5 + v.abs());
            LayerParams {
                gamma: Some(random_tensor(rng, &[channels])),
                beta: Some(random_tensor(rng, &[channels])),
                running_mean: Some(random_tensor(rng, &[channels])),
                running_var: Some(var),
                ..Default::default()
            }
        }
        L::GroupNorm { channels, .. } => LayerParams {
            gamma: t(&[channels]),
            beta: t(&[channels]),
            ..Default::default()
        },
        _ => LayerParams::default(),
    }
}

fn run_stack(layers: &[L], params: &[LayerParams], x: &Tensor) -> Vec<f32> {
    let mut tape = Tape::new();
    let mut v = tape.constant(x.clone()).unwrap();
    for (l, p) in layers.iter().zip(params) {
        v = apply_layer(&mut tape, l, p, v, false).unwrap();
    }
    tape.value(v).data().to_vec()
}

/// Random permutation of `units` that maps each of `blocks` contiguous
/// blocks onto itself.
fn block_permutation(rng: &mut StdRng, units: usize, blocks: usize) -> Vec<usize> {
    let size = units / blocks;
    let mut perm = Vec::with_capacity(units);
    for b in 0..blocks {
        let mut part: Vec<usize> = (b * size..(b + 1) * size).collect();
        part.shuffle(rng);
        perm.extend(part);
    }
    perm
}

struct PermCase {
    input: Vec<usize>,
    layers: Vec<L>,
    first: usize,
    interposed: Vec<usize>,
    next: usize,
    units: usize,
    blocks: usize,
}

fn permutation_cases() -> Vec<PermCase> {
    let conv = |i, o| L::conv(i, o, 3, 1);
    let gconv = |i, o, g| L::GroupedConv {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride: 1,
        pad: 1,
        groups: g,
    };
    vec![
        PermCase {
            input: vec![2, 4, 4],
            layers: vec![conv(2, 6), L::BatchNorm { channels: 6 }, L::Relu, conv(6, 3)],
            first: 0,
            interposed: vec![1],
            next: 3,
            units: 6,
            blocks: 1,
        },
        PermCase {
            input: vec![2, 4, 4],
            layers: vec![conv(2, 4), L::Relu, L::max_pool(2), L::Flatten, L::linear(16, 5)],
            first: 0,
            interposed: vec![],
            next: 4,
            units: 4,
            blocks: 1,
        },
        PermCase {
            input: vec![8],
            layers: vec![L::linear(8, 6), L::Relu, L::linear(6, 3)],
            first: 0,
            interposed: vec![],
            next: 2,
            units: 6,
            blocks: 1,
        },
        PermCase {
            input: vec![6, 4, 4],
            layers: vec![gconv(6, 6, 3), L::GroupNorm { channels: 6, groups: 3 }, L::Relu, gconv(6, 6, 3)],
            first: 0,
            interposed: vec![1],
            next: 3,
            units: 6,
            blocks: 3,
        },
        PermCase {
            input: vec![4, 4, 4],
            layers: vec![
                gconv(4, 4, 2),
                L::Relu,
                L::Flatten,
                L::GroupedLinear {
                    in_features: 64,
                    out_features: 4,
                    groups: 2,
                },
            ],
            first: 0,
            interposed: vec![],
            next: 3,
            units: 4,
            blocks: 2,
        },
        PermCase {
            input: vec![8],
            layers: vec![
                L::GroupedLinear {
                    in_features: 8,
                    out_features: 6,
                    groups: 2,
                },
                L::Relu,
                L::GroupedLinear {
                    in_features: 6,
                    out_features: 4,
                    groups: 2,
                },
            ],
            first: 0,
            interposed: vec![],
            next: 2,
            units: 6,
            blocks: 2,
        },
    ]
}

/// Largest output difference between a layer stack and a consistently
/// permuted copy, over random admissible permutations and 100 inputs.
pub fn permutation_max_diff(seed: u64) -> f64 {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in permutation_cases() {
        let mut params: Vec<LayerParams> = case.layers.iter().map(|l| random_layer(&mut rng, l)).collect();
        let mut x_shape = vec![100];
        x_shape.extend(&case.input);
        let x = random_tensor(&mut rng, &x_shape);
        let before = run_stack(&case.layers, &params, &x);
        let perm = block_permutation(&mut rng, case.units, case.blocks);
        let mut fp = params[case.first].clone();
        let mut np = params[case.next].clone();
        let mut mids: Vec<LayerParams> = case.interposed.iter().map(|&l| params[l].clone()).collect();
        {
            let mut inter: Vec<(&L, &mut LayerParams)> =
                case.interposed.iter().map(|&l| &case.layers[l]).zip(mids.iter_mut()).collect();
            permute_neurons((&case.layers[case.first], &mut fp), &mut inter, (&case.layers[case.next], &mut np), &perm)
                .unwrap();
        }
        params[case.first] = fp;
        params[case.next] = np;
        for (&l, lp) in case.interposed.iter().zip(mids) {
            params[l] = lp;
        }
        let after = run_stack(&case.layers, &params, &x);
        for (a, b) in before.iter().zip(&after) {
            worst = worst.max((a - b).abs() as f64);
        }
    }
    worst
}

// -------------------------------------------------------------- aggregation

#[derive(Debug)]
pub struct Aggregation {
    /// Max deviation after averaging N identical models (both strategies).
    pub idempotence: f64,
    /// Aggregates of reordered node lists are bitwise equal.
    pub order_bitwise: bool,
    /// Changing a trimmed node's shared weights leaves its dropped group's
    /// block bitwise unchanged, and that block equals the aggregate over
    /// the keeping nodes alone.
    pub exclusion_exact: bool,
    /// Max deviation of every group block from a 64-bit masked-average oracle.
    pub masked_oracle: f64,
    /// Max deviation between single-group Ψ-Net aggregation and FedAvg.
    pub single_group_vs_fedavg: f64,
}

fn flat(params: &ModelParams, names: &[String]) -> Vec<f64> {
    names
        .iter()
        .flat_map(|n| params.get(n).unwrap().data().iter().map(|&v| v as f64))
        .collect()
}

pub fn aggregation_algebra(seed: u64) -> Aggregation {
    let mut rng = StdRng::seed_from_u64(seed);
    let classes = 4;
    let arch = small_arch(classes);
    let net = regulated(&arch, classes, 6);
    let mapping = net.mapping().unwrap().clone();
    let base = net.init_params(seed);

    // idempotence
    let one = jitter(&base, &mut rng, 0.1);
    let copies: Vec<(usize, &ModelParams)> = (0..5).map(|i| (i, &one)).collect();
    let mut idempotence = one.max_abs_diff(&aggregate_fedavg(&copies, None).unwrap()).unwrap();
    let none = TrimMask::none(classes);
    let updates: Vec<NodeUpdate> = (0..5).map(|node| NodeUpdate { node, params: &one, mask: &none }).collect();
    let g = aggregate_psinet(&updates, &mapping, None, EmptyGroupPolicy::Error, None, 0).unwrap();
    idempotence = idempotence.max(one.max_abs_diff(&g.assemble()).unwrap());

    // three nodes; node 2 holds classes {0, 1} only and trims groups 2, 3
    let locals: Vec<ModelParams> = (0..3).map(|_| jitter(&base, &mut rng, 0.3)).collect();
    let local_classes: Vec<BTreeSet<usize>> = vec![(0..4).collect(), (0..4).collect(), [0, 1].into()];
    let mut trimmed = Vec::new();
    for (p, cls) in locals.iter().zip(&local_classes) {
        let (_, tp, mask) = net.trim(p, cls).unwrap();
        trimmed.push((tp, mask));
    }
    let build = |order: &[usize], models: &[(ModelParams, TrimMask)]| {
        let ups: Vec<NodeUpdate> = order
            .iter()
            .map(|&i| NodeUpdate {
                node: i,
                params: &models[i].0,
                mask: &models[i].1,
            })
            .collect();
        aggregate_psinet(&ups, &mapping, None, EmptyGroupPolicy::Error, None, 0).unwrap()
    };
    let forward = build(&[0, 1, 2], &trimmed);
    let reversed = build(&[2, 0, 1], &trimmed);
    let fa: Vec<(usize, &ModelParams)> = locals.iter().enumerate().collect();
    let mut fb = fa.clone();
    fb.reverse();
    let order_bitwise = forward.assemble().bitwise_eq(&reversed.assemble())
        && aggregate_fedavg(&fa, None).unwrap().bitwise_eq(&aggregate_fedavg(&fb, None).unwrap());

    let mut altered = trimmed.clone();
    altered[2].0 = jitter(&altered[2].0, &mut rng, 5.0);
    let after = build(&[0, 1, 2], &altered);
    let two_only = {
        let ups: Vec<NodeUpdate> = [0usize, 1]
            .iter()
            .map(|&i| NodeUpdate {
                node: i,
                params: &trimmed[i].0,
                mask: &trimmed[i].1,
            })
            .collect();
        aggregate_psinet(&ups, &mapping, None, EmptyGroupPolicy::Error, None, 0).unwrap()
    };
    let exclusion_exact = [2usize, 3].iter().all(|k| {
        after.groups[k].bitwise_eq(&forward.groups[k]) && forward.groups[k].bitwise_eq(&two_only.groups[k])
    }) && forward.contributors(Partition::Group(2)) == Some(&[0, 1].into());

    // masked-average oracle for every block
    let mut masked_oracle = 0.0f64;
    for (part, block) in std::iter::once((Partition::Shared, &forward.shared))
        .chain(forward.groups.iter().map(|(k, b)| (Partition::Group(*k), b)))
    {
        let names: Vec<String> = block.names().cloned().collect();
        let members: Vec<Vec<f64>> = trimmed
            .iter()
            .filter(|(_, m)| match part {
                Partition::Shared => true,
                Partition::Group(k) => m.keeps(k),
            })
            .map(|(p, _)| flat(p, &names))
            .collect();
        let expect = super::mean_of(&members);
        let got = flat(block, &names);
        for (a, b) in got.iter().zip(&expect) {
            masked_oracle = masked_oracle.max((a - b).abs());
        }
    }

    // one group: Ψ-Net aggregation is plain averaging
    let g1 = regulated(&arch, 1, 6);
    let models: Vec<ModelParams> = (0..4).map(|_| jitter(&g1.init_params(seed), &mut rng, 0.3)).collect();
    let mask1 = TrimMask::none(1);
    let ups: Vec<NodeUpdate> = models.iter().enumerate().map(|(node, p)| NodeUpdate { node, params: p, mask: &mask1 }).collect();
    let psi = aggregate_psinet(&ups, g1.mapping().unwrap(), None, EmptyGroupPolicy::Error, None, 0).unwrap();
    let avg = aggregate_fedavg(&models.iter().enumerate().collect::<Vec<_>>(), None).unwrap();
    let single_group_vs_fedavg = psi.assemble().max_abs_diff(&avg).unwrap();

    Aggregation {
        idempotence,
        order_bitwise,
        exclusion_exact,
        masked_oracle,
        single_group_vs_fedavg,
    }
}

// ----------------------------------------------------------- interpretation

#[derive(Debug)]
pub struct Interpretation {
    /// Max |batched − per-sample oracle| over all preference entries.
    pub batched_vs_oracle: f64,
    pub tv_matches_oracle: bool,
    pub tv_permutation_bitwise: bool,
}

/// Preferences recomputed one sample at a time, straight from the
/// definition: mean over samples of (spatial-mean activation) × (sum of
/// the logit's gradient over positions), then mean over batches.
pub fn per_sample_preferences(
    net: &Network,
    params: &ModelParams,
    batches_per_class: &[Vec<Tensor>],
    layer: usize,
) -> BTreeMap<usize, Vec<f64>> {
    let classes = batches_per_class.len();
    let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (c, batches) in batches_per_class.iter().enumerate() {
        let mut per_batch: Vec<BTreeMap<usize, f64>> = Vec::new();
        for b in batches {
            let n = b.shape()[0];
            let sample_len = b.numel() / n;
            let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
            for i in 0..n {
                let mut shape = b.shape().to_vec();
                shape[0] = 1;
                let x = Tensor::new(shape, b.data()[i * sample_len..(i + 1) * sample_len].to_vec()).unwrap();
                let mut tape = Tape::new();
                let pass = net.forward(&mut tape, params, &x, Mode::Eval).unwrap();
                let col = tape.slice_dim1(pass.logits, c, 1).unwrap();
                let z = tape.sum(col).unwrap();
                let grads = tape.backward(z).unwrap();
                let parts: Vec<(usize, psinet::Var)> = match &pass.layer_outputs[layer] {
                    psinet::model::LayerOutput::Single(v) => vec![(0, *v)],
                    psinet::model::LayerOutput::Groups(g) => g.clone(),
                };
                for (k, var) in parts {
                    let act = tape.value(var);
                    let grad = grads.get_or_zeros(var);
                    let ch = act.shape()[1];
                    let plane = act.numel() / ch;
                    for j in 0..ch {
                        let a: Vec<f64> = act.data()[j * plane..(j + 1) * plane].iter().map(|&v| v as f64).collect();
                        let g: Vec<f64> = grad.data()[j * plane..(j + 1) * plane].iter().map(|&v| v as f64).collect();
                        let mean_a = a.iter().sum::<f64>() / plane as f64;
                        let sum_g: f64 = g.iter().sum();
                        *sums.entry(k * ch + j).or_default() += mean_a * sum_g / n as f64;
                    }
                }
            }
            per_batch.push(sums);
        }
        for ch in per_batch[0].keys() {
            let v = per_batch.iter().map(|m| m[ch]).sum::<f64>() / per_batch.len() as f64;
            out.entry(*ch).or_insert_with(|| vec![0.0; classes])[c] = v;
        }
    }
    out
}

/// Total variance recomputed from the definition over rows sorted into
/// lexicographic order.
pub fn tv_oracle(prefs: &[PreferenceVector]) -> f64 {
    let mut rows: Vec<Vec<f64>> = prefs
        .iter()
        .map(|p| {
            let pos: Vec<f64> = p.p.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            let s: f64 = pos.iter().sum();
            if s > 0.0 {
                pos.iter().map(|v| v / s).collect()
            } else {
                vec![1.0 / pos.len() as f64; pos.len()]
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        for (x, y) in a.iter().zip(b) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Equal => continue,
                o => return o,
            }
        }
        std::cmp::Ordering::Equal
    });
    let l = rows.len() as f64;
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for (j, m) in mean.iter_mut().enumerate() {
        let mut s = 0.0;
        for r in &rows {
            s += r[j];
        }
        *m = s / l;
    }
    let mut total = 0.0;
    for r in &rows {
        let mut sq = 0.0;
        for j in 0..d {
            sq += (r[j] - mean[j]) * (r[j] - mean[j]);
        }
        total += sq.sqrt();
    }
    total / l
}

pub fn probe_from(ds: &Dataset, batches: usize, batch: usize) -> (ProbeSet, Vec<Vec<Tensor>>) {
    let probe = ProbeSet::from_dataset(ds, batches, batch).unwrap();
    let raw = (0..ds.classes).map(|c| probe.batches(c).to_vec()).collect();
    (probe, raw)
}

pub fn interpretation_oracles(seed: u64) -> Interpretation {
    let mut rng = StdRng::seed_from_u64(seed);
    let classes = 4;
    let ds = synthesize_dataset(classes, 6, (8, 8), seed).unwrap();
    let (probe, raw) = probe_from(&ds, 2, 3);
    let arch = small_arch(classes);
    let mut batched_vs_oracle = 0.0f64;
    let mut tv_matches_oracle = true;
    let mut tv_permutation_bitwise = true;
    for net in [Network::plain(arch.clone()).unwrap(), regulated(&arch, classes, 3)] {
        let mut params = jitter(&net.init_params(seed), &mut rng, 0.05);
        net.calibrate(&mut params, &probe.all_batches()).unwrap();
        let layers = probe_layers(net.arch());
        let prefs = preferences(&net, &params, &probe, &layers).unwrap();
        for (layer, got) in layers.iter().zip(&prefs) {
            let oracle = per_sample_preferences(&net, &params, &raw, *layer);
            assert_eq!(oracle.len(), got.len());
            for pv in got {
                for (a, b) in pv.p.iter().zip(&oracle[&pv.channel]) {
                    batched_vs_oracle = batched_vs_oracle.max((a - b).abs());
                }
            }
            tv_matches_oracle &= total_variance(got) == tv_oracle(got);
            let mut shuffled = got.clone();
            shuffled.shuffle(&mut rng);
            tv_permutation_bitwise &= total_variance(&shuffled).to_bits() == total_variance(got).to_bits();
        }
    }
    Interpretation {
        batched_vs_oracle,
        tv_matches_oracle,
        tv_permutation_bitwise,
    }
}

// ------------------------------------------------------------------ fedprox

#[derive(Debug)]
pub struct Prox {
    pub zero_mu_bitwise: bool,
    /// Max |∇(loss + μ/2‖θ−θ₀‖²) − ∇loss − μ(θ−θ₀)|.
    pub gradient_error: f64,
}

pub fn fed_config(strategy: Strategy, seed: u64) -> FederationConfig {
    FederationConfig {
        rounds: 2,
        local_epochs: 2,
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 5e-4,
        batch_size: 8,
        strategy,
        trimming: true,
        weighted: false,
        empty_group: EmptyGroupPolicy::CarryForward,
        seed,
        threads: 1,
    }
}

pub fn fedprox_checks(seed: u64) -> Prox {
    let mut rng = StdRng::seed_from_u64(seed);
    let ds = synthesize_dataset(4, 10, (8, 8), seed).unwrap();
    let net = Network::plain(small_arch(4)).unwrap();
    let start = net.init_params(seed);
    let part = NodePartition {
        node: 3,
        indices: (0..ds.len()).collect(),
        classes: (0..4).collect(),
    };
    let avg = local_train(&net, &start, &ds, &part, &fed_config(Strategy::Fedavg, seed), 1).unwrap();
    let prox = local_train(&net, &start, &ds, &part, &fed_config(Strategy::Fedprox { mu: 0.0 }, seed), 1).unwrap();
    let zero_mu_bitwise = avg.params.bitwise_eq(&prox.params) && avg.loss.to_bits() == prox.loss.to_bits();

    let mu = 0.3f32;
    let theta = jitter(&start, &mut rng, 0.2);
    let (x, y) = ds.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let plain = batch_gradients(&net, &theta, &x, &y, None).unwrap();
    let with = batch_gradients(&net, &theta, &x, &y, Some((&start, mu))).unwrap();
    let mut gradient_error = 0.0f64;
    for (name, g) in &with.grads {
        let base = &plain.grads[name];
        let (t, a) = (theta.get(name).unwrap(), start.get(name).unwrap());
        for i in 0..g.numel() {
            let analytic = base.data()[i] as f64 + mu as f64 * (t.data()[i] as f64 - a.data()[i] as f64);
            gradient_error = gradient_error.max((g.data()[i] as f64 - analytic).abs());
        }
    }
    Prox {
        zero_mu_bitwise,
        gradient_error,
    }
}

// ----------------------------------------------------------------- trimming

#[derive(Debug, Default)]
pub struct Trimming {
    pub rounds_completed: usize,
    /// Every (round, trimmed node, full node) pair had fewer parameters.
    pub params_smaller: bool,
    pub bytes_smaller: bool,
    /// Each round's group provenance equals the nodes holding that group's
    /// classes.
    pub provenance_exact: bool,
}

/// Six classes over four nodes; nodes 2 and 3 hold two classes each.
pub fn extreme_trimming(seed: u64, rounds: usize) -> Trimming {
    let classes = 6;
    let ds = synthesize_dataset(classes, 12, (8, 8), seed).unwrap();
    let test = synthesize_dataset(classes, 4, (8, 8), seed + 1).unwrap();
    let by_class = ds.indices_by_class();
    let holdings: Vec<Vec<usize>> = vec![(0..6).collect(), (0..6).collect(), vec![0, 1], vec![2, 3]];
    let mut taken = vec![0usize; classes];
    let parts: Vec<NodePartition> = holdings
        .iter()
        .enumerate()
        .map(|(node, cls)| {
            let mut indices = Vec::new();
            for &c in cls {
                indices.extend_from_slice(&by_class[c][taken[c]..taken[c] + 4]);
                taken[c] += 4;
            }
            indices.sort_unstable();
            NodePartition {
                node,
                indices,
                classes: cls.iter().copied().collect(),
            }
        })
        .collect();
    let arch = ArchitectureSpec::tiny_vgg([1, 8, 8], classes, [6, 6, 12]);
    let net = regulated(&arch, classes, 3);
    let mut cfg = fed_config(Strategy::Psinet, seed);
    cfg.rounds = rounds;
    cfg.local_epochs = 1;
    let mut out = Trimming {
        params_smaller: true,
        bytes_smaller: true,
        provenance_exact: true,
        ..Default::default()
    };
    let run = run_federation(&cfg, &net, &ds, &parts, &test, |report, _| {
        let full = &report.nodes[..2];
        for t in &report.nodes[2..] {
            for f in full {
                out.params_smaller &= t.params < f.params;
                out.bytes_smaller &= t.bytes_up < f.bytes_up;
            }
        }
        for k in 0..classes {
            let expect: BTreeSet<usize> = holdings
                .iter()
                .enumerate()
                .filter(|(_, cls)| cls.contains(&k))
                .map(|(n, _)| n)
                .collect();
            out.provenance_exact &= report.provenance.get(&Partition::Group(k)) == Some(&expect);
        }
        out.provenance_exact &= report.provenance.get(&Partition::Shared) == Some(&(0..4).collect());
        out.rounds_completed += 1;
        Ok(())
    });
    if run.is_err() {
        out.rounds_completed = 0;
    }
    out
}
