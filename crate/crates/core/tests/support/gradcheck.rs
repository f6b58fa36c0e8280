//! Finite-difference checks of every differentiable layer against the
//! 64-bit references in the parent module.

use psinet::layers::grouped_linear_forward;
use psinet::{Tape, Tensor, Var};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use super::*;

pub const STEP: f64 = 1e-3;

/// Worst relative error over the checked inputs of one layer case.
#[derive(Debug)]
pub struct CaseResult {
    pub name: String,
    pub worst: f64,
}

fn randn(rng: &mut StdRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Values bounded away from zero, so ReLU has no kink within one step.
fn away_from_zero(rng: &mut StdRng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Pairwise distinct values at least 0.02 apart, so max pooling keeps its
/// argmax within one step.
fn distinct(rng: &mut StdRng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| -0.6 + 0.02 * i as f64).collect();
    v.shuffle(rng);
    v
}

/// Picks `[n, c, h, w]` with at most 64 elements.
fn shape4(rng: &mut StdRng, c_choices: &[usize], min_hw: usize) -> Vec<usize> {
    loop {
        let s = vec![
            rng.random_range(1..=2),
            c_choices[rng.random_range(0..c_choices.len())],
            rng.random_range(min_hw..=5),
            rng.random_range(min_hw..=5),
        ];
        if s.iter().product::<usize>() <= 64 {
            return s;
        }
    }
}

fn f32s(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Runs every layer case with shapes drawn from `seed`.
pub fn gradient_checks(seed: u64) -> Vec<CaseResult> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Vec::new();

    macro_rules! probe {
        ($sub:expr, $len:expr) => {{
            let mut r = StdRng::seed_from_u64($sub);
            randn(&mut r, $len)
        }};
    }

    for (name, stride, pad, groups) in [
        ("conv", 1usize, 1usize, 1usize),
        ("conv_strided", 2, 0, 1),
        ("grouped_conv", 1, 1, 2),
    ] {
        let xs = shape4(&mut rng, &[2, 4], 3);
        let cin = xs[1];
        let cout = 2 * groups;
        let k = if stride == 2 { 2 } else { 3 };
        let ws = vec![cout, cin / groups, k, k];
        let x = randn(&mut rng, xs.iter().product());
        let w = randn(&mut rng, ws.iter().product());
        let b = randn(&mut rng, cout);
        let sub: u64 = rng.random();
        let ys = {
            let y = conv2d(&Arr::new(xs.clone(), x.clone()), &Arr::new(ws.clone(), w.clone()), Some(&b), stride, pad, groups);
            y.data.len()
        };
        let r = probe!(sub, ys);
        let (xs2, ws2, r2) = (xs.clone(), ws.clone(), r.clone());
        out.push(check_with_probe(
            name,
            vec![(xs, x), (ws, w), (vec![cout], b)],
            move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad, groups).unwrap(),
            move |v| dot(&conv2d(&Arr::new(xs2.clone(), v[0].clone()), &Arr::new(ws2.clone(), v[1].clone()), Some(&v[2]), stride, pad, groups), &r2),
            r,
        ));
    }

    {
        let n = rng.random_range(1..=3);
        let (fin, fout) = (rng.random_range(2..=8), rng.random_range(2..=6));
        let x = randn(&mut rng, n * fin);
        let w = randn(&mut rng, fout * fin);
        let b = randn(&mut rng, fout);
        let r = probe!(rng.random(), n * fout);
        let r2 = r.clone();
        out.push(check_with_probe(
            "linear",
            vec![(vec![n, fin], x), (vec![fout, fin], w), (vec![fout], b)],
            |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap(),
            move |v| dot(&linear(&Arr::new(vec![n, fin], v[0].clone()), &Arr::new(vec![fout, fin], v[1].clone()), Some(&v[2])), &r2),
            r,
        ));
    }

    {
        // class-mapped head: classes {0,2} read block 0, {1,3} block 1
        let n = 2;
        let (groups, block, classes) = (2usize, 3usize, 4usize);
        let class_groups = vec![vec![0, 2], vec![1, 3]];
        let x = randn(&mut rng, n * groups * block);
        let w = randn(&mut rng, classes * block);
        let b = randn(&mut rng, classes);
        let r = probe!(rng.random(), n * classes);
        let r2 = r.clone();
        let cg = class_groups.clone();
        out.push(check_with_probe(
            "grouped_linear",
            vec![(vec![n, groups * block], x), (vec![classes, block], w), (vec![classes], b)],
            move |t, v| grouped_linear_forward(t, v[0], v[1], Some(v[2]), &cg, classes).unwrap(),
            move |v| {
                let mut y = vec![0.0; n * classes];
                for i in 0..n {
                    for (k, cls) in class_groups.iter().enumerate() {
                        for &c in cls {
                            let mut acc = v[2][c];
                            for j in 0..block {
                                acc += v[0][i * groups * block + k * block + j] * v[1][c * block + j];
                            }
                            y[i * classes + c] = acc;
                        }
                    }
                }
                y.iter().zip(&r2).map(|(a, b)| a * b).sum()
            },
            r,
        ));
    }

    {
        let xs = shape4(&mut rng, &[1, 2, 3], 1);
        let x = away_from_zero(&mut rng, xs.iter().product());
        let r = probe!(rng.random(), x.len());
        let (xs2, r2) = (xs.clone(), r.clone());
        out.push(check_with_probe(
            "relu",
            vec![(xs, x)],
            |t, v| t.relu(v[0]).unwrap(),
            move |v| dot(&relu(&Arr::new(xs2.clone(), v[0].clone())), &r2),
            r,
        ));
    }

    for (name, k, stride) in [("maxpool", 2usize, 2usize), ("maxpool_overlapping", 2, 1)] {
        let xs = shape4(&mut rng, &[1, 2], 2);
        let x = distinct(&mut rng, xs.iter().product());
        let ys = maxpool2d(&Arr::new(xs.clone(), x.clone()), k, stride).data.len();
        let r = probe!(rng.random(), ys);
        let (xs2, r2) = (xs.clone(), r.clone());
        out.push(check_with_probe(
            name,
            vec![(xs, x)],
            move |t, v| t.maxpool2d(v[0], k, stride).unwrap(),
            move |v| dot(&maxpool2d(&Arr::new(xs2.clone(), v[0].clone()), k, stride), &r2),
            r,
        ));
    }

    {
        let xs = shape4(&mut rng, &[2, 3], 2);
        let c = xs[1];
        let x = randn(&mut rng, xs.iter().product());
        let g: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
        let b = randn(&mut rng, c);
        let r = probe!(rng.random(), x.len());
        let (xs2, r2) = (xs.clone(), r.clone());
        out.push(check_with_probe(
            "batch_norm",
            vec![(xs, x), (vec![c], g), (vec![c], b)],
            |t, v| t.batch_norm_train(v[0], v[1], v[2]).unwrap().0,
            move |v| dot(&batch_norm(&Arr::new(xs2.clone(), v[0].clone()), &v[1], &v[2]), &r2),
            r,
        ));
    }

    {
        let xs = shape4(&mut rng, &[4], 2);
        let c = xs[1];
        let x = randn(&mut rng, xs.iter().product());
        let g: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
        let b = randn(&mut rng, c);
        let r = probe!(rng.random(), x.len());
        let (xs2, r2) = (xs.clone(), r.clone());
        out.push(check_with_probe(
            "group_norm",
            vec![(xs, x), (vec![c], g), (vec![c], b)],
            |t, v| t.group_norm(v[0], v[1], v[2], 2).unwrap(),
            move |v| dot(&group_norm(&Arr::new(xs2.clone(), v[0].clone()), &v[1], &v[2], 2), &r2),
            r,
        ));
    }

    {
        let xs = shape4(&mut rng, &[1, 2], 2);
        let x = randn(&mut rng, xs.iter().product());
        let n = xs[0];
        let f = x.len() / n;
        let r = probe!(rng.random(), x.len());
        let r2 = r.clone();
        out.push(check_with_probe(
            "flatten",
            vec![(xs, x)],
            |t, v| t.flatten(v[0]).unwrap(),
            move |v| dot(&Arr::new(vec![n, f], v[0].clone()), &r2),
            r,
        ));
    }

    {
        let (n, c) = (rng.random_range(1..=4), rng.random_range(2..=6));
        let z: Vec<f64> = randn(&mut rng, n * c).iter().map(|v| 3.0 * v).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let l2 = labels.clone();
        out.push(check_with_probe(
            "softmax_cross_entropy",
            vec![(vec![n, c], z)],
            move |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap(),
            move |v| cross_entropy(&Arr::new(vec![n, c], v[0].clone()), &l2),
            vec![1.0],
        ));
    }
    out
}

/// Compares tape gradients of `Σ r·y` with central differences of the
/// 64-bit `oracle` (which evaluates the same scalar) for every input.
/// Scalar-valued layers pass `r = [1.0]` and are differentiated directly.
fn check_with_probe(
    name: &str,
    inputs: Vec<(Vec<usize>, Vec<f64>)>,
    tape_fn: impl Fn(&mut Tape, &[Var]) -> Var,
    oracle: impl Fn(&[Vec<f64>]) -> f64,
    r: Vec<f64>,
) -> CaseResult {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, v)| tape.leaf(Tensor::new(s.clone(), f32s(v)).unwrap(), true).unwrap())
        .collect();
    let y = tape_fn(&mut tape, &vars);
    let out_shape = tape.shape(y).to_vec();
    let loss = if out_shape.iter().product::<usize>() == 1 && r.len() == 1 && out_shape.len() <= 1 {
        y
    } else {
        assert_eq!(out_shape.iter().product::<usize>(), r.len(), "{name}: probe length");
        let rv = tape.constant(Tensor::new(out_shape, f32s(&r)).unwrap()).unwrap();
        let prod = tape.mul(y, rv).unwrap();
        tape.sum(prod).unwrap()
    };
    let grads = tape.backward(loss).unwrap();
    let values: Vec<Vec<f64>> = inputs.into_iter().map(|(_, v)| v).collect();
    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let numeric = central_diff(
            |xi| {
                let mut vals = values.clone();
                vals[i] = xi.to_vec();
                oracle(&vals)
            },
            &values[i],
            STEP,
        );
        worst = worst.max(relative_error(grads.get_or_zeros(*var).data(), &numeric));
    }
    CaseResult {
        name: name.to_string(),
        worst,
    }
}
