//! Central finite-difference oracle for every differentiable graph op.
//!
//! Each case builds a scalar function of one or more input tensors through
//! the graph, then compares the analytic gradient of each input against
//! `(f(x + h e_i) - f(x - h e_i)) / 2h` evaluated by re-running the forward
//! pass. Nothing here reuses a backward rule.

#![allow(dead_code)]

use advkit::{Activation, Graph, LossKind, NodeId, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so gradients that are numerically zero compare absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Build = dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId;

/// Max relative error between analytic and finite-difference gradients over
/// every element of every input.
pub fn check(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids);
    g.backward(out).expect("backward");
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).unwrap_or_else(|| Tensor::zeros(g.value(id).shape())))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids);
        g.value(out).item()
    };

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[k].data()[i], numeric));
        }
    }
    worst
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduces a tensor node to a scalar with fixed random weights so every
/// output element carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, x: NodeId, seed: u64) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(&mut rng, &shape, -1.0, 1.0);
    let wi = g.constant(w);
    // sum(x * w) as a dense contraction over the flattened tensor.
    let n: usize = shape.iter().product();
    let flat = g.reshape(x, &[1, n]).unwrap();
    let wcol = g.reshape(wi, &[n, 1]).unwrap();
    let zero = g.constant(Tensor::zeros(&[1]));
    let y = g.dense(flat, wcol, zero).unwrap();
    g.sum(y).unwrap()
}

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Build>,
}

/// All op cases for one seed, on random 4x4x2 images where spatial.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = |rng: &mut ChaCha8Rng| uniform(rng, &[1, 4, 4, 2], -1.0, 1.0);
    let mut out: Vec<Case> = Vec::new();

    for (name, padding) in [("conv2d_same", Padding::Same), ("conv2d_valid", Padding::Valid)] {
        out.push(Case {
            name,
            inputs: vec![img(&mut rng), uniform(&mut rng, &[3, 3, 2, 3], -0.5, 0.5), uniform(&mut rng, &[3], -0.5, 0.5)],
            build: Box::new(move |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], padding).unwrap();
                weighted_sum(g, y, seed)
            }),
        });
    }
    out.push(Case {
        name: "max_pool2x2",
        inputs: vec![img(&mut rng)],
        build: Box::new(move |g, ids| {
            let y = g.max_pool2x2(ids[0]).unwrap();
            weighted_sum(g, y, seed)
        }),
    });
    out.push(Case {
        name: "max_pool2x2_odd",
        inputs: vec![uniform(&mut rng, &[1, 3, 5, 2], -1.0, 1.0)],
        build: Box::new(move |g, ids| {
            let y = g.max_pool2x2(ids[0]).unwrap();
            weighted_sum(g, y, seed)
        }),
    });
    out.push(Case {
        name: "avg_pool2x2_odd",
        inputs: vec![uniform(&mut rng, &[1, 3, 5, 2], -1.0, 1.0)],
        build: Box::new(move |g, ids| {
            let y = g.avg_pool2x2(ids[0]).unwrap();
            weighted_sum(g, y, seed)
        }),
    });
    out.push(Case {
        name: "upsample2x2",
        inputs: vec![img(&mut rng)],
        build: Box::new(move |g, ids| {
            let y = g.upsample2x2(ids[0]).unwrap();
            weighted_sum(g, y, seed)
        }),
    });
    out.push(Case {
        name: "global_avg_pool",
        inputs: vec![img(&mut rng)],
        build: Box::new(move |g, ids| {
            let y = g.global_avg_pool(ids[0]).unwrap();
            weighted_sum(g, y, seed)
        }),
    });
    out.push(Case {
        name: "flatten_dense",
        inputs: vec![img(&mut rng), uniform(&mut rng, &[32, 5], -0.5, 0.5), uniform(&mut rng, &[5], -0.5, 0.5)],
        build: Box::new(move |g, ids| {
            let f = g.flatten(ids[0]).unwrap();
            let y = g.dense(f, ids[1], ids[2]).unwrap();
            weighted_sum(g, y, seed)
        }),
    });
    for (name, kind) in [
        ("relu", Activation::Relu),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
        ("softmax", Activation::Softmax),
    ] {
        out.push(Case {
            name,
            inputs: vec![uniform(&mut rng, &[4, 4, 2], -2.0, 2.0)],
            build: Box::new(move |g, ids| {
                let y = g.activation(ids[0], kind).unwrap();
                weighted_sum(g, y, seed)
            }),
        });
    }
    out.push(Case {
        name: "dropout",
        inputs: vec![img(&mut rng)],
        build: Box::new(move |g, ids| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(seed + 99);
            let y = g.dropout(ids[0], 0.5, &mut mask_rng).unwrap();
            weighted_sum(g, y, seed)
        }),
    });
    out.push(Case {
        name: "add_sub_affine_const",
        inputs: vec![img(&mut rng), img(&mut rng)],
        build: Box::new(move |g, ids| {
            let c = Tensor::full(&[1, 4, 4, 2], 0.25);
            let a = g.add(ids[0], ids[1]).unwrap();
            let s = g.sub(a, ids[1]).unwrap();
            let s = g.sub(s, ids[1]).unwrap();
            let s = g.add_const(s, &c).unwrap();
            let y = g.affine(s, -1.7, 0.3).unwrap();
            weighted_sum(g, y, seed)
        }),
    });
    out.push(Case {
        name: "l2_norm",
        inputs: vec![img(&mut rng)],
        build: Box::new(|g, ids| g.l2_norm(ids[0]).unwrap()),
    });
    out.push(Case {
        name: "class_margin",
        inputs: vec![uniform(&mut rng, &[3, 5], -2.0, 2.0)],
        build: Box::new(move |g, ids| {
            let m = g.class_margin(ids[0], &[0, 3, 4]).unwrap();
            weighted_sum(g, m, seed)
        }),
    });
    let probs = |rng: &mut ChaCha8Rng| uniform(rng, &[2, 4, 4, 2], 0.05, 0.95);
    let targets = probs(&mut rng);
    out.push(Case {
        name: "loss_bce",
        inputs: vec![probs(&mut rng)],
        build: Box::new(move |g, ids| g.loss(LossKind::Bce, ids[0], &targets).unwrap()),
    });
    let targets = uniform(&mut rng, &[2, 4, 4, 2], -1.0, 1.0);
    out.push(Case {
        name: "loss_mse",
        inputs: vec![uniform(&mut rng, &[2, 4, 4, 2], -1.0, 1.0)],
        build: Box::new(move |g, ids| g.loss(LossKind::Mse, ids[0], &targets).unwrap()),
    });
    let onehot = one_hot(&[2, 0, 4], 5);
    let onehot2 = onehot.clone();
    out.push(Case {
        name: "loss_cross_entropy",
        inputs: vec![uniform(&mut rng, &[3, 5], -2.0, 2.0)],
        build: Box::new(move |g, ids| {
            let p = g.activation(ids[0], Activation::Softmax).unwrap();
            g.loss(LossKind::CrossEntropy, p, &onehot).unwrap()
        }),
    });
    out.push(Case {
        name: "softmax_cross_entropy",
        inputs: vec![uniform(&mut rng, &[3, 5], -2.0, 2.0)],
        build: Box::new(move |g, ids| g.softmax_cross_entropy(ids[0], &onehot2).unwrap()),
    });
    out
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = 1.0;
    }
    t
}

/// Worst relative error per op across `seeds` seeds.
pub fn run_suite(seeds: u64) -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..seeds {
        for case in cases(seed) {
            let err = check(&case.inputs, &*case.build);
            match worst.iter_mut().find(|(n, _)| *n == case.name) {
                Some((_, w)) => *w = w.max(err),
                None => worst.push((case.name, err)),
            }
        }
    }
    worst
}
