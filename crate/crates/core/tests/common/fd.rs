//! Central finite differences against the tape, in f64.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resroute::arch::ArchConfig;
use resroute::cost::CostModel;
use resroute::gumbel::{gumbel_softmax, sample_gumbel};
use resroute::tensor::{lstm_step, Graph, LstmWeights, Tensor};
use resroute::train::{loss_acc, loss_flops, loss_uni, total_loss, LossWeights};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 10;

type Build = dyn for<'g> Fn(&'g Graph, &[Tensor<'g>]) -> Tensor<'g>;

/// Inputs are drawn away from zero so ReLU kinks and the pole of `recip`
/// stay outside the stencil.
fn draw(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Scalar objective `Σ w ⊙ f(x)` with fixed random `w`, so every output
/// entry contributes.
fn objective<'g>(g: &'g Graph, y: Tensor<'g>, w: &[f64]) -> Tensor<'g> {
    let w = g.constant(w.to_vec(), &y.shape()).unwrap();
    y.mul(&w).unwrap().sum()
}

fn eval(shapes: &[Vec<usize>], data: &[Vec<f64>], w: &[f64], f: &Build) -> f64 {
    let g = Graph::new();
    let xs: Vec<Tensor> = shapes
        .iter()
        .zip(data)
        .map(|(s, d)| g.param(d.clone(), s).unwrap())
        .collect();
    let y = f(&g, &xs);
    objective(&g, y, w).item()
}

/// Largest relative error over all input entries.
fn max_rel_error(shapes: &[Vec<usize>], seed: u64, positive: bool, f: &Build) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| {
            let v = draw(&mut rng, s.iter().product());
            if positive {
                v.into_iter().map(f64::abs).collect()
            } else {
                v
            }
        })
        .collect();

    let g = Graph::new();
    let xs: Vec<Tensor> = shapes
        .iter()
        .zip(&data)
        .map(|(s, d)| g.param(d.clone(), s).unwrap())
        .collect();
    let y = f(&g, &xs);
    let w = draw(&mut rng, y.numel());
    objective(&g, y, &w).backward().unwrap();
    let analytic: Vec<Vec<f64>> = xs.iter().map(|x| x.grad_or_zero()).collect();

    let mut worst = 0.0f64;
    for (i, d) in data.iter().enumerate() {
        for j in 0..d.len() {
            let mut plus = data.clone();
            plus[i][j] += EPS;
            let mut minus = data.clone();
            minus[i][j] -= EPS;
            let numeric = (eval(shapes, &plus, &w, f) - eval(shapes, &minus, &w, f)) / (2.0 * EPS);
            let a = analytic[i][j];
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

fn check(name: &str, shapes: &[&[usize]], f: &Build) {
    check_with(name, shapes, false, f);
}

fn check_with(name: &str, shapes: &[&[usize]], positive: bool, f: &Build) {
    let shapes: Vec<Vec<usize>> = shapes.iter().map(|s| s.to_vec()).collect();
    for seed in 0..SEEDS {
        let e = max_rel_error(&shapes, seed, positive, f);
        let mut w = WORST.lock().unwrap();
        w.0 = w.0.max(e);
        w.1 += 1;
        drop(w);
        assert!(e < TOL, "{name}, seed {seed}: relative error {e:.3e}");
    }
}

static WORST: Mutex<(f64, usize)> = Mutex::new((0.0, 0));

/// Largest relative error seen so far and the number of (check, seed) runs.
pub fn worst() -> (f64, usize) {
    *WORST.lock().unwrap()
}

pub fn elementwise_and_reductions() {
    check("add", &[&[5], &[5]], &|_, x| x[0].add(&x[1]).unwrap());
    check("sub", &[&[5], &[5]], &|_, x| x[0].sub(&x[1]).unwrap());
    check("mul", &[&[2, 3], &[2, 3]], &|_, x| x[0].mul(&x[1]).unwrap());
    check("scale", &[&[4]], &|_, x| x[0].scale(-1.7));
    check("scale_by", &[&[4], &[1]], &|_, x| x[0].scale_by(&x[1]).unwrap());
    check("sum", &[&[3, 2]], &|_, x| x[0].sum());
    check("mean", &[&[3, 2]], &|_, x| x[0].mean());
    check("relu", &[&[8]], &|_, x| x[0].relu());
    check("sigmoid", &[&[8]], &|_, x| x[0].sigmoid());
    check("tanh", &[&[8]], &|_, x| x[0].tanh());
    check_with("recip", &[&[6]], true, &|_, x| x[0].recip());
    check("softmax", &[&[7]], &|_, x| x[0].softmax());
    check("log_softmax", &[&[7]], &|_, x| x[0].log_softmax());
}

pub fn shape_ops() {
    check("reshape", &[&[2, 3]], &|_, x| x[0].reshape(&[3, 2]).unwrap());
    check("slice", &[&[9]], &|_, x| x[0].slice(2, 4).unwrap());
    check("index", &[&[5]], &|_, x| x[0].index(3).unwrap());
    check("concat", &[&[3], &[4]], &|_, x| Tensor::concat(&[x[0], x[1]]).unwrap());
}

pub fn dense_and_convolutional_layers() {
    check("linear", &[&[3, 4], &[5, 4], &[5]], &|_, x| {
        x[0].linear(&x[1], Some(&x[2])).unwrap()
    });
    check("linear_vector", &[&[4], &[2, 4]], &|_, x| x[0].linear(&x[1], None).unwrap());
    check("conv2d", &[&[2, 2, 5, 5], &[3, 2, 3, 3]], &|_, x| {
        x[0].conv2d(&x[1], 2, 1).unwrap()
    });
    check("conv2d_stride1", &[&[1, 1, 4, 4], &[2, 1, 3, 3]], &|_, x| {
        x[0].conv2d(&x[1], 1, 1).unwrap()
    });
    check("add_channel_bias", &[&[2, 3, 2, 2], &[3]], &|_, x| {
        x[0].add_channel_bias(&x[1]).unwrap()
    });
    check("avg_pool2d", &[&[1, 2, 4, 4]], &|_, x| x[0].avg_pool2d(2).unwrap());
    check("resample", &[&[1, 1, 8, 8]], &|_, x| x[0].resample(3, 3).unwrap());
    check("global_avg_pool", &[&[2, 3, 3, 3]], &|_, x| x[0].global_avg_pool().unwrap());
}

pub fn recurrent_cell() {
    // x, h, c, w_ih, w_hh, bias for hidden 3 and input 4.
    check(
        "lstm_step",
        &[&[4], &[3], &[3], &[12, 4], &[12, 3], &[12]],
        &|_, x| {
            let p = LstmWeights {
                w_ih: x[3],
                w_hh: x[4],
                bias: x[5],
            };
            let (h, c) = lstm_step(&x[0], &x[1], &x[2], &p).unwrap();
            Tensor::concat(&[h, c]).unwrap()
        },
    );
}

pub fn gumbel_relaxation() {
    for tau in [0.5, 1.0, 5.0] {
        check(&format!("gumbel_softmax tau {tau}"), &[&[7]], &move |_, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let noise = sample_gumbel(&mut rng, 7);
            gumbel_softmax(&x[0].log_softmax(), &noise, tau).unwrap()
        });
    }
}

pub fn loss_terms() {
    check("cross_entropy", &[&[6]], &|_, x| x[0].cross_entropy(4).unwrap());
    check("loss_acc", &[&[6]], &|_, x| loss_acc(&x[0], 2).unwrap());
    check("loss_flops", &[&[7], &[7], &[7]], &|_, x| {
        let costs = CostModel::paper(&ArchConfig::default()).unwrap();
        let pis: Vec<Tensor> = x.iter().map(|z| z.softmax()).collect();
        let (a, b) = pis.split_at(2);
        loss_flops(&[a, b], &costs, 16).unwrap()
    });
    check("loss_uni", &[&[7]], &|_, x| loss_uni(&x[0].softmax()).unwrap());
    check("total_loss", &[&[6], &[7], &[7]], &|_, x| {
        let costs = CostModel::paper(&ArchConfig::default()).unwrap();
        let pi = x[1].softmax();
        let acc = loss_acc(&x[0], 1).unwrap();
        let flops = loss_flops(&[&[pi]], &costs, 4).unwrap();
        let uni = loss_uni(&x[2].softmax()).unwrap();
        total_loss(&acc, &flops, &uni, &LossWeights::default()).unwrap()
    });
}

pub fn composite_pipeline() {
    // conv → pool → lstm_step → linear → cross-entropy
    check(
        "composite",
        &[
            &[1, 1, 6, 6],
            &[4, 1, 3, 3],
            &[8, 4],
            &[8, 2],
            &[8],
            &[3, 2],
        ],
        &|g, x| {
            let f = x[0]
                .conv2d(&x[1], 2, 1)
                .unwrap()
                .relu()
                .global_avg_pool()
                .unwrap()
                .reshape(&[4])
                .unwrap();
            let p = LstmWeights {
                w_ih: x[2],
                w_hh: x[3],
                bias: x[4],
            };
            let zero = g.zeros(&[2]).unwrap();
            let (h, _) = lstm_step(&f, &zero, &zero, &p).unwrap();
            h.linear(&x[5], None).unwrap().cross_entropy(1).unwrap()
        },
    );
}

/// Every group above, in order.
pub const GROUPS: [(&str, fn()); 7] = [
    ("elementwise_and_reductions", elementwise_and_reductions),
    ("shape_ops", shape_ops),
    ("dense_and_convolutional_layers", dense_and_convolutional_layers),
    ("recurrent_cell", recurrent_cell),
    ("gumbel_relaxation", gumbel_relaxation),
    ("loss_terms", loss_terms),
    ("composite_pipeline", composite_pipeline),
];
