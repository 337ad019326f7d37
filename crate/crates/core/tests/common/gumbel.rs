//! Statistical and exactness checks of the Gumbel machinery, returning the
//! measured quantity so callers can both assert and report it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resroute::gumbel::{gumbel_max, gumbel_softmax, sample_gumbel, straight_through, GumbelSample};
use resroute::tensor::Graph;

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

fn random_categorical(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Worst L∞ gap between Gumbel-Max frequencies over `n` draws and random
/// target categoricals with K in {2, 3, 5, 7, 8}.
pub fn frequency_gap(n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for k in [2, 3, 5, 7, 8] {
        let p = random_categorical(&mut rng, k);
        let lp: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let mut counts = vec![0usize; k];
        for _ in 0..n {
            counts[gumbel_max(&lp, &sample_gumbel(&mut rng, k)).unwrap()] += 1;
        }
        for (&c, &q) in counts.iter().zip(&p) {
            worst = worst.max((c as f64 / n as f64 - q).abs());
        }
    }
    worst
}

pub fn sample_mean(n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    sample_gumbel(&mut rng, n).iter().sum::<f64>() / n as f64
}

/// Cases (out of `cases` × 3 temperatures) where the relaxation's argmax
/// differs from the Gumbel-Max index under shared noise.
pub fn argmax_mismatches(cases: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut bad = 0;
    for _ in 0..cases {
        let k = rng.random_range(2..=8);
        let p = random_categorical(&mut rng, k);
        let lp: Vec<f64> = p.iter().map(|v| v.ln()).collect();
        let noise = sample_gumbel(&mut rng, k);
        let hard = gumbel_max(&lp, &noise).unwrap();
        for tau in [0.1, 1.0, 5.0] {
            let g = Graph::new();
            let soft = gumbel_softmax(&g.constant(lp.clone(), &[k]).unwrap(), &noise, tau)
                .unwrap()
                .value();
            let best = (0..k)
                .max_by(|&a, &b| soft[a].total_cmp(&soft[b]))
                .unwrap();
            bad += usize::from(best != hard);
        }
    }
    bad
}

/// Largest gap between straight-through and soft-path logit gradients.
pub fn straight_through_gap(cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let k = 7;
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noise = sample_gumbel(&mut rng, k);
        let tau = rng.random_range(0.2..5.0);

        let grad = |hard: bool| {
            let g = Graph::new();
            let z = g.param(logits.clone(), &[k]).unwrap();
            let s = GumbelSample::new(&z.log_softmax(), &noise, tau).unwrap();
            let y = if hard { straight_through(&s).unwrap() } else { s.soft };
            let wt = g.constant(w.clone(), &[k]).unwrap();
            y.mul(&wt).unwrap().sum().backward().unwrap();
            z.grad().unwrap()
        };
        let (st, soft) = (grad(true), grad(false));
        for (a, b) in st.iter().zip(&soft) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}
