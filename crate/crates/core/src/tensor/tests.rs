use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Quadruple loop cross-correlation, single image.
fn conv_oracle(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: &[f64],
    (o, kk): (usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kk) / stride + 1;
    let ow = (w + 2 * pad - kk) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ic in 0..c {
                    for ky in 0..kk {
                        for kx in 0..kk {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x[(ic * h + iy as usize) * w + ix as usize]
                                * k[((oc * c + ic) * kk + ky) * kk + kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_zero_input_gives_zero() {
    let g = Graph::new();
    let x = g.zeros(&[1, 2, 5, 5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = g
        .constant(randn(&mut rng, 3 * 2 * 9), &[3, 2, 3, 3])
        .unwrap();
    let y = x.conv2d(&k, 1, 1).unwrap();
    assert_eq!(y.shape(), vec![1, 3, 5, 5]);
    assert!(y.value().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_unit_kernel_is_identity() {
    let g = Graph::new();
    let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
    let x = g.constant(data.clone(), &[1, 1, 4, 4]).unwrap();
    let k = g.constant(vec![1.0], &[1, 1, 1, 1]).unwrap();
    assert_eq!(x.conv2d(&k, 1, 0).unwrap().value(), data);
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let g = Graph::new();
        let xd = randn(&mut rng, 16);
        let kd = randn(&mut rng, 9);
        let x = g.constant(xd.clone(), &[1, 1, 4, 4]).unwrap();
        let k = g.constant(kd.clone(), &[1, 1, 3, 3]).unwrap();
        let y = x.conv2d(&k, stride, pad).unwrap().value();
        let want = conv_oracle(&xd, (1, 4, 4), &kd, (1, 3), stride, pad);
        assert_eq!(y.len(), want.len());
        for (a, b) in y.iter().zip(&want) {
            assert!(
                (a - b).abs() < 1e-12,
                "stride {stride} pad {pad}: {a} vs {b}"
            );
        }
    }
    // multi-channel, batched
    let g = Graph::new();
    let xd = randn(&mut rng, 2 * 3 * 6 * 5);
    let kd = randn(&mut rng, 4 * 3 * 9);
    let x = g.constant(xd.clone(), &[2, 3, 6, 5]).unwrap();
    let k = g.constant(kd.clone(), &[4, 3, 3, 3]).unwrap();
    let y = x.conv2d(&k, 2, 1).unwrap();
    assert_eq!(y.shape(), vec![2, 4, 3, 3]);
    let y = y.value();
    for s in 0..2 {
        let want = conv_oracle(&xd[s * 90..(s + 1) * 90], (3, 6, 5), &kd, (4, 3), 2, 1);
        for (a, b) in y[s * 36..(s + 1) * 36].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let g = Graph::new();
    let x = g.zeros(&[1, 2, 4, 4]).unwrap();
    let k = g.zeros(&[1, 3, 3, 3]).unwrap();
    assert!(matches!(x.conv2d(&k, 1, 0), Err(Error::Shape { .. })));
    let k = g.zeros(&[1, 2, 5, 5]).unwrap();
    assert!(matches!(x.conv2d(&k, 1, 0), Err(Error::Shape { .. })));
    let v = g.zeros(&[4]).unwrap();
    assert!(v.conv2d(&k, 1, 0).is_err());
}

#[test]
fn avg_pool_examples() {
    let g = Graph::new();
    let data: Vec<f64> = (1..=16).map(f64::from).collect();
    let x = g.constant(data.clone(), &[1, 1, 4, 4]).unwrap();
    assert_eq!(x.avg_pool2d(1).unwrap().value(), data);
    assert_eq!(x.avg_pool2d(2).unwrap().value(), vec![3.5, 5.5, 11.5, 13.5]);
    let c = g.constant(vec![2.25; 64], &[1, 1, 8, 8]).unwrap();
    for f in [1, 2, 4, 8] {
        assert!(c
            .avg_pool2d(f)
            .unwrap()
            .value()
            .iter()
            .all(|&v| (v - 2.25).abs() < 1e-15));
    }
    assert!(matches!(x.avg_pool2d(3), Err(Error::Shape { .. })));
}

#[test]
fn resample_non_integer_ratio_preserves_mean_and_constants() {
    let g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = randn(&mut rng, 32 * 32);
    let x = g.constant(d.clone(), &[1, 1, 32, 32]).unwrap();
    let y = x.resample(24, 24).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 24, 24]);
    let mx = d.iter().sum::<f64>() / 1024.0;
    let my = y.value().iter().sum::<f64>() / 576.0;
    assert!((mx - my).abs() < 1e-12);
    let c = g.constant(vec![0.7; 1024], &[1, 1, 32, 32]).unwrap();
    assert!(c
        .resample(24, 24)
        .unwrap()
        .value()
        .iter()
        .all(|v| (v - 0.7).abs() < 1e-14));
}

fn lstm_oracle(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    wih: &[f64],
    whh: &[f64],
    b: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let k = h.len();
    let d = x.len();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let pre = |gate: usize, j: usize| {
        let r = gate * k + j;
        let mut s = b[r];
        for i in 0..d {
            s += wih[r * d + i] * x[i];
        }
        for i in 0..k {
            s += whh[r * k + i] * h[i];
        }
        s
    };
    let mut hn = vec![0.0; k];
    let mut cn = vec![0.0; k];
    for j in 0..k {
        let ig = sig(pre(0, j));
        let fg = sig(pre(1, j));
        let gg = pre(2, j).tanh();
        let og = sig(pre(3, j));
        cn[j] = fg * c[j] + ig * gg;
        hn[j] = og * cn[j].tanh();
    }
    (hn, cn)
}

#[test]
fn lstm_zero_case_and_shapes() {
    let g = Graph::new();
    let (d, k) = (5, 3);
    let w = LstmWeights {
        w_ih: g.zeros(&[4 * k, d]).unwrap(),
        w_hh: g.zeros(&[4 * k, k]).unwrap(),
        bias: g.zeros(&[4 * k]).unwrap(),
    };
    let x = g.zeros(&[d]).unwrap();
    let h0 = g.zeros(&[k]).unwrap();
    let (h, c) = lstm_step(&x, &h0, &h0, &w).unwrap();
    assert_eq!(h.shape(), vec![k]);
    assert_eq!(c.shape(), vec![k]);
    assert!(h.value().iter().chain(c.value().iter()).all(|&v| v == 0.0));
    let bad = g.zeros(&[k + 1]).unwrap();
    assert!(lstm_step(&x, &bad, &h0, &w).is_err());
}

#[test]
fn lstm_matches_formula_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, k) = (4, 6);
    for _ in 0..5 {
        let g = Graph::new();
        let vals: Vec<Vec<f64>> = [d, k, k, 4 * k * d, 4 * k * k, 4 * k]
            .iter()
            .map(|&n| randn(&mut rng, n).iter().map(|v| v * 0.5).collect())
            .collect();
        let x = g.constant(vals[0].clone(), &[d]).unwrap();
        let h = g.constant(vals[1].clone(), &[k]).unwrap();
        let c = g.constant(vals[2].clone(), &[k]).unwrap();
        let w = LstmWeights {
            w_ih: g.constant(vals[3].clone(), &[4 * k, d]).unwrap(),
            w_hh: g.constant(vals[4].clone(), &[4 * k, k]).unwrap(),
            bias: g.constant(vals[5].clone(), &[4 * k]).unwrap(),
        };
        let (hn, cn) = lstm_step(&x, &h, &c, &w).unwrap();
        let (ho, co) = lstm_oracle(&vals[0], &vals[1], &vals[2], &vals[3], &vals[4], &vals[5]);
        for (a, b) in hn.value().iter().zip(&ho).chain(cn.value().iter().zip(&co)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let g = Graph::new();
    for c in [2usize, 3, 7] {
        let z = g.constant(vec![0.3; c], &[c]).unwrap();
        let l = z.cross_entropy(1).unwrap().item();
        assert!((l - (c as f64).ln()).abs() < 1e-12);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let v: Vec<f64> = randn(&mut rng, 6).iter().map(|x| x * 4.0).collect();
        let s: f64 = softmax(&v).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let label = rng.random_range(0..6);
        let naive = -(v[label].exp() / v.iter().map(|x| x.exp()).sum::<f64>()).ln();
        let z = g.constant(v, &[6]).unwrap();
        assert!((z.cross_entropy(label).unwrap().item() - naive).abs() < 1e-10);
    }
    let z = g.constant(vec![0.0; 3], &[3]).unwrap();
    assert!(matches!(z.cross_entropy(3), Err(Error::InvalidArgument(_))));
    let one = g.constant(vec![0.0], &[1]).unwrap();
    assert!(one.cross_entropy(0).is_err());
}

#[test]
fn cross_entropy_is_stable_for_large_logits() {
    let g = Graph::new();
    let z = g.param(vec![1000.0, 0.0, -1000.0], &[3]).unwrap();
    let l = z.cross_entropy(0).unwrap();
    assert!(l.item().abs() < 1e-12);
    l.backward().unwrap();
    assert!(z.grad().unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn backward_sum_gives_ones() {
    let g = Graph::new();
    let x = g.param(vec![0.1, -2.0, 3.0, 4.0], &[2, 2]).unwrap();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
}

#[test]
fn backward_independent_input_has_zero_grad() {
    let g = Graph::new();
    let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
    let y = g.param(vec![3.0], &[1]).unwrap();
    y.scale(2.0).backward().unwrap();
    assert_eq!(x.grad_or_zero(), vec![0.0, 0.0]);
    assert_eq!(y.grad().unwrap(), vec![2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let g = Graph::new();
    let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(x.scale(2.0).backward(), Err(Error::NotScalar(s)) if s == vec![2]));
}

#[test]
fn backward_accumulates_until_cleared() {
    let g = Graph::new();
    let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
    let y = x.mul(&x).unwrap().sum();
    y.backward().unwrap();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    g.zero_grad();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn backward_populates_every_reachable_param() {
    let g = Graph::new();
    let a = g.param(vec![0.5, -0.5], &[2]).unwrap();
    let b = g.param(vec![2.0, 1.0], &[2]).unwrap();
    let c = g.constant(vec![1.0, 1.0], &[2]).unwrap();
    let y = a.mul(&b).unwrap().add(&c).unwrap().tanh().sum();
    y.backward().unwrap();
    assert!(a.grad().is_some() && b.grad().is_some());
    assert!(c.grad().is_none());
}

#[test]
fn straight_through_forward_is_hard() {
    let g = Graph::new();
    let s = g.param(vec![0.2, 0.5, 0.3], &[3]).unwrap();
    let st = s.straight_through(vec![0.0, 1.0, 0.0]).unwrap();
    assert_eq!(st.value(), vec![0.0, 1.0, 0.0]);
    let w = g.constant(vec![1.0, 2.0, 3.0], &[3]).unwrap();
    st.mul(&w).unwrap().sum().backward().unwrap();
    assert_eq!(s.grad().unwrap(), vec![1.0, 2.0, 3.0]);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = g
            .constant(randn(&mut rng, 2 * 32 * 32), &[1, 2, 32, 32])
            .unwrap();
        let k = g.param(randn(&mut rng, 8 * 2 * 9), &[8, 2, 3, 3]).unwrap();
        let y = x.conv2d(&k, 2, 1).unwrap().relu().resample(12, 12).unwrap();
        let l = y
            .global_avg_pool()
            .unwrap()
            .reshape(&[8])
            .unwrap()
            .cross_entropy(3)
            .unwrap();
        l.backward().unwrap();
        (
            l.item().to_bits(),
            k.grad()
                .unwrap()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
