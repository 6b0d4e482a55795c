#![allow(clippy::needless_range_loop)]

mod common;

use common::{dot, max_rel_err, random_tensor, rng};
use rand::Rng;
use scenemixer::layers::*;
use scenemixer::numerics::finite_diff_grad;
use scenemixer::Tensor;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn params(w: Tensor<f64>, b: Tensor<f64>) -> ConvParams<f64> {
    ConvParams::new(w, b)
}

/// Direct six-loop depthwise convolution with explicit bounds checks.
fn depthwise_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let d = x.dims();
    let (n, h, wd, c) = (d[0], d[1], d[2], d[3]);
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(d).unwrap();
    for s in 0..n {
        for y in 0..h {
            for xx in 0..wd {
                for ch in 0..c {
                    let mut acc = b.data()[ch];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - r;
                            let ix = xx as isize + kx as isize - r;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.get(&[ky, kx, ch]).unwrap()
                                * x.get(&[s, iy as usize, ix as usize, ch]).unwrap();
                        }
                    }
                    out.set(&[s, y, xx, ch], acc).unwrap();
                }
            }
        }
    }
    out
}

/// Standard normal CDF through the Maclaurin series of erf.
fn phi_series(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    let mut term = z;
    let mut sum = z;
    for n in 1..80 {
        term *= -z * z / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    0.5 * (1.0 + 2.0 / std::f64::consts::PI.sqrt() * sum)
}

// ---------------------------------------------------------------------------
// patch embedding

#[test]
fn patch_embed_sums_ones() {
    let x = Tensor::fill(&[1, 4, 4, 1], 1.0).unwrap();
    let layer = PatchEmbed::new(
        params(Tensor::fill(&[4, 4, 1, 1], 1.0).unwrap(), Tensor::zeros(&[1]).unwrap()),
        4,
    )
    .unwrap();
    let (y, _) = layer.forward(&x).unwrap();
    assert_eq!(y.dims(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[16.0]);
}

#[test]
fn patch_embed_grid_shapes() {
    let layer = PatchEmbed::new(
        params(Tensor::fill(&[4, 4, 1, 1], 1.0).unwrap(), Tensor::zeros(&[1]).unwrap()),
        4,
    )
    .unwrap();
    let (y, _) = layer.forward(&Tensor::<f64>::zeros(&[1, 8, 8, 1]).unwrap()).unwrap();
    assert_eq!(y.dims(), &[1, 2, 2, 1]);

    let layer = PatchEmbed::new(
        ConvParams::new(
            Tensor::<f32>::zeros(&[4, 4, 3, 128]).unwrap(),
            Tensor::zeros(&[128]).unwrap(),
        ),
        4,
    )
    .unwrap();
    let (y, _) = layer.forward(&Tensor::zeros(&[1, 64, 64, 3]).unwrap()).unwrap();
    assert_eq!(y.dims(), &[1, 16, 16, 128]);
}

#[test]
fn patch_embed_rejects_non_divisible_input() {
    let layer = PatchEmbed::new(
        params(Tensor::fill(&[4, 4, 1, 1], 1.0).unwrap(), Tensor::zeros(&[1]).unwrap()),
        4,
    )
    .unwrap();
    assert!(layer.forward(&Tensor::zeros(&[1, 6, 8, 1]).unwrap()).is_err());
}

// ---------------------------------------------------------------------------
// depthwise

#[test]
fn depthwise_counts_in_bounds_taps() {
    let x = Tensor::fill(&[1, 3, 3, 1], 1.0).unwrap();
    let layer = DepthwiseConv::new(
        params(Tensor::fill(&[3, 3, 1], 1.0).unwrap(), Tensor::zeros(&[1]).unwrap()),
        3,
    )
    .unwrap();
    let (y, _) = layer.forward(&x).unwrap();
    assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn depthwise_channels_are_independent() {
    let mut r = rng(11);
    let x = random_tensor(&mut r, &[1, 4, 4, 2], 1.0);
    let layer = DepthwiseConv::new(
        params(random_tensor(&mut r, &[3, 3, 2], 1.0), random_tensor(&mut r, &[2], 1.0)),
        3,
    )
    .unwrap();
    let (base, _) = layer.forward(&x).unwrap();
    let mut xp = x.clone();
    for y in 0..4 {
        for xx in 0..4 {
            let v = xp.get(&[0, y, xx, 1]).unwrap();
            xp.set(&[0, y, xx, 1], v + 0.5).unwrap();
        }
    }
    let (pert, _) = layer.forward(&xp).unwrap();
    for y in 0..4 {
        for xx in 0..4 {
            assert_eq!(base.get(&[0, y, xx, 0]), pert.get(&[0, y, xx, 0]));
            assert_ne!(base.get(&[0, y, xx, 1]), pert.get(&[0, y, xx, 1]));
        }
    }
}

#[test]
fn depthwise_matches_direct_loops() {
    for (seed, k) in [(21, 3), (22, 5), (23, 3), (24, 5)] {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[1, 5, 5, 2], 1.0);
        let w = random_tensor(&mut r, &[k, k, 2], 1.0);
        let b = random_tensor(&mut r, &[2], 1.0);
        let layer = DepthwiseConv::new(params(w.clone(), b.clone()), k).unwrap();
        let (y, _) = layer.forward(&x).unwrap();
        let oracle = depthwise_oracle(&x, &w, &b, k);
        for (a, o) in y.data().iter().zip(oracle.data()) {
            assert!((a - o).abs() < 1e-6);
        }
    }
}

#[test]
fn depthwise_is_translation_equivariant_in_interior() {
    let mut r = rng(31);
    let (h, w, k) = (9usize, 9usize, 3usize);
    let x = random_tensor(&mut r, &[1, h, w, 2], 1.0);
    // Shift right by one column; column 0 is filled with fresh values.
    let mut shifted = x.clone();
    for y in 0..h {
        for xx in 1..w {
            for c in 0..2 {
                shifted.set(&[0, y, xx, c], x.get(&[0, y, xx - 1, c]).unwrap()).unwrap();
            }
        }
        for c in 0..2 {
            shifted.set(&[0, y, 0, c], r.random_range(-1.0..1.0)).unwrap();
        }
    }
    let layer = DepthwiseConv::new(
        params(random_tensor(&mut r, &[k, k, 2], 1.0), random_tensor(&mut r, &[2], 1.0)),
        k,
    )
    .unwrap();
    let (a, _) = layer.forward(&x).unwrap();
    let (b, _) = layer.forward(&shifted).unwrap();
    let rad = k / 2;
    for y in rad..h - rad {
        for xx in rad..w - rad - 1 {
            for c in 0..2 {
                let lhs = a.get(&[0, y, xx, c]).unwrap();
                let rhs = b.get(&[0, y, xx + 1, c]).unwrap();
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn depthwise_rejects_even_kernel_and_channel_mismatch() {
    assert!(DepthwiseConv::new(
        params(Tensor::zeros(&[2, 2, 1]).unwrap(), Tensor::zeros(&[1]).unwrap()),
        2
    )
    .is_err());
    let layer = DepthwiseConv::new(
        params(Tensor::zeros(&[3, 3, 2]).unwrap(), Tensor::zeros(&[2]).unwrap()),
        3,
    )
    .unwrap();
    assert!(layer.forward(&Tensor::zeros(&[1, 3, 3, 3]).unwrap()).is_err());
}

// ---------------------------------------------------------------------------
// pointwise

#[test]
fn pointwise_examples() {
    let x = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
    let layer = PointwiseConv::new(params(
        Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap(),
        Tensor::zeros(&[2]).unwrap(),
    ))
    .unwrap();
    assert_eq!(layer.forward(&x).unwrap().0.data(), &[3.0, -1.0]);

    let mut r = rng(41);
    let x = random_tensor(&mut r, &[2, 3, 3, 4], 1.0);
    let mut eye = Tensor::zeros(&[4, 4]).unwrap();
    for i in 0..4 {
        eye.set(&[i, i], 1.0).unwrap();
    }
    let id = PointwiseConv::new(params(eye, Tensor::zeros(&[4]).unwrap())).unwrap();
    assert_eq!(id.forward(&x).unwrap().0, x);
}

#[test]
fn pointwise_commutes_with_spatial_permutation() {
    let mut r = rng(42);
    let (h, w, c) = (3, 4, 3);
    let x = random_tensor(&mut r, &[1, h, w, c], 1.0);
    let layer = PointwiseConv::new(params(
        random_tensor(&mut r, &[c, 5], 1.0),
        random_tensor(&mut r, &[5], 1.0),
    ))
    .unwrap();
    let mut perm: Vec<usize> = (0..h * w).collect();
    for i in (1..perm.len()).rev() {
        let j = r.random_range(0..=i);
        perm.swap(i, j);
    }
    let permute = |t: &Tensor<f64>| {
        let ch = t.dims()[3];
        let mut data = Vec::with_capacity(t.len());
        for &p in &perm {
            data.extend_from_slice(&t.data()[p * ch..][..ch]);
        }
        Tensor::from_vec(t.dims(), data).unwrap()
    };
    let a = permute(&layer.forward(&x).unwrap().0);
    let b = layer.forward(&permute(&x)).unwrap().0;
    assert_eq!(a, b);
}

#[test]
fn pointwise_rejects_channel_mismatch() {
    let layer = PointwiseConv::new(params(
        Tensor::zeros(&[3, 2]).unwrap(),
        Tensor::zeros(&[2]).unwrap(),
    ))
    .unwrap();
    assert!(layer.forward(&Tensor::zeros(&[1, 2, 2, 2]).unwrap()).is_err());
}

// ---------------------------------------------------------------------------
// gelu

#[test]
fn gelu_values() {
    let x = Tensor::from_vec(&[3], vec![0.0, 1.0, -10.0]).unwrap();
    let (y, _) = gelu(&x);
    assert_eq!(y.data()[0], 0.0);
    let expected = phi_series(1.0);
    assert!((expected - 0.841_344_7).abs() < 1e-6);
    assert!((y.data()[1] - expected).abs() < 1e-6);
    assert!(y.data()[2].abs() < 1e-9);
}

// ---------------------------------------------------------------------------
// batch norm

#[test]
fn batch_norm_two_values() {
    let mut bn = BatchNorm::<f64>::new(1, 0.99, 1e-3).unwrap();
    let x = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
    let (y, _) = bn.forward(&x, Mode::Train).unwrap();
    let e = 1.0 / (1.0f64 + 1e-3).sqrt();
    assert!((y.data()[0] + 0.99950).abs() < 1e-5);
    assert!((y.data()[0] + e).abs() < 1e-12);
    assert!((y.data()[1] - e).abs() < 1e-12);
    // running stats: 0.99 * 0 + 0.01 * 2, 0.99 * 1 + 0.01 * 2 (unbiased variance of {1, 3})
    assert!((bn.running_mean.data()[0] - 0.02).abs() < 1e-12);
    assert!((bn.running_var.data()[0] - 1.01).abs() < 1e-12);
}

#[test]
fn batch_norm_constant_channel_is_zero() {
    let mut bn = BatchNorm::<f64>::new(1, 0.99, 1e-3).unwrap();
    let x = Tensor::fill(&[2, 2, 2, 1], 4.2).unwrap();
    let (y, _) = bn.forward(&x, Mode::Train).unwrap();
    assert!(y.data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn batch_norm_infer_with_unit_stats() {
    let mut bn = BatchNorm::<f64>::new(3, 0.99, 1e-3).unwrap();
    let mut r = rng(51);
    let x = random_tensor(&mut r, &[2, 2, 2, 3], 2.0);
    let (y, _) = bn.forward(&x, Mode::Infer).unwrap();
    let s = (1.0f64 + 1e-3).sqrt();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b / s).abs() < 1e-12);
    }
    assert_eq!(bn.running_var.data(), &[1.0; 3]);
}

#[test]
fn batch_norm_train_needs_two_values() {
    let mut bn = BatchNorm::<f64>::new(2, 0.99, 1e-3).unwrap();
    assert!(bn.forward(&Tensor::zeros(&[1, 1, 1, 2]).unwrap(), Mode::Train).is_err());
}

#[test]
fn batch_norm_output_moments() {
    let eps = 1e-3;
    for seed in SEEDS {
        let mut r = rng(60 + seed);
        let (m, c) = (4 * 3 * 3, 3);
        let mut x = random_tensor(&mut r, &[4, 3, 3, c], 3.0);
        // Rescale every channel to exactly unit population variance.
        for ch in 0..c {
            let vals: Vec<f64> = (0..m).map(|i| x.data()[i * c + ch]).collect();
            let mu = vals.iter().sum::<f64>() / m as f64;
            let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m as f64;
            for i in 0..m {
                x.data_mut()[i * c + ch] = 5.0 + (vals[i] - mu) / var.sqrt();
            }
        }
        let mut bn = BatchNorm::<f64>::new(c, 0.99, eps).unwrap();
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = (0..m).map(|i| y.data()[i * c + ch]).collect();
            let mu = vals.iter().sum::<f64>() / m as f64;
            let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m as f64;
            let target = 1.0 / (1.0 + eps);
            assert!(mu.abs() < 1e-6);
            assert!((var / target - 1.0).abs() < 1e-5, "var {var} target {target}");
        }
    }
}

// ---------------------------------------------------------------------------
// pooling, dense, softmax

#[test]
fn pooling_examples() {
    let x = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(global_avg_pool(&x).unwrap().0.data(), &[2.5]);
    let x = Tensor::fill(&[2, 3, 3, 2], -1.75).unwrap();
    assert!(global_avg_pool(&x).unwrap().0.data().iter().all(|&v| v == -1.75));
    let mut r = rng(71);
    let x = random_tensor(&mut r, &[3, 4, 5, 6], 1.0);
    assert_eq!(global_avg_pool(&x).unwrap().0, x.reduce_mean(&[1, 2]).unwrap());
}

#[test]
fn dense_examples() {
    let layer = Dense::new(params(
        Tensor::from_vec(&[2, 2], vec![2.0, 3.0, 5.0, 7.0]).unwrap(),
        Tensor::fill(&[2], 1.0).unwrap(),
    ))
    .unwrap();
    let x = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
    assert_eq!(layer.forward(&x).unwrap().0.data(), &[3.0, 4.0]);
    assert!(layer.forward(&Tensor::zeros(&[1, 3]).unwrap()).is_err());
}

#[test]
fn dense_matches_double_loop() {
    let mut r = rng(72);
    let (n, f, k) = (3, 5, 4);
    let x = random_tensor(&mut r, &[n, f], 1.0);
    let w = random_tensor(&mut r, &[f, k], 1.0);
    let b = random_tensor(&mut r, &[k], 1.0);
    let layer = Dense::new(params(w.clone(), b.clone())).unwrap();
    let (y, _) = layer.forward(&x).unwrap();
    for i in 0..n {
        for j in 0..k {
            let mut acc = b.data()[j];
            for q in 0..f {
                acc += x.get(&[i, q]).unwrap() * w.get(&[q, j]).unwrap();
            }
            assert!((y.get(&[i, j]).unwrap() - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    let (y, _) = softmax(&Tensor::<f64>::zeros(&[1, 10]).unwrap()).unwrap();
    assert!(y.data().iter().all(|v| (v - 0.1).abs() < 1e-15));
    let (y, _) = softmax(&Tensor::from_vec(&[1, 2], vec![1000.0f32, 1000.0]).unwrap()).unwrap();
    assert_eq!(y.data(), &[0.5, 0.5]);

    let mut r = rng(73);
    let x = random_tensor(&mut r, &[4, 6], 5.0);
    let shifted = x.map(|v| v + 17.25);
    let (a, _) = softmax(&x).unwrap();
    let (b, _) = softmax(&shifted).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_keep_argmax() {
    let mut r = rng(74);
    for _ in 0..20 {
        let x = random_tensor(&mut r, &[3, 7], 20.0).cast::<f32>();
        let (y, _) = softmax(&x).unwrap();
        for (xr, yr) in x.data().chunks(7).zip(y.data().chunks(7)) {
            let s: f32 = yr.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert_eq!(argmax(xr), argmax(yr));
        }
    }
}

#[test]
fn argmax_ties_go_low() {
    assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
    assert_eq!(argmax(&[0.5, 0.5]), 0);
}

// ---------------------------------------------------------------------------
// backward passes

#[test]
fn dense_bias_grad_is_column_sum() {
    let mut r = rng(81);
    let layer = Dense::new(params(random_tensor(&mut r, &[3, 2], 1.0), Tensor::zeros(&[2]).unwrap())).unwrap();
    let x = random_tensor(&mut r, &[5, 3], 1.0);
    let (y, cache) = layer.forward(&x).unwrap();
    let (_, g) = layer.backward(cache, &y.ones_like()).unwrap();
    assert_eq!(g.bias.data(), &[5.0, 5.0]);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut r = rng(82);
    let x = random_tensor(&mut r, &[2, 4, 4, 3], 1.0);

    let pe = PatchEmbed::new(params(random_tensor(&mut r, &[2, 2, 3, 4], 1.0), random_tensor(&mut r, &[4], 1.0)), 2).unwrap();
    let (y, c) = pe.forward(&x).unwrap();
    let (dx, g) = pe.backward(c, &y.zeros_like()).unwrap();
    assert!(dx.data().iter().chain(g.weight.data()).chain(g.bias.data()).all(|&v| v == 0.0));

    let dw = DepthwiseConv::new(params(random_tensor(&mut r, &[3, 3, 3], 1.0), random_tensor(&mut r, &[3], 1.0)), 3).unwrap();
    let (y, c) = dw.forward(&x).unwrap();
    let (dx, g) = dw.backward(c, &y.zeros_like()).unwrap();
    assert!(dx.data().iter().chain(g.weight.data()).chain(g.bias.data()).all(|&v| v == 0.0));

    let mut bn = BatchNorm::new(3, 0.99, 1e-3).unwrap();
    let (y, c) = bn.forward(&x, Mode::Train).unwrap();
    let (dx, g) = bn.backward(c, &y.zeros_like()).unwrap();
    assert!(dx.data().iter().chain(g.gamma.data()).chain(g.beta.data()).all(|&v| v == 0.0));

    let (y, c) = gelu(&x);
    assert!(gelu_backward(c, &y.zeros_like()).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_wrong_upstream_shape() {
    let layer = PointwiseConv::new(params(Tensor::zeros(&[2, 3]).unwrap(), Tensor::zeros(&[3]).unwrap())).unwrap();
    let (_, cache) = layer.forward(&Tensor::zeros(&[1, 2, 2, 2]).unwrap()).unwrap();
    assert!(layer.backward(cache, &Tensor::zeros(&[1, 2, 2, 2]).unwrap()).is_err());
}

fn check(name: &str, analytic: &Tensor<f64>, numeric: &Tensor<f64>) {
    let err = max_rel_err(analytic, numeric);
    assert!(err < TOL, "{name}: max relative error {err:e}");
}

#[test]
fn patch_embed_gradients() {
    for seed in SEEDS {
        let mut r = rng(100 + seed);
        let x = random_tensor(&mut r, &[2, 4, 6, 2], 1.0);
        let w = random_tensor(&mut r, &[2, 2, 2, 3], 1.0);
        let b = random_tensor(&mut r, &[3], 1.0);
        let layer = PatchEmbed::new(params(w.clone(), b.clone()), 2).unwrap();
        let (y, cache) = layer.forward(&x).unwrap();
        let probe = random_tensor(&mut r, y.dims(), 1.0);
        let (dx, g) = layer.backward(cache, &probe).unwrap();

        let nx = finite_diff_grad(|t| dot(&layer.forward(t).unwrap().0, &probe), &x, H).unwrap();
        check("patch dx", &dx, &nx);
        let nw = finite_diff_grad(
            |t| dot(&PatchEmbed::new(params(t.clone(), b.clone()), 2).unwrap().forward(&x).unwrap().0, &probe),
            &w,
            H,
        )
        .unwrap();
        check("patch dw", &g.weight, &nw);
        let nb = finite_diff_grad(
            |t| dot(&PatchEmbed::new(params(w.clone(), t.clone()), 2).unwrap().forward(&x).unwrap().0, &probe),
            &b,
            H,
        )
        .unwrap();
        check("patch db", &g.bias, &nb);
    }
}

#[test]
fn depthwise_gradients() {
    for seed in SEEDS {
        for k in [3, 5] {
            let mut r = rng(200 + seed);
            let x = random_tensor(&mut r, &[2, 4, 5, 3], 1.0);
            let w = random_tensor(&mut r, &[k, k, 3], 1.0);
            let b = random_tensor(&mut r, &[3], 1.0);
            let layer = DepthwiseConv::new(params(w.clone(), b.clone()), k).unwrap();
            let (y, cache) = layer.forward(&x).unwrap();
            let probe = random_tensor(&mut r, y.dims(), 1.0);
            let (dx, g) = layer.backward(cache, &probe).unwrap();
            let nx = finite_diff_grad(|t| dot(&layer.forward(t).unwrap().0, &probe), &x, H).unwrap();
            check("depthwise dx", &dx, &nx);
            let nw = finite_diff_grad(
                |t| dot(&DepthwiseConv::new(params(t.clone(), b.clone()), k).unwrap().forward(&x).unwrap().0, &probe),
                &w,
                H,
            )
            .unwrap();
            check("depthwise dw", &g.weight, &nw);
            let nb = finite_diff_grad(
                |t| dot(&DepthwiseConv::new(params(w.clone(), t.clone()), k).unwrap().forward(&x).unwrap().0, &probe),
                &b,
                H,
            )
            .unwrap();
            check("depthwise db", &g.bias, &nb);
        }
    }
}

#[test]
fn pointwise_and_dense_gradients() {
    for seed in SEEDS {
        let mut r = rng(300 + seed);
        let x = random_tensor(&mut r, &[2, 3, 3, 4], 1.0);
        let w = random_tensor(&mut r, &[4, 5], 1.0);
        let b = random_tensor(&mut r, &[5], 1.0);
        let layer = PointwiseConv::new(params(w.clone(), b.clone())).unwrap();
        let (y, cache) = layer.forward(&x).unwrap();
        let probe = random_tensor(&mut r, y.dims(), 1.0);
        let (dx, g) = layer.backward(cache, &probe).unwrap();
        let nx = finite_diff_grad(|t| dot(&layer.forward(t).unwrap().0, &probe), &x, H).unwrap();
        check("pointwise dx", &dx, &nx);
        let nw = finite_diff_grad(
            |t| dot(&PointwiseConv::new(params(t.clone(), b.clone())).unwrap().forward(&x).unwrap().0, &probe),
            &w,
            H,
        )
        .unwrap();
        check("pointwise dw", &g.weight, &nw);
        let nb = finite_diff_grad(
            |t| dot(&PointwiseConv::new(params(w.clone(), t.clone())).unwrap().forward(&x).unwrap().0, &probe),
            &b,
            H,
        )
        .unwrap();
        check("pointwise db", &g.bias, &nb);

        let xd = random_tensor(&mut r, &[3, 4], 1.0);
        let layer = Dense::new(params(w.clone(), b.clone())).unwrap();
        let (y, cache) = layer.forward(&xd).unwrap();
        let probe = random_tensor(&mut r, y.dims(), 1.0);
        let (dx, g) = layer.backward(cache, &probe).unwrap();
        let nx = finite_diff_grad(|t| dot(&layer.forward(t).unwrap().0, &probe), &xd, H).unwrap();
        check("dense dx", &dx, &nx);
        let nw = finite_diff_grad(
            |t| dot(&Dense::new(params(t.clone(), b.clone())).unwrap().forward(&xd).unwrap().0, &probe),
            &w,
            H,
        )
        .unwrap();
        check("dense dw", &g.weight, &nw);
    }
}

#[test]
fn gelu_pool_softmax_gradients() {
    for seed in SEEDS {
        let mut r = rng(400 + seed);
        let x = random_tensor(&mut r, &[2, 3, 3, 2], 3.0);
        let (y, cache) = gelu(&x);
        let probe = random_tensor(&mut r, y.dims(), 1.0);
        let dx = gelu_backward(cache, &probe).unwrap();
        let nx = finite_diff_grad(|t| dot(&gelu(t).0, &probe), &x, H).unwrap();
        check("gelu", &dx, &nx);

        let (y, cache) = global_avg_pool(&x).unwrap();
        let probe = random_tensor(&mut r, y.dims(), 1.0);
        let dx = global_avg_pool_backward(cache, &probe).unwrap();
        let nx = finite_diff_grad(|t| dot(&global_avg_pool(t).unwrap().0, &probe), &x, H).unwrap();
        check("pool", &dx, &nx);

        let logits = random_tensor(&mut r, &[3, 5], 3.0);
        let (y, cache) = softmax(&logits).unwrap();
        let probe = random_tensor(&mut r, y.dims(), 1.0);
        let dx = softmax_backward(cache, &probe).unwrap();
        let nx = finite_diff_grad(|t| dot(&softmax(t).unwrap().0, &probe), &logits, H).unwrap();
        check("softmax", &dx, &nx);
    }
}

#[test]
fn batch_norm_gradients() {
    for seed in SEEDS {
        for mode in [Mode::Train, Mode::Infer] {
            let mut r = rng(500 + seed);
            let x = random_tensor(&mut r, &[2, 2, 3, 3], 2.0);
            let mut bn = BatchNorm::<f64>::new(3, 0.9, 1e-3).unwrap();
            bn.gamma = random_tensor(&mut r, &[3], 2.0);
            bn.beta = random_tensor(&mut r, &[3], 1.0);
            bn.running_mean = random_tensor(&mut r, &[3], 1.0);
            bn.running_var = random_tensor(&mut r, &[3], 1.0).map(|v| v.abs() + 0.5);
            let frozen = bn.clone();
            let (y, cache) = bn.forward(&x, mode).unwrap();
            let probe = random_tensor(&mut r, y.dims(), 1.0);
            let (dx, g) = frozen.backward(cache, &probe).unwrap();

            let eval = |b: &BatchNorm<f64>, t: &Tensor<f64>| dot(&b.clone().forward(t, mode).unwrap().0, &probe);
            let nx = finite_diff_grad(|t| eval(&frozen, t), &x, H).unwrap();
            check("bn dx", &dx, &nx);
            let ng = finite_diff_grad(
                |t| {
                    let mut b = frozen.clone();
                    b.gamma = t.clone();
                    eval(&b, &x)
                },
                &frozen.gamma,
                H,
            )
            .unwrap();
            check("bn dgamma", &g.gamma, &ng);
            let nb = finite_diff_grad(
                |t| {
                    let mut b = frozen.clone();
                    b.beta = t.clone();
                    eval(&b, &x)
                },
                &frozen.beta,
                H,
            )
            .unwrap();
            check("bn dbeta", &g.beta, &nb);
        }
    }
}
