//! Forward oracles, algebraic properties and finite-difference gradient
//! checks for every differentiable primitive.

use cfpnet::gradcheck::{gradcheck, GradcheckOptions};
use cfpnet::ops::NormMode;
use cfpnet::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// Direct-sum 2D convolution.
fn conv2d_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
    for i in 0..n {
        for o in 0..cout {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky * dil) as isize - pad as isize;
                                let ix = (xx * stride + kx * dil) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[i, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                            }
                        }
                    }
                    out.set(&[i, o, y, xx], acc);
                }
            }
        }
    }
    out
}

/// Triple-loop 3D convolution (unit dilation).
fn conv3d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let s = x.shape();
    let (n, cin, d, h, wd) = (s[0], s[1], s[2], s[3], s[4]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let o = |len: usize| (len + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (o(d), o(h), o(wd));
    let mut out = Tensor::zeros(vec![n, cout, od, oh, ow]);
    for i in 0..n {
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * stride + kz) as isize - pad as isize;
                                        let iy = (y * stride + ky) as isize - pad as isize;
                                        let ix = (xx * stride + kx) as isize - pad as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        acc += x.at(&[i, c, iz as usize, iy as usize, ix as usize])
                                            * w.at(&[co, c, kz, ky, kx]);
                                    }
                                }
                            }
                        }
                        out.set(&[i, co, z, y, xx], acc);
                    }
                }
            }
        }
    }
    out
}

fn run_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: usize, p: usize, d: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = b.map(|b| g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, s, p, d).unwrap();
    g.value(y).clone()
}

fn run_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.conv3d(xv, wv, None, s, p).unwrap();
    g.value(y).clone()
}

fn run_deconv3d(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize, op: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.deconv3d(xv, wv, None, s, p, op).unwrap();
    g.value(y).clone()
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d} > {tol}");
}

#[test]
fn conv2d_all_ones_example() {
    let x = Tensor::ones(vec![1, 1, 3, 3]);
    let w = Tensor::ones(vec![1, 1, 3, 3]);
    let y = run_conv2d(&x, &w, None, 1, 1, 1);
    let oracle = conv2d_oracle(&x, &w, None, 1, 1, 1);
    assert_eq!(oracle.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    assert_eq!(y.data(), oracle.data());
}

#[test]
fn conv2d_pointwise_identity() {
    let x = randn(&[2, 1, 4, 5], 1);
    let w = Tensor::ones(vec![1, 1, 1, 1]);
    let b = Tensor::zeros(vec![1]);
    assert_eq!(run_conv2d(&x, &w, Some(&b), 1, 0, 1), x);
}

#[test]
fn conv2d_dilated_output_shape() {
    let x = randn(&[1, 1, 5, 5], 2);
    let w = randn(&[1, 1, 3, 3], 3);
    assert_eq!(run_conv2d(&x, &w, None, 1, 0, 2).shape(), &[1, 1, 1, 1]);
}

#[test]
fn conv2d_rejects_bad_geometry() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(vec![3, 3, 3, 3]));
    let err = g.conv2d(x, w, None, 1, 1, 1).unwrap_err().to_string();
    assert!(err.contains("2 channels") && err.contains("expects 3"), "{err}");
    let w = g.constant(Tensor::zeros(vec![1, 2, 3, 3]));
    assert!(g.conv2d(x, w, None, 1, 0, 3).is_err());
    assert!(g.conv2d(x, w, None, 0, 0, 1).is_err());
}

#[test]
fn conv2d_matches_oracle_across_geometries() {
    let mut seed = 10;
    for &(s, p, d) in &[(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 3, 3), (3, 0, 1), (1, 4, 4)] {
        seed += 1;
        let x = randn(&[2, 3, 9, 11], seed);
        let w = randn(&[4, 3, 3, 3], seed + 100);
        let b = randn(&[4], seed + 200);
        let y = run_conv2d(&x, &w, Some(&b), s, p, d);
        assert_close(&y, &conv2d_oracle(&x, &w, Some(&b), s, p, d), 1e-12);
    }
    let x = randn(&[1, 2, 6, 7], 77);
    let w = randn(&[3, 2, 1, 1], 78);
    assert_close(&run_conv2d(&x, &w, None, 2, 1, 1), &conv2d_oracle(&x, &w, None, 2, 1, 1), 1e-12);
}

#[test]
fn conv3d_examples() {
    let x = randn(&[1, 1, 2, 3, 4], 4);
    let w = Tensor::ones(vec![1, 1, 1, 1, 1]);
    assert_eq!(run_conv3d(&x, &w, 1, 0), x);

    let ones = Tensor::ones(vec![1, 1, 2, 2, 2]);
    let y = run_conv3d(&ones, &ones, 1, 0);
    assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
    assert_eq!(y.item(), 8.0);

    let x = randn(&[1, 1, 3, 4, 4], 5);
    let w = randn(&[1, 1, 3, 3, 3], 6);
    assert_close(&run_conv3d(&x, &w, 1, 1), &conv3d_oracle(&x, &w, 1, 1), 1e-12);

    let x = randn(&[2, 3, 5, 4, 6], 7);
    let w = randn(&[2, 3, 3, 3, 3], 8);
    assert_close(&run_conv3d(&x, &w, 2, 1), &conv3d_oracle(&x, &w, 2, 1), 1e-12);
}

#[test]
fn deconv3d_size_rule_and_identity() {
    let x = randn(&[1, 1, 2, 2, 2], 9);
    let w = randn(&[1, 1, 2, 2, 2], 10);
    assert_eq!(run_deconv3d(&x, &w, 2, 0, 0).shape(), &[1, 1, 4, 4, 4]);
    let w = Tensor::ones(vec![1, 1, 1, 1, 1]);
    assert_eq!(run_deconv3d(&x, &w, 1, 0, 0), x);

    let mut g = Graph::<f64>::new();
    let xv = g.constant(Tensor::zeros(vec![1, 1, 1, 1, 1]));
    let wv = g.constant(Tensor::zeros(vec![1, 1, 1, 1, 1]));
    assert!(g.deconv3d(xv, wv, None, 1, 1, 0).is_err());
}

/// <deconv(x), y> == <x, conv(y)> for the same weights and geometry.
fn adjoint_gap(x_shape: &[usize], cin: usize, cout: usize, k: usize, s: usize, p: usize, op: usize, seed: u64) -> f64 {
    let x = randn(x_shape, seed);
    let w = randn(&[cin, cout, k, k, k], seed + 1);
    let dx = run_deconv3d(&x, &w, s, p, op);
    let y = randn(dx.shape(), seed + 2);
    let cy = run_conv3d(&y, &w, s, p);
    assert_eq!(cy.shape(), x.shape());
    let lhs = dx.dot(&y);
    let rhs = x.dot(&cy);
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300)
}

#[test]
fn deconv3d_is_adjoint_of_conv3d() {
    assert!(adjoint_gap(&[1, 2, 2, 3, 3], 2, 3, 3, 2, 1, 1, 20) < 1e-5);
    assert!(adjoint_gap(&[2, 3, 3, 2, 4], 3, 2, 5, 2, 2, 1, 30) < 1e-5);
    assert!(adjoint_gap(&[1, 1, 2, 2, 2], 1, 1, 2, 2, 0, 0, 40) < 1e-5);
    assert!(adjoint_gap(&[1, 2, 3, 3, 3], 2, 2, 3, 1, 1, 0, 50) < 1e-5);
}

fn bilinear_oracle(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let src = |o: usize, out: usize, inp: usize| {
        if out == 1 || inp == 1 {
            0.0
        } else {
            o as f64 * (inp - 1) as f64 / (out - 1) as f64
        }
    };
    Tensor::from_fn(vec![x.shape()[0], x.shape()[1], oh, ow], |i| {
        let (plane, r) = (i / (oh * ow), i % (oh * ow));
        let (oy, ox) = (r / ow, r % ow);
        let (sy, sx) = (src(oy, oh, h), src(ox, ow, w));
        let mut acc = 0.0;
        for y in 0..h {
            for xx in 0..w {
                let wy = (1.0 - (sy - y as f64).abs()).max(0.0);
                let wx = (1.0 - (sx - xx as f64).abs()).max(0.0);
                acc += wy * wx * x.data()[plane * h * w + y * w + xx];
            }
        }
        acc
    })
}

#[test]
fn bilinear_matches_closed_form() {
    let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.bilinear_upsample2d(v, 5, 5).unwrap();
    assert_close(g.value(y), &bilinear_oracle(&x, 5, 5), 1e-14);

    let x = randn(&[2, 3, 3, 4], 60);
    let y = g.constant(x.clone());
    let y = g.bilinear_upsample2d(y, 7, 9).unwrap();
    assert_close(g.value(y), &bilinear_oracle(&x, 7, 9), 1e-12);
}

#[test]
fn trilinear_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(vec![1, 2, 2, 3, 2], 0.7));
    let y = g.trilinear_upsample3d(c, 5, 4, 3).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.7));

    let x = randn(&[1, 1, 2, 2, 2], 61);
    let v = g.constant(x.clone());
    let y = g.trilinear_upsample3d(v, 3, 3, 3).unwrap();
    let y = g.value(y).clone();
    for z in [0, 1] {
        for yy in [0, 1] {
            for xx in [0, 1] {
                assert_eq!(y.at(&[0, 0, 2 * z, 2 * yy, 2 * xx]), x.at(&[0, 0, z, yy, xx]));
            }
        }
    }
    // Closed form on the 3x3x3 grid: weights are products of 1D hat functions.
    for z in 0..3 {
        for yy in 0..3 {
            for xx in 0..3 {
                let mut acc = 0.0;
                for (a, b, c) in itertools(2) {
                    let w = |o: usize, s: usize| (1.0 - (o as f64 * 0.5 - s as f64).abs()).max(0.0);
                    acc += w(z, a) * w(yy, b) * w(xx, c) * x.at(&[0, 0, a, b, c]);
                }
                assert!((y.at(&[0, 0, z, yy, xx]) - acc).abs() < 1e-14);
            }
        }
    }
}

fn itertools(n: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..n).flat_map(move |a| (0..n).flat_map(move |b| (0..n).map(move |c| (a, b, c))))
}

#[test]
fn softmax_sums_to_one_on_every_axis() {
    let x = randn(&[2, 3, 4, 5], 70).map(|v| v * 10.0);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    for axis in 0..4 {
        let y = g.softmax(v, axis).unwrap();
        let y = g.value(y);
        let shape = y.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..shape[axis]).map(|k| y.data()[(o * shape[axis] + k) * inner + i]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        assert!(y.data().iter().all(|&p| p > 0.0));
    }
}

// ---- gradient checks (64-bit, tolerance 1e-4) ----

const TOL: f64 = 1e-4;

fn check(f: impl Fn(&mut Graph<f64>, &[cfpnet::Var]) -> cfpnet::Result<cfpnet::Var>, inputs: &[Tensor<f64>]) {
    let report = gradcheck(f, inputs, &GradcheckOptions::default()).unwrap();
    assert!(report.passed(TOL), "{report:#?}");
}

#[test]
fn gradcheck_conv2d_variants() {
    for (i, &(s, p, d)) in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1), (1, 3, 3)].iter().enumerate() {
        let seed = 100 + i as u64 * 3;
        let x = randn(&[2, 2, 7, 6], seed);
        let w = randn(&[3, 2, 3, 3], seed + 1);
        let b = randn(&[3], seed + 2);
        check(|g, v| g.conv2d(v[0], v[1], Some(v[2]), s, p, d), &[x, w, b]);
    }
}

#[test]
fn gradcheck_conv3d_and_deconv3d() {
    let x = randn(&[1, 2, 3, 4, 3], 120);
    let w = randn(&[2, 2, 3, 3, 3], 121);
    let b = randn(&[2], 122);
    check(|g, v| g.conv3d(v[0], v[1], Some(v[2]), 1, 1), &[x.clone(), w.clone(), b.clone()]);
    check(|g, v| g.conv3d(v[0], v[1], Some(v[2]), 2, 1), &[x.clone(), w.clone(), b.clone()]);
    check(|g, v| g.deconv3d(v[0], v[1], Some(v[2]), 2, 1, 1), &[x.clone(), w.clone(), b.clone()]);
    let w2 = randn(&[2, 3, 2, 2, 2], 123);
    let b3 = randn(&[3], 124);
    check(|g, v| g.deconv3d(v[0], v[1], Some(v[2]), 2, 0, 0), &[x, w2, b3]);
}

#[test]
fn gradcheck_pooling_and_resampling() {
    let x = randn(&[1, 2, 5, 7], 130);
    check(|g, v| g.avg_pool2d(v[0], 2), &[x.clone()]);
    check(|g, v| g.avg_pool2d(v[0], 3), &[x.clone()]);
    check(|g, v| g.adaptive_avg_pool2d(v[0], 2, 3), &[x.clone()]);
    check(|g, v| g.bilinear_upsample2d(v[0], 9, 10), &[x]);
    let x3 = randn(&[1, 2, 2, 3, 2], 131);
    check(|g, v| g.trilinear_upsample3d(v[0], 4, 5, 5), &[x3]);
}

#[test]
fn gradcheck_softmax_relu_concat_slice() {
    let x = randn(&[2, 4, 3], 140);
    check(|g, v| g.softmax(v[0], 1), &[x.clone()]);
    check(|g, v| g.softmax(v[0], 2), &[x]);
    // ReLU away from its kink.
    let r = randn(&[3, 5], 141).map(|v| if v.abs() < 0.1 { v.signum() * 0.5 + v } else { v });
    assert!(r.data().iter().all(|v| v.abs() > 0.1));
    check(|g, v| Ok(g.relu(v[0])), &[r]);
    let a = randn(&[1, 2, 3, 3], 142);
    let b = randn(&[1, 1, 3, 3], 143);
    check(
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            g.slice(c, &[0, 1, 1, 0], &[1, 2, 2, 3])
        },
        &[a, b],
    );
}

#[test]
fn gradcheck_batchnorm_train_and_eval() {
    let x = randn(&[2, 3, 3, 2], 150);
    let gamma = randn(&[3], 151);
    let beta = randn(&[3], 152);
    check(
        |g, v| Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, NormMode::Train)?.0),
        &[x.clone(), gamma.clone(), beta.clone()],
    );
    let mean = [0.1, -0.2, 0.3];
    let var = [1.5, 0.5, 2.0];
    check(
        |g, v| Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, NormMode::Eval { mean: &mean, var: &var })?.0),
        &[x, gamma, beta],
    );
    let x5 = randn(&[1, 2, 2, 2, 3], 153);
    check(
        |g, v| Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, NormMode::Train)?.0),
        &[x5, randn(&[2], 154), randn(&[2], 155)],
    );
}

#[test]
fn gradcheck_cost_volume_and_expectation() {
    let l = randn(&[1, 2, 2, 5], 160);
    let r = randn(&[1, 2, 2, 5], 161);
    check(|g, v| g.cost_volume(v[0], v[1], 3), &[l, r]);
    let c = randn(&[1, 1, 4, 2, 3], 162);
    check(
        |g, v| {
            let neg = g.scale(v[0], -1.0);
            let p = g.softmax(neg, 2)?;
            g.expectation(p, 2)
        },
        &[c],
    );
}

#[test]
fn gradcheck_smooth_l1_loss_away_from_unit_residual() {
    let target = randn(&[1, 3, 4], 170);
    let pred = randn(&[1, 3, 4], 171).map(|v| v * 2.0);
    let pred = Tensor::from_fn(vec![1, 3, 4], |i| {
        let r = pred.data()[i] - target.data()[i];
        if (r.abs() - 1.0).abs() < 0.05 {
            pred.data()[i] + 0.2
        } else {
            pred.data()[i]
        }
    });
    let mask: Vec<bool> = (0..12).map(|i| i % 5 != 0).collect();
    check(|g, v| g.smooth_l1_loss(v[0], &target, &mask), &[pred]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv2d_is_linear_in_input(
        seed in 0u64..1000,
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        stride in 1usize..3,
        dilation in 1usize..3,
    ) {
        let x = randn(&[1, 2, 6, 7], seed);
        let y = randn(&[1, 2, 6, 7], seed + 1);
        let w = randn(&[3, 2, 3, 3], seed + 2);
        let mix = Tensor::from_fn(vec![1, 2, 6, 7], |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = run_conv2d(&mix, &w, None, stride, dilation, dilation);
        let fx = run_conv2d(&x, &w, None, stride, dilation, dilation);
        let fy = run_conv2d(&y, &w, None, stride, dilation, dilation);
        let rhs = Tensor::from_fn(lhs.shape().to_vec(), |i| a * fx.data()[i] + b * fy.data()[i]);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }

    #[test]
    fn conv3d_is_linear_in_input(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0, stride in 1usize..3) {
        let x = randn(&[1, 2, 3, 4, 5], seed);
        let y = randn(&[1, 2, 3, 4, 5], seed + 1);
        let w = randn(&[2, 2, 3, 3, 3], seed + 2);
        let mix = Tensor::from_fn(vec![1, 2, 3, 4, 5], |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = run_conv3d(&mix, &w, stride, 1);
        let fx = run_conv3d(&x, &w, stride, 1);
        let fy = run_conv3d(&y, &w, stride, 1);
        let rhs = Tensor::from_fn(lhs.shape().to_vec(), |i| a * fx.data()[i] + b * fy.data()[i]);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }

    #[test]
    fn deconv_adjoint_holds_for_random_geometry(
        seed in 0u64..1000,
        k in 1usize..4,
        stride in 1usize..3,
        d in 1usize..4,
        h in 1usize..4,
    ) {
        let pad = (k - 1) / 2;
        let op = if stride > 1 { 1 } else { 0 };
        // Skip geometries where the conv side is undefined.
        let out = (d - 1) * stride + k + op;
        prop_assume!(out > 2 * pad);
        prop_assert!(adjoint_gap(&[1, 2, d, h, 3], 2, 2, k, stride, pad, op, seed) < 1e-5);
    }

    #[test]
    fn pool_and_upsample_preserve_constants(c in -100.0f32..100.0, h in 1usize..9, w in 1usize..9, win in 1usize..5) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(vec![1, 2, h, w], c));
        let p = g.avg_pool2d(x, win).unwrap();
        prop_assert!(g.value(p).data().iter().all(|&v| v == c));
        let u = g.bilinear_upsample2d(x, h + win, w + 2 * win).unwrap();
        prop_assert!(g.value(u).data().iter().all(|&v| v == c));
    }

    #[test]
    fn forward_is_bit_stable(seed in 0u64..1000) {
        let x = randn(&[1, 3, 8, 8], seed).cast::<f32>();
        let w = randn(&[4, 3, 3, 3], seed + 1).cast::<f32>();
        let run = || {
            let mut g = Graph::<f32>::new();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, None, 2, 1, 1).unwrap();
            g.value(y).clone()
        };
        let a = run();
        let b = run();
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
