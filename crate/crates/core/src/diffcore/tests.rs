use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
}

/// Direct six-loop convolution with zero padding.
fn conv_oracle(x: &Array, k: &Array, stride: usize, pad: usize) -> Array {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let ho = (h + 2 * pad - ks) / stride + 1;
    let wo = (w + 2 * pad - ks) / stride + 1;
    let mut out = Array::zeros(&[co, ho, wo]);
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f64;
                for c in 0..ci {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x.at(c, iy as usize, ix as usize) as f64
                                * k.data()[((o * ci + c) * ks + ky) * ks + kx] as f64;
                        }
                    }
                }
                out.data_mut()[(o * ho + oy) * wo + ox] = acc as f32;
            }
        }
    }
    out
}

/// Per-pixel four-neighbour bilinear interpolation with border clamping.
fn bilinear_oracle(x: &Array, flow: &Array) -> Array {
    let (c, h, w) = x.dims3().unwrap();
    let mut out = Array::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let sx = (xx as f64 + flow.at(0, y, xx) as f64).clamp(0.0, (w - 1) as f64);
                let sy = (y as f64 + flow.at(1, y, xx) as f64).clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                let v = |yy: usize, xv: usize| x.at(ch, yy, xv) as f64;
                let val = v(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + v(y0, x1) * fx * (1.0 - fy)
                    + v(y1, x0) * (1.0 - fx) * fy
                    + v(y1, x1) * fx * fy;
                out.data_mut()[(ch * h + y) * w + xx] = val as f32;
            }
        }
    }
    out
}

fn run_conv(x: &Array, k: &Array, stride: usize, pad: usize) -> Array {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(k.clone());
    let y = g.conv2d(xv, kv, stride, pad).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_box_sum_counts_neighbours() {
    let x = Array::full(&[1, 3, 3], 1.0);
    let k = Array::full(&[1, 1, 3, 3], 1.0);
    let y = run_conv(&x, &k, 1, 1);
    assert_eq!(y.at(0, 1, 1), 9.0);
    assert_eq!(y.at(0, 0, 0), 4.0);
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_array(&mut rng, &[1, 5, 7]);
    let mut k = Array::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    assert_eq!(run_conv(&x, &k, 1, 1), x);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[2, 8, 8]);
        let k = rand_array(&mut rng, &[4, 2, 3, 3]);
        for stride in [1, 2] {
            let got = run_conv(&x, &k, stride, 1);
            let want = conv_oracle(&x, &k, stride, 1);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) <= 1e-5, "stride {stride}");
        }
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Array::zeros(&[2, 4, 4]));
    let k = g.constant(Array::zeros(&[1, 3, 3, 3]));
    let err = g.conv2d(x, k, 1, 1).unwrap_err();
    assert!(err.to_string().contains("3 input channels"), "{err}");
    let k2 = g.constant(Array::zeros(&[1, 2, 2, 2]));
    assert!(g.conv2d(x, k2, 1, 1).is_err());
}

#[test]
fn conv_output_size_formula() {
    let g = ConvGeom::new(&[1, 64, 144], &[8, 1, 3, 3], 2, 1).unwrap();
    assert_eq!((g.h_out, g.w_out), ((64 + 2 - 3) / 2 + 1, (144 + 2 - 3) / 2 + 1));
}

#[test]
fn grid_sample_zero_flow_is_bit_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x = rand_array(&mut rng, &[3, 6, 9]);
    x.data_mut()[0] = -0.0;
    let y = warp(&x, &Array::zeros(&[2, 6, 9])).unwrap();
    for (a, b) in x.data().iter().zip(y.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn grid_sample_midpoint() {
    let x = Array::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
    let flow = Array::new(vec![2, 1, 2], vec![0.5, 0.0, 0.0, 0.0]).unwrap();
    let y = warp(&x, &flow).unwrap();
    assert_eq!(y.data()[0], 0.5);
}

#[test]
fn grid_sample_matches_bilinear_oracle() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[1, 5, 5]);
        let flow = Array::from_fn(&[2, 5, 5], |_| rng.gen_range(-3.0f32..3.0));
        let got = warp(&x, &flow).unwrap();
        let want = bilinear_oracle(&x, &flow);
        assert!(got.max_abs_diff(&want) <= 1e-6, "seed {seed}: {}", got.max_abs_diff(&want));
    }
}

#[test]
fn grid_sample_rejects_nan_flow() {
    let x = Array::zeros(&[1, 2, 2]);
    let mut flow = Array::zeros(&[2, 2, 2]);
    flow.data_mut()[1] = f32::NAN;
    assert!(matches!(warp(&x, &flow), Err(crate::Error::NonFinite { .. })));
}

#[test]
fn pointwise_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Array::new(vec![2], vec![-3.0, 3.0]).unwrap(), false);
    let z = g.leaf(Array::scalar(0.0), true);
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 3.0]);
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).item(), 0.5);
    g.backward(s).unwrap();
    let analytic = g.grad(z).unwrap().item();
    let eps = 1e-3f32;
    let sig = |v: f32| 1.0 / (1.0 + (-v).exp());
    let fd = (sig(eps) - sig(-eps)) / (2.0 * eps);
    assert!((analytic - 0.25).abs() < 1e-6);
    assert!((analytic - fd).abs() < 1e-4);
}

#[test]
fn binary_rejects_incompatible_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Array::zeros(&[2, 3]));
    let b = g.constant(Array::zeros(&[3, 2]));
    assert!(g.add(a, b).is_err());
}

#[test]
fn resample_examples() {
    let mut g = Graph::new();
    let x = g.constant(Array::full(&[1, 2, 2], 1.0));
    let d = g.down2(x).unwrap();
    assert_eq!(g.value(d).data(), &[1.0]);

    let c = g.constant(Array::full(&[2, 3, 4], 0.3));
    let u = g.up2(c).unwrap();
    assert_eq!(g.shape(u), &[2, 6, 8]);
    let back = g.down2(u).unwrap();
    assert!(g.value(back).max_abs_diff(g.value(c)) <= 1e-6);

    let odd = g.constant(Array::zeros(&[1, 3, 4]));
    assert!(g.down2(odd).is_err());
}

proptest! {
    #[test]
    fn down2_preserves_mean(seed in 0u64..1000, h in 1usize..5, w in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[2, 2 * h, 2 * w]);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let d = g.down2(v).unwrap();
        prop_assert!((g.value(d).mean() - x.mean()).abs() <= 1e-5);
    }

    #[test]
    fn conv_is_linear(seed in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_array(&mut rng, &[2, 6, 5]);
        let y = rand_array(&mut rng, &[2, 6, 5]);
        let k = rand_array(&mut rng, &[3, 2, 3, 3]);
        let mix = Array::from_fn(&[2, 6, 5], |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = run_conv(&mix, &k, 1, 1);
        let cx = run_conv(&x, &k, 1, 1);
        let cy = run_conv(&y, &k, 1, 1);
        let rhs = Array::from_fn(lhs.shape(), |i| a * cx.data()[i] + b * cy.data()[i]);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-5);
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Array::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap(), true);
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);

    let mut g = Graph::new();
    let x = g.leaf(Array::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    // a second backward accumulates on leaves
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Array::zeros(&[3]), true);
    let y = g.relu(x).unwrap();
    assert!(g.backward(y).is_err());
}

#[test]
fn fan_out_accumulates() {
    let mut g = Graph::new();
    let x = g.leaf(Array::scalar(3.0), true);
    let a = g.scale(x, 2.0).unwrap();
    let b = g.add(a, x).unwrap();
    g.backward(b).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 3.0);
}

#[test]
fn every_op_passes_finite_differences() {
    let results = gradcheck::run_suite(3, 1e-3, 11).unwrap();
    for (name, err) in &results {
        assert!(*err <= 1e-3, "{name}: relative error {err}");
    }
    assert!(results.len() >= 30);
}

#[test]
fn sgd_examples() {
    let mut p = [1.0f32];
    let mut v = [0.0f32];
    sgd_step(&mut p, &[2.0], &mut v, 0.01, 0.0).unwrap();
    assert!((p[0] - 0.98).abs() < 1e-7);

    let mut p = [1.5f32];
    sgd_step(&mut p, &[0.0], &mut [0.0], 0.01, 0.9).unwrap();
    assert_eq!(p[0], 1.5);

    assert!(sgd_step(&mut [0.0, 1.0], &[0.0], &mut [0.0, 0.0], 0.1, 0.0).is_err());
}

#[test]
fn sgd_converges_on_quadratic() {
    // f(p) = (p - 3)^2, gradient 2(p - 3); each step scales the error by 0.8.
    let mut p = [0.0f32];
    let mut v = [0.0f32];
    for _ in 0..50 {
        let g = 2.0 * (p[0] - 3.0);
        sgd_step(&mut p, &[g], &mut v, 0.1, 0.0).unwrap();
    }
    assert!((p[0] - 3.0).abs() < 1e-3, "{}", p[0]);
    let closed_form = 3.0 * (1.0 - 0.8f64.powi(50));
    assert!((p[0] as f64 - closed_form).abs() < 1e-4);
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_array(&mut rng, &[3, 16, 12]);
    let k = rand_array(&mut rng, &[5, 3, 3, 3]);
    let a = run_conv(&x, &k, 1, 1);
    let b = run_conv(&x, &k, 1, 1);
    assert_eq!(a, b);
}

#[test]
fn finiteness_scan() {
    for n in [0, 1, 7, 8, 9, 33] {
        let mut a = Array::from_fn(&[n], |i| -(i as f32) * 1e30);
        assert!(a.is_finite());
        for bad in [f32::NAN, f32::INFINITY, f32::NEG_INFINITY] {
            for i in 0..n {
                let keep = a.data()[i];
                a.data_mut()[i] = bad;
                assert!(!a.is_finite(), "{n} {i} {bad}");
                a.data_mut()[i] = keep;
            }
        }
    }
}
