use ian_core::{grad_check, Graph, Padding, Tensor, Tensor64, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct nested-loop cross-correlation with zero padding.
fn naive_conv(x: &Tensor64, w: &Tensor64, stride: usize, dilation: usize, pad: usize) -> Tensor64 {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, f, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let span = f + (f - 1) * (dilation - 1);
    let oh = (h + 2 * pad - span) / stride + 1;
    let ow = (wd + 2 * pad - span) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..f {
                            for j in 0..f {
                                let iy = (y * stride + i * dilation) as isize - pad as isize;
                                let ix = (xx * stride + j * dilation) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * f + i) * f + j];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new([n, o, oh, ow], out).unwrap()
}

fn conv_value(x: &Tensor64, w: &Tensor64, stride: usize, dilation: usize, padding: Padding) -> Tensor64 {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.conv2d(xv, wv, stride, dilation, padding).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_matches_nested_loop_oracle() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let x = Tensor64::randn([1, 4, 8, 8], 1.0, &mut r);
        let w = Tensor64::randn([6, 4, 3, 3], 1.0, &mut r);
        let got = conv_value(&x, &w, 1, 1, Padding::Valid);
        let want = naive_conv(&x, &w, 1, 1, 0);
        assert!(got.max_abs_diff(&want) < 1e-6);
    }
    // strided / dilated / padded variants
    let mut r = rng(99);
    let x = Tensor64::randn([2, 3, 11, 11], 1.0, &mut r);
    let w = Tensor64::randn([5, 3, 3, 3], 1.0, &mut r);
    for (stride, dil, pad) in [(2, 1, Padding::Same), (1, 3, Padding::Same), (3, 2, Padding::Valid)] {
        let got = conv_value(&x, &w, stride, dil, pad);
        let p = match pad {
            Padding::Same => (3 + 2 * (dil - 1) - 1) / 2,
            Padding::Valid => 0,
        };
        let want = naive_conv(&x, &w, stride, dil, p);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < 1e-9, "stride {stride} dil {dil}");
    }
}

#[test]
fn dilated_conv_equals_zero_stuffed_filter() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let d = 1 + (seed as usize % 3);
        let x = Tensor64::randn([2, 3, 12, 12], 1.0, &mut r);
        let w = Tensor64::randn([4, 3, 3, 3], 1.0, &mut r);
        let span = 3 + 2 * (d - 1);
        let mut stuffed = Tensor64::zeros([4, 3, span, span]);
        for oc in 0..4 {
            for ic in 0..3 {
                for i in 0..3 {
                    for j in 0..3 {
                        stuffed.data_mut()[((oc * 3 + ic) * span + i * d) * span + j * d] =
                            w.data()[((oc * 3 + ic) * 3 + i) * 3 + j];
                    }
                }
            }
        }
        let a = conv_value(&x, &w, 1, d, Padding::Same);
        let b = conv_value(&x, &stuffed, 1, 1, Padding::Same);
        assert!(a.max_abs_diff(&b) < 1e-6);
    }
}

#[test]
fn conv_transpose_equals_conv_input_gradient() {
    // forward of the transpose with input u equals d<u, conv(z, w)>/dz
    for (stride, padding, f, hin) in [(2, Padding::Same, 5, 4), (2, Padding::Valid, 4, 3), (1, Padding::Same, 3, 6)] {
        let mut r = rng(stride as u64 * 17 + f as u64);
        let w = Tensor64::randn([3, 2, f, f], 1.0, &mut r);
        let u = Tensor64::randn([2, 3, hin, hin], 1.0, &mut r);

        let mut g = Graph::new();
        let uv = g.constant(u.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d_transpose(uv, wv, stride, padding).unwrap();
        let forward = g.value(y).clone();

        let mut g = Graph::new();
        let z = g.param(Tensor64::zeros(forward.shape().to_vec()));
        let wv = g.constant(w.clone());
        let c = g.conv2d(z, wv, stride, 1, padding).unwrap();
        assert_eq!(g.shape(c), u.shape());
        let uv = g.constant(u.clone());
        let p = g.mul(c, uv).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(z).unwrap().max_abs_diff(&forward) < 1e-6);
    }
}

fn check_seeds(name: &str, shapes: &[Vec<usize>], tol: f64, build: impl Fn(&mut Graph<f64>, &[Var]) -> ian_core::Result<Var>) {
    for seed in 0..10 {
        let mut r = rng(1000 + seed);
        let inputs: Vec<Tensor64> = shapes.iter().map(|s| Tensor64::randn(s.clone(), 1.0, &mut r)).collect();
        let err = grad_check(&inputs, 1e-5, &build).unwrap();
        assert!(err < tol, "{name} seed {seed}: relative error {err}");
    }
}

/// Weighted sum so that every output element gets a distinct upstream gradient.
fn weighted(g: &mut Graph<f64>, y: Var) -> ian_core::Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor64::from_fn(shape, |i| ((i as f64) * 0.731).sin() + 0.1));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn grad_check_elementwise_ops() {
    check_seeds("add/sub/mul", &[vec![3, 4], vec![3, 4]], 1e-4, |g, v| {
        let a = g.add(v[0], v[1])?;
        let b = g.mul(a, v[1])?;
        let c = g.sub(b, v[0])?;
        weighted(g, c)
    });
    check_seeds("tanh/sigmoid/exp", &[vec![5]], 1e-4, |g, v| {
        let a = g.tanh(v[0]);
        let b = g.sigmoid(a);
        let c = g.exp(b);
        weighted(g, c)
    });
    check_seeds("log/square/scalars", &[vec![5]], 1e-4, |g, v| {
        let sq = g.square(v[0]);
        let a = g.add_scalar(sq, 1.0);
        let b = g.log(a);
        let c = g.mul_scalar(b, -0.5);
        weighted(g, c)
    });
    check_seeds("relu/leaky/abs/clamp", &[vec![4, 4]], 1e-4, |g, v| {
        let a = g.relu(v[0]);
        let b = g.leaky_relu(v[0], 0.2);
        let c = g.abs(v[0]);
        let d = g.clamp(v[0], -0.5, 0.7);
        let ab = g.add(a, b)?;
        let cd = g.add(c, d)?;
        let s = g.add(ab, cd)?;
        weighted(g, s)
    });
}

#[test]
fn grad_check_linear_layer() {
    check_seeds("dense", &[vec![4, 6], vec![3, 6], vec![3]], 1e-7, |g, v| {
        let y = g.dense(v[0], v[1], Some(v[2]))?;
        weighted(g, y)
    });
    check_seeds("matmul transposes", &[vec![4, 3], vec![5, 4]], 1e-7, |g, v| {
        let y = g.matmul_t(v[0], v[1], true, true)?;
        let t = g.transpose(y)?;
        weighted(g, t)
    });
}

#[test]
fn grad_check_convolutions() {
    check_seeds("conv2d dilation 2", &[vec![2, 3, 9, 9], vec![4, 3, 3, 3]], 1e-5, |g, v| {
        let y = g.conv2d(v[0], v[1], 1, 2, Padding::Same)?;
        weighted(g, y)
    });
    check_seeds("conv2d stride 2", &[vec![2, 2, 8, 8], vec![3, 2, 5, 5]], 1e-4, |g, v| {
        let y = g.conv2d(v[0], v[1], 2, 1, Padding::Same)?;
        weighted(g, y)
    });
    check_seeds("conv2d_transpose", &[vec![2, 3, 4, 4], vec![3, 2, 5, 5]], 1e-4, |g, v| {
        let y = g.conv2d_transpose(v[0], v[1], 2, Padding::Same)?;
        weighted(g, y)
    });
}

#[test]
fn grad_check_normalization_and_softmax() {
    check_seeds("batchnorm train", &[vec![4, 3, 2, 2], vec![3], vec![3]], 1e-4, |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], ian_core::BnMode::Train)?;
        weighted(g, y)
    });
    check_seeds("batchnorm dense train", &[vec![5, 4], vec![4], vec![4]], 1e-4, |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], ian_core::BnMode::Train)?;
        weighted(g, y)
    });
    check_seeds("batchnorm eval", &[vec![3, 2, 3, 3], vec![2], vec![2]], 1e-4, |g, v| {
        let mean = [0.3, -0.2];
        let var = [1.5, 0.7];
        let (y, _) = g.batch_norm(v[0], v[1], v[2], ian_core::BnMode::Eval { mean: &mean, var: &var })?;
        weighted(g, y)
    });
    check_seeds("softmax", &[vec![3, 4]], 1e-4, |g, v| {
        let y = g.softmax(v[0], 1)?;
        weighted(g, y)
    });
    check_seeds("log_softmax axis 0", &[vec![3, 4]], 1e-4, |g, v| {
        let y = g.log_softmax(v[0], 0)?;
        weighted(g, y)
    });
}

#[test]
fn grad_check_structural_ops() {
    check_seeds("concat/slice/reshape/pick", &[vec![2, 3], vec![2, 2]], 1e-4, |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        let c0 = g.concat(&[c, c], 0)?;
        let s = g.slice_rows(c0, 1, 3)?;
        let r = g.reshape(s, [5, 2])?;
        let p = g.pick_column(r, 1)?;
        let m = g.mean(p);
        let w = weighted(g, s)?;
        g.add(m, w)
    });
    check_seeds("mdc compose", &[vec![2, 3, 3, 3], vec![2, 3]], 1e-4, |g, v| {
        let c = g.mdc_compose(v[0], v[1])?;
        weighted(g, c)
    });
    check_seeds("minibatch discrimination", &[vec![4, 5], vec![5, 6]], 1e-4, |g, v| {
        let m = g.matmul(v[0], v[1])?;
        let o = g.minibatch_l1(m, 3, 2)?;
        weighted(g, o)
    });
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = rng(5);
        let x = Tensor64::randn([2, 3, 8, 8], 1.0, &mut r);
        let w = Tensor64::randn([4, 3, 3, 3], 1.0, &mut r);
        conv_value(&x, &w, 1, 2, Padding::Same)
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3, 4], vals).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }
}
