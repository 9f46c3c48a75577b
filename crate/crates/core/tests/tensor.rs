use continuum::gradcheck::{relative_error, tensor_central_difference};
use continuum::tensor::{conv2d_forward, Activation, Adam, AdamConfig, Graph, Var};
use continuum::{Result, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Six nested loops over (n, f, i, j, c, ki, kj).
fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, ks) = (k.shape()[0], k.shape()[2]);
    let (ho, wo) = (h + 2 * pad - ks + 1, w + 2 * pad - ks + 1);
    let mut out = vec![0.0; n * f * ho * wo];
    for s in 0..n {
        for o in 0..f {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.data()[o];
                    for ch in 0..c {
                        for ki in 0..ks {
                            for kj in 0..ks {
                                let (ii, jj) = ((i + ki) as isize - pad as isize, (j + kj) as isize - pad as isize);
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((s * c + ch) * h + ii as usize) * w + jj as usize]
                                    * k.data()[((o * c + ch) * ks + ki) * ks + kj];
                            }
                        }
                    }
                    out[((s * f + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new([n, f, ho, wo], out).unwrap()
}

#[test]
fn conv_matches_loop_oracle() {
    let mut r = rng(0);
    let x = Tensor::randn([1, 2, 5, 5], 1.0, &mut r);
    let k = Tensor::randn([3, 2, 3, 3], 1.0, &mut r);
    let b = Tensor::randn([3], 1.0, &mut r);
    let y = conv2d_forward(&x, &k, &b, 1).unwrap();
    assert!(y.max_abs_diff(&naive_conv(&x, &k, &b, 1)) <= 1e-12);
}

#[test]
fn conv_matches_loop_oracle_on_both_code_paths() {
    // 32-wide planes take the direct kernel, 8×8 planes the unfolded GEMM
    for (size, c, f, pad, ks) in [(32, 3, 4, 1, 3), (8, 5, 6, 1, 3), (8, 3, 2, 0, 1), (8, 2, 3, 2, 5), (20, 4, 3, 0, 3)] {
        let mut r = rng(size as u64 + c as u64);
        let x = Tensor::randn([2, c, size, size], 1.0, &mut r);
        let k = Tensor::randn([f, c, ks, ks], 1.0, &mut r);
        let b = Tensor::randn([f], 1.0, &mut r);
        let y = conv2d_forward(&x, &k, &b, pad).unwrap();
        assert!(y.max_abs_diff(&naive_conv(&x, &k, &b, pad)) <= 1e-12, "size {size} c {c}");
    }
}

/// Analytic gradient of `⟨w, op(x)⟩` against central differences.
fn check_unary(op: impl Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor, tol: f64) {
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let y = op(&mut g, v).unwrap();
    let w = Tensor::randn(g.value(y).shape().to_vec(), 1.0, &mut rng(99));
    let analytic = g.vjp(y, w.clone()).unwrap().get_or_zeros(v, x);
    let fd = tensor_central_difference(
        |xp| {
            let mut g = Graph::new();
            let v = g.constant(xp.clone());
            let y = op(&mut g, v)?;
            Ok(g.value(y).dot(&w))
        },
        x,
        1e-5,
    )
    .unwrap();
    let err = relative_error(analytic.data(), fd.data());
    assert!(err < tol, "relative error {err}");
}

#[test]
fn activations_gradcheck() {
    // keep inputs away from the relu kink
    let x = Tensor::randn([2, 3, 4], 1.0, &mut rng(1)).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    for kind in [Activation::Relu, Activation::Softplus, Activation::Sigmoid, Activation::Tanh] {
        check_unary(|g, v| Ok(g.activation(v, kind)), &x, 1e-4);
    }
}

#[test]
fn conv_gradcheck_wrt_input_kernel_and_bias() {
    let mut r = rng(2);
    let x = Tensor::randn([2, 2, 5, 5], 1.0, &mut r);
    let k = Tensor::randn([3, 2, 3, 3], 0.5, &mut r);
    let b = Tensor::randn([3], 0.5, &mut r);
    let (kc, bc) = (k.clone(), b.clone());
    check_unary(
        move |g, v| {
            let (kv, bv) = (g.constant(kc.clone()), g.constant(bc.clone()));
            g.conv2d(v, kv, bv, 1)
        },
        &x,
        1e-4,
    );
    let (xc, bc) = (x.clone(), b.clone());
    check_unary(
        move |g, kv| {
            let (xv, bv) = (g.constant(xc.clone()), g.constant(bc.clone()));
            g.conv2d(xv, kv, bv, 1)
        },
        &k,
        1e-4,
    );
    check_unary(
        move |g, bv| {
            let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
            g.conv2d(xv, kv, bv, 1)
        },
        &b,
        1e-4,
    );
}

#[test]
fn pooling_and_upsampling_gradcheck() {
    let x = Tensor::randn([1, 2, 4, 6], 1.0, &mut rng(3));
    check_unary(|g, v| g.downsample(v), &x, 1e-4);
    check_unary(|g, v| g.upsample(v), &x, 1e-4);
}

#[test]
fn upsample_sum_gradient_is_four() {
    let mut g = Graph::new();
    let x = g.param(Tensor::randn([1, 2, 3, 3], 1.0, &mut rng(4)));
    let u = g.upsample(x).unwrap();
    assert_eq!(g.value(u).shape(), &[1, 2, 6, 6]);
    let loss = g.sum(u);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&d| d == 4.0));
}

#[test]
fn downsample_matches_window_max_oracle() {
    let x = Tensor::randn([1, 1, 4, 4], 1.0, &mut rng(5));
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let d = g.downsample(v).unwrap();
    let out = g.value(d);
    for i in 0..2 {
        for j in 0..2 {
            let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|(a, b)| x.data()[(2 * i + a) * 4 + 2 * j + b])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(out.data()[i * 2 + j], m);
        }
    }
}

#[test]
fn downsample_of_constant_and_of_upsample() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full([1, 2, 4, 4], 0.7));
    let d = g.downsample(c).unwrap();
    assert_eq!(g.value(d), &Tensor::full([1, 2, 2, 2], 0.7));
    let x = Tensor::randn([2, 3, 3, 5], 1.0, &mut rng(6));
    let v = g.constant(x.clone());
    let u = g.upsample(v).unwrap();
    let back = g.downsample(u).unwrap();
    assert_eq!(g.value(back), &x);
}

#[test]
fn concat_gradcheck_and_slicing() {
    let mut r = rng(7);
    let a = Tensor::randn([1, 2, 3, 3], 1.0, &mut r);
    let b = Tensor::randn([1, 1, 3, 3], 1.0, &mut r);
    let bc = b.clone();
    check_unary(
        move |g, v| {
            let bv = g.constant(bc.clone());
            g.concat_channels(v, bv)
        },
        &a,
        1e-4,
    );
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let cat = g.concat_channels(av, bv).unwrap();
    assert_eq!(&g.value(cat).data()[..a.numel()], a.data());
    let bad = g.constant(Tensor::zeros([1, 1, 2, 3]));
    assert!(g.concat_channels(av, bad).is_err());
}

#[test]
fn bce_closed_form_and_gradcheck() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::full([1], 0.5));
    let t = g.constant(Tensor::full([1], 1.0));
    let l = g.bce_loss(p, t).unwrap();
    assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

    let p = g.constant(Tensor::full([1], 1.0 - 1e-7));
    let l = g.bce_loss(p, t).unwrap();
    assert!(g.value(l).data()[0] < 2e-7);

    let pred = Tensor::uniform([2, 3, 3], 0.1, 0.9, &mut rng(8));
    let target = Tensor::uniform([2, 3, 3], 0.0, 1.0, &mut rng(9)).map(|v| v.round());
    check_unary(
        move |g, v| {
            let tv = g.constant(target.clone());
            g.bce_loss(v, tv)
        },
        &pred,
        1e-5,
    );
}

#[test]
fn quadratic_and_sum_rules() {
    let x = Tensor::randn([5], 1.0, &mut rng(10));
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let s = g.sum(v);
    assert_eq!(g.backward(s).unwrap().get(v).unwrap(), &Tensor::ones([5]));
    let sq = g.mul(v, v).unwrap();
    let l = g.sum(sq);
    assert_eq!(g.backward(l).unwrap().get(v).unwrap(), &x.scale(2.0));
}

#[test]
fn two_layer_conv_net_gradcheck() {
    let mut r = rng(11);
    let x = Tensor::randn([1, 2, 6, 6], 1.0, &mut r);
    let k1 = Tensor::randn([3, 2, 3, 3], 0.4, &mut r);
    let b1 = Tensor::randn([3], 0.1, &mut r);
    let k2 = Tensor::randn([1, 3, 3, 3], 0.4, &mut r);
    let b2 = Tensor::randn([1], 0.1, &mut r);
    let target = Tensor::uniform([1, 1, 6, 6], 0.0, 1.0, &mut r).map(f64::round);

    let loss = |params: &[Tensor], g: &mut Graph, leaves: bool| -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), leaves)).collect();
        let xv = g.constant(x.clone());
        let h = g.conv2d(xv, vars[0], vars[1], 1)?;
        let h = g.activation(h, Activation::Softplus);
        let o = g.conv2d(h, vars[2], vars[3], 1)?;
        let p = g.activation(o, Activation::Sigmoid);
        let t = g.constant(target.clone());
        Ok((g.bce_loss(p, t)?, vars))
    };
    let params = vec![k1, b1, k2, b2];
    let mut g = Graph::new();
    let (l, vars) = loss(&params, &mut g, true).unwrap();
    let grads = g.backward(l).unwrap();
    for i in 0..params.len() {
        let fd = tensor_central_difference(
            |p| {
                let mut ps = params.clone();
                ps[i] = p.clone();
                let mut g = Graph::new();
                let (l, _) = loss(&ps, &mut g, false)?;
                Ok(g.value(l).data()[0])
            },
            &params[i],
            1e-4,
        )
        .unwrap();
        let err = relative_error(grads.get(vars[i]).unwrap().data(), fd.data());
        assert!(err < 1e-4, "param {i}: {err}");
    }
}

#[test]
fn unrelated_leaf_gets_no_gradient() {
    let mut g = Graph::new();
    let a = g.param(Tensor::ones([3]));
    let b = g.param(Tensor::ones([3]));
    let l = g.sum(a);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(b).is_none());
    assert!(g.backward(a).is_err());
}

#[test]
fn adam_constant_gradient_steps_approach_lr() {
    let mut p = Tensor::zeros([1]);
    let mut opt = Adam::new([&p], AdamConfig::default());
    let g = Tensor::full([1], 0.3);
    let mut prev = 0.0;
    let mut last = 0.0;
    for _ in 0..200 {
        opt.step(&mut [&mut p], std::slice::from_ref(&g), 0.01).unwrap();
        last = prev - p.data()[0];
        prev = p.data()[0];
    }
    assert!((last - 0.01).abs() < 1e-9);
}

proptest! {
    #[test]
    fn constructors_keep_numel(dims in prop::collection::vec(1usize..5, 1..4), v in -10.0f64..10.0) {
        let t = Tensor::full(dims.clone(), v);
        prop_assert_eq!(t.numel(), dims.iter().product::<usize>());
        prop_assert!(Tensor::new(dims.clone(), vec![0.0; t.numel() + 1]).is_err());
    }

    #[test]
    fn ops_on_finite_inputs_stay_finite(values in prop::collection::vec(-50.0f64..50.0, 16)) {
        let x = Tensor::new([1, 1, 4, 4], values).unwrap();
        let mut g = Graph::new();
        let v = g.param(x);
        for kind in [Activation::Relu, Activation::Softplus, Activation::Sigmoid, Activation::Tanh] {
            let a = g.activation(v, kind);
            prop_assert!(g.value(a).is_finite());
        }
        let s = g.activation(v, Activation::Sigmoid);
        let t = g.constant(Tensor::ones([1, 1, 4, 4]));
        let l = g.bce_loss(s, t).unwrap();
        prop_assert!(g.value(l).is_finite());
        let grads = g.backward(l).unwrap();
        prop_assert!(grads.get(v).unwrap().is_finite());
    }

    #[test]
    fn conv_oracle_on_random_small_shapes(
        h in 3usize..9, w in 3usize..9, c in 1usize..4, f in 1usize..4, pad in 0usize..2, seed in 0u64..1000,
    ) {
        let mut r = rng(seed);
        let x = Tensor::randn([1, c, h, w], 1.0, &mut r);
        let k = Tensor::randn([f, c, 3, 3], 1.0, &mut r);
        let b = Tensor::randn([f], 1.0, &mut r);
        let y = conv2d_forward(&x, &k, &b, pad).unwrap();
        prop_assert!(y.max_abs_diff(&naive_conv(&x, &k, &b, pad)) <= 1e-12);
    }
}
