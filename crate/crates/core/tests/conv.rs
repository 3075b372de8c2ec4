mod common;

use common::{conv_backward_oracle, conv_oracle, max_abs_diff, random_spec, rng};
use proptest::prelude::*;
use rand::Rng;
use refconv::tensor::{conv2d_backward, conv2d_forward, ConvSpec, Tensor4};

fn instance(seed: u64) -> (ConvSpec, Tensor4<f64>, Tensor4<f64>) {
    let mut r = rng(seed);
    let spec = random_spec(&mut r);
    let n = r.gen_range(1..=2);
    let h = r.gen_range(spec.kernel.max(1)..=7);
    let w = r.gen_range(spec.kernel.max(1)..=7);
    let x = Tensor4::uniform([n, spec.c_in, h, w], -1.0, 1.0, &mut r);
    let k = Tensor4::uniform(spec.weight_dims(), -1.0, 1.0, &mut r);
    (spec, x, k)
}

#[test]
fn forward_and_backward_match_the_loop_definition() {
    for seed in 0..150 {
        let (spec, x, w) = instance(seed);
        let mut r = rng(10_000 + seed);
        let bias: Vec<f64> = (0..spec.c_out).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y = conv2d_forward(&x, &w, &spec, Some(&bias)).unwrap();
        let expect = conv_oracle(&x, &w, &spec, Some(&bias));
        assert_eq!(y.dims(), expect.dims(), "{spec:?}");
        assert!(max_abs_diff(y.data(), expect.data()) < 1e-9, "{spec:?}");

        let g = Tensor4::uniform(y.dims(), -1.0, 1.0, &mut r);
        let grads = conv2d_backward(&x, &w, &spec, &g).unwrap();
        let (gx, gw) = conv_backward_oracle(&x, &w, &spec, &g);
        assert!(max_abs_diff(grads.grad_x.data(), gx.data()) < 1e-9, "{spec:?}");
        assert!(max_abs_diff(grads.grad_w.data(), gw.data()) < 1e-9, "{spec:?}");
    }
}

#[test]
fn depthwise_strides_and_paddings_match_the_oracle() {
    for (i, (stride, padding, size)) in [(1, 1, 8), (2, 1, 8), (2, 1, 7), (3, 0, 9), (2, 2, 5), (1, 0, 3)].into_iter().enumerate() {
        let spec = ConvSpec::depthwise(4, 3).unwrap().with_stride(stride).unwrap().with_padding(padding);
        let mut r = rng(i as u64);
        let x = Tensor4::uniform([2, 4, size, size], -1.0, 1.0, &mut r);
        let w = Tensor4::uniform(spec.weight_dims(), -1.0, 1.0, &mut r);
        let y = conv2d_forward(&x, &w, &spec, None).unwrap();
        assert!(max_abs_diff(y.data(), conv_oracle(&x, &w, &spec, None).data()) < 1e-12);
        let g = Tensor4::uniform(y.dims(), -1.0, 1.0, &mut r);
        let grads = conv2d_backward(&x, &w, &spec, &g).unwrap();
        let (gx, gw) = conv_backward_oracle(&x, &w, &spec, &g);
        assert!(max_abs_diff(grads.grad_x.data(), gx.data()) < 1e-12);
        assert!(max_abs_diff(grads.grad_w.data(), gw.data()) < 1e-12);
    }
}

#[test]
fn f32_engine_tracks_the_f64_oracle() {
    for seed in 200..220 {
        let (spec, x, w) = instance(seed);
        let y = conv2d_forward(&x.cast::<f32>(), &w.cast::<f32>(), &spec, None).unwrap();
        let expect = conv_oracle(&x.cast::<f32>().cast(), &w.cast::<f32>().cast(), &spec, None);
        assert!(max_abs_diff(y.cast::<f64>().data(), expect.data()) < 1e-4, "{spec:?}");
    }
}

#[test]
fn shape_errors_are_reported() {
    let spec = ConvSpec::dense(3, 4, 3).unwrap();
    let w = Tensor4::<f64>::zeros(spec.weight_dims());
    assert!(conv2d_forward(&Tensor4::zeros([1, 2, 5, 5]), &w, &spec, None).is_err());
    assert!(conv2d_forward(&Tensor4::<f64>::zeros([1, 3, 5, 5]), &Tensor4::zeros([4, 3, 2, 2]), &spec, None).is_err());
    assert!(conv2d_forward(&Tensor4::zeros([1, 3, 5, 5]), &w, &spec, Some(&[0.0])).is_err());
    assert!(ConvSpec::new(3, 4, 3, 1, 1, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_the_input(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (spec, x1, w) = instance(seed);
        let x2 = Tensor4::uniform(x1.dims(), -1.0, 1.0, &mut rng(seed ^ 0xabc));
        let mix = Tensor4::new(x1.dims(), x1.data().iter().zip(x2.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let y1 = conv2d_forward(&x1, &w, &spec, None).unwrap();
        let y2 = conv2d_forward(&x2, &w, &spec, None).unwrap();
        let ym = conv2d_forward(&mix, &w, &spec, None).unwrap();
        let combo: Vec<f64> = y1.data().iter().zip(y2.data()).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(max_abs_diff(ym.data(), &combo) < 1e-10);
    }

    #[test]
    fn grouped_conv_equals_independent_dense_convs(seed in 0u64..10_000) {
        let (spec, x, w) = instance(seed);
        let y = conv2d_forward(&x, &w, &spec, None).unwrap();
        let [n, _, h, wd] = x.dims();
        let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
        let part = ConvSpec::new(cin_g, cout_g, spec.kernel, spec.stride, spec.padding, 1).unwrap();
        for g in 0..spec.groups {
            let xs = Tensor4::from_fn([n, cin_g, h, wd], |[b, c, i, j]| x.at(b, g * cin_g + c, i, j));
            let ws = Tensor4::from_fn(part.weight_dims(), |[o, c, i, j]| w.at(g * cout_g + o, c, i, j));
            let ys = conv2d_forward(&xs, &ws, &part, None).unwrap();
            let [_, _, ho, wo] = ys.dims();
            for b in 0..n {
                for o in 0..cout_g {
                    for i in 0..ho {
                        for j in 0..wo {
                            prop_assert!((ys.at(b, o, i, j) - y.at(b, g * cout_g + o, i, j)).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn backward_is_the_adjoint_of_forward(seed in 0u64..10_000) {
        // <conv(x), g> == <x, grad_x(g)> for the bias-free linear map
        let (spec, x, w) = instance(seed);
        let y = conv2d_forward(&x, &w, &spec, None).unwrap();
        let g = Tensor4::uniform(y.dims(), -1.0, 1.0, &mut rng(seed + 1));
        let grads = conv2d_backward(&x, &w, &spec, &g).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(p, q)| p * q).sum();
        let rhs: f64 = x.data().iter().zip(grads.grad_x.data()).map(|(p, q)| p * q).sum();
        let rhs_w: f64 = w.data().iter().zip(grads.grad_w.data()).map(|(p, q)| p * q).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        prop_assert!((lhs - rhs_w).abs() < 1e-9 * (1.0 + lhs.abs()));
    }
}
