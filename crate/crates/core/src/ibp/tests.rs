use proptest::prelude::*;

use super::*;
use crate::net::{ArchSpec, InitScheme, LayerSpec};
use crate::tensor::{im2col, sample_gaussian, sample_uniform, Conv2dGeometry, SeededRng};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn iv(lo: Tensor<f64>, hi: Tensor<f64>) -> IntervalBounds<f64> {
    IntervalBounds::new(lo, hi).unwrap()
}

#[test]
fn input_interval_examples() {
    let x = t(&[1, 1], &[0.5]);
    let b = input_interval(&x, 0.0, [0.0, 1.0], &[0.0], &[1.0]).unwrap();
    assert_eq!(b.lower(), b.upper());
    let b = input_interval(&x, 0.1, [0.0, 1.0], &[0.0], &[1.0]).unwrap();
    assert_eq!((b.lower().item(), b.upper().item()), (0.4, 0.6));
    assert!((b.mean_width() - 0.2).abs() < 1e-15);
    let x = t(&[1, 1], &[0.05]);
    let b = input_interval(&x, 0.1, [0.0, 1.0], &[0.0], &[1.0]).unwrap();
    assert_eq!(b.lower().item(), 0.0);
    assert!((b.upper().item() - 0.15).abs() < 1e-15);
    assert!(matches!(
        input_interval(&x, -0.1, [0.0, 1.0], &[0.0], &[1.0]),
        Err(Error::Argument(_))
    ));
}

#[test]
fn input_interval_normalizes_per_channel() {
    let x = t(&[1, 2, 1, 1], &[0.5, 0.5]);
    let b = input_interval(&x, 0.1, [0.0, 1.0], &[0.5, 0.0], &[0.5, 2.0]).unwrap();
    let (l, u) = (b.lower().data(), b.upper().data());
    assert!((l[0] + 0.2).abs() < 1e-12 && (u[0] - 0.2).abs() < 1e-12);
    assert!((l[1] - 0.2).abs() < 1e-12 && (u[1] - 0.3).abs() < 1e-12);
}

#[test]
fn interval_affine_examples() {
    let w = t(&[1, 2], &[1.0, -1.0]);
    let b = t(&[1], &[0.0]);
    let out = interval_affine(&w, &b, &iv(t(&[1, 2], &[0.0, 0.0]), t(&[1, 2], &[1.0, 1.0]))).unwrap();
    assert_eq!((out.lower().item(), out.upper().item()), (-1.0, 1.0));

    let z = t(&[1, 2], &[0.3, -0.7]);
    let w = t(&[2, 2], &[0.5, -2.0, 1.5, 0.25]);
    let b = t(&[2], &[0.1, -0.2]);
    let out = interval_affine(&w, &b, &IntervalBounds::point(z.clone())).unwrap();
    assert_eq!(out.lower(), out.upper());
    let wt = crate::tensor::transpose2(w.data(), 2, 2);
    let direct = crate::tensor::matmul(&z, &t(&[2, 2], &wt)).unwrap();
    for (a, (d, bb)) in out.lower().data().iter().zip(direct.data().iter().zip(b.data())) {
        assert!((a - (d + bb)).abs() < 1e-15);
    }
}

#[test]
fn positive_weight_gradient_of_upper_bound_is_upper_input() {
    let mut tape = Tape::<f64>::new();
    let lo = tape.constant(t(&[1, 2], &[-0.5, 0.25]));
    let hi = tape.constant(t(&[1, 2], &[0.75, 1.5]));
    let w = tape.leaf(t(&[1, 2], &[0.8, -0.3]));
    let b = tape.constant(t(&[1], &[0.0]));
    let both = tape.interval_linear(lo, hi, w, b).unwrap();
    let upper = tape.pick(both, 1).unwrap();
    let s = tape.sum_all(upper);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[0.75, 0.25]);
}

/// Exact bounds of one affine layer by enumerating every box corner.
fn corner_oracle(w: &[f64], b: &[f64], lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (o, k) = (b.len(), lo.len());
    let mut mins = vec![f64::INFINITY; o];
    let mut maxs = vec![f64::NEG_INFINITY; o];
    for mask in 0u32..(1 << k) {
        for j in 0..o {
            let mut acc = 0.0;
            for i in 0..k {
                let z = if mask >> i & 1 == 1 { hi[i] } else { lo[i] };
                acc += w[j * k + i] * z;
            }
            let v = acc + b[j];
            mins[j] = mins[j].min(v);
            maxs[j] = maxs[j].max(v);
        }
    }
    (mins, maxs)
}

#[test]
fn interval_affine_matches_corner_enumeration() {
    let mut rng = SeededRng::new(11);
    for _ in 0..50 {
        let k = 1 + rng.below(8);
        let o = 1 + rng.below(5);
        let w: Tensor<f64> = sample_gaussian(&mut rng, &[o, k], 0.0, 1.0).unwrap();
        let b: Tensor<f64> = sample_gaussian(&mut rng, &[o], 0.0, 1.0).unwrap();
        let c: Tensor<f64> = sample_gaussian(&mut rng, &[1, k], 0.0, 1.0).unwrap();
        let r: Tensor<f64> = sample_uniform(&mut rng, &[1, k], 0.0, 0.5).unwrap();
        let bounds = iv(c.sub(&r).unwrap(), c.add(&r).unwrap());
        let out = interval_affine(&w, &b, &bounds).unwrap();
        let (mins, maxs) = corner_oracle(w.data(), b.data(), bounds.lower().data(), bounds.upper().data());
        assert_eq!(out.lower().data(), &mins[..]);
        assert_eq!(out.upper().data(), &maxs[..]);
    }
}

#[test]
fn interval_conv_examples() {
    let lo = t(&[1, 1, 2, 2], &[-1.0, 0.0, 0.5, 2.0]);
    let hi = t(&[1, 1, 2, 2], &[1.0, 0.5, 0.5, 3.0]);
    let out = interval_conv(&t(&[1, 1, 1, 1], &[1.0]), &t(&[1], &[0.25]), 1, 0, &iv(lo.clone(), hi.clone())).unwrap();
    assert_eq!(out.lower().data(), lo.map(|v| v + 0.25).data());
    assert_eq!(out.upper().data(), hi.map(|v| v + 0.25).data());

    let k = t(&[1, 1, 2, 2], &[1.0, 2.0, 0.5, 0.25]);
    let out = interval_conv(&k, &t(&[1], &[0.0]), 1, 0, &iv(lo, hi.clone())).unwrap();
    let upper_only = interval_conv(&k, &t(&[1], &[0.0]), 1, 0, &IntervalBounds::point(hi)).unwrap();
    assert_eq!(out.upper(), upper_only.upper());
}

#[test]
fn interval_conv_matches_unrolled_affine() {
    let mut rng = SeededRng::new(12);
    let g = Conv2dGeometry::new(2, 5, 5, 3, 3, 2, 1).unwrap();
    let k: Tensor<f64> = sample_gaussian(&mut rng, &[3, 2, 3, 3], 0.0, 1.0).unwrap();
    let b: Tensor<f64> = sample_gaussian(&mut rng, &[3], 0.0, 1.0).unwrap();
    let c: Tensor<f64> = sample_gaussian(&mut rng, &[1, 2, 5, 5], 0.0, 1.0).unwrap();
    let r: Tensor<f64> = sample_uniform(&mut rng, &[1, 2, 5, 5], 0.0, 0.3).unwrap();
    let bounds = iv(c.sub(&r).unwrap(), c.add(&r).unwrap());
    let out = interval_conv(&k, &b, 2, 1, &bounds).unwrap();
    // Unroll: output (o, pos) = Σ_q K[o, q]·cols[q, pos] is a dense layer
    // per position over the patch entries.
    let (q, p) = (g.patch_len(), g.positions());
    let mut cl = vec![0.0; q * p];
    let mut cu = vec![0.0; q * p];
    im2col(&g, bounds.lower().data(), &mut cl);
    im2col(&g, bounds.upper().data(), &mut cu);
    for pos in 0..p {
        let zl: Vec<f64> = (0..q).map(|i| cl[i * p + pos]).collect();
        let zu: Vec<f64> = (0..q).map(|i| cu[i * p + pos]).collect();
        let dense = interval_affine(&k.clone().reshape(&[3, q]).unwrap(), &b, &iv(t(&[1, q], &zl), t(&[1, q], &zu))).unwrap();
        for o in 0..3 {
            assert_eq!(out.lower().data()[o * p + pos], dense.lower().data()[o]);
            assert_eq!(out.upper().data()[o * p + pos], dense.upper().data()[o]);
        }
    }
}

#[test]
fn interval_relu_examples() {
    let b = interval_relu(&iv(t(&[3], &[-1.0, 1.0, -2.0]), t(&[3], &[1.0, 2.0, -1.0])));
    assert_eq!(b.lower().data(), &[0.0, 1.0, 0.0]);
    assert_eq!(b.upper().data(), &[1.0, 2.0, 0.0]);
}

#[test]
fn interval_bn_negative_scale_swaps() {
    let clean = t(&[2, 1], &[1.0, 3.0]);
    let bounds = iv(t(&[2, 1], &[0.5, 2.0]), t(&[2, 1], &[1.5, 4.0]));
    let stats = BnStats {
        mean: t(&[1], &[0.0]),
        var: t(&[1], &[1.0]),
    };
    let (same, _, _) = interval_bn(&bounds, &clean, &t(&[1], &[1.0]), &t(&[1], &[0.0]), 1e-12, BnSource::Eval(&stats)).unwrap();
    for (a, b) in same.lower().data().iter().zip(bounds.lower().data()) {
        assert!((a - b).abs() < 1e-9);
    }
    let (neg, yc, used) = interval_bn(&bounds, &clean, &t(&[1], &[-1.0]), &t(&[1], &[0.0]), 1e-5, BnSource::Train).unwrap();
    assert_eq!(used.mean.item(), 2.0);
    assert_eq!(used.var.item(), 1.0);
    let sigma = (1.0f64 + 1e-5).sqrt();
    assert!((neg.lower().data()[0] - (-(1.5 - 2.0) / sigma)).abs() < 1e-12);
    assert!((neg.upper().data()[0] - (-(0.5 - 2.0) / sigma)).abs() < 1e-12);
    for i in 0..2 {
        assert!(neg.lower().data()[i] <= yc.data()[i] && yc.data()[i] <= neg.upper().data()[i]);
    }
}

#[test]
fn state_fraction_examples() {
    let trace_with = |lo: f64, hi: f64| {
        let net = mlp_net(&[3, 4, 2], InitScheme::Ibp, 0, false);
        let mut trace = propagate(&net, &t(&[1, 3], &[0.5, 0.5, 0.5]), &InputBox::unit(0.0), BnMode::Batch).unwrap();
        trace.hidden = vec![(
            Tensor::zeros(&[1, 4]),
            iv(Tensor::full(&[1, 4], lo), Tensor::full(&[1, 4], hi)),
        )];
        relu_state_fractions(&trace)
    };
    assert_eq!(trace_with(-1.0, 1.0).unstable, 1.0);
    assert_eq!(trace_with(-2.0, -1.0).inactive, 1.0);
    assert_eq!(trace_with(0.0, 0.0).inactive, 1.0);
    assert_eq!(trace_with(0.0, 1.0).active, 1.0);
}

#[test]
fn tightness_of_single_layer() {
    let arch = ArchSpec {
        input: vec![2],
        layers: vec![
            LayerSpec::Dense { inputs: 2, outputs: 1 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 1, outputs: 2 },
        ],
        full_bn: false,
    };
    let mut net = Network::<f64>::build(&arch).unwrap();
    let w = net.affine_layers()[0].weight;
    net.set_param(w, t(&[1, 2], &[1.0, -1.0])).unwrap();
    let x = t(&[3, 2], &[0.5, 0.5, 0.3, 0.6, 0.2, 0.9]);
    let tr = propagate(&net, &x, &InputBox::unit(0.1), BnMode::Batch).unwrap();
    let s = tightness_stats(&tr);
    assert!((s[0] - 0.2).abs() < 1e-12);
    assert!((s[1] - 0.4).abs() < 1e-12);
    let zero = propagate(&net, &x, &InputBox::unit(0.0), BnMode::Batch).unwrap();
    assert!(tightness_stats(&zero).iter().all(|&v| v == 0.0));
}

fn mlp_net(dims: &[usize], scheme: InitScheme, seed: u64, bn: bool) -> Network<f64> {
    let mut net = Network::build(&ArchSpec::mlp(dims, bn)).unwrap();
    net.initialize(scheme, &mut SeededRng::new(seed)).unwrap();
    net
}

#[test]
fn zero_eps_gives_degenerate_bounds_and_clean_margins() {
    let net = mlp_net(&[5, 8, 8, 3], InitScheme::XavierUniform, 3, true);
    let mut rng = SeededRng::new(4);
    let x: Tensor<f64> = sample_uniform(&mut rng, &[6, 5], 0.0, 1.0).unwrap();
    let tr = propagate(&net, &x, &InputBox::unit(0.0), BnMode::Batch).unwrap();
    for (clean, b) in &tr.layers {
        assert_eq!(b.lower(), clean);
        assert_eq!(b.upper(), clean);
    }
    let labels = [0, 1, 2, 0, 1, 2];
    let m = margin_lower_bounds(&tr, &net, &labels).unwrap();
    for (e, &y) in labels.iter().enumerate() {
        let row = &tr.logits.data()[e * 3..e * 3 + 3];
        let expect: Vec<f64> = (0..3).filter(|&i| i != y).map(|i| row[y] - row[i]).collect();
        for (a, b) in m.data()[e * 2..e * 2 + 2].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert!(margin_lower_bounds(&tr, &net, &[0, 1, 2, 0, 1, 3]).is_err());
}

#[test]
fn identity_final_layer_margin() {
    let arch = ArchSpec {
        input: vec![2],
        layers: vec![LayerSpec::Dense { inputs: 2, outputs: 2 }],
        full_bn: false,
    };
    let mut net = Network::<f64>::build(&arch).unwrap();
    let w = net.affine_layers()[0].weight;
    net.set_param(w, Tensor::identity(2)).unwrap();
    let tr = propagate(&net, &t(&[1, 2], &[0.5, 0.5]), &InputBox::unit(0.5), BnMode::Batch).unwrap();
    let m = margin_lower_bounds(&tr, &net, &[0]).unwrap();
    assert_eq!(m.data(), &[-1.0]);
}

#[test]
fn elided_margins_are_never_looser_than_naive() {
    for seed in 0..10 {
        let net = mlp_net(&[6, 16, 16, 5], InitScheme::XavierUniform, seed, false);
        let mut rng = SeededRng::new(100 + seed);
        let x: Tensor<f64> = sample_uniform(&mut rng, &[4, 6], 0.0, 1.0).unwrap();
        let tr = propagate(&net, &x, &InputBox::unit(0.05), BnMode::Batch).unwrap();
        let labels = [0, 4, 2, 1];
        let elided = margin_lower_bounds(&tr, &net, &labels).unwrap();
        let (_, logit_bounds) = tr.layers.last().unwrap();
        for (e, &y) in labels.iter().enumerate() {
            let lo = &logit_bounds.lower().data()[e * 5..e * 5 + 5];
            let hi = &logit_bounds.upper().data()[e * 5..e * 5 + 5];
            for (col, i) in (0..5).filter(|&i| i != y).enumerate() {
                let naive = lo[y] - hi[i];
                assert!(elided.data()[e * 4 + col] >= naive - 1e-12);
            }
        }
    }
}

#[test]
fn ibp_init_keeps_log_tightness_ratio_small() {
    let mut ratios = (0.0, 0.0);
    for seed in 0..3 {
        let dims = [64, 256, 256, 256, 256, 256, 256, 10];
        let x: Tensor<f64> = sample_uniform(&mut SeededRng::new(seed), &[4, 64], 0.0, 1.0).unwrap();
        for (scheme, acc) in [(InitScheme::Ibp, &mut ratios.0), (InitScheme::XavierUniform, &mut ratios.1)] {
            let net = mlp_net(&dims, scheme, seed, false);
            let s = tightness_stats(&propagate(&net, &x, &InputBox::unit(0.01), BnMode::Batch).unwrap());
            *acc += (s[s.len() - 1] / s[0]).ln() / 3.0;
        }
    }
    assert!(ratios.0.abs() <= 1.0, "ibp {}", ratios.0);
    assert!(ratios.1 > ratios.0 + 3.0, "xavier {}", ratios.1);
}

#[test]
fn residual_bounds_add_endpoints() {
    let arch = ArchSpec {
        input: vec![3],
        layers: vec![
            LayerSpec::Dense { inputs: 3, outputs: 3 },
            LayerSpec::ResidualBegin,
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 3, outputs: 3 },
            LayerSpec::ResidualAdd,
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 3, outputs: 2 },
        ],
        full_bn: false,
    };
    let mut net = Network::<f64>::build(&arch).unwrap();
    net.initialize(InitScheme::XavierUniform, &mut SeededRng::new(5)).unwrap();
    let tr = propagate(&net, &t(&[1, 3], &[0.2, 0.4, 0.9]), &InputBox::unit(0.1), BnMode::Batch).unwrap();
    let skip = &tr.layers[1].1;
    let body = &tr.layers[3].1;
    let sum = &tr.layers[4].1;
    assert_eq!(sum.lower(), &skip.lower().add(body.lower()).unwrap());
    assert_eq!(sum.upper(), &skip.upper().add(body.upper()).unwrap());
}

#[test]
fn non_finite_activations_name_the_layer() {
    let mut net = mlp_net(&[2, 3, 2], InitScheme::Ibp, 0, false);
    let w = net.affine_layers()[0].weight;
    net.set_param(w, Tensor::full(&[3, 2], f64::MAX)).unwrap();
    let err = propagate(&net, &t(&[1, 2], &[1.0, 1.0]), &InputBox::unit(0.0), BnMode::Batch).unwrap_err();
    match err {
        Error::Numeric { location, .. } => assert!(location.contains("layer 0"), "{location}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn taping_is_value_transparent() {
    let net = mlp_net(&[4, 6, 3], InitScheme::Ibp, 1, false);
    let x: Tensor<f64> = sample_uniform(&mut SeededRng::new(2), &[2, 4], 0.0, 1.0).unwrap();
    let boxed = InputBox::unit(0.1).apply(&x).unwrap();
    let info = net.affine_layers()[0];
    let eager = interval_affine(net.param(info.weight), net.param(info.bias), &boxed.bounds).unwrap();
    let mut tape = Tape::new();
    let params = ParamVars::bind(&mut tape, &net, true);
    let taped = propagate_taped(&mut tape, &net, &params, &x, &InputBox::unit(0.1), BnMode::Batch).unwrap();
    assert_eq!(tape.value(taped.layers[0].lo), eager.lower());
    assert_eq!(tape.value(taped.layers[0].hi), eager.upper());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn bounds_are_monotone_in_eps(seed in 0u64..1000, e1 in 0.0f64..0.2, extra in 0.0f64..0.2) {
        let net = mlp_net(&[5, 12, 12, 3], InitScheme::KaimingGaussian, seed, false);
        let x: Tensor<f64> = sample_uniform(&mut SeededRng::new(seed + 1), &[3, 5], 0.0, 1.0).unwrap();
        let small = propagate(&net, &x, &InputBox::unit(e1), BnMode::Batch).unwrap();
        let large = propagate(&net, &x, &InputBox::unit(e1 + extra), BnMode::Batch).unwrap();
        for ((_, a), (_, b)) in small.layers.iter().zip(&large.layers) {
            for i in 0..a.lower().len() {
                prop_assert!(b.lower().data()[i] <= a.lower().data()[i] + 1e-12);
                prop_assert!(a.upper().data()[i] <= b.upper().data()[i] + 1e-12);
            }
        }
        let (ts, tl) = (tightness_stats(&small), tightness_stats(&large));
        for (a, b) in ts.iter().zip(&tl) {
            prop_assert!(a <= &(b + 1e-12));
        }
        let f = relu_state_fractions(&large);
        prop_assert!((f.active + f.inactive + f.unstable - 1.0).abs() < 1e-12);
    }
}
