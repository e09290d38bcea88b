use ibp_core::ibp::{activation_gap_ratios, propagate, tightness_stats, BnMode, InputBox};
use ibp_core::net::{difference_gain_empirical, ArchSpec, InitScheme, LayerSpec, Network};
use ibp_core::tensor::sample_uniform;
use ibp_core::{SeededRng, Tensor};

fn uniform_inputs(rng: &mut SeededRng, n: usize, dim: usize) -> Tensor<f64> {
    sample_uniform(rng, &[n, dim], 0.0, 1.0).unwrap()
}

#[test]
fn ibp_gain_is_one_for_wide_layers() {
    let mut rng = SeededRng::new(1);
    for n in [128, 576, 1152] {
        let mean: f64 = (0..20)
            .map(|_| {
                let w = InitScheme::Ibp.sample::<f64>(&mut rng, &[64, n], n).unwrap();
                difference_gain_empirical(&w, n).unwrap()
            })
            .sum::<f64>()
            / 20.0;
        assert!((mean - 1.0).abs() < 0.05, "n = {n}: {mean}");
    }
}

#[test]
fn sampled_weights_are_symmetric() {
    let mut rng = SeededRng::new(2);
    for scheme in InitScheme::ALL {
        let w = scheme.sample::<f64>(&mut rng, &[200, 300], 300).unwrap();
        let count = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / count;
        let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count).sqrt();
        assert!(mean.abs() < 3.0 * std / count.sqrt(), "{scheme}: mean {mean}, std {std}");
    }
}

#[test]
fn post_activation_gap_is_half_the_bound_width() {
    let net = {
        let mut net = Network::<f64>::build(&ArchSpec::mlp(&[256, 512, 512, 512, 10], false)).unwrap();
        net.initialize(InitScheme::Ibp, &mut SeededRng::new(3)).unwrap();
        net
    };
    let x = uniform_inputs(&mut SeededRng::new(4), 32, 256);
    let trace = propagate(&net, &x, &InputBox::unit(0.1), BnMode::Batch).unwrap();
    for (i, r) in activation_gap_ratios(&trace).iter().enumerate() {
        assert!((r - 0.5).abs() <= 0.05, "hidden layer {}: {r}", i + 1);
    }
}

#[test]
fn upper_bound_variance_neither_explodes_nor_vanishes() {
    let dims = [256, 256, 256, 256, 256, 256, 256, 10];
    let mut net = Network::<f64>::build(&ArchSpec::mlp(&dims, false)).unwrap();
    net.initialize(InitScheme::Ibp, &mut SeededRng::new(5)).unwrap();
    let x = uniform_inputs(&mut SeededRng::new(6), 64, 256);
    let trace = propagate(&net, &x, &InputBox::unit(0.1), BnMode::Batch).unwrap();
    let var = |t: &Tensor<f64>| {
        let n = t.len() as f64;
        let m = t.data().iter().sum::<f64>() / n;
        t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
    };
    let vars: Vec<f64> = trace.hidden.iter().map(|(_, b)| var(b.upper())).collect();
    for v in &vars {
        let ratio = v / vars[0];
        assert!((1e-4..=1e4).contains(&ratio), "{vars:?}");
    }
}

fn residual_net(width: usize, calibrate: bool, seed: u64) -> Network<f64> {
    let arch = ArchSpec {
        input: vec![width],
        layers: vec![
            LayerSpec::Dense { inputs: width, outputs: width },
            LayerSpec::ResidualBegin,
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: width, outputs: width },
            LayerSpec::ResidualAdd,
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: width, outputs: width },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: width, outputs: 10 },
        ],
        full_bn: false,
    };
    let mut net = Network::build(&arch).unwrap();
    net.initialize(InitScheme::Ibp, &mut SeededRng::new(seed)).unwrap();
    if calibrate {
        net.residual_calibrate().unwrap();
    }
    net
}

/// `Ê(Δ)` after the layer consuming the residual sum over `Ê(Δ)` entering
/// the block, averaged over seeds.
fn block_gain(calibrate: bool) -> f64 {
    let seeds = 5;
    (0..seeds)
        .map(|s| {
            let net = residual_net(512, calibrate, 10 + s);
            let x = uniform_inputs(&mut SeededRng::new(20 + s), 16, 512);
            let w = tightness_stats(&propagate(&net, &x, &InputBox::unit(0.05), BnMode::Batch).unwrap());
            w[3] / w[1]
        })
        .sum::<f64>()
        / seeds as f64
}

#[test]
fn residual_calibration_cancels_the_doubling() {
    let raw = block_gain(false);
    let calibrated = block_gain(true);
    assert!((raw - 2.0).abs() < 0.2, "uncalibrated gain {raw}");
    assert!((calibrated - 1.0).abs() < 0.1, "calibrated gain {calibrated}");
}
