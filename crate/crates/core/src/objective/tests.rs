use proptest::prelude::*;

use super::*;
use crate::ibp::{propagate, IntervalBounds};
use crate::net::{ArchSpec, InitScheme};
use crate::tensor::{sample_uniform, SeededRng};

fn mlp(dims: &[usize], bn: bool, seed: u64) -> Network<f64> {
    let mut net = Network::build(&ArchSpec::mlp(dims, bn)).unwrap();
    net.initialize(InitScheme::XavierUniform, &mut SeededRng::new(seed)).unwrap();
    net
}

fn batch(n: usize, d: usize, k: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = SeededRng::new(seed);
    let x = sample_uniform(&mut rng, &[n, d], 0.0, 1.0).unwrap();
    let y = (0..n).map(|_| rng.below(k)).collect();
    (x, y)
}

fn spec(eps: f64, lambda0: f64, input: &InputBox) -> ObjectiveSpec<'_> {
    ObjectiveSpec {
        eps,
        eps_target: 0.1,
        reg: RegularizerConfig { tau: 0.5, lambda0 },
        input,
    }
}

#[test]
fn robust_ce_examples() {
    let m = Tensor::<f64>::from_f64(&[1, 1], &[0.0]).unwrap();
    assert!((robust_ce_loss(&m).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    let big = Tensor::<f64>::from_f64(&[1, 3], &[800.0, 900.0, 1000.0]).unwrap();
    assert_eq!(robust_ce_loss(&big).unwrap(), 0.0);
}

/// Cross-entropy of clean logits via log-softmax.
fn clean_ce(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.chunks(k).zip(labels) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

#[test]
fn zero_eps_robust_loss_is_clean_cross_entropy() {
    let net = mlp(&[6, 10, 4], false, 1);
    let (x, y) = batch(5, 6, 4, 2);
    let input = InputBox::unit(0.0);
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, &net, true);
    let parts = total_objective(&mut tape, &net, &vars, &x, &y, &spec(0.0, 0.0, &input)).unwrap();
    let logits = tape.value(parts.trace.logits).data().to_vec();
    let oracle = clean_ce(&logits, 4, &y);
    let ulp = oracle.abs() * f64::EPSILON;
    assert!((parts.robust - oracle).abs() <= 8.0 * ulp, "{} vs {oracle}", parts.robust);
}

#[test]
fn tightness_examples() {
    assert_eq!(reg_tightness(&[0.2, 0.8], 0.5), 0.5);
    assert_eq!(reg_tightness(&[0.2, 0.3, 0.4], 0.5), 0.0);
    assert_eq!(reg_tightness(&[0.0, 5.0], 0.5), 0.0);
    assert_eq!(reg_tightness(&[0.2, 0.0], 0.5), 0.0);
}

fn trace_from_hidden(layers: Vec<(Vec<f64>, Vec<f64>)>) -> BoundTrace<f64> {
    let net = mlp(&[2, 2, 2], false, 0);
    let x = Tensor::<f64>::from_f64(&[1, 2], &[0.5, 0.5]).unwrap();
    let mut tr = propagate(&net, &x, &InputBox::unit(0.1), BnMode::Batch).unwrap();
    tr.hidden = layers
        .into_iter()
        .map(|(lo, hi)| {
            let n = lo.len();
            let b = IntervalBounds::new(
                Tensor::<f64>::from_f64(&[1, n], &lo).unwrap(),
                Tensor::<f64>::from_f64(&[1, n], &hi).unwrap(),
            )
            .unwrap();
            (b.center(), b)
        })
        .collect();
    tr
}

#[test]
fn relu_balance_examples() {
    // Centers +2 (active) and −1 (inactive): α = 2, β = 1.
    let tr = trace_from_hidden(vec![(vec![1.5, -1.5], vec![2.5, -0.5])]);
    assert_eq!(reg_relu_balance(&tr, 0.5), 0.0);
    let unstable = trace_from_hidden(vec![(vec![-1.0, -1.0], vec![1.0, 1.0])]);
    assert_eq!(reg_relu_balance(&unstable, 0.5), 0.0);
    // α = 4 → min(α, 1/α) = 0.25 → first term 0.25; the active center 4
    // dominates the variance, β = (4 − 1)²/(−1 − 1)² · … > 1.
    let skewed = trace_from_hidden(vec![(vec![3.5, -1.5, -0.5], vec![4.5, -0.5, 0.5])]);
    let c_mean: f64 = (4.0 - 1.0 + 0.0) / 3.0;
    let beta: f64 = (4.0 - c_mean).powi(2) / (-1.0 - c_mean).powi(2);
    let expect = ((0.5 - 0.25) + (0.5 - beta.min(1.0 / beta)).max(0.0)) / 0.5;
    assert!((reg_relu_balance(&skewed, 0.5) - expect).abs() < 1e-12);
}

/// Independent composition of the objective from an eager trace.
fn recomposed(net: &Network<f64>, x: &Tensor<f64>, y: &[usize], eps: f64, lambda0: f64) -> f64 {
    let tr = propagate(net, x, &InputBox::unit(eps), BnMode::Batch).unwrap();
    let info = *net.affine_layers().last().unwrap();
    let (w, b) = (net.param(info.weight), net.param(info.bias));
    let (k, f) = (w.shape()[0], w.shape()[1]);
    let (lo, hi) = (tr.final_input.lower().data(), tr.final_input.upper().data());
    let mut rob = 0.0;
    for (e, &yy) in y.iter().enumerate() {
        let mut s = 1.0;
        for i in (0..k).filter(|&i| i != yy) {
            let mut m = b.data()[yy] - b.data()[i];
            for j in 0..f {
                let d = w.data()[yy * f + j] - w.data()[i * f + j];
                m += if d > 0.0 { d * lo[e * f + j] } else { d * hi[e * f + j] };
            }
            s += (-m).exp();
        }
        rob += s.ln();
    }
    rob /= y.len() as f64;
    let tau = 0.5;
    let d0 = tr.input.mean_width();
    let m = tr.hidden.len() as f64;
    let mut tight = 0.0;
    let mut relu = 0.0;
    for (_, bnd) in &tr.hidden {
        let di = bnd.mean_width();
        tight += (tau - d0 / di).max(0.0);
        let (l, h) = (bnd.lower().data(), bnd.upper().data());
        let c: Vec<f64> = l.iter().zip(h).map(|(a, b)| (a + b) / 2.0).collect();
        let act: Vec<usize> = (0..c.len()).filter(|&i| l[i] > 0.0).collect();
        let ina: Vec<usize> = (0..c.len()).filter(|&i| h[i] < 0.0).collect();
        if act.is_empty() || ina.is_empty() {
            continue;
        }
        let alpha = act.iter().map(|&i| c[i]).sum::<f64>() / -ina.iter().map(|&i| c[i]).sum::<f64>();
        let ec = c.iter().sum::<f64>() / c.len() as f64;
        let beta = act.iter().map(|&i| (c[i] - ec).powi(2)).sum::<f64>()
            / ina.iter().map(|&i| (c[i] - ec).powi(2)).sum::<f64>();
        relu += (tau - alpha.min(1.0 / alpha)).max(0.0) + (tau - beta.min(1.0 / beta)).max(0.0);
    }
    let lambda = lambda0 * (1.0 - eps / 0.1);
    rob + lambda * (tight + relu) / (tau * m)
}

#[test]
fn objective_matches_recomposition() {
    for seed in 0..5 {
        let net = mlp(&[8, 24, 24, 5], true, seed);
        let (x, y) = batch(12, 8, 5, seed + 50);
        let input = InputBox::unit(0.0);
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, &net, true);
        let parts = total_objective(&mut tape, &net, &vars, &x, &y, &spec(0.05, 0.5, &input)).unwrap();
        let oracle = recomposed(&net, &x, &y, 0.05, 0.5);
        assert!((parts.loss - oracle).abs() < 1e-10 * oracle.abs().max(1.0), "{} vs {oracle}", parts.loss);
    }
}

#[test]
fn taped_regularizers_match_eager() {
    let net = mlp(&[8, 32, 32, 32, 4], false, 9);
    let (x, y) = batch(10, 8, 4, 10);
    let input = InputBox::unit(0.0);
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, &net, true);
    let parts = total_objective(&mut tape, &net, &vars, &x, &y, &spec(0.02, 0.5, &input)).unwrap();
    let tr = propagate(&net, &x, &InputBox::unit(0.02), BnMode::Batch).unwrap();
    let widths = crate::ibp::tightness_stats(&tr);
    assert!((parts.tightness - reg_tightness(&widths, 0.5)).abs() < 1e-12);
    assert!((parts.relu - reg_relu_balance(&tr, 0.5)).abs() < 1e-12);
}

#[test]
fn zero_lambda_leaves_only_the_robust_loss() {
    let net = mlp(&[6, 16, 16, 3], true, 3);
    let (x, y) = batch(8, 6, 3, 4);
    let input = InputBox::unit(0.0);
    let grads = |lambda0: f64, eps: f64| {
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, &net, true);
        let p = total_objective(&mut tape, &net, &vars, &x, &y, &spec(eps, lambda0, &input)).unwrap();
        let rob = tape.value(p.total).item();
        assert_eq!(rob, p.robust);
        tape.backward(p.total).unwrap().into_gradient_set(&tape)
    };
    let a = grads(0.0, 0.05);
    let b = grads(0.0, 0.05);
    assert_eq!(a[&ParamId(0)].data(), b[&ParamId(0)].data());
    // At ε = ε_t, λ = 0 regardless of λ₀.
    let c = grads(0.7, 0.1);
    let d = grads(0.0, 0.1);
    for (id, g) in &c {
        assert_eq!(g.data(), d[id].data());
    }
}

#[test]
fn gradcheck_on_bn_mlp() {
    let mut net = Network::build(&ArchSpec::mlp(&[5, 6, 6, 3], true)).unwrap();
    net.initialize(InitScheme::XavierUniform, &mut SeededRng::new(21)).unwrap();
    let (x, y) = batch(8, 5, 3, 22);
    let input = InputBox::unit(0.0);
    for lambda0 in [0.5, 0.0] {
        let report = gradcheck_objective(
            &net,
            &x,
            &y,
            &spec(0.05, lambda0, &input),
            &GradcheckOptions { per_param: Some(8), ..Default::default() },
        )
        .unwrap();
        assert!(report.checked() > 20);
        assert!(report.max_rel_error() <= 1e-4, "{:?}", report.worst());
    }
}

#[test]
fn zero_network_has_exactly_zero_gradient_where_loss_is_constant() {
    let mut net = Network::<f64>::build(&ArchSpec::mlp(&[3, 4, 2], false)).unwrap();
    net.initialize(InitScheme::Ibp, &mut SeededRng::new(0)).unwrap();
    let first = net.affine_layers()[0];
    let second = net.affine_layers()[1];
    net.set_param(second.weight, Tensor::zeros(&[2, 4])).unwrap();
    let (x, y) = batch(4, 3, 2, 1);
    let input = InputBox::unit(0.0);
    let mut tape = Tape::new();
    let vars = ParamVars::bind(&mut tape, &net, true);
    let p = total_objective(&mut tape, &net, &vars, &x, &y, &spec(0.1, 0.0, &input)).unwrap();
    let g = tape.backward(p.total).unwrap().into_gradient_set(&tape);
    assert!(g[&first.weight].data().iter().all(|&v| v == 0.0));
    assert!(g[&first.bias].data().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn regularizers_stay_in_range(
        widths in proptest::collection::vec(0.0f64..10.0, 2..8),
        tau in 0.01f64..1.0,
        raw in proptest::collection::vec((-3.0f64..3.0, 0.0f64..2.0), 2..40),
        layers in 1usize..4,
    ) {
        let t = reg_tightness(&widths, tau);
        prop_assert!((0.0..=1.0).contains(&t));
        let (lo, hi): (Vec<f64>, Vec<f64>) = raw.iter().map(|&(c, r)| (c - r, c + r)).unzip();
        let tr = trace_from_hidden(vec![(lo, hi); layers]);
        let r = reg_relu_balance(&tr, tau);
        prop_assert!((0.0..=2.0).contains(&r), "{}", r);
    }

    #[test]
    fn robust_loss_is_monotone_in_margins(
        m in proptest::collection::vec(-5.0f64..5.0, 1..6),
        bump in 0.0f64..2.0,
        idx in 0usize..6,
    ) {
        let k1 = m.len();
        let base = robust_ce_loss(&Tensor::<f64>::from_f64(&[1, k1], &m).unwrap()).unwrap();
        let mut up = m.clone();
        up[idx % k1] += bump;
        let raised = robust_ce_loss(&Tensor::<f64>::from_f64(&[1, k1], &up).unwrap()).unwrap();
        prop_assert!(raised <= base + 1e-15);
    }
}
