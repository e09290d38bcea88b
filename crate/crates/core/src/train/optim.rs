use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct AdamConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::arg("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::arg("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter. Gradients are checked
/// for finiteness before anything is modified.
pub fn adam_step<T: Real>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.check_same_shape(g)?;
        p.check_same_shape(&state.m[i])?;
        if !g.all_finite() {
            return Err(Error::numeric(format!("gradient of parameter #{i}"), "non-finite value"));
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
    let (step_size, c2_sqrt, eps) = (T::of(lr / c1), T::of(c2.sqrt()), T::of(eps));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((p, &g), (m, v)) in it {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *p -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
        }
    }
    Ok(())
}

/// Global L2 norm of all gradients (accumulated in binary64).
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().map(Tensor::sq_norm_f64).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_gradients<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::arg(format!("clip norm must be positive, got {max_norm}")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

/// `lr₀·decay^k`, where `k` counts the milestones `≤ epoch` (epochs are
/// 0-based).
pub fn lr_at_epoch(lr0: f64, decay: f64, milestones: &[usize], epoch: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    lr0 * decay.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![scalar(1.5), Tensor::from_f64(&[2], &[-1.0, 2.0]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let g: Vec<_> = p.iter().map(|t| Tensor::zeros(t.shape())).collect();
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![scalar(0.0)];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &[scalar(1.0)], &mut st, 0.01).unwrap();
        assert!((p[0].item() + 0.01).abs() < 1e-9);
    }

    #[test]
    fn quadratic_descent_matches_scalar_simulation() {
        // Independent scalar Adam on f(x) = x²/2.
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut oracle = Vec::new();
        for t in 1..=10 {
            let g = x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            oracle.push(x);
        }
        let mut p = vec![scalar(1.0)];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let mut prev = 1.0f64;
        for want in oracle {
            let g = p[0].clone();
            adam_step(&mut p, &[g], &mut st, 0.1).unwrap();
            let x = p[0].item();
            assert!((x - want).abs() < 1e-12, "{x} vs {want}");
            assert!(x.abs() < prev.abs());
            prev = x;
        }
    }

    #[test]
    fn nan_gradient_is_rejected_without_update() {
        let mut p = vec![scalar(1.0)];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let err = adam_step(&mut p, &[scalar(f64::NAN)], &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
        assert_eq!(p[0].item(), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap()];
        assert_eq!(clip_gradients(&mut g, 10.0).unwrap(), 5.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        let mut g = vec![Tensor::<f64>::from_f64(&[2], &[12.0, 16.0]).unwrap()];
        assert_eq!(clip_gradients(&mut g, 10.0).unwrap(), 20.0);
        assert_eq!(g[0].data(), &[6.0, 8.0]);
        assert!((global_norm(&g) - 10.0).abs() < 1e-12);
        let mut z = vec![Tensor::<f64>::zeros(&[3])];
        clip_gradients(&mut z, 10.0).unwrap();
        assert_eq!(z[0].data(), &[0.0; 3]);
        assert!(clip_gradients(&mut z, 0.0).is_err());
    }

    #[test]
    fn milestone_examples() {
        let lr = |e| lr_at_epoch(5e-4, 0.2, &[50, 60], e);
        assert_eq!(lr(49), 5e-4);
        assert!((lr(55) - 1e-4).abs() < 1e-18);
        assert!((lr(65) - 2e-5).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn lr_is_nonincreasing(mut ms in proptest::collection::vec(0usize..100, 0..5), decay in 0.01f64..1.0) {
            ms.sort_unstable();
            ms.dedup();
            let mut prev = f64::INFINITY;
            for e in 0..120 {
                let v = lr_at_epoch(1.0, decay, &ms, e);
                prop_assert!(v <= prev);
                prev = v;
            }
        }
    }
}
