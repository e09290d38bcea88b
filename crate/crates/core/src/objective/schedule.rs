use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Warmup schedule for the perturbation radius, in optimizer steps.
///
/// `ε` is 0 for `zero_steps` steps. Over the next `increase_steps` steps
/// the progress `t = (step − zero_steps)/increase_steps` runs from 0 to 1:
/// for `t < f` the radius grows geometrically from `ε_t·α₀` towards `ε_t·f`,
/// then linearly as `ε_t·t`, reaching `ε_t` exactly at
/// `step = zero_steps + increase_steps` and staying there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct EpsSchedule {
    pub eps_target: f64,
    pub zero_steps: u64,
    pub increase_steps: u64,
    /// Fraction `f` of the increase spent in the geometric segment.
    #[serde(default = "default_exp_fraction")]
    pub exp_fraction: f64,
    /// Starting factor `α₀` of the geometric segment.
    #[serde(default = "default_start_factor")]
    pub start_factor: f64,
}

fn default_exp_fraction() -> f64 {
    0.25
}

fn default_start_factor() -> f64 {
    1e-3
}

impl EpsSchedule {
    pub fn new(eps_target: f64, zero_steps: u64, increase_steps: u64) -> Self {
        Self {
            eps_target,
            zero_steps,
            increase_steps,
            exp_fraction: default_exp_fraction(),
            start_factor: default_start_factor(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_target >= 0.0) || !self.eps_target.is_finite() {
            return Err(Error::arg("eps target must be finite and >= 0"));
        }
        if !(self.exp_fraction > 0.0 && self.exp_fraction < 1.0) {
            return Err(Error::arg("exponential fraction must lie in (0, 1)"));
        }
        if !(self.start_factor > 0.0 && self.start_factor <= self.exp_fraction) {
            return Err(Error::arg("start factor must lie in (0, exp_fraction]"));
        }
        Ok(())
    }

    /// Step at which `ε_t` is first reached.
    pub fn warmup_end(&self) -> u64 {
        self.zero_steps + self.increase_steps
    }

    pub fn value(&self, step: u64) -> f64 {
        let et = self.eps_target;
        if step < self.zero_steps {
            return 0.0;
        }
        if step >= self.warmup_end() {
            return et;
        }
        let t = (step - self.zero_steps) as f64 / self.increase_steps as f64;
        let (f, a0) = (self.exp_fraction, self.start_factor);
        if t < f {
            let v = et * a0 * (f / a0).powf(t / f);
            v.min(et * f)
        } else {
            et * t
        }
    }
}

/// `λ₀·(1 − ε/ε_t)`.
pub fn lambda_value(lambda0: f64, eps: f64, eps_target: f64) -> Result<f64> {
    if !(eps_target > 0.0) {
        return Err(Error::arg(format!("eps target must be positive, got {eps_target}")));
    }
    if !(0.0..=eps_target).contains(&eps) {
        return Err(Error::arg(format!("eps {eps} outside [0, {eps_target}]")));
    }
    Ok(lambda0 * (1.0 - eps / eps_target))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn schedule_examples() {
        let s = EpsSchedule::new(0.2, 10, 100);
        assert_eq!(s.value(0), 0.0);
        assert_eq!(s.value(9), 0.0);
        assert!((s.value(10) - 0.2e-3).abs() < 1e-18);
        assert_eq!(s.value(110), 0.2);
        assert_eq!(s.value(5000), 0.2);
        let s = EpsSchedule::new(1.0, 0, 80);
        assert_eq!(s.value(50), 0.625);
        assert_eq!(s.value(20), 0.25);
    }

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_value(0.5, 0.0, 0.3).unwrap(), 0.5);
        assert_eq!(lambda_value(0.5, 0.3, 0.3).unwrap(), 0.0);
        assert_eq!(lambda_value(0.5, 0.15, 0.3).unwrap(), 0.25);
        assert!(lambda_value(0.5, 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_monotone(et in 1e-4f64..1.0, zero in 0u64..50, inc in 1u64..2000) {
            let s = EpsSchedule::new(et, zero, inc);
            let mut prev = 0.0;
            for step in 0..=s.warmup_end() + 3 {
                let v = s.value(step);
                prop_assert!(v >= prev);
                prop_assert!(v <= et);
                prev = v;
            }
            prop_assert_eq!(s.value(s.warmup_end()), et);
        }
    }
}
