use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sample_gaussian, sample_uniform, Real, SeededRng, Tensor};

/// Weight initialization schemes, parameterized by the fan-in `n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `N(0, σ²)` with `σ = √(2π)/n`, which makes the difference gain 1.
    Ibp,
    /// `U(±1/√n)` (the PyTorch default for linear and conv layers).
    XavierUniform,
    /// `N(0, 1/n)`.
    XavierGaussian,
    /// `U(±√(6/n))`.
    KaimingUniform,
    /// `N(0, 2/n)`.
    KaimingGaussian,
}

impl InitScheme {
    pub const ALL: [InitScheme; 5] = [
        InitScheme::Ibp,
        InitScheme::XavierUniform,
        InitScheme::XavierGaussian,
        InitScheme::KaimingUniform,
        InitScheme::KaimingGaussian,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InitScheme::Ibp => "ibp",
            InitScheme::XavierUniform => "xavier_uniform",
            InitScheme::XavierGaussian => "xavier_gaussian",
            InitScheme::KaimingUniform => "kaiming_uniform",
            InitScheme::KaimingGaussian => "kaiming_gaussian",
        }
    }

    /// Samples a weight tensor of the given shape for fan-in `n`.
    pub fn sample<T: Real>(self, rng: &mut SeededRng, shape: &[usize], n: usize) -> Result<Tensor<T>> {
        if n == 0 {
            return Err(Error::arg("fan-in must be positive"));
        }
        let nf = n as f64;
        match self {
            InitScheme::Ibp => sample_gaussian(rng, shape, 0.0, (2.0 * PI).sqrt() / nf),
            InitScheme::XavierUniform => {
                let a = 1.0 / nf.sqrt();
                sample_uniform(rng, shape, -a, a)
            }
            InitScheme::XavierGaussian => sample_gaussian(rng, shape, 0.0, (1.0 / nf).sqrt()),
            InitScheme::KaimingUniform => {
                let a = (6.0 / nf).sqrt();
                sample_uniform(rng, shape, -a, a)
            }
            InitScheme::KaimingGaussian => sample_gaussian(rng, shape, 0.0, (2.0 / nf).sqrt()),
        }
    }

    /// Expected difference gain `(n/2)·E|W|` of a layer with fan-in `n`.
    pub fn closed_form_gain(self, n: usize) -> f64 {
        let nf = n as f64;
        match self {
            InitScheme::Ibp => 1.0,
            // E|U(±a)| = a/2 with a = 1/√n.
            InitScheme::XavierUniform => nf.sqrt() / 4.0,
            // E|N(0, s²)| = s·√(2/π) with s = 1/√n.
            InitScheme::XavierGaussian => (nf / (2.0 * PI)).sqrt(),
            // a = √(6/n) gives (n/2)(a/2) = √(6n)/4.
            InitScheme::KaimingUniform => (6.0 * nf).sqrt() / 4.0,
            InitScheme::KaimingGaussian => (nf / PI).sqrt(),
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InitScheme::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown initialization scheme `{s}`")))
    }
}

/// `(n/2)·mean|W|`: the expected growth of interval width through one
/// affine + ReLU stage.
pub fn difference_gain_empirical<T: Real>(w: &Tensor<T>, n: usize) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::arg("difference gain of an empty weight tensor"));
    }
    let sum: f64 = w.data().iter().map(|v| v.as_f64().abs()).sum();
    Ok(n as f64 / 2.0 * sum / w.len() as f64)
}

/// Closed-form gain by scheme name.
pub fn difference_gain_closed_form(scheme: &str, n: usize) -> Result<f64> {
    Ok(scheme.parse::<InitScheme>()?.closed_form_gain(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ibp_sigma_closed_form() {
        let mut rng = SeededRng::new(0);
        let w: Tensor<f64> = InitScheme::Ibp.sample(&mut rng, &[400, 100], 100).unwrap();
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let sigma = (2.0 * PI).sqrt() / 100.0;
        assert!((sigma - 0.025_066_3).abs() < 1e-7);
        assert!((var.sqrt() / sigma - 1.0).abs() < 0.01);
    }

    #[test]
    fn exact_gain_of_signed_constant() {
        let n = 50;
        let data: Vec<f64> = (0..200).map(|i| if i % 3 == 0 { 2.0 } else { -2.0 } / n as f64).collect();
        let w = Tensor::new(vec![4, n], data).unwrap();
        assert!((difference_gain_empirical(&w, n).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn standard_normal_gain() {
        let mut rng = SeededRng::new(7);
        let w: Tensor<f64> = sample_gaussian(&mut rng, &[1_000_000], 0.0, 1.0).unwrap();
        let g = difference_gain_empirical(&w, 100).unwrap();
        let expect = 50.0 * (2.0 / PI).sqrt();
        assert!((g / expect - 1.0).abs() < 0.01, "{g} vs {expect}");
    }

    #[test]
    fn empty_weight_is_an_argument_error() {
        let w = Tensor::<f32>::zeros(&[0]);
        assert!(matches!(difference_gain_empirical(&w, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn closed_forms_match_published_values() {
        let close = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol;
        assert!(close(difference_gain_closed_form("xavier_uniform", 1152).unwrap(), 8.48, 0.01));
        assert!(close(difference_gain_closed_form("kaiming_gaussian", 27).unwrap(), 2.93, 0.01));
        assert!(close(difference_gain_closed_form("kaiming_uniform", 27).unwrap(), 3.18, 0.01));
        assert_eq!(difference_gain_closed_form("ibp", 12345).unwrap(), 1.0);
        assert!(difference_gain_closed_form("orthogonal", 10).is_err());
    }

    #[test]
    fn schemes_round_trip_through_strings() {
        for s in InitScheme::ALL {
            assert_eq!(s.as_str().parse::<InitScheme>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
    }
}
