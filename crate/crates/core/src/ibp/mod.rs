//! Interval bound propagation.
//!
//! [`propagate`] pushes a batch and an ℓ∞ box around it through a
//! [`Network`], keeping the clean activations alongside the bounds. The
//! single-layer functions below are the same computations exposed one layer
//! at a time; they record on a scratch tape, so their values are bitwise
//! identical to the ones inside a full propagation.

mod propagate;
mod soundness;

pub use propagate::{
    forward_clean, propagate, propagate_taped, BnMode, BoundTrace, ParamVars, TapedInterval, TapedTrace,
};

pub use soundness::{check_containment, check_containment_sampled_at, ContainmentReport};

use serde::{Deserialize, Serialize};

use crate::autograd::tape::{elided_margins_forward, interval_linear_forward};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::net::{LayerParams, Network};
use crate::tensor::{Real, Tensor};

/// Elementwise `[lower, upper]` box.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalBounds<T> {
    lower: Tensor<T>,
    upper: Tensor<T>,
}

impl<T: Real> IntervalBounds<T> {
    /// Validates shapes and `lower ≤ upper`.
    pub fn new(lower: Tensor<T>, upper: Tensor<T>) -> Result<Self> {
        lower.check_same_shape(&upper)?;
        if let Some(i) = lower.data().iter().zip(upper.data()).position(|(l, u)| !(l <= u)) {
            return Err(Error::Contract(format!(
                "interval lower bound exceeds upper bound at index {i}: {} > {}",
                lower.data()[i],
                upper.data()[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    /// Degenerate box `[x, x]`.
    pub fn point(x: Tensor<T>) -> Self {
        Self {
            lower: x.clone(),
            upper: x,
        }
    }

    pub(crate) fn from_parts_unchecked(lower: Tensor<T>, upper: Tensor<T>) -> Self {
        Self { lower, upper }
    }

    pub fn lower(&self) -> &Tensor<T> {
        &self.lower
    }

    pub fn upper(&self) -> &Tensor<T> {
        &self.upper
    }

    pub fn shape(&self) -> &[usize] {
        self.lower.shape()
    }

    /// `upper − lower`.
    pub fn width(&self) -> Tensor<T> {
        self.upper.sub(&self.lower).expect("same shape")
    }

    /// `(lower + upper)/2`.
    pub fn center(&self) -> Tensor<T> {
        let half = T::of(0.5);
        self.lower.zip_map(&self.upper, |l, u| half * (l + u)).expect("same shape")
    }

    /// Mean width over all entries.
    pub fn mean_width(&self) -> f64 {
        let s: f64 = self
            .lower
            .data()
            .iter()
            .zip(self.upper.data())
            .map(|(&l, &u)| (u - l).as_f64())
            .sum();
        s / self.lower.len().max(1) as f64
    }
}

/// Per-channel batch-norm statistics (`var` is the biased estimate).
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// ℓ∞ input box with clipping and per-channel normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct InputBox {
    pub eps: f64,
    pub clip: [f64; 2],
    /// One value, or one per input channel.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputBox {
    /// No normalization, clip to `[0, 1]`.
    pub fn unit(eps: f64) -> Self {
        Self {
            eps,
            clip: [0.0, 1.0],
            mean: vec![0.0],
            std: vec![1.0],
        }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Self { eps, ..self.clone() }
    }

    /// Normalized clean input and the normalized, clipped box around it.
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Result<BoxedInput<T>> {
        if !(self.eps >= 0.0) {
            return Err(Error::arg(format!("eps must be >= 0, got {}", self.eps)));
        }
        let [lo, hi] = self.clip;
        if !(lo <= hi) {
            return Err(Error::arg("clip range inverted"));
        }
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(Error::arg("normalization mean and std must have equal, nonzero length"));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::arg("normalization std must be positive"));
        }
        if x.rank() < 2 {
            return Err(Error::dim("input batch must be N×..."));
        }
        let channels = x.shape()[1];
        let per_channel = if x.rank() == 4 {
            x.shape()[2] * x.shape()[3]
        } else {
            x.len() / x.shape()[0] / channels
        };
        let n_stats = self.mean.len();
        if n_stats != 1 && !(x.rank() == 4 && n_stats == channels) {
            return Err(Error::arg(format!(
                "{n_stats} normalization constants for input shape {:?}",
                x.shape()
            )));
        }
        let (e, l, h) = (T::of(self.eps), T::of(lo), T::of(hi));
        let mut clean = Vec::with_capacity(x.len());
        let mut lower = Vec::with_capacity(x.len());
        let mut upper = Vec::with_capacity(x.len());
        for (idx, &v) in x.data().iter().enumerate() {
            if !(v >= l && v <= h) {
                return Err(Error::arg(format!("input value {v} at {idx} outside the clip range")));
            }
            let c = if n_stats == 1 { 0 } else { (idx / per_channel) % channels };
            let (m, s) = (T::of(self.mean[c]), T::of(self.std[c]));
            let down = v - e;
            let up = v + e;
            let down = if down > l { down } else { l };
            let up = if up < h { up } else { h };
            clean.push((v - m) / s);
            lower.push((down - m) / s);
            upper.push((up - m) / s);
        }
        let shape = x.shape().to_vec();
        Ok(BoxedInput {
            clean: Tensor::new(shape.clone(), clean)?,
            bounds: IntervalBounds::new(Tensor::new(shape.clone(), lower)?, Tensor::new(shape, upper)?)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BoxedInput<T> {
    pub clean: Tensor<T>,
    pub bounds: IntervalBounds<T>,
}

/// Box of radius `eps` around `x`, clipped to `clip` and normalized by
/// `(v − mean)/std`.
pub fn input_interval<T: Real>(
    x: &Tensor<T>,
    eps: f64,
    clip: [f64; 2],
    mean: &[f64],
    std: &[f64],
) -> Result<IntervalBounds<T>> {
    let b = InputBox {
        eps,
        clip,
        mean: mean.to_vec(),
        std: std.to_vec(),
    };
    Ok(b.apply(x)?.bounds)
}

/// `h̲ = W₊z̲ + W₋z̄ + b`, `h̄ = W₊z̄ + W₋z̲ + b` for a dense layer.
pub fn interval_affine<T: Real>(
    w: &Tensor<T>,
    b: &Tensor<T>,
    input: &IntervalBounds<T>,
) -> Result<IntervalBounds<T>> {
    let stacked = interval_linear_forward(input.lower(), input.upper(), w, b)?;
    Ok(split_stacked(stacked))
}

/// Sign-split interval image of a convolution.
pub fn interval_conv<T: Real>(
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    input: &IntervalBounds<T>,
) -> Result<IntervalBounds<T>> {
    let mut tape = Tape::new();
    let lo = tape.constant(input.lower().clone());
    let hi = tape.constant(input.upper().clone());
    let k = tape.constant(kernel.clone());
    let b = tape.constant(bias.clone());
    let out = tape.interval_conv2d(lo, hi, k, b, stride, padding)?;
    Ok(split_stacked(tape.value(out).clone()))
}

/// `[ReLU(lower), ReLU(upper)]`.
pub fn interval_relu<T: Real>(input: &IntervalBounds<T>) -> IntervalBounds<T> {
    let r = |t: &Tensor<T>| t.map(|v| if v > T::zero() { v } else { T::zero() });
    IntervalBounds::from_parts_unchecked(r(input.lower()), r(input.upper()))
}

/// Statistics source for [`interval_bn`].
#[derive(Clone, Copy, Debug)]
pub enum BnSource<'a, T> {
    /// Batch statistics of the clean pre-activations.
    Train,
    /// Frozen estimates.
    Eval(&'a BnStats<T>),
}

/// Batch norm applied to an interval and its clean counterpart. Returns the
/// normalized bounds, the normalized clean values and the statistics used.
pub fn interval_bn<T: Real>(
    input: &IntervalBounds<T>,
    clean: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    source: BnSource<'_, T>,
) -> Result<(IntervalBounds<T>, Tensor<T>, BnStats<T>)> {
    if !(eps > 0.0) {
        return Err(Error::numeric("batchnorm", "batch-norm eps must be positive"));
    }
    let mut tape = Tape::new();
    let c = tape.constant(clean.clone());
    let lo = tape.constant(input.lower().clone());
    let hi = tape.constant(input.upper().clone());
    let (mean, var) = match source {
        BnSource::Train => (tape.channel_mean(c)?, tape.channel_var(c)?),
        BnSource::Eval(s) => (tape.constant(s.mean.clone()), tape.constant(s.var.clone())),
    };
    let g = tape.constant(gamma.clone());
    let be = tape.constant(beta.clone());
    let scale = tape.bn_scale(g, var, T::of(eps))?;
    let yc = tape.channel_affine(c, scale, mean, be)?;
    let yl = tape.channel_affine(lo, scale, mean, be)?;
    let yh = tape.channel_affine(hi, scale, mean, be)?;
    let out_lo = tape.sign_select(scale, yl, yh)?;
    let out_hi = tape.sign_select(scale, yh, yl)?;
    Ok((
        IntervalBounds::from_parts_unchecked(tape.value(out_lo).clone(), tape.value(out_hi).clone()),
        tape.value(yc).clone(),
        BnStats {
            mean: tape.value(mean).clone(),
            var: tape.value(var).clone(),
        },
    ))
}

fn split_stacked<T: Real>(stacked: Tensor<T>) -> IntervalBounds<T> {
    let shape = stacked.shape()[1..].to_vec();
    let mut data = stacked.into_data();
    let upper = data.split_off(data.len() / 2);
    IntervalBounds::from_parts_unchecked(
        Tensor::new(shape.clone(), data).expect("half"),
        Tensor::new(shape, upper).expect("half"),
    )
}

/// Lower bounds of `logit_y − logit_i`, `i ≠ y`, with the class
/// differences folded into the final layer. Shape `N×(K−1)`.
pub fn margin_lower_bounds<T: Real>(
    trace: &BoundTrace<T>,
    net: &Network<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    let last = net.layers().last().expect("networks are non-empty");
    let LayerParams::Affine { weight, bias } = last.params else {
        return Err(Error::Contract("final layer is not affine".into()));
    };
    if let Some(&y) = labels.iter().find(|&&y| y >= net.classes()) {
        return Err(Error::arg(format!("label {y} out of range for {} classes", net.classes())));
    }
    elided_margins_forward(
        trace.final_input.lower(),
        trace.final_input.upper(),
        net.param(weight),
        net.param(bias),
        labels,
    )
}

/// Fractions of hidden pre-activation neurons in each ReLU state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateFractions {
    pub active: f64,
    pub inactive: f64,
    pub unstable: f64,
}

/// Counts over all hidden layers and batch elements. A neuron with `h̄ ≤ 0`
/// is inactive; otherwise `h̲ ≥ 0` makes it active; the rest are unstable.
pub fn relu_state_fractions<T: Real>(trace: &BoundTrace<T>) -> StateFractions {
    let (mut a, mut i, mut u) = (0usize, 0usize, 0usize);
    for (_, b) in &trace.hidden {
        for (&l, &h) in b.lower().data().iter().zip(b.upper().data()) {
            if h <= T::zero() {
                i += 1;
            } else if l >= T::zero() {
                a += 1;
            } else {
                u += 1;
            }
        }
    }
    let total = (a + i + u).max(1) as f64;
    StateFractions {
        active: a as f64 / total,
        inactive: i as f64 / total,
        unstable: u as f64 / total,
    }
}

/// `Ê(Δ₀), Ê(Δ₁), …, Ê(Δₘ)`: mean bound width of the normalized input and of
/// every hidden layer's ReLU input.
pub fn tightness_stats<T: Real>(trace: &BoundTrace<T>) -> Vec<f64> {
    std::iter::once(trace.input.mean_width())
        .chain(trace.hidden.iter().map(|(_, b)| b.mean_width()))
        .collect()
}

/// Per hidden layer, `mean(δᵢ)/mean(Δᵢ)` with `δᵢ = ReLU(h̄ᵢ) − ReLU(h̲ᵢ)`.
pub fn activation_gap_ratios<T: Real>(trace: &BoundTrace<T>) -> Vec<f64> {
    trace
        .hidden
        .iter()
        .map(|(_, b)| interval_relu(b).mean_width() / b.mean_width())
        .collect()
}

#[cfg(test)]
mod tests;
