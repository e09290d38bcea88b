//! The training objective `L = L_rob + λ·(L_tightness + L_relu)`.
//!
//! Each term has an eager form over a [`BoundTrace`] for reporting and a
//! taped form over a [`TapedTrace`] for training. The regularizers act on the
//! values the ReLUs consume: post-BN pre-activations of hidden layers `1..m`.

mod schedule;

pub use schedule::{lambda_value, EpsSchedule};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::tape::worst_case_ce;
use crate::autograd::{gradcheck, GradcheckOptions, GradcheckReport, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::ibp::{propagate_taped, BnMode, BoundTrace, InputBox, ParamVars, TapedTrace};
use crate::net::{LayerParams, Network};
use crate::tensor::{Real, Tensor};

/// Regularizer tolerance and strength.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RegularizerConfig {
    pub tau: f64,
    pub lambda0: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self { tau: 0.5, lambda0: 0.5 }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::arg(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.lambda0 >= 0.0) {
            return Err(Error::arg(format!("lambda0 must be >= 0, got {}", self.lambda0)));
        }
        Ok(())
    }
}

/// Batch mean of `log(1 + Σ_i exp(−m_i))` over the rows of an `N×(K−1)`
/// margin matrix.
pub fn robust_ce_loss<T: Real>(margins: &Tensor<T>) -> Result<f64> {
    let [n, k1] = *margins.shape() else {
        return Err(Error::dim("margins must be N×(K−1)"));
    };
    if n == 0 {
        return Err(Error::arg("empty batch"));
    }
    let rows = margins.data().chunks(k1.max(1)).take(n);
    let total: f64 = rows.map(|r| worst_case_ce(r).0.as_f64()).sum();
    Ok(total / n as f64)
}

/// `(1/(τm))·Σᵢ ReLU(τ − Ê(Δ₀)/Ê(Δᵢ))` from `[Ê(Δ₀), …, Ê(Δₘ)]`. Zero when
/// `Ê(Δ₀) = 0`; layers with `Ê(Δᵢ) = 0` contribute 0.
pub fn reg_tightness(widths: &[f64], tau: f64) -> f64 {
    let m = widths.len().saturating_sub(1);
    if m == 0 || widths[0] == 0.0 {
        return 0.0;
    }
    let sum: f64 = widths[1..]
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| (tau - widths[0] / w).max(0.0))
        .sum();
    sum / (tau * m as f64)
}

/// The α/β ReLU-balance penalty of one hidden layer, from centers and
/// bounds.
fn relu_balance_layer(center: &[f64], lo: &[f64], hi: &[f64], tau: f64) -> f64 {
    let active: Vec<bool> = lo.iter().map(|&l| l > 0.0).collect();
    let inactive: Vec<bool> = hi.iter().map(|&h| h < 0.0).collect();
    if !active.contains(&true) || !inactive.contains(&true) {
        return 0.0;
    }
    let sum_where = |vals: &[f64], mask: &[bool]| -> f64 {
        vals.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum()
    };
    let alpha = sum_where(center, &active) / -sum_where(center, &inactive);
    let mean = center.iter().sum::<f64>() / center.len() as f64;
    let sq: Vec<f64> = center.iter().map(|c| (c - mean) * (c - mean)).collect();
    let (num, den) = (sum_where(&sq, &active), sum_where(&sq, &inactive));
    let bal = |r: f64| (tau - r.min(1.0 / r)).max(0.0);
    let beta_term = if num == 0.0 || den == 0.0 { tau } else { bal(num / den) };
    bal(alpha) + beta_term
}

/// `(1/(τm))·Σᵢ [ReLU(τ − min(αᵢ, 1/αᵢ)) + ReLU(τ − min(βᵢ, 1/βᵢ))]` over
/// hidden layers with at least one active and one inactive neuron.
pub fn reg_relu_balance<T: Real>(trace: &BoundTrace<T>, tau: f64) -> f64 {
    let m = trace.hidden.len();
    if m == 0 {
        return 0.0;
    }
    let sum: f64 = trace
        .hidden
        .iter()
        .map(|(_, b)| {
            let lo = b.lower().to_f64_vec();
            let hi = b.upper().to_f64_vec();
            let c: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
            relu_balance_layer(&c, &lo, &hi, tau)
        })
        .sum();
    sum / (tau * m as f64)
}

/// Taped `L_tightness`; `None` when it is identically zero.
pub fn tightness_on_tape<T: Real>(tape: &mut Tape<T>, trace: &TapedTrace, tau: f64) -> Result<Option<Var>> {
    let m = trace.hidden.len();
    let d0 = {
        let lo = tape.value(trace.input.lo);
        let hi = tape.value(trace.input.hi);
        let s: f64 = lo.data().iter().zip(hi.data()).map(|(&l, &h)| (h - l).as_f64()).sum();
        s / lo.len() as f64
    };
    if m == 0 || d0 == 0.0 {
        return Ok(None);
    }
    let mut terms = Vec::with_capacity(m);
    for h in &trace.hidden {
        let width = tape.sub(h.hi, h.lo)?;
        let mean = tape.mean_all(width);
        if tape.value(mean).item() == T::zero() {
            continue;
        }
        let inv = tape.recip(mean);
        let ratio = tape.scale(inv, T::of(d0));
        let neg = tape.neg(ratio);
        let gap = tape.add_const(neg, T::of(tau));
        terms.push(tape.relu(gap));
    }
    let Some(sum) = sum_vars(tape, &terms)? else {
        return Ok(None);
    };
    Ok(Some(tape.scale(sum, T::of(1.0 / (tau * m as f64)))))
}

fn balance_term<T: Real>(tape: &mut Tape<T>, ratio: Var, tau: f64) -> Result<Var> {
    let inv = tape.recip(ratio);
    let small = tape.min(ratio, inv)?;
    let neg = tape.neg(small);
    let gap = tape.add_const(neg, T::of(tau));
    Ok(tape.relu(gap))
}

/// Taped `L_relu`; `None` when no layer meets the active/inactive
/// precondition. Indicator masks are constants of the forward pass.
pub fn relu_balance_on_tape<T: Real>(tape: &mut Tape<T>, trace: &TapedTrace, tau: f64) -> Result<Option<Var>> {
    let m = trace.hidden.len();
    if m == 0 {
        return Ok(None);
    }
    let mut terms = Vec::new();
    let mut constant = 0.0;
    for h in &trace.hidden {
        let active: Vec<bool> = tape.value(h.lo).data().iter().map(|&l| l > T::zero()).collect();
        let inactive: Vec<bool> = tape.value(h.hi).data().iter().map(|&u| u < T::zero()).collect();
        if !active.contains(&true) || !inactive.contains(&true) {
            continue;
        }
        let sum = tape.add(h.lo, h.hi)?;
        let c = tape.scale(sum, T::of(0.5));
        let pos = tape.masked_sum(c, active.clone())?;
        let neg = tape.masked_sum(c, inactive.clone())?;
        let neg = tape.neg(neg);
        let alpha = tape.div(pos, neg)?;
        terms.push(balance_term(tape, alpha, tau)?);

        let mean = tape.mean_all(c);
        let dev = tape.sub_scalar(c, mean)?;
        let sq = tape.square(dev);
        let num = tape.masked_sum(sq, active)?;
        let den = tape.masked_sum(sq, inactive)?;
        if tape.value(num).item() == T::zero() || tape.value(den).item() == T::zero() {
            constant += tau;
        } else {
            let beta = tape.div(num, den)?;
            terms.push(balance_term(tape, beta, tau)?);
        }
    }
    if terms.is_empty() && constant == 0.0 {
        return Ok(None);
    }
    let sum = match sum_vars(tape, &terms)? {
        Some(s) => tape.add_const(s, T::of(constant)),
        None => tape.scalar(T::of(constant)),
    };
    Ok(Some(tape.scale(sum, T::of(1.0 / (tau * m as f64)))))
}

fn sum_vars<T: Real>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Option<Var>> {
    let mut it = vars.iter();
    let Some(&first) = it.next() else { return Ok(None) };
    let mut acc = first;
    for &v in it {
        acc = tape.add(acc, v)?;
    }
    Ok(Some(acc))
}

/// Inputs of one objective evaluation.
#[derive(Clone, Debug)]
pub struct ObjectiveSpec<'a> {
    /// Current radius (from the schedule).
    pub eps: f64,
    /// Target radius `ε_t` used by `λ`.
    pub eps_target: f64,
    pub reg: RegularizerConfig,
    /// Clip range and normalization; its `eps` field is ignored.
    pub input: &'a InputBox,
}

/// Vars and values produced by [`total_objective`].
#[derive(Clone, Debug)]
pub struct ObjectiveParts {
    pub total: Var,
    pub lambda: f64,
    pub robust: f64,
    pub tightness: f64,
    pub relu: f64,
    pub loss: f64,
    pub trace: TapedTrace,
    pub margins: Var,
}

/// Records `L = L_rob + λ·(L_tightness + L_relu)` for one batch. With
/// `λ = 0` the regularizers are evaluated for reporting but left out of the
/// recorded total.
pub fn total_objective<T: Real>(
    tape: &mut Tape<T>,
    net: &Network<T>,
    params: &ParamVars,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &ObjectiveSpec<'_>,
) -> Result<ObjectiveParts> {
    spec.reg.validate()?;
    // Clean training (ε_t = 0) has no warmup to regularize.
    let lambda = if spec.eps_target == 0.0 {
        0.0
    } else {
        lambda_value(spec.reg.lambda0, spec.eps, spec.eps_target)?
    };
    let input = spec.input.with_eps(spec.eps);
    let trace = propagate_taped(tape, net, params, x, &input, BnMode::Batch)?;
    let last = net.layers().last().expect("non-empty");
    let LayerParams::Affine { weight, bias } = last.params else {
        return Err(Error::Contract("final layer is not affine".into()));
    };
    let fi = trace.final_input;
    let margins = tape.elided_margins(fi.lo, fi.hi, params.get(weight), params.get(bias), labels)?;
    let rob = tape.robust_ce(margins)?;
    let tight = tightness_on_tape(tape, &trace, spec.reg.tau)?;
    let relu = relu_balance_on_tape(tape, &trace, spec.reg.tau)?;
    let val = |tape: &Tape<T>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
    let (tightness, relu_v) = (val(tape, tight), val(tape, relu));
    let total = match (lambda > 0.0, tight, relu) {
        (false, ..) | (true, None, None) => rob,
        (true, t, r) => {
            let reg = match (t, r) {
                (Some(a), Some(b)) => tape.add(a, b)?,
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => unreachable!(),
            };
            let weighted = tape.scale(reg, T::of(lambda));
            tape.add(rob, weighted)?
        }
    };
    let loss = tape.value(total).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::numeric("objective", format!("non-finite loss {loss}")));
    }
    Ok(ObjectiveParts {
        total,
        lambda,
        robust: tape.value(rob).item().as_f64(),
        tightness,
        relu: relu_v,
        loss,
        trace,
        margins,
    })
}

/// Finite-difference check of the full objective with respect to every
/// parameter of `net`.
pub fn gradcheck_objective(
    net: &Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    spec: &ObjectiveSpec<'_>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let params: BTreeMap<ParamId, Tensor<f64>> = net.param_ids().map(|id| (id, net.param(id).clone())).collect();
    gradcheck(
        &params,
        |tape, p| {
            let mut local = net.clone();
            for (&id, v) in p {
                local.set_param(id, v.clone())?;
            }
            let vars = ParamVars::bind(tape, &local, true);
            Ok(total_objective(tape, &local, &vars, x, labels, spec)?.total)
        },
        opts,
    )
}

#[cfg(test)]
mod tests;
