use crate::autograd::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::net::{LayerParams, LayerSpec, Network};
use crate::tensor::{Real, Tensor};

use super::{BnStats, InputBox, IntervalBounds};

/// Which statistics batch-norm layers use.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Statistics of the clean activations of the current batch (training).
    Batch,
    /// The network's running estimates (evaluation).
    Running,
    /// Externally supplied statistics, one entry per batch-norm layer.
    Fixed(&'a [BnStats<T>]),
}

/// Parameter values bound onto a tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// Records every parameter of `net`; as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<T: Real>(tape: &mut Tape<T>, net: &Network<T>, trainable: bool) -> Self {
        let vars = net
            .param_ids()
            .map(|id| {
                let v = net.param(id).clone();
                if trainable {
                    tape.param(id, v)
                } else {
                    tape.constant(v)
                }
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Clean value and interval bounds of one tensor on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapedInterval {
    pub clean: Var,
    pub lo: Var,
    pub hi: Var,
}

/// Everything [`propagate_taped`] recorded.
#[derive(Clone, Debug)]
pub struct TapedTrace {
    /// Normalized input.
    pub input: TapedInterval,
    /// Output of every layer, in order.
    pub layers: Vec<TapedInterval>,
    /// Value entering the ReLU of each hidden layer `1..=m`.
    pub hidden: Vec<TapedInterval>,
    /// Input of the classification layer.
    pub final_input: TapedInterval,
    /// Clean logits.
    pub logits: Var,
    /// `(mean, biased variance)` used by each batch-norm layer.
    pub bn_stats: Vec<(Var, Var)>,
}

/// Runs the clean forward and the interval forward side by side, layer by
/// layer. Batch-norm layers compute statistics from the clean path (in
/// [`BnMode::Batch`]) and apply the same affine map to both paths; for a
/// negative scale the interval endpoints are swapped.
pub fn propagate_taped<T: Real>(
    tape: &mut Tape<T>,
    net: &Network<T>,
    params: &ParamVars,
    x: &Tensor<T>,
    input: &InputBox,
    bn: BnMode<'_, T>,
) -> Result<TapedTrace> {
    let expect: Vec<usize> = net.input_shape().to_vec();
    if x.rank() != expect.len() + 1 || x.shape()[1..] != expect[..] {
        return Err(Error::dim(format!(
            "network expects N×{expect:?} inputs, got {:?}",
            x.shape()
        )));
    }
    let n = x.shape()[0];
    if n == 0 {
        return Err(Error::arg("empty batch"));
    }
    let boxed = input.apply(x)?;
    let in_iv = TapedInterval {
        clean: tape.constant(boxed.clean),
        lo: tape.constant(boxed.bounds.lower().clone()),
        hi: tape.constant(boxed.bounds.upper().clone()),
    };
    let mut cur = in_iv;
    let mut layers = Vec::with_capacity(net.layers().len());
    let mut hidden = Vec::with_capacity(net.hidden_count());
    let mut bn_stats = Vec::new();
    let mut skips: Vec<TapedInterval> = Vec::new();
    let mut final_input = cur;
    let last = net.layers().len() - 1;
    for (i, layer) in net.layers().iter().enumerate() {
        let spec = layer.spec();
        let located = |e: Error| match e {
            Error::Numeric { .. } => e,
            other => Error::Build(format!("layer {i} ({}): {other}", spec.name())),
        };
        let next = match (spec, layer.params) {
            (LayerSpec::Dense { .. }, LayerParams::Affine { weight, bias }) => {
                if i == last {
                    final_input = cur;
                }
                let (w, b) = (params.get(weight), params.get(bias));
                let clean = tape.linear(cur.clean, w, b).map_err(located)?;
                let both = tape.interval_linear(cur.lo, cur.hi, w, b).map_err(located)?;
                TapedInterval {
                    clean,
                    lo: tape.pick(both, 0)?,
                    hi: tape.pick(both, 1)?,
                }
            }
            (
                &LayerSpec::Conv2d { stride, padding, .. },
                LayerParams::Affine { weight, bias },
            ) => {
                let (k, b) = (params.get(weight), params.get(bias));
                let clean = tape.conv2d(cur.clean, k, b, stride, padding).map_err(located)?;
                let both = tape
                    .interval_conv2d(cur.lo, cur.hi, k, b, stride, padding)
                    .map_err(located)?;
                TapedInterval {
                    clean,
                    lo: tape.pick(both, 0)?,
                    hi: tape.pick(both, 1)?,
                }
            }
            (&LayerSpec::BatchNorm { eps, .. }, LayerParams::BatchNorm { gamma, beta, stats }) => {
                let (mean, var) = match bn {
                    BnMode::Batch => (tape.channel_mean(cur.clean)?, tape.channel_var(cur.clean)?),
                    BnMode::Running => {
                        let rs = &net.running_stats()[stats];
                        (tape.constant(rs.mean.clone()), tape.constant(rs.var.clone()))
                    }
                    BnMode::Fixed(all) => {
                        let s = all.get(stats).ok_or_else(|| {
                            Error::arg(format!("no fixed statistics for batch-norm layer {i}"))
                        })?;
                        (tape.constant(s.mean.clone()), tape.constant(s.var.clone()))
                    }
                };
                bn_stats.push((mean, var));
                let (g, be) = (params.get(gamma), params.get(beta));
                let scale = tape.bn_scale(g, var, T::of(eps))?;
                let clean = tape.channel_affine(cur.clean, scale, mean, be)?;
                let lo = tape.channel_affine(cur.lo, scale, mean, be)?;
                let hi = tape.channel_affine(cur.hi, scale, mean, be)?;
                TapedInterval {
                    clean,
                    lo: tape.sign_select(scale, lo, hi)?,
                    hi: tape.sign_select(scale, hi, lo)?,
                }
            }
            (LayerSpec::Relu, _) => {
                hidden.push(cur);
                TapedInterval {
                    clean: tape.relu(cur.clean),
                    lo: tape.relu(cur.lo),
                    hi: tape.relu(cur.hi),
                }
            }
            (LayerSpec::Flatten, _) => {
                let shape = [n, layer.resolved.out_shape[0]];
                TapedInterval {
                    clean: tape.reshape(cur.clean, &shape)?,
                    lo: tape.reshape(cur.lo, &shape)?,
                    hi: tape.reshape(cur.hi, &shape)?,
                }
            }
            (LayerSpec::ResidualBegin, _) => {
                skips.push(cur);
                cur
            }
            (LayerSpec::ResidualAdd, _) => {
                let s = skips.pop().expect("residual pairs are checked at build time");
                TapedInterval {
                    clean: tape.add(cur.clean, s.clean)?,
                    lo: tape.add(cur.lo, s.lo)?,
                    hi: tape.add(cur.hi, s.hi)?,
                }
            }
            (spec, slots) => {
                return Err(Error::Contract(format!(
                    "layer {i}: {} with parameter slots {slots:?}",
                    spec.name()
                )))
            }
        };
        for (what, v) in [("clean activation", next.clean), ("lower bound", next.lo), ("upper bound", next.hi)] {
            if !tape.value(v).all_finite() {
                return Err(Error::Numeric {
                    location: format!("layer {i} ({})", spec.name()),
                    message: format!("non-finite {what}"),
                });
            }
        }
        layers.push(next);
        cur = next;
    }
    Ok(TapedTrace {
        input: in_iv,
        layers,
        hidden,
        final_input,
        logits: cur.clean,
        bn_stats,
    })
}

/// Extracted values of a [`TapedTrace`].
#[derive(Clone, Debug)]
pub struct BoundTrace<T> {
    pub input: IntervalBounds<T>,
    pub clean_input: Tensor<T>,
    /// Clean output and bounds of every layer.
    pub layers: Vec<(Tensor<T>, IntervalBounds<T>)>,
    /// Pre-activation (ReLU input) bounds and clean values per hidden layer.
    pub hidden: Vec<(Tensor<T>, IntervalBounds<T>)>,
    pub final_input: IntervalBounds<T>,
    pub logits: Tensor<T>,
    pub bn_stats: Vec<BnStats<T>>,
}

impl<T: Real> BoundTrace<T> {
    pub fn from_tape(tape: &Tape<T>, t: &TapedTrace) -> Self {
        let iv = |x: &TapedInterval| {
            IntervalBounds::from_parts_unchecked(tape.value(x.lo).clone(), tape.value(x.hi).clone())
        };
        Self {
            input: iv(&t.input),
            clean_input: tape.value(t.input.clean).clone(),
            layers: t.layers.iter().map(|l| (tape.value(l.clean).clone(), iv(l))).collect(),
            hidden: t.hidden.iter().map(|l| (tape.value(l.clean).clone(), iv(l))).collect(),
            final_input: iv(&t.final_input),
            logits: tape.value(t.logits).clone(),
            bn_stats: t
                .bn_stats
                .iter()
                .map(|&(m, v)| BnStats {
                    mean: tape.value(m).clone(),
                    var: tape.value(v).clone(),
                })
                .collect(),
        }
    }
}

/// Clean and interval forward of a batch without recording gradients.
pub fn propagate<T: Real>(
    net: &Network<T>,
    x: &Tensor<T>,
    input: &InputBox,
    bn: BnMode<'_, T>,
) -> Result<BoundTrace<T>> {
    let mut tape = Tape::new();
    let params = ParamVars::bind(&mut tape, net, false);
    let taped = propagate_taped(&mut tape, net, &params, x, input, bn)?;
    Ok(BoundTrace::from_tape(&tape, &taped))
}

/// Clean logits only, using the same kernels as the bound pass.
pub fn forward_clean<T: Real>(
    net: &Network<T>,
    x: &Tensor<T>,
    input: &InputBox,
    bn: BnMode<'_, T>,
) -> Result<Tensor<T>> {
    let point = InputBox { eps: 0.0, ..input.clone() };
    Ok(propagate(net, x, &point, bn)?.logits)
}
