//! Empirical soundness check: sampled perturbations must stay inside the
//! propagated bounds.

use super::{margin_lower_bounds, propagate, BnMode, BoundTrace, InputBox};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::{Real, SeededRng, Tensor};

/// Outcome of [`check_containment`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContainmentReport {
    /// Individual value-within-bound comparisons performed.
    pub checks: usize,
    /// Comparisons that failed by more than the tolerance.
    pub violations: usize,
    /// Largest excess beyond a bound, in units of the bound's ulp (0 if every
    /// value was inside).
    pub worst_ulps: f64,
    /// Where `worst_ulps` was observed.
    pub worst_site: String,
}

impl ContainmentReport {
    fn record(&mut self, excess_ulps: f64, tol_ulps: f64, site: impl FnOnce() -> String) {
        self.checks += 1;
        if excess_ulps > tol_ulps {
            self.violations += 1;
        }
        if excess_ulps > self.worst_ulps {
            self.worst_ulps = excess_ulps;
            self.worst_site = site();
        }
    }

    pub fn merge(&mut self, other: ContainmentReport) {
        self.checks += other.checks;
        self.violations += other.violations;
        if other.worst_ulps > self.worst_ulps {
            self.worst_ulps = other.worst_ulps;
            self.worst_site = other.worst_site;
        }
    }
}

/// Unit in the last place of `v` in precision `T` (at least the smallest
/// normal number, so bounds at zero still get a tolerance).
fn ulp<T: Real>(v: f64) -> f64 {
    T::epsilon().as_f64() * v.abs().max(T::min_positive_value().as_f64())
}

/// Excess of `v` outside `[lo, hi]`, in ulps of the violated bound.
fn excess_ulps<T: Real>(v: T, lo: T, hi: T) -> f64 {
    let (v, lo, hi) = (v.as_f64(), lo.as_f64(), hi.as_f64());
    if v < lo {
        (lo - v) / ulp::<T>(lo)
    } else if v > hi {
        (v - hi) / ulp::<T>(hi)
    } else {
        0.0
    }
}

/// Draws `samples` perturbations `δ` with `‖δ‖∞ ≤ ε` (alternating uniform
/// draws and random sign corners), runs the clean forward pass on
/// `clip(x + δ)` and checks every layer output against the bounds of
/// `propagate(net, x, ε)`, and every true margin against its lower bound.
///
/// Batch norm uses the clean statistics of `x` for both passes, so each
/// perturbed example sees exactly the affine maps the bounds were computed
/// with.
pub fn check_containment<T: Real>(
    net: &Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    input: &InputBox,
    samples: usize,
    rng: &mut SeededRng,
    tol_ulps: f64,
) -> Result<ContainmentReport> {
    check_containment_sampled_at(net, x, labels, input, input.eps, samples, rng, tol_ulps)
}

/// [`check_containment`] with perturbations drawn at radius `sample_eps`
/// instead of the bound radius; with `sample_eps > input.eps` violations are
/// expected, which makes it a negative control for the checker itself.
#[allow(clippy::too_many_arguments)]
pub fn check_containment_sampled_at<T: Real>(
    net: &Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    input: &InputBox,
    sample_eps: f64,
    samples: usize,
    rng: &mut SeededRng,
    tol_ulps: f64,
) -> Result<ContainmentReport> {
    let bounds = propagate(net, x, input, BnMode::Batch)?;
    let margins = margin_lower_bounds(&bounds, net, labels)?;
    let [clip_lo, clip_hi] = input.clip;
    let n = x.shape()[0];
    let mut report = ContainmentReport::default();
    // Perturbed copies are processed in chunks to bound memory.
    let chunk = (4096 / n).max(1);
    let mut done = 0;
    while done < samples {
        let s = chunk.min(samples - done);
        let mut data = Vec::with_capacity(s * x.len());
        for k in 0..s {
            let corner = (done + k) % 2 == 1;
            for &v in x.data() {
                let d = if corner {
                    if rng.below(2) == 0 { -sample_eps } else { sample_eps }
                } else {
                    (2.0 * rng.unit() - 1.0) * sample_eps
                };
                let p = v + T::of(d);
                data.push(p.max(T::of(clip_lo)).min(T::of(clip_hi)));
            }
        }
        let mut shape = x.shape().to_vec();
        shape[0] = s * n;
        let xp = Tensor::new(shape, data)?;
        let point = input.with_eps(0.0);
        let pert = propagate(net, &xp, &point, BnMode::Fixed(&bounds.bn_stats))?;
        compare(&bounds, &pert, &margins, labels, net.classes(), n, tol_ulps, done, &mut report)?;
        done += s;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn compare<T: Real>(
    bounds: &BoundTrace<T>,
    pert: &BoundTrace<T>,
    margins: &Tensor<T>,
    labels: &[usize],
    classes: usize,
    n: usize,
    tol_ulps: f64,
    first_sample: usize,
    report: &mut ContainmentReport,
) -> Result<()> {
    if bounds.layers.len() != pert.layers.len() {
        return Err(Error::Contract("perturbed trace has a different layer count".into()));
    }
    for (i, ((_, b), (v, _))) in bounds.layers.iter().zip(&pert.layers).enumerate() {
        let per = b.lower().len();
        let (lo, hi) = (b.lower().data(), b.upper().data());
        for (j, &val) in v.data().iter().enumerate() {
            let k = j % per;
            report.record(excess_ulps(val, lo[k], hi[k]), tol_ulps, || {
                format!("layer {i}, sample {}, element {k}", first_sample + j / per)
            });
        }
    }
    // True margins of the perturbed inputs against their lower bounds.
    let m = classes - 1;
    for (r, logits) in pert.logits.data().chunks(classes).enumerate() {
        let e = r % n;
        let y = labels[e];
        let mut slot = 0;
        for (c, &l) in logits.iter().enumerate() {
            if c == y {
                continue;
            }
            let margin = logits[y] - l;
            let lb = margins.data()[e * m + slot];
            report.record(excess_ulps(margin, lb, T::infinity()), tol_ulps, || {
                format!("margin {y}-{c}, sample {}, example {e}", first_sample + r / n)
            });
            slot += 1;
        }
    }
    Ok(())
}
