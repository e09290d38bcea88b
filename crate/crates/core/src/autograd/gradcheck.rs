use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

use super::tape::{ParamId, Tape, Var};

/// Settings for a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Floor on the denominator of the relative error.
    pub floor: f64,
    /// Maximum coordinates probed per parameter tensor; `None` probes all.
    pub per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            per_param: Some(16),
            seed: 0,
        }
    }
}

/// One probed coordinate.
#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    /// Coordinates whose ±step evaluations changed a discrete decision.
    pub skipped_kinks: usize,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradcheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn checked(&self) -> usize {
        self.entries.len()
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of a scalar function of `params` with
/// central differences.
///
/// `build` records the function on the supplied tape, registering each
/// parameter through [`Tape::param`]. Coordinates whose perturbed
/// evaluations produce a different mask fingerprint than the base point sit
/// on or near a kink and are skipped.
pub fn gradcheck<F>(
    params: &BTreeMap<ParamId, Tensor<f64>>,
    build: F,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &BTreeMap<ParamId, Tensor<f64>>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = build(&mut tape, params)?;
    let base_fp = tape.mask_fingerprint();
    let grads = tape.backward(root)?.into_gradient_set(&tape);

    let eval = |p: &BTreeMap<ParamId, Tensor<f64>>| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let r = build(&mut t, p)?;
        Ok((t.value(r).item(), t.mask_fingerprint()))
    };

    let mut rng = SeededRng::new(opts.seed);
    let mut report = GradcheckReport::default();
    let mut work = params.clone();
    for (&id, value) in params {
        let analytic = grads
            .get(&id)
            .ok_or_else(|| Error::Contract(format!("parameter {id:?} was not registered")))?;
        let mut indices: Vec<usize> = (0..value.len()).collect();
        if let Some(limit) = opts.per_param {
            rng.shuffle(&mut indices);
            indices.truncate(limit);
            indices.sort_unstable();
        }
        for idx in indices {
            let orig = value.data()[idx];
            work.get_mut(&id).expect("cloned").data_mut()[idx] = orig + opts.step;
            let (fp, fp_mask) = eval(&work)?;
            work.get_mut(&id).expect("cloned").data_mut()[idx] = orig - opts.step;
            let (fm, fm_mask) = eval(&work)?;
            work.get_mut(&id).expect("cloned").data_mut()[idx] = orig;
            if fp_mask != base_fp || fm_mask != base_fp {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.data()[idx];
            report.entries.push(GradcheckEntry {
                param: id,
                index: idx,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, opts.floor),
            });
        }
    }
    Ok(report)
}
