use std::collections::BTreeMap;
use std::path::Path;

use ibp_core::autograd::{gradcheck, GradcheckOptions, ParamId};
use ibp_core::ibp::{InputBox, ParamVars};
use ibp_core::net::{ArchSpec, InitScheme, LayerParams, Network};
use ibp_core::objective::{lambda_value, total_objective, ObjectiveSpec, RegularizerConfig};
use ibp_core::tensor::{sample_gaussian, sample_uniform};
use ibp_core::{SeededRng, Tensor};
use serde::Serialize;

use super::{csv_text, write_text, Outcome};
use crate::config::{GradcheckConfig, RunConfig};
use crate::error::{CliError, CliResult};

pub const GRADCHECK_CSV: &str = "gradcheck.csv";

#[derive(Clone, Debug, PartialEq, Serialize)]
struct EntryRow<'a> {
    param: &'a str,
    index: usize,
    analytic: f64,
    numeric: f64,
    rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSummary {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    /// Parameter holding the largest relative error.
    pub worst_param: String,
    pub lambda: f64,
}

/// The MLP under test, moved away from its symmetric initialization
/// (nonzero biases, γ ≠ 1, β ≠ 0) so every parameter gets a generic gradient.
fn build_net(g: &GradcheckConfig, rng: &mut SeededRng) -> CliResult<Network<f64>> {
    if g.dims.len() < 2 {
        return Err(CliError::Config("[gradcheck] dims needs at least an input and an output width".into()));
    }
    let mut net = Network::<f64>::build(&ArchSpec::mlp(&g.dims, g.full_bn))?;
    net.initialize(g.init.unwrap_or(InitScheme::Ibp), rng)?;
    let slots: Vec<LayerParams> = net.layers().iter().map(|l| l.params).collect();
    for p in slots {
        let shifted: Vec<(ParamId, f64)> = match p {
            LayerParams::Affine { bias, .. } => vec![(bias, 0.0)],
            LayerParams::BatchNorm { gamma, beta, .. } => vec![(gamma, 1.0), (beta, 0.0)],
            LayerParams::None => vec![],
        };
        for (id, center) in shifted {
            let shape = net.param(id).shape().to_vec();
            net.set_param(id, sample_gaussian(rng, &shape, center, 0.1)?)?;
        }
    }
    Ok(net)
}

pub fn run_checked(cfg: &RunConfig, out: &Path) -> CliResult<GradcheckSummary> {
    let g = cfg
        .gradcheck
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [gradcheck] section".into()))?;
    if g.batch == 0 || g.step.is_nan() || g.step <= 0.0 || g.tolerance.is_nan() || g.tolerance <= 0.0 {
        return Err(CliError::Config("[gradcheck] batch, step and tolerance must be positive".into()));
    }
    let mut rng = SeededRng::new(g.seed);
    let net = build_net(g, &mut rng)?;
    let classes = net.classes();
    let x = sample_uniform::<f64>(&mut rng, &[g.batch, g.dims[0]], 0.0, 1.0)?;
    let labels: Vec<usize> = (0..g.batch).map(|_| rng.below(classes)).collect();
    let input = InputBox::unit(0.0);
    let spec = ObjectiveSpec {
        eps: g.eps,
        eps_target: g.eps_target,
        reg: RegularizerConfig {
            tau: g.tau,
            lambda0: g.lambda0,
        },
        input: &input,
    };
    let opts = GradcheckOptions {
        step: g.step,
        per_param: g.per_param,
        seed: g.seed,
        ..GradcheckOptions::default()
    };
    let params: BTreeMap<ParamId, Tensor<f64>> = net.param_ids().map(|id| (id, net.param(id).clone())).collect();
    let lambda = if g.eps_target == 0.0 {
        0.0
    } else {
        lambda_value(g.lambda0, g.eps, g.eps_target)?
    };
    let report = gradcheck(
        &params,
        |tape, p| {
            let mut local = net.clone();
            for (&id, v) in p {
                local.set_param(id, v.clone())?;
            }
            let vars = ParamVars::bind(tape, &local, true);
            let parts = total_objective(tape, &local, &vars, &x, &labels, &spec)?;
            if !g.inject_fault {
                return Ok(parts.total);
            }
            // s − stop_gradient(s) is identically zero but has unit gradient
            // in every parameter: values stay put while gradients shift.
            let mut s = None;
            for id in local.param_ids() {
                let t = tape.sum_all(vars.get(id));
                s = Some(match s {
                    None => t,
                    Some(acc) => tape.add(acc, t)?,
                });
            }
            let s = s.expect("network has parameters");
            let frozen = tape.constant(tape.value(s).clone());
            let zero = tape.sub(s, frozen)?;
            tape.add(parts.total, zero)
        },
        &opts,
    )?;

    let rows: Vec<EntryRow> = report
        .entries
        .iter()
        .map(|e| EntryRow {
            param: net.param_name(e.param),
            index: e.index,
            analytic: e.analytic,
            numeric: e.numeric,
            rel_error: e.rel_error,
        })
        .collect();
    write_text(&out.join(GRADCHECK_CSV), &csv_text(&rows)?)?;

    if report.checked() == 0 {
        return Err(CliError::Tolerance("no coordinate could be checked (all sat on kinks)".into()));
    }
    let worst = report.worst().expect("non-empty");
    let summary = GradcheckSummary {
        checked: report.checked(),
        skipped_kinks: report.skipped_kinks,
        max_rel_error: report.max_rel_error(),
        worst_param: net.param_name(worst.param).to_string(),
        lambda,
    };
    println!(
        "checked {} coordinates ({} skipped at kinks), lambda {:.4}, max relative error {:.3e} at {}[{}]",
        summary.checked, summary.skipped_kinks, summary.lambda, summary.max_rel_error, summary.worst_param, worst.index
    );
    if summary.max_rel_error > g.tolerance {
        return Err(CliError::Tolerance(format!(
            "max relative error {:.3e} > {:.1e} at parameter {}[{}] (analytic {:.6e}, numeric {:.6e})",
            summary.max_rel_error, g.tolerance, summary.worst_param, worst.index, worst.analytic, worst.numeric
        )));
    }
    Ok(summary)
}

/// The check always runs in binary64; `[run] precision` does not apply.
pub fn run(cfg: &RunConfig, out: &Path) -> CliResult<Outcome> {
    Ok(Outcome::Gradcheck(run_checked(cfg, out)?))
}
