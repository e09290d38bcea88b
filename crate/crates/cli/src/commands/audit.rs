use std::path::Path;

use ibp_core::ibp::{propagate, tightness_stats, BnMode, InputBox};
use ibp_core::net::{difference_gain_empirical, InitScheme, Network};
use ibp_core::tensor::sample_uniform;
use ibp_core::{par, Real, SeededRng};
use serde::Serialize;

use super::{csv_text, write_text, Outcome};
use crate::config::{AuditConfig, RunConfig};
use crate::error::{CliError, CliResult};

pub const GAINS_CSV: &str = "gains.csv";
pub const PROFILE_CSV: &str = "profile.csv";

/// Difference gain of one scheme at one fan-in. `layer` is empty for the
/// standalone fan-in sweep and names the affine layer otherwise.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GainRow {
    pub scheme: String,
    pub layer: String,
    pub fan_in: usize,
    pub closed_form: f64,
    pub empirical_mean: f64,
    pub empirical_std: f64,
    pub trials: usize,
}

/// Mean over seeds of `ln Ê(Δᵢ)` and `ln(Ê(Δᵢ)/Ê(Δ₀))` for an untrained
/// network; layer 0 is the input box.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileRow {
    pub scheme: String,
    pub layer: usize,
    pub log_width: f64,
    pub log_ratio: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditReport {
    pub gains: Vec<GainRow>,
    pub profile: Vec<ProfileRow>,
}

impl AuditReport {
    /// The fan-in sweep entry for `scheme` at `fan_in`.
    pub fn gain(&self, scheme: InitScheme, fan_in: usize) -> Option<&GainRow> {
        self.gains
            .iter()
            .find(|g| g.scheme == scheme.as_str() && g.layer.is_empty() && g.fan_in == fan_in)
    }

    /// `ln(Ê(Δₘ)/Ê(Δ₀))` at the deepest hidden layer for `scheme`.
    pub fn final_log_ratio(&self, scheme: InitScheme) -> Option<f64> {
        self.profile
            .iter()
            .filter(|p| p.scheme == scheme.as_str())
            .max_by_key(|p| p.layer)
            .map(|p| p.log_ratio)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Empirical gains of `trials` independent `rows × fan_in` draws.
fn gain_trials<T: Real>(scheme: InitScheme, fan_in: usize, rows: usize, trials: usize, rng: &SeededRng) -> CliResult<Vec<f64>> {
    par::map_range(trials, |t| {
        let mut r = rng.fork(t as u64);
        let w = scheme.sample::<T>(&mut r, &[rows, fan_in], fan_in)?;
        difference_gain_empirical(&w, fan_in)
    })
    .into_iter()
    .map(|g| g.map_err(CliError::from))
    .collect()
}

fn gain_row<T: Real>(
    scheme: InitScheme,
    layer: String,
    fan_in: usize,
    a: &AuditConfig,
    rng: &SeededRng,
) -> CliResult<GainRow> {
    let g = gain_trials::<T>(scheme, fan_in, a.rows, a.trials, rng)?;
    let (mean, std) = mean_std(&g);
    Ok(GainRow {
        scheme: scheme.as_str().to_string(),
        layer,
        fan_in,
        closed_form: scheme.closed_form_gain(fan_in),
        empirical_mean: mean,
        empirical_std: std,
        trials: a.trials,
    })
}

pub fn run_typed<T: Real>(cfg: &RunConfig, out: &Path) -> CliResult<AuditReport> {
    let a = cfg.audit.clone().ok_or_else(|| CliError::Config("missing [audit] section".into()))?;
    if a.trials == 0 || a.rows == 0 || a.fan_ins.contains(&0) {
        return Err(CliError::Config("[audit] trials, rows and fan-ins must be positive".into()));
    }
    let root = SeededRng::new(a.seed);
    let mut report = AuditReport::default();
    let probe = cfg.model.as_ref().map(|m| Network::<T>::build(&m.arch())).transpose()?;

    for (si, &scheme) in a.schemes.iter().enumerate() {
        let srng = root.fork(si as u64);
        for (fi, &n) in a.fan_ins.iter().enumerate() {
            report.gains.push(gain_row::<T>(scheme, String::new(), n, &a, &srng.fork(fi as u64))?);
        }
        if let Some(net) = &probe {
            for info in net.affine_layers() {
                let name = format!("{} ({})", info.layer, net.layers()[info.layer].spec().name());
                let lrng = srng.fork(0x1000 + info.layer as u64);
                report.gains.push(gain_row::<T>(scheme, name, info.fan_in, &a, &lrng)?);
            }
        }
    }

    if let (Some(model), true) = (cfg.model.as_ref(), a.profile_seeds > 0) {
        let arch = model.arch();
        for &scheme in &a.schemes {
            let mut sums: Vec<(f64, f64)> = Vec::new();
            for seed in 0..a.profile_seeds {
                let mut rng = root.fork(0x9_0000 + seed as u64);
                let mut net = Network::<T>::build(&arch)?;
                net.initialize(scheme, &mut rng)?;
                if model.residual_calibrate {
                    net.residual_calibrate()?;
                }
                let mut shape = vec![a.profile_batch];
                shape.extend_from_slice(&arch.input);
                let x = sample_uniform::<T>(&mut rng, &shape, 0.0, 1.0)?;
                let trace = propagate(&net, &x, &InputBox::unit(a.profile_eps), BnMode::Batch)?;
                let w = tightness_stats(&trace);
                sums.resize(w.len(), (0.0, 0.0));
                for (acc, &wi) in sums.iter_mut().zip(&w) {
                    acc.0 += wi.ln();
                    acc.1 += (wi / w[0]).ln();
                }
            }
            let k = a.profile_seeds as f64;
            for (layer, (lw, lr)) in sums.into_iter().enumerate() {
                report.profile.push(ProfileRow {
                    scheme: scheme.as_str().to_string(),
                    layer,
                    log_width: lw / k,
                    log_ratio: lr / k,
                    seeds: a.profile_seeds,
                });
            }
        }
    }

    for g in report.gains.iter().filter(|g| g.layer.is_empty()) {
        println!(
            "{:<16} n={:<6} closed-form {:>9.3}  empirical {:>9.3} ± {:.3}",
            g.scheme, g.fan_in, g.closed_form, g.empirical_mean, g.empirical_std
        );
    }
    for &scheme in &a.schemes {
        if let Some(r) = report.final_log_ratio(scheme) {
            println!("{:<16} ln(E[Δm]/E[Δ0]) = {r:.3}", scheme.as_str());
        }
    }
    write_text(&out.join(GAINS_CSV), &csv_text(&report.gains)?)?;
    if !report.profile.is_empty() {
        write_text(&out.join(PROFILE_CSV), &csv_text(&report.profile)?)?;
    }
    Ok(report)
}

pub fn run(cfg: &RunConfig, out: &Path) -> CliResult<Outcome> {
    let report = super::with_precision!(cfg, run_typed(cfg, out))?;
    Ok(Outcome::Audit(report))
}
