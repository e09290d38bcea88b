use std::path::{Path, PathBuf};

use ibp_core::train::{evaluate, load_network};
use ibp_core::Real;
use serde::Serialize;

use super::{csv_text, write_text, Outcome};
use crate::config::RunConfig;
use crate::datasets;
use crate::error::{CliError, CliResult};

pub const EVAL_CSV: &str = "eval.csv";

/// Standard and verified error at one radius.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub eps: f64,
    pub examples: usize,
    pub standard_error: f64,
    pub verified_error: f64,
    pub active: f64,
    pub inactive: f64,
    pub unstable: f64,
    pub log_tightness_ratio: f64,
}

/// The checkpoint named on the command line wins over `[eval] checkpoint`.
fn checkpoint_path(cfg: &RunConfig, cli: Option<&Path>) -> CliResult<PathBuf> {
    let path = cli
        .map(Path::to_path_buf)
        .or_else(|| cfg.eval.as_ref().and_then(|e| e.checkpoint.clone()))
        .ok_or_else(|| CliError::Usage("no checkpoint given (--checkpoint or [eval] checkpoint)".into()))?;
    if !path.is_file() {
        return Err(CliError::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    Ok(path)
}

pub fn run_typed<T: Real>(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> CliResult<Vec<EvalRow>> {
    let eval = cfg.eval.as_ref().ok_or_else(|| CliError::Config("missing [eval] section".into()))?;
    if eval.eps.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(CliError::Config("[eval] eps values must be finite and non-negative".into()));
    }
    let data = cfg.data()?;
    datasets::validate_paths(data, Path::new(""))?;
    let ckpt = checkpoint_path(cfg, checkpoint)?;
    let loaded = load_network::<T>(&ckpt)?;
    let test = datasets::load(data, Path::new(""))?.test;
    datasets::check_compatible(loaded.net.arch(), loaded.net.classes(), &test)?;
    if loaded.input.mean != test.normalization.mean || loaded.input.std != test.normalization.std {
        return Err(CliError::Config(format!(
            "checkpoint was trained with a different input normalization than the {} data",
            test.split
        )));
    }
    let mut rows = Vec::with_capacity(eval.eps.len());
    for &eps in &eval.eps {
        let r = evaluate(&loaded.net, &test, &test.input_box(eps), eval.batch_size)?;
        println!(
            "eps {eps:<8} examples {}  std-err {:.4}  verified-err {:.4}",
            r.examples, r.standard_error, r.verified_error
        );
        rows.push(EvalRow {
            eps,
            examples: r.examples,
            standard_error: r.standard_error,
            verified_error: r.verified_error,
            active: r.fractions.active,
            inactive: r.fractions.inactive,
            unstable: r.fractions.unstable,
            log_tightness_ratio: r.log_tightness_ratio(),
        });
    }
    write_text(&out.join(EVAL_CSV), &csv_text(&rows)?)?;
    Ok(rows)
}

pub fn run(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> CliResult<Outcome> {
    let rows = super::with_precision!(cfg, run_typed(cfg, out, checkpoint))?;
    Ok(Outcome::Eval(rows))
}
