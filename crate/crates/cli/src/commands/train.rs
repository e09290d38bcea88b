use std::path::{Path, PathBuf};

use ibp_core::net::Network;
use ibp_core::train::{evaluate, read_metrics_csv, write_metrics_csv, MetricsRow, Trainer};
use ibp_core::{Real, SeededRng};
use serde::Serialize;

use super::{csv_text, write_text, Outcome};
use crate::config::RunConfig;
use crate::datasets::{self, Splits};
use crate::error::{CliError, CliResult};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS: &str = "metrics.csv";
pub const FINAL_EVAL: &str = "final-eval.csv";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint in the output directory.
    pub resume: bool,
    /// Stop after this many epochs in this invocation.
    pub stop_after: Option<usize>,
}

/// Summary of a finished (or paused) training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub rows: Vec<MetricsRow>,
    pub finished: bool,
    pub final_eval: Option<FinalEval>,
    pub checkpoint: PathBuf,
}

/// Test-split result after the last epoch, at the test radius.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalEval {
    pub split: String,
    pub examples: usize,
    pub eps: f64,
    pub standard_error: f64,
    pub verified_error: f64,
    pub active: f64,
    pub inactive: f64,
    pub unstable: f64,
    pub log_tightness_ratio: f64,
}

pub fn run_typed<T: Real>(cfg: &RunConfig, out: &Path, opts: &TrainOptions) -> CliResult<TrainSummary> {
    let tc = cfg.train_config()?;
    let model = cfg.model()?;
    let data = cfg.data()?;
    datasets::validate_paths(data, Path::new(""))?;
    let ckpt = out.join(CHECKPOINT);
    if opts.resume && !ckpt.is_file() {
        return Err(CliError::Config(format!("cannot resume: {} not found", ckpt.display())));
    }
    let arch = model.arch();
    let fresh = Network::<T>::build(&arch)?;
    let Splits { train, eval, test } = datasets::load(data, Path::new(""))?;
    for ds in [&train, &eval, &test] {
        datasets::check_compatible(&arch, fresh.classes(), ds)?;
    }
    let input = train.input_box(0.0);

    let (mut trainer, mut rows) = if opts.resume {
        let (trainer, _) = Trainer::<T>::load(&ckpt)?;
        if trainer.config() != &tc || trainer.net().arch() != &arch {
            return Err(CliError::Config(
                "checkpoint was written with a different training or model configuration".into(),
            ));
        }
        let mut rows = read_metrics_csv(&out.join(METRICS))?;
        rows.truncate(trainer.epoch());
        (trainer, rows)
    } else {
        let mut net = fresh;
        net.initialize(model.init, &mut SeededRng::new(tc.seed).fork(0x1417))?;
        if model.residual_calibrate {
            net.residual_calibrate()?;
        }
        (Trainer::new(net, tc.clone(), input, train.len())?, Vec::new())
    };

    let mut this_run = 0;
    while !trainer.is_finished() && opts.stop_after.is_none_or(|n| this_run < n) {
        let row = trainer.train_epoch(&train, &eval)?;
        println!(
            "epoch {:>3}  eps {:.4}  lambda {:.4}  loss {:.4}  std-err {:.4}  verified-err {:.4}  inactive {:.3}",
            row.epoch, row.eps, row.lambda, row.loss, row.standard_error, row.verified_error, row.inactive
        );
        rows.push(row);
        write_metrics_csv(&out.join(METRICS), &rows)?;
        trainer.save(&ckpt, serde_json::json!({ "config": cfg.to_toml() }))?;
        this_run += 1;
    }

    let final_eval = if trainer.is_finished() {
        let eps = tc.eps_test;
        let r = evaluate(trainer.net(), &test, &test.input_box(eps), tc.eval_batch_size)?;
        let fe = FinalEval {
            split: test.split.clone(),
            examples: r.examples,
            eps,
            standard_error: r.standard_error,
            verified_error: r.verified_error,
            active: r.fractions.active,
            inactive: r.fractions.inactive,
            unstable: r.fractions.unstable,
            log_tightness_ratio: r.log_tightness_ratio(),
        };
        write_text(&out.join(FINAL_EVAL), &csv_text(std::slice::from_ref(&fe))?)?;
        println!(
            "final  {} examples  eps {}  std-err {:.4}  verified-err {:.4}",
            fe.examples, fe.eps, fe.standard_error, fe.verified_error
        );
        Some(fe)
    } else {
        None
    };
    Ok(TrainSummary {
        rows,
        finished: trainer.is_finished(),
        final_eval,
        checkpoint: ckpt,
    })
}

pub fn run(cfg: &RunConfig, out: &Path, opts: &TrainOptions) -> CliResult<Outcome> {
    let summary = super::with_precision!(cfg, run_typed(cfg, out, opts))?;
    Ok(Outcome::Train(summary))
}
