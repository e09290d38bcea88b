//! The four subcommands. Each exposes a `run` returning a structured
//! [`Outcome`] so tests can inspect results without parsing CSV.

use std::path::Path;

use crate::error::{CliError, CliResult};

/// Instantiates a generic command body at the configured precision.
macro_rules! with_precision {
    ($cfg:expr, $f:ident ( $($arg:expr),* $(,)? )) => {
        match $cfg.run.precision {
            $crate::config::Precision::F32 => $f::<f32>($($arg),*),
            $crate::config::Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}
pub(crate) use with_precision;

pub mod audit;
pub mod eval;
pub mod gradcheck;
pub mod train;

pub use audit::AuditReport;
pub use eval::EvalRow;
pub use gradcheck::GradcheckSummary;
pub use train::{TrainOptions, TrainSummary};

/// What a subcommand produced.
#[derive(Clone, Debug)]
pub enum Outcome {
    Train(TrainSummary),
    Eval(Vec<EvalRow>),
    Audit(AuditReport),
    Gradcheck(GradcheckSummary),
}

/// Writes a text file atomically (temporary file, then rename).
pub(crate) fn write_text(path: &Path, text: &str) -> CliResult<()> {
    ibp_core::io::write_atomic(path, text.as_bytes()).map_err(CliError::from)
}

/// Serializes CSV records with LF line endings.
pub(crate) fn csv_text<R: serde::Serialize>(rows: &[R]) -> CliResult<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Config(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
