#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Output;

use ibp_cli::{CliResult, Outcome};

pub fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Runs the command in-process with `--config` and `--out` filled in.
pub fn run(cmd: &str, cfg: &str, out: &Path, extra: &[&str]) -> CliResult<Outcome> {
    let cfg = config(cfg);
    let mut args = vec![
        "ibpcert".to_string(),
        cmd.to_string(),
        "--config".into(),
        cfg.display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    ibp_cli::run_args(args)
}

/// Runs the compiled binary.
pub fn exec(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_ibpcert"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
