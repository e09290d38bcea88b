use std::path::Path;

use ibp_core::data::{load_mnist_idx, synth_blobs, Dataset};
use ibp_core::net::ArchSpec;
use ibp_core::SeededRng;

use crate::config::DataConfig;
use crate::error::{CliError, CliResult};

/// Training set, the held-out set evaluated after every epoch, and the
/// final test set.
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
    pub test: Dataset,
}

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Checks that every input file exists, before any computation starts.
pub fn validate_paths(data: &DataConfig, base: &Path) -> CliResult<()> {
    if let DataConfig::Mnist { dir, .. } = data {
        let dir = base.join(dir);
        for f in MNIST_FILES {
            let p = dir.join(f);
            if !p.is_file() {
                return Err(CliError::Config(format!(
                    "MNIST file {} not found (see scripts/fetch_mnist.sh)",
                    p.display()
                )));
            }
        }
    }
    Ok(())
}

pub fn load(data: &DataConfig, base: &Path) -> CliResult<Splits> {
    validate_paths(data, base)?;
    match data {
        DataConfig::Mnist {
            dir,
            train_limit,
            eval_limit,
            test_limit,
        } => {
            let dir = base.join(dir);
            let train = load_mnist_idx(&dir, "train")?;
            let test = load_mnist_idx(&dir, "test")?;
            let train = match train_limit {
                Some(n) => train.head(*n)?,
                None => train,
            };
            let eval = test.head(*eval_limit)?;
            let test = match test_limit {
                Some(n) => test.head(*n)?,
                None => test,
            };
            Ok(Splits { train, eval, test })
        }
        &DataConfig::Blobs {
            classes,
            dim,
            per_class,
            test_per_class,
            separation,
            seed,
        } => {
            let root = SeededRng::new(seed);
            let train = synth_blobs(&mut root.fork(0), per_class, classes, dim, separation)?;
            let test = synth_blobs(&mut root.fork(1), test_per_class, classes, dim, separation)?;
            Ok(Splits {
                train,
                eval: test.clone(),
                test,
            })
        }
    }
}

/// The network must accept the dataset's examples and emit one logit per
/// class.
pub fn check_compatible(arch: &ArchSpec, classes: usize, ds: &Dataset) -> CliResult<()> {
    if arch.input != ds.example_shape() {
        return Err(CliError::Config(format!(
            "model input {:?} does not match {} examples of shape {:?}",
            arch.input,
            ds.split,
            ds.example_shape()
        )));
    }
    if classes != ds.classes {
        return Err(CliError::Config(format!(
            "model has {classes} outputs but the data has {} classes",
            ds.classes
        )));
    }
    Ok(())
}
