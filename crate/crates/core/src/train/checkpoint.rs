//! Training checkpoints on top of the tensor container.
//!
//! Tensors: every parameter under its network name, `running.{k}.mean` /
//! `running.{k}.var` for each batch-norm layer, and `adam.m.{name}` /
//! `adam.v.{name}` for the optimizer moments. Everything else (architecture,
//! counters, configuration, input box) lives in the manifest metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::ibp::InputBox;
use crate::io::Container;
use crate::net::{ArchSpec, Network};
use crate::tensor::Real;

pub const CHECKPOINT_KIND: &str = "ibp-checkpoint";

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct Meta {
    arch: ArchSpec,
    calibrated: bool,
    input: InputBox,
    train: TrainConfig,
    steps_per_epoch: u64,
    step: u64,
    epoch: usize,
    adam_step: u64,
    #[serde(default)]
    extra: serde_json::Value,
}

fn net_tensors<T: Real>(c: &mut Container, net: &Network<T>) {
    for id in net.param_ids() {
        c.push(net.param_name(id), net.param(id));
    }
    for (k, rs) in net.running_stats().iter().enumerate() {
        c.push(format!("running.{k}.mean"), &rs.mean);
        c.push(format!("running.{k}.var"), &rs.var);
    }
}

fn restore_net<T: Real>(c: &Container, arch: &ArchSpec, calibrated: bool) -> Result<Network<T>> {
    let mut net = Network::<T>::build(arch)?;
    let ids: Vec<_> = net.param_ids().collect();
    for id in ids {
        let t = c.get::<T>(net.param_name(id))?;
        net.set_param(id, t)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", net.param_name(id))))?;
    }
    for k in 0..net.running_stats().len() {
        let mean = c.get::<T>(&format!("running.{k}.mean"))?;
        let var = c.get::<T>(&format!("running.{k}.var"))?;
        let rs = &mut net.running_stats_mut()[k];
        if mean.shape() != rs.mean.shape() || var.shape() != rs.var.shape() {
            return Err(Error::Checkpoint(format!("running statistics {k} have the wrong shape")));
        }
        rs.mean = mean;
        rs.var = var;
    }
    net.set_calibrated(calibrated);
    Ok(net)
}

fn read_meta(c: &Container) -> Result<Meta> {
    if c.kind != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!("expected a checkpoint, found a `{}` container", c.kind)));
    }
    serde_json::from_value(c.meta.clone()).map_err(|e| Error::Checkpoint(format!("checkpoint metadata: {e}")))
}

/// A network restored for evaluation.
#[derive(Clone, Debug)]
pub struct LoadedNetwork<T> {
    pub net: Network<T>,
    pub input: InputBox,
    pub train: TrainConfig,
    pub epoch: usize,
    pub extra: serde_json::Value,
}

/// Loads only the network (parameters and running statistics) from a
/// checkpoint, converting to `T` if it was saved in the other precision.
pub fn load_network<T: Real>(path: &Path) -> Result<LoadedNetwork<T>> {
    let c = Container::load(path)?;
    let meta = read_meta(&c)?;
    Ok(LoadedNetwork {
        net: restore_net(&c, &meta.arch, meta.calibrated)?,
        input: meta.input,
        train: meta.train,
        epoch: meta.epoch,
        extra: meta.extra,
    })
}

impl<T: Real> Trainer<T> {
    /// Writes the complete training state atomically. `extra` is stored
    /// verbatim in the metadata.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = Meta {
            arch: self.net.arch().clone(),
            calibrated: self.net.is_calibrated(),
            input: self.input.clone(),
            train: self.config.clone(),
            steps_per_epoch: self.steps_per_epoch,
            step: self.step,
            epoch: self.epoch,
            adam_step: self.adam.step,
            extra,
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut c = Container::new(CHECKPOINT_KIND, meta);
        net_tensors(&mut c, &self.net);
        for (id, (m, v)) in self.net.param_ids().zip(self.adam.m.iter().zip(&self.adam.v)) {
            let name = self.net.param_name(id);
            c.push(format!("adam.m.{name}"), m);
            c.push(format!("adam.v.{name}"), v);
        }
        c.save(path)
    }

    /// Restores a trainer exactly as saved; training continues from the
    /// saved step, so the `ε` schedule resumes where it stopped.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let c = Container::load(path)?;
        let meta = read_meta(&c)?;
        meta.train.validate()?;
        let net = restore_net::<T>(&c, &meta.arch, meta.calibrated)?;
        let mut adam = AdamState::new(meta.train.adam, net.params());
        for (i, id) in net.param_ids().enumerate() {
            let name = net.param_name(id);
            adam.m[i] = c.get(&format!("adam.m.{name}"))?;
            adam.v[i] = c.get(&format!("adam.v.{name}"))?;
            if adam.m[i].shape() != net.param(id).shape() || adam.v[i].shape() != net.param(id).shape() {
                return Err(Error::Checkpoint(format!("Adam moments of {name} have the wrong shape")));
            }
        }
        adam.step = meta.adam_step;
        let trainer = Self {
            net,
            adam,
            config: meta.train,
            input: meta.input,
            steps_per_epoch: meta.steps_per_epoch,
            step: meta.step,
            epoch: meta.epoch,
        };
        Ok((trainer, meta.extra))
    }
}
