//! The optimization loop: Adam, clipping, learning-rate milestones, epoch
//! orchestration, evaluation and checkpoints.

mod checkpoint;
mod metrics;
mod optim;

pub use checkpoint::{load_network, LoadedNetwork, CHECKPOINT_KIND};
pub use metrics::{metrics_csv, read_metrics_csv, write_metrics_csv, MetricsRow, HEADER};
pub use optim::{adam_step, clip_gradients, global_norm, lr_at_epoch, AdamConfig, AdamState};

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{batch_iter, epoch_order, Dataset};
use crate::error::{Error, Result};
use crate::ibp::{
    margin_lower_bounds, propagate, relu_state_fractions, tightness_stats, BnMode, InputBox, ParamVars,
    StateFractions,
};
use crate::net::{LayerParams, LayerSpec, Network};
use crate::objective::{total_objective, EpsSchedule, ObjectiveSpec, RegularizerConfig};
use crate::tensor::{Real, Tensor};

/// Training hyperparameters. Phase lengths are in epochs and converted to
/// optimizer steps once the number of batches per epoch is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainConfig {
    /// Epochs at `ε = 0`.
    #[serde(default)]
    pub epochs_zero: usize,
    /// Epochs over which `ε` ramps to `eps_train` (the warmup).
    pub epochs_increase: usize,
    /// Epochs at `ε = eps_train`.
    pub epochs_final: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_half")]
    pub lambda0: f64,
    #[serde(default = "default_half")]
    pub tau: f64,
    /// Target radius `ε_t` of the training schedule.
    pub eps_train: f64,
    /// Radius used by the epoch-end evaluation.
    pub eps_test: f64,
    #[serde(default = "default_exp_fraction")]
    pub exp_fraction: f64,
    #[serde(default = "default_start_factor")]
    pub start_factor: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_lr() -> f64 {
    5e-4
}

fn default_lr_decay() -> f64 {
    0.2
}

fn default_clip() -> f64 {
    10.0
}

fn default_half() -> f64 {
    0.5
}

fn default_exp_fraction() -> f64 {
    0.25
}

fn default_start_factor() -> f64 {
    1e-3
}

fn default_true() -> bool {
    true
}

fn default_eval_batch() -> usize {
    500
}

impl TrainConfig {
    /// Defaults for everything except the phase split, batch size and radii.
    pub fn new(phases: [usize; 3], batch_size: usize, eps_train: f64, eps_test: f64) -> Self {
        Self {
            epochs_zero: phases[0],
            epochs_increase: phases[1],
            epochs_final: phases[2],
            batch_size,
            lr: default_lr(),
            lr_decay: default_lr_decay(),
            milestones: Vec::new(),
            clip_norm: default_clip(),
            lambda0: default_half(),
            tau: default_half(),
            eps_train,
            eps_test,
            exp_fraction: default_exp_fraction(),
            start_factor: default_start_factor(),
            seed: 0,
            shuffle: true,
            eval_batch_size: default_eval_batch(),
            adam: AdamConfig::default(),
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_zero + self.epochs_increase + self.epochs_final
    }

    pub fn regularizer(&self) -> RegularizerConfig {
        RegularizerConfig {
            tau: self.tau,
            lambda0: self.lambda0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs() == 0 {
            return Err(Error::arg("training needs at least one epoch"));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::arg("batch sizes must be at least 1"));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::arg("need lr > 0 and lr-decay in (0, 1]"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg(format!(
                "milestones must be strictly increasing, got {:?}",
                self.milestones
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::arg("clip norm must be positive"));
        }
        if !(self.eps_test >= 0.0) {
            return Err(Error::arg("eps-test must be >= 0"));
        }
        self.regularizer().validate()?;
        self.adam.validate()?;
        self.schedule(1).validate()
    }

    /// The `ε` schedule for `steps_per_epoch` batches per epoch.
    pub fn schedule(&self, steps_per_epoch: u64) -> EpsSchedule {
        EpsSchedule {
            eps_target: self.eps_train,
            zero_steps: self.epochs_zero as u64 * steps_per_epoch,
            increase_steps: self.epochs_increase as u64 * steps_per_epoch,
            exp_fraction: self.exp_fraction,
            start_factor: self.start_factor,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at_epoch(self.lr, self.lr_decay, &self.milestones, epoch)
    }
}

/// Outcome of [`evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub examples: usize,
    pub standard_error: f64,
    pub verified_error: f64,
    pub fractions: StateFractions,
    /// `Ê(Δ₀), …, Ê(Δₘ)` over the whole dataset.
    pub widths: Vec<f64>,
}

impl EvalReport {
    /// `ln(Ê(Δₘ)/Ê(Δ₀))`; NaN when the input box is degenerate.
    pub fn log_tightness_ratio(&self) -> f64 {
        match (self.widths.first(), self.widths.last()) {
            (Some(&w0), Some(&wm)) => (wm / w0).ln(),
            _ => f64::NAN,
        }
    }
}

/// Index of the largest entry; the first one wins ties.
fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Standard and verified error of `net` on `data` at the radius in
/// `input`, with batch norm in eval mode (running statistics).
///
/// An example counts as verified-correct only if it is classified correctly
/// and every margin lower bound is strictly positive.
pub fn evaluate<T: Real>(net: &Network<T>, data: &Dataset, input: &InputBox, batch_size: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    let order = epoch_order(data.len(), false, 0, 0);
    let (mut wrong, mut unverified) = (0usize, 0usize);
    let mut fr = StateFractions::default();
    let mut widths: Vec<f64> = Vec::new();
    for idx in batch_iter(&order, batch_size)? {
        let (x, labels) = data.batch::<T>(idx)?;
        let trace = propagate(net, &x, input, BnMode::Running)?;
        let margins = margin_lower_bounds(&trace, net, &labels)?;
        let k = net.classes();
        for (r, &y) in labels.iter().enumerate() {
            let clean_ok = argmax(&trace.logits.data()[r * k..(r + 1) * k]) == y;
            let certified = margins.data()[r * (k - 1)..(r + 1) * (k - 1)].iter().all(|&m| m > T::zero());
            wrong += usize::from(!clean_ok);
            unverified += usize::from(!(clean_ok && certified));
        }
        // Per-example neuron counts are constant, so batch weighting is exact.
        let w = idx.len() as f64;
        let f = relu_state_fractions(&trace);
        fr.active += w * f.active;
        fr.inactive += w * f.inactive;
        fr.unstable += w * f.unstable;
        let t = tightness_stats(&trace);
        widths.resize(t.len(), 0.0);
        widths.iter_mut().zip(&t).for_each(|(acc, v)| *acc += w * v);
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        examples: data.len(),
        standard_error: wrong as f64 / n,
        verified_error: unverified as f64 / n,
        fractions: StateFractions {
            active: fr.active / n,
            inactive: fr.inactive / n,
            unstable: fr.unstable / n,
        },
        widths: widths.into_iter().map(|v| v / n).collect(),
    })
}

/// Values from one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub eps: f64,
    pub lambda: f64,
    pub loss: f64,
    pub robust: f64,
    pub tightness: f64,
    pub relu: f64,
    pub grad_norm: f64,
}

/// Network plus optimizer state, advanced one epoch at a time.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    net: Network<T>,
    adam: AdamState<T>,
    config: TrainConfig,
    input: InputBox,
    steps_per_epoch: u64,
    step: u64,
    epoch: usize,
}

impl<T: Real> Trainer<T> {
    /// `net` must already be initialized. `input` supplies clip range and
    /// normalization (its radius is ignored); `train_len` fixes the number
    /// of batches per epoch.
    pub fn new(net: Network<T>, config: TrainConfig, input: InputBox, train_len: usize) -> Result<Self> {
        config.validate()?;
        if train_len == 0 {
            return Err(Error::arg("empty training set"));
        }
        let steps_per_epoch = train_len.div_ceil(config.batch_size) as u64;
        let adam = AdamState::new(config.adam, net.params());
        Ok(Self {
            net,
            adam,
            config,
            input,
            steps_per_epoch,
            step: 0,
            epoch: 0,
        })
    }

    pub fn net(&self) -> &Network<T> {
        &self.net
    }

    pub fn into_net(self) -> Network<T> {
        self.net
    }

    pub fn adam(&self) -> &AdamState<T> {
        &self.adam
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn input(&self) -> &InputBox {
        &self.input
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.total_epochs()
    }

    pub fn schedule(&self) -> EpsSchedule {
        self.config.schedule(self.steps_per_epoch)
    }

    /// One optimizer step on a batch: objective at the scheduled `ε`,
    /// backward, clipping, Adam, and the running batch-norm update.
    pub fn train_step(&mut self, x: &Tensor<T>, labels: &[usize], lr: f64) -> Result<StepReport> {
        let step = self.step;
        let at_step = |e: Error| match e {
            Error::Numeric { location, message } => Error::Numeric {
                location: format!("step {step}, {location}"),
                message,
            },
            other => other,
        };
        let eps = self.schedule().value(step);
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, &self.net, true);
        let spec = ObjectiveSpec {
            eps,
            eps_target: self.config.eps_train,
            reg: self.config.regularizer(),
            input: &self.input,
        };
        let parts = total_objective(&mut tape, &self.net, &vars, x, labels, &spec).map_err(at_step)?;
        let mut grads: Vec<Tensor<T>> = tape.backward(parts.total)?.into_gradient_set(&tape).into_values().collect();
        if grads.len() != self.net.params().len() {
            return Err(Error::Contract("gradient set does not cover every parameter".into()));
        }
        for (id, g) in self.net.param_ids().zip(&grads) {
            if !g.all_finite() {
                return Err(Error::numeric(
                    format!("step {step}, gradient of {}", self.net.param_name(id)),
                    "non-finite value",
                ));
            }
        }
        let grad_norm = clip_gradients(&mut grads, self.config.clip_norm)?;
        adam_step(self.net.params_mut(), &grads, &mut self.adam, lr).map_err(at_step)?;

        let n = x.shape()[0];
        let bn_layers: Vec<(usize, f64, usize)> = self
            .net
            .layers()
            .iter()
            .filter_map(|l| match (l.spec(), l.params) {
                (&LayerSpec::BatchNorm { channels, momentum, .. }, LayerParams::BatchNorm { stats, .. }) => {
                    let per_example: usize = l.resolved.in_shape.iter().product();
                    Some((stats, momentum, n * per_example / channels))
                }
                _ => None,
            })
            .collect();
        for (&(stats, momentum, count), &(mean, var)) in bn_layers.iter().zip(&parts.trace.bn_stats) {
            // Running variance tracks the unbiased estimate.
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let (bm, bv) = (tape.value(mean), tape.value(var));
            let rs = &mut self.net.running_stats_mut()[stats];
            let (keep, take) = (T::of(1.0 - momentum), T::of(momentum));
            for (r, &b) in rs.mean.data_mut().iter_mut().zip(bm.data()) {
                *r = keep * *r + take * b;
            }
            let take_v = T::of(momentum * unbias);
            for (r, &b) in rs.var.data_mut().iter_mut().zip(bv.data()) {
                *r = keep * *r + take_v * b;
            }
        }
        self.step += 1;
        Ok(StepReport {
            step,
            eps,
            lambda: parts.lambda,
            loss: parts.loss,
            robust: parts.robust,
            tightness: parts.tightness,
            relu: parts.relu,
            grad_norm,
        })
    }

    /// Trains one epoch on `train` and evaluates on `eval` at `eps_test`.
    pub fn train_epoch(&mut self, train: &Dataset, eval: &Dataset) -> Result<MetricsRow> {
        if self.is_finished() {
            return Err(Error::Contract(format!(
                "all {} epochs already trained",
                self.config.total_epochs()
            )));
        }
        if train.len().div_ceil(self.config.batch_size) as u64 != self.steps_per_epoch {
            return Err(Error::arg(format!(
                "training set of {} examples does not give {} batches per epoch",
                train.len(),
                self.steps_per_epoch
            )));
        }
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        let order = epoch_order(train.len(), self.config.shuffle, self.config.seed, epoch as u64);
        let mut sums = [0.0f64; 4];
        let mut last = None;
        for idx in batch_iter(&order, self.config.batch_size)? {
            let (x, labels) = train.batch::<T>(idx)?;
            let r = self.train_step(&x, &labels, lr)?;
            let w = idx.len() as f64;
            for (s, v) in sums.iter_mut().zip([r.loss, r.robust, r.tightness, r.relu]) {
                *s += w * v;
            }
            last = Some(r);
        }
        let last = last.expect("at least one batch");
        let report = evaluate(
            &self.net,
            eval,
            &self.input.with_eps(self.config.eps_test),
            self.config.eval_batch_size,
        )?;
        self.epoch += 1;
        let n = train.len() as f64;
        log::info!(
            "epoch {epoch}: eps {:.4} loss {:.4} std err {:.4} verified err {:.4}",
            last.eps,
            sums[0] / n,
            report.standard_error,
            report.verified_error
        );
        Ok(MetricsRow {
            epoch,
            eps: last.eps,
            lambda: last.lambda,
            lr,
            loss: sums[0] / n,
            l_rob: sums[1] / n,
            l_tightness: sums[2] / n,
            l_relu: sums[3] / n,
            standard_error: report.standard_error,
            verified_error: report.verified_error,
            active: report.fractions.active,
            inactive: report.fractions.inactive,
            unstable: report.fractions.unstable,
            log_tightness_ratio: report.log_tightness_ratio(),
        })
    }
}
