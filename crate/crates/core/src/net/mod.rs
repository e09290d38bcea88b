//! Layer graphs, parameter storage and weight initialization.

mod arch;
mod init;

pub use arch::{resolve, ArchSpec, LayerSpec, Resolved, ResolvedLayer, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
pub use init::{difference_gain_closed_form, difference_gain_empirical, InitScheme};

use crate::autograd::ParamId;
use crate::error::{Error, Result};
use crate::tensor::{Real, SeededRng, Tensor};

/// Parameter slots owned by one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerParams {
    None,
    Affine { weight: ParamId, bias: ParamId },
    BatchNorm { gamma: ParamId, beta: ParamId, stats: usize },
}

/// Running estimates kept by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub resolved: ResolvedLayer,
    pub params: LayerParams,
}

impl Layer {
    pub fn spec(&self) -> &LayerSpec {
        &self.resolved.spec
    }
}

/// Summary of one affine layer, used by audits and calibration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AffineInfo {
    pub layer: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// A built network: resolved layers plus parameters.
#[derive(Clone, Debug)]
pub struct Network<T> {
    arch: ArchSpec,
    layers: Vec<Layer>,
    params: Vec<Tensor<T>>,
    names: Vec<String>,
    running: Vec<RunningStats<T>>,
    hidden: usize,
    classes: usize,
    calibrated: bool,
}

impl<T: Real> Network<T> {
    /// Allocates parameters for `arch`. Weights start at zero; call
    /// [`Network::initialize`] before use.
    pub fn build(arch: &ArchSpec) -> Result<Self> {
        let resolved = resolve(arch)?;
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut running = Vec::new();
        let mut layers = Vec::with_capacity(resolved.layers.len());
        let mut add = |params: &mut Vec<Tensor<T>>, name: String, t: Tensor<T>| {
            params.push(t);
            names.push(name);
            ParamId(params.len() - 1)
        };
        for (i, rl) in resolved.layers.into_iter().enumerate() {
            let slots = match rl.spec {
                LayerSpec::Dense { inputs, outputs } => LayerParams::Affine {
                    weight: add(&mut params, format!("layer{i}.weight"), Tensor::zeros(&[outputs, inputs])),
                    bias: add(&mut params, format!("layer{i}.bias"), Tensor::zeros(&[outputs])),
                },
                LayerSpec::Conv2d {
                    c_in, c_out, kernel, ..
                } => LayerParams::Affine {
                    weight: add(
                        &mut params,
                        format!("layer{i}.weight"),
                        Tensor::zeros(&[c_out, c_in, kernel, kernel]),
                    ),
                    bias: add(&mut params, format!("layer{i}.bias"), Tensor::zeros(&[c_out])),
                },
                LayerSpec::BatchNorm { channels, .. } => {
                    running.push(RunningStats {
                        mean: Tensor::zeros(&[channels]),
                        var: Tensor::full(&[channels], T::one()),
                    });
                    LayerParams::BatchNorm {
                        gamma: add(&mut params, format!("layer{i}.gamma"), Tensor::full(&[channels], T::one())),
                        beta: add(&mut params, format!("layer{i}.beta"), Tensor::zeros(&[channels])),
                        stats: running.len() - 1,
                    }
                }
                _ => LayerParams::None,
            };
            layers.push(Layer {
                resolved: rl,
                params: slots,
            });
        }
        Ok(Self {
            arch: arch.clone(),
            layers,
            params,
            names,
            running,
            hidden: resolved.hidden,
            classes: resolved.classes,
            calibrated: false,
        })
    }

    /// Samples every affine weight from `scheme` (the classification layer
    /// included), zeroes biases and resets batch-norm state.
    pub fn initialize(&mut self, scheme: InitScheme, rng: &mut SeededRng) -> Result<()> {
        for layer in &self.layers {
            match layer.params {
                LayerParams::Affine { weight, bias } => {
                    let (fan_in, _) = layer.spec().fans().expect("affine");
                    let shape = self.params[weight.0].shape().to_vec();
                    self.params[weight.0] = scheme.sample(rng, &shape, fan_in)?;
                    self.params[bias.0] = Tensor::zeros(self.params[bias.0].shape());
                }
                LayerParams::BatchNorm { gamma, beta, stats } => {
                    let c = self.params[gamma.0].len();
                    self.params[gamma.0] = Tensor::full(&[c], T::one());
                    self.params[beta.0] = Tensor::zeros(&[c]);
                    self.running[stats] = RunningStats {
                        mean: Tensor::zeros(&[c]),
                        var: Tensor::full(&[c], T::one()),
                    };
                }
                LayerParams::None => {}
            }
        }
        self.calibrated = false;
        Ok(())
    }

    /// Halves the weight of the first affine layer after each residual add,
    /// cancelling the doubling of interval width that the skip path
    /// introduces. Single-shot: a second call is rejected.
    pub fn residual_calibrate(&mut self) -> Result<()> {
        if self.calibrated {
            return Err(Error::Contract("residual calibration already applied".into()));
        }
        let half = T::of(0.5);
        for target in self.residual_consumers() {
            if let LayerParams::Affine { weight, .. } = self.layers[target].params {
                let w = self.params[weight.0].scale(half);
                self.params[weight.0] = w;
            }
        }
        self.calibrated = true;
        Ok(())
    }

    /// Indices of the affine layers that consume a residual-add output.
    pub fn residual_consumers(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer.spec(), LayerSpec::ResidualAdd) {
                if let Some(j) = (i + 1..self.layers.len()).find(|&j| self.layers[j].spec().is_affine()) {
                    if !out.contains(&j) {
                        out.push(j);
                    }
                }
            }
        }
        out
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibrated
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of hidden affine layers `m` (the classification layer excluded).
    pub fn hidden_count(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input
    }

    pub fn affine_layers(&self) -> Vec<AffineInfo> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l.params {
                LayerParams::Affine { weight, bias } => {
                    let (fan_in, fan_out) = l.spec().fans().expect("affine");
                    Some(AffineInfo {
                        layer: i,
                        fan_in,
                        fan_out,
                        weight,
                        bias,
                    })
                }
                _ => None,
            })
            .collect()
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0]
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set_param(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        self.params[id.0].check_same_shape(&value)?;
        self.params[id.0] = value;
        Ok(())
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    pub(crate) fn set_calibrated(&mut self, calibrated: bool) {
        self.calibrated = calibrated;
    }

    /// Same network with every tensor converted to `U`.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: r.mean.cast(),
                    var: r.var.cast(),
                })
                .collect(),
            hidden: self.hidden,
            classes: self.classes,
            calibrated: self.calibrated,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual_arch(width: usize) -> ArchSpec {
        ArchSpec {
            input: vec![width],
            layers: vec![
                LayerSpec::Dense { inputs: width, outputs: width },
                LayerSpec::ResidualBegin,
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: width, outputs: width },
                LayerSpec::ResidualAdd,
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: width, outputs: 10 },
            ],
            full_bn: false,
        }
    }

    #[test]
    fn initialize_sets_biases_and_bn() {
        let mut net = Network::<f32>::build(&ArchSpec::mlp(&[6, 5, 3], true)).unwrap();
        net.initialize(InitScheme::Ibp, &mut SeededRng::new(1)).unwrap();
        for layer in net.layers() {
            match layer.params {
                LayerParams::Affine { weight, bias } => {
                    assert!(net.param(bias).data().iter().all(|&v| v == 0.0));
                    assert!(net.param(weight).max_abs() > 0.0);
                }
                LayerParams::BatchNorm { gamma, beta, .. } => {
                    assert!(net.param(gamma).data().iter().all(|&v| v == 1.0));
                    assert!(net.param(beta).data().iter().all(|&v| v == 0.0));
                }
                LayerParams::None => {}
            }
        }
    }

    #[test]
    fn calibration_is_single_shot() {
        let mut net = Network::<f64>::build(&residual_arch(8)).unwrap();
        net.initialize(InitScheme::Ibp, &mut SeededRng::new(2)).unwrap();
        let before = net.clone();
        assert_eq!(net.residual_consumers(), vec![6]);
        net.residual_calibrate().unwrap();
        let w = net.affine_layers()[2].weight;
        for (a, b) in net.param(w).data().iter().zip(before.param(w).data()) {
            assert_eq!(*a, b * 0.5);
        }
        assert!(matches!(net.residual_calibrate(), Err(Error::Contract(_))));
    }

    #[test]
    fn calibration_without_residuals_is_a_no_op() {
        let mut net = Network::<f64>::build(&ArchSpec::mlp(&[4, 4, 2], false)).unwrap();
        net.initialize(InitScheme::Ibp, &mut SeededRng::new(3)).unwrap();
        let before = net.params().to_vec();
        net.residual_calibrate().unwrap();
        assert_eq!(net.params(), &before[..]);
    }

    #[test]
    fn same_seed_same_weights() {
        let arch = ArchSpec::mlp(&[10, 7, 3], false);
        let mk = || {
            let mut net = Network::<f32>::build(&arch).unwrap();
            net.initialize(InitScheme::KaimingUniform, &mut SeededRng::new(9)).unwrap();
            net.params().to_vec()
        };
        assert_eq!(mk(), mk());
    }
}
