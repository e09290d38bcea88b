use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv_output_size;

pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

fn default_momentum() -> f64 {
    DEFAULT_BN_MOMENTUM
}

fn default_eps() -> f64 {
    DEFAULT_BN_EPS
}

fn default_stride() -> usize {
    1
}

/// One entry of an architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    #[serde(rename = "batchnorm")]
    BatchNorm {
        channels: usize,
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Flatten,
    ResidualBegin,
    ResidualAdd,
}

impl LayerSpec {
    pub fn is_affine(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// `(fan_in, fan_out)` for affine layers.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((inputs, outputs)),
            LayerSpec::Conv2d {
                c_in, c_out, kernel, ..
            } => Some((kernel * kernel * c_in, c_out)),
            _ => None,
        }
    }

    fn output_channels(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { outputs, .. } => Some(outputs),
            LayerSpec::Conv2d { c_out, .. } => Some(c_out),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Flatten => "flatten",
            LayerSpec::ResidualBegin => "residual_begin",
            LayerSpec::ResidualAdd => "residual_add",
        }
    }
}

/// Architecture description: per-example input shape plus a layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ArchSpec {
    /// Per-example input shape, `[C, H, W]` or `[D]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Insert a batch-norm layer after every hidden affine layer that is not
    /// already followed by one.
    #[serde(default)]
    pub full_bn: bool,
}

impl ArchSpec {
    /// Fully connected ReLU network `dims[0] → … → dims[last]`.
    pub fn mlp(dims: &[usize], full_bn: bool) -> Self {
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            layers.push(LayerSpec::Dense {
                inputs: w[0],
                outputs: w[1],
            });
            if i + 2 < dims.len() {
                layers.push(LayerSpec::Relu);
            }
        }
        Self {
            input: vec![dims[0]],
            layers,
            full_bn,
        }
    }

    /// Layer list with batch norm inserted where `full_bn` asks for it.
    pub fn expanded_layers(&self) -> Vec<LayerSpec> {
        if !self.full_bn {
            return self.layers.clone();
        }
        let last_affine = self.layers.iter().rposition(LayerSpec::is_affine);
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(layer.clone());
            let hidden_affine = layer.is_affine() && Some(i) != last_affine;
            let followed_by_bn = matches!(self.layers.get(i + 1), Some(LayerSpec::BatchNorm { .. }));
            if hidden_affine && !followed_by_bn {
                out.push(LayerSpec::BatchNorm {
                    channels: layer.output_channels().expect("affine"),
                    momentum: DEFAULT_BN_MOMENTUM,
                    eps: DEFAULT_BN_EPS,
                });
            }
        }
        out
    }
}

/// A layer of a built network with resolved shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedLayer {
    pub spec: LayerSpec,
    /// Per-example input and output shapes.
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    /// For `residual_add`, the index of the matching `residual_begin`.
    pub partner: Option<usize>,
}

/// Summary of a shape-checked layer list.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub layers: Vec<ResolvedLayer>,
    pub hidden: usize,
    pub classes: usize,
}

pub fn resolve(arch: &ArchSpec) -> Result<Resolved> {
    if arch.input.is_empty() || arch.input.contains(&0) {
        return Err(Error::Build(format!("invalid input shape {:?}", arch.input)));
    }
    let layers = arch.expanded_layers();
    let mut shape = arch.input.clone();
    let mut stack: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut out = Vec::with_capacity(layers.len());
    for (i, spec) in layers.iter().enumerate() {
        let at = |msg: String| Error::Build(format!("layer {i} ({}): {msg}", spec.name()));
        let mut partner = None;
        let next = match *spec {
            LayerSpec::Dense { inputs, outputs } => {
                if shape != [inputs] {
                    return Err(at(format!("expects [{inputs}], receives {shape:?}")));
                }
                if outputs == 0 {
                    return Err(at("zero outputs".into()));
                }
                vec![outputs]
            }
            LayerSpec::Conv2d {
                c_in,
                c_out,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = shape[..] else {
                    return Err(at(format!("expects [C,H,W], receives {shape:?}")));
                };
                if c != c_in {
                    return Err(at(format!("expects {c_in} channels, receives {c}")));
                }
                if kernel == 0 || stride == 0 || c_out == 0 {
                    return Err(at("kernel, stride and c_out must be positive".into()));
                }
                let ho = conv_output_size(h, kernel, stride, padding).map_err(|e| at(e.to_string()))?;
                let wo = conv_output_size(w, kernel, stride, padding).map_err(|e| at(e.to_string()))?;
                vec![c_out, ho, wo]
            }
            LayerSpec::Relu => shape.clone(),
            LayerSpec::BatchNorm { channels, eps, momentum } => {
                if shape[0] != channels {
                    return Err(at(format!("expects {channels} channels, receives {shape:?}")));
                }
                if !(eps > 0.0) {
                    return Err(at("batch-norm eps must be positive".into()));
                }
                if !(0.0..=1.0).contains(&momentum) {
                    return Err(at("batch-norm momentum must lie in [0, 1]".into()));
                }
                shape.clone()
            }
            LayerSpec::Flatten => vec![shape.iter().product()],
            LayerSpec::ResidualBegin => {
                stack.push((i, shape.clone()));
                shape.clone()
            }
            LayerSpec::ResidualAdd => {
                let (begin, skip) = stack
                    .pop()
                    .ok_or_else(|| at("residual_add without residual_begin".into()))?;
                if skip != shape {
                    return Err(at(format!("skip shape {skip:?} does not match {shape:?}")));
                }
                partner = Some(begin);
                shape.clone()
            }
        };
        out.push(ResolvedLayer {
            spec: spec.clone(),
            in_shape: shape,
            out_shape: next.clone(),
            partner,
        });
        shape = next;
    }
    if let Some((i, _)) = stack.pop() {
        return Err(Error::Build(format!("residual_begin at layer {i} is never closed")));
    }
    let Some(LayerSpec::Dense { outputs, .. }) = layers.last() else {
        return Err(Error::Build("the final layer must be dense".into()));
    };
    let affine = layers.iter().filter(|l| l.is_affine()).count();
    let relus = layers.iter().filter(|l| matches!(l, LayerSpec::Relu)).count();
    let hidden = affine - 1;
    if relus != hidden {
        return Err(Error::Build(format!(
            "{hidden} hidden affine layers but {relus} ReLU layers; each hidden layer needs exactly one activation"
        )));
    }
    Ok(Resolved {
        layers: out,
        hidden,
        classes: *outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_with_full_bn() {
        let arch = ArchSpec::mlp(&[784, 512, 512, 10], true);
        let r = resolve(&arch).unwrap();
        assert_eq!(r.hidden, 2);
        assert_eq!(r.classes, 10);
        let fans: Vec<_> = r.layers.iter().filter_map(|l| l.spec.fans()).collect();
        assert_eq!(fans, vec![(784, 512), (512, 512), (512, 10)]);
        let bn = r
            .layers
            .iter()
            .filter(|l| matches!(l.spec, LayerSpec::BatchNorm { .. }))
            .count();
        assert_eq!(bn, 2);
    }

    #[test]
    fn conv_fan_in() {
        let spec = LayerSpec::Conv2d {
            c_in: 64,
            c_out: 64,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        assert_eq!(spec.fans(), Some((576, 64)));
    }

    #[test]
    fn shape_break_is_a_build_error() {
        let arch = ArchSpec {
            input: vec![4],
            layers: vec![
                LayerSpec::Dense { inputs: 4, outputs: 3 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 5, outputs: 2 },
            ],
            full_bn: false,
        };
        assert!(matches!(resolve(&arch), Err(Error::Build(_))));
    }

    #[test]
    fn residual_pairs_must_match() {
        let base = |layers| ArchSpec {
            input: vec![4],
            layers,
            full_bn: false,
        };
        let open = base(vec![
            LayerSpec::ResidualBegin,
            LayerSpec::Dense { inputs: 4, outputs: 2 },
        ]);
        assert!(resolve(&open).is_err());
        let mismatched = base(vec![
            LayerSpec::ResidualBegin,
            LayerSpec::Dense { inputs: 4, outputs: 3 },
            LayerSpec::Relu,
            LayerSpec::ResidualAdd,
            LayerSpec::Dense { inputs: 3, outputs: 2 },
        ]);
        assert!(resolve(&mismatched).is_err());
    }

    #[test]
    fn arch_round_trips_through_toml() {
        let text = r#"
input = [1, 28, 28]
full-bn = true

[[layers]]
kind = "conv2d"
c_in = 1
c_out = 4
kernel = 4
stride = 2
padding = 1

[[layers]]
kind = "relu"

[[layers]]
kind = "flatten"

[[layers]]
kind = "dense"
inputs = 784
outputs = 10
"#;
        let arch: ArchSpec = toml::from_str(text).unwrap();
        let r = resolve(&arch).unwrap();
        assert_eq!(r.layers[0].out_shape, vec![4, 14, 14]);
        assert!(matches!(r.layers[1].spec, LayerSpec::BatchNorm { channels: 4, .. }));
        let back: ArchSpec = toml::from_str(&toml::to_string(&arch).unwrap()).unwrap();
        assert_eq!(back, arch);
        let bad = text.replace("padding = 1", "padding = 1\nbogus = 3");
        assert!(toml::from_str::<ArchSpec>(&bad).is_err());
    }
}
