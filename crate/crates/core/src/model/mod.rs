//! Network definition, inference and weight files.

mod bundle;
mod config;
mod forward;

use std::path::PathBuf;

use thiserror::Error;

pub use bundle::{decode_weights, encode_weights, load_weights, save_weights, BundleError, MAGIC, VERSION};
pub use config::{
    conv_flops, default_mela_d, preset, resolve_config, ArchitectureConfig, ConvSpec, FlopCount,
    InputSpec, LayerSpec, ParamCount, DEFAULT_INPUT_SIZE, MELA_D_DILATIONS, NUM_CLASSES, PRESETS,
};
pub use forward::{
    class_maps, forward, forward_batch, forward_with, logits_batch, measure_receptive_field, Prediction,
};

use crate::tensor::{BatchNorm, ConvParams, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture at layer {layer}: {reason}")]
    InvalidConfig { layer: usize, reason: String },
    #[error("cannot parse architecture config: {0}")]
    ConfigParse(String),
    #[error("config {name:?} cannot be executed: {reason}")]
    NotExecutable { name: String, reason: String },
    #[error("weights do not fit the config: {0}")]
    WeightShape(String),
    #[error("input tensor has dims {actual:?}, expected 3 channels as (3, H, W) or (N, 3, H, W)")]
    InputShape { actual: Vec<usize> },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Parameters owned by one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Conv(ConvParams),
    BatchNorm(BatchNorm),
    Stateless,
}

/// An architecture together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    config: ArchitectureConfig,
    layers: Vec<LayerWeights>,
}

/// A named parameter array as stored in a weight file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [f32],
}

fn expected_layer(spec: &LayerSpec, width: usize) -> LayerWeights {
    match spec {
        LayerSpec::Conv(c) => {
            LayerWeights::Conv(ConvParams::zeros(c.out_ch, c.in_ch, c.kernel_size, c.dilation))
        }
        LayerSpec::BatchNorm => LayerWeights::BatchNorm(BatchNorm::identity(width)),
        _ => LayerWeights::Stateless,
    }
}

impl WeightBundle {
    /// Binds `layers` to `config`, checking every parameter shape.
    pub fn new(config: ArchitectureConfig, layers: Vec<LayerWeights>) -> Result<Self, ModelError> {
        let plan = config.channel_plan()?;
        if layers.len() != config.layers.len() {
            return Err(ModelError::WeightShape(format!(
                "{} layer entries for {} layers",
                layers.len(),
                config.layers.len()
            )));
        }
        for (i, ((spec, w), &width)) in config.layers.iter().zip(&layers).zip(&plan).enumerate() {
            let ok = match (spec, w) {
                (LayerSpec::Conv(c), LayerWeights::Conv(p)) => {
                    p.kernel.dims() == [c.out_ch, c.in_ch, c.kernel_size, c.kernel_size]
                        && p.bias.len() == c.out_ch
                        && p.dilation == c.dilation
                        && (c.bias || p.bias.iter().all(|&b| b == 0.0))
                }
                (LayerSpec::BatchNorm, LayerWeights::BatchNorm(bn)) => {
                    [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
                        .iter()
                        .all(|v| v.len() == width)
                }
                (LayerSpec::Conv(_) | LayerSpec::BatchNorm, _) => false,
                (_, w) => *w == LayerWeights::Stateless,
            };
            if !ok {
                return Err(ModelError::WeightShape(format!("layer {i} ({spec:?})")));
            }
        }
        Ok(Self { config, layers })
    }

    /// Zero conv kernels and biases; batch norms are the identity map.
    pub fn zeros(config: ArchitectureConfig) -> Result<Self, ModelError> {
        let plan = config.channel_plan()?;
        let layers = config
            .layers
            .iter()
            .zip(&plan)
            .map(|(spec, &width)| expected_layer(spec, width))
            .collect();
        Self::new(config, layers)
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerWeights] {
        &mut self.layers
    }

    pub fn into_parts(self) -> (ArchitectureConfig, Vec<LayerWeights>) {
        (self.config, self.layers)
    }

    /// Stored tensors in layer order. Biases of bias-free convs are omitted.
    pub fn named_tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        for (i, (spec, w)) in self.config.layers.iter().zip(&self.layers).enumerate() {
            match (spec, w) {
                (LayerSpec::Conv(c), LayerWeights::Conv(p)) => {
                    out.push(NamedTensor {
                        name: format!("layers.{i}.kernel"),
                        dims: p.kernel.dims().to_vec(),
                        data: p.kernel.data(),
                    });
                    if c.bias {
                        out.push(NamedTensor {
                            name: format!("layers.{i}.bias"),
                            dims: vec![p.bias.len()],
                            data: &p.bias,
                        });
                    }
                }
                (_, LayerWeights::BatchNorm(bn)) => {
                    for (suffix, v) in [
                        ("gamma", &bn.gamma),
                        ("beta", &bn.beta),
                        ("running_mean", &bn.running_mean),
                        ("running_var", &bn.running_var),
                    ] {
                        out.push(NamedTensor {
                            name: format!("layers.{i}.{suffix}"),
                            dims: vec![v.len()],
                            data: v,
                        });
                    }
                }
                _ => {}
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_bundle_lists_tensors_in_layer_order() {
        let b = WeightBundle::zeros(default_mela_d(4)).unwrap();
        let names: Vec<String> = b.named_tensors().into_iter().map(|t| t.name).collect();
        assert_eq!(&names[..6], [
            "layers.0.kernel",
            "layers.0.bias",
            "layers.1.gamma",
            "layers.1.beta",
            "layers.1.running_mean",
            "layers.1.running_var",
        ]);
        // 8 convs with bias, 7 batch norms.
        assert_eq!(names.len(), 8 * 2 + 7 * 4);
        let total: usize = b.named_tensors().iter().map(|t| t.data.len()).sum();
        let count = b.config().count_params().unwrap();
        assert_eq!(total as u64, count.total());
    }

    #[test]
    fn rejects_mismatched_weights() {
        let cfg = default_mela_d(4);
        let (_, mut layers) = WeightBundle::zeros(cfg.clone()).unwrap().into_parts();
        layers[0] = LayerWeights::Conv(ConvParams::zeros(4, 3, 5, 1));
        assert!(matches!(WeightBundle::new(cfg.clone(), layers), Err(ModelError::WeightShape(_))));
        let (_, mut layers) = WeightBundle::zeros(cfg.clone()).unwrap().into_parts();
        layers.swap(0, 1);
        assert!(WeightBundle::new(cfg, layers).is_err());
    }
}
