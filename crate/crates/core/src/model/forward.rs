use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::{ArchitectureConfig, LayerSpec, LayerWeights, ModelError, WeightBundle};
use crate::label::Label;
use crate::tensor::{
    batch_norm_infer, conv2d_dilated_with, global_avg_pool_batch, relu_in_place, softmax, ExecMode,
    Tensor,
};

/// Classification of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_benign: f32,
    pub p_malignant: f32,
    /// Argmax of the probabilities; an exact tie is labeled benign.
    pub label: Label,
    pub logits: [f32; 2],
    pub tie: bool,
}

impl Prediction {
    pub fn from_logits(logits: [f32; 2]) -> Self {
        let p = softmax(&logits).expect("two logits");
        let (p_benign, p_malignant) = (p[0], p[1]);
        let label = if p_malignant > p_benign {
            Label::Malignant
        } else {
            Label::Benign
        };
        Self {
            p_benign,
            p_malignant,
            label,
            logits,
            tie: p_benign == p_malignant,
        }
    }
}

/// Runs every layer before the global pool and returns the class maps, as
/// `(2, H, W)` or `(N, 2, H, W)` following the input rank.
pub fn class_maps(bundle: &WeightBundle, input: &Tensor, mode: ExecMode) -> Result<Tensor, ModelError> {
    bundle.config().validate_executable()?;
    if !matches!(input.rank(), 3 | 4) || input.chw()?.0 != bundle.config().input.channels {
        return Err(ModelError::InputShape {
            actual: input.dims().to_vec(),
        });
    }
    let mut cur = Cow::Borrowed(input);
    for (spec, weights) in bundle.config().layers.iter().zip(bundle.layers()) {
        match (spec, weights) {
            (LayerSpec::Conv(_), LayerWeights::Conv(p)) => {
                cur = Cow::Owned(conv2d_dilated_with(&cur, p, mode)?);
            }
            (LayerSpec::BatchNorm, LayerWeights::BatchNorm(bn)) => {
                cur = Cow::Owned(batch_norm_infer(&cur, bn)?);
            }
            (LayerSpec::Relu, _) => relu_in_place(cur.to_mut()),
            (LayerSpec::GlobalAvgPool, _) => break,
            _ => unreachable!("bundle layers are checked against the config"),
        }
    }
    Ok(cur.into_owned())
}

/// Pre-softmax class scores for each image of a `(3, H, W)` or
/// `(N, 3, H, W)` input, with batch norms in inference mode.
pub fn logits_batch(
    bundle: &WeightBundle,
    input: &Tensor,
    mode: ExecMode,
) -> Result<Vec<[f32; 2]>, ModelError> {
    let maps = class_maps(bundle, input, mode)?;
    // Probabilities are derived from the logits by `Prediction`.
    Ok(global_avg_pool_batch(&maps)?
        .into_iter()
        .map(|v| [v[0], v[1]])
        .collect())
}

/// Measures the receptive field by pushing a unit impulse through the
/// network with uniform positive kernels and identity batch norms, then
/// taking the width of the nonzero region of the class maps.
pub fn measure_receptive_field(config: &ArchitectureConfig) -> Result<usize, ModelError> {
    let (cfg, mut layers) = WeightBundle::zeros(config.clone())?.into_parts();
    // Wide enough that the response never reaches the border.
    let reach: usize = cfg.convs().map(|c| c.dilation * (c.kernel_size - 1)).sum();
    let size = 2 * reach + 3;
    for w in &mut layers {
        if let LayerWeights::Conv(p) = w {
            let fan_in = (p.in_channels() * p.kernel_size() * p.kernel_size()) as f32;
            p.kernel.data_mut().fill(1.0 / fan_in);
        }
    }
    let bundle = WeightBundle::new(cfg, layers)?;
    let channels = bundle.config().input.channels;
    let mut impulse = Tensor::zeros(&[channels, size, size]);
    for c in 0..channels {
        *impulse.at_mut(c, size / 2, size / 2) = 1.0;
    }
    let maps = class_maps(&bundle, &impulse, ExecMode::Deterministic)?;
    let (_, h, w) = maps.chw()?;
    let rows: Vec<usize> = (0..h)
        .filter(|&y| (0..w).any(|x| maps.at(0, y, x) != 0.0))
        .collect();
    Ok(match (rows.first(), rows.last()) {
        (Some(lo), Some(hi)) => hi - lo + 1,
        _ => 0,
    })
}

/// Classifies one `(3, H, W)` image in deterministic mode.
pub fn forward(bundle: &WeightBundle, image: &Tensor) -> Result<Prediction, ModelError> {
    forward_with(bundle, image, ExecMode::Deterministic)
}

pub fn forward_with(
    bundle: &WeightBundle,
    image: &Tensor,
    mode: ExecMode,
) -> Result<Prediction, ModelError> {
    if image.rank() != 3 {
        return Err(ModelError::InputShape {
            actual: image.dims().to_vec(),
        });
    }
    let logits = logits_batch(bundle, image, mode)?;
    Ok(Prediction::from_logits(logits[0]))
}

/// Classifies every image of a `(N, 3, H, W)` batch.
pub fn forward_batch(
    bundle: &WeightBundle,
    batch: &Tensor,
    mode: ExecMode,
) -> Result<Vec<Prediction>, ModelError> {
    Ok(logits_batch(bundle, batch, mode)?
        .into_iter()
        .map(Prediction::from_logits)
        .collect())
}
