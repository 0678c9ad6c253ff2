//! Architecture descriptions and the accounting derived from them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Number of output classes of an executable network (benign, malignant).
pub const NUM_CLASSES: usize = 2;

/// Default spatial input size.
pub const DEFAULT_INPUT_SIZE: usize = 150;

/// Dilation schedule of the default stack's 3×3 blocks.
pub const MELA_D_DILATIONS: [usize; 7] = [1, 1, 1, 2, 4, 8, 1];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub bias: bool,
    /// Side-branch conv (a residual shortcut) that reads an earlier tensor and
    /// merges into the trunk. Only meaningful for count-only reference configs.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub branch: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    #[serde(rename = "conv")]
    Conv(ConvSpec),
    #[serde(rename = "batchnorm")]
    BatchNorm,
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "global_avg_pool")]
    GlobalAvgPool,
    #[serde(rename = "softmax")]
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub name: String,
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
}

/// Parameter totals. Batch-norm running statistics are non-trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub trainable: u64,
    pub non_trainable: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.trainable + self.non_trainable
    }
}

/// Operation counts for one forward pass. A multiply-add counts as 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopCount {
    pub conv: u64,
    /// Batch-norm (2 per element), relu and pooling (1 per element), softmax
    /// (3 per class).
    pub elementwise: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.conv + self.elementwise
    }
}

/// FLOPs of one conv layer on an `h × w` plane: `2·k²·in·out·h·w`.
pub fn conv_flops(spec: &ConvSpec, h: usize, w: usize) -> u64 {
    2 * (spec.kernel_size * spec.kernel_size * spec.in_ch * spec.out_ch) as u64 * (h * w) as u64
}

impl ArchitectureConfig {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ModelError::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Channel width flowing into each layer, checking structure on the way:
    /// convs chain, kernels are odd, and the stack ends in exactly one
    /// global average pool followed by softmax.
    pub fn channel_plan(&self) -> Result<Vec<usize>, ModelError> {
        let invalid = |layer: usize, reason: String| ModelError::InvalidConfig { layer, reason };
        if self.input.channels == 0 || self.input.height == 0 || self.input.width == 0 {
            return Err(invalid(0, "input extents must be >= 1".into()));
        }
        let mut trunk = self.input.channels;
        let mut seen = vec![trunk];
        let mut plan = Vec::with_capacity(self.layers.len());
        let mut pooled_at = None;
        for (i, layer) in self.layers.iter().enumerate() {
            plan.push(trunk);
            if let Some(p) = pooled_at {
                if !(matches!(layer, LayerSpec::Softmax) && i == p + 1) {
                    return Err(invalid(i, "only a softmax may follow global_avg_pool".into()));
                }
            }
            match layer {
                LayerSpec::Conv(c) => {
                    if c.in_ch == 0 || c.out_ch == 0 {
                        return Err(invalid(i, "conv channels must be >= 1".into()));
                    }
                    if c.kernel_size % 2 == 0 {
                        return Err(invalid(i, format!("kernel size {} is even", c.kernel_size)));
                    }
                    if c.dilation == 0 {
                        return Err(invalid(i, "dilation must be >= 1".into()));
                    }
                    if c.branch {
                        if c.out_ch != trunk || !seen.contains(&c.in_ch) {
                            return Err(invalid(
                                i,
                                format!(
                                    "branch conv {}->{} does not merge into a trunk of width {trunk}",
                                    c.in_ch, c.out_ch
                                ),
                            ));
                        }
                    } else {
                        if c.in_ch != trunk {
                            return Err(invalid(
                                i,
                                format!("conv expects {} input channels, previous layer yields {trunk}", c.in_ch),
                            ));
                        }
                        trunk = c.out_ch;
                        seen.push(trunk);
                    }
                }
                LayerSpec::GlobalAvgPool => {
                    if pooled_at.is_some() {
                        return Err(invalid(i, "more than one global_avg_pool".into()));
                    }
                    pooled_at = Some(i);
                }
                LayerSpec::Softmax if pooled_at.is_none() => {
                    return Err(invalid(i, "softmax before global_avg_pool".into()));
                }
                LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::Softmax => {}
            }
        }
        match pooled_at {
            Some(p) if p + 2 == self.layers.len() => Ok(plan),
            _ => Err(invalid(
                self.layers.len(),
                "stack must end with global_avg_pool then softmax".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.channel_plan().map(|_| ())
    }

    /// Width of the trunk at the pool, i.e. the number of classes.
    pub fn num_classes(&self) -> Result<usize, ModelError> {
        let plan = self.channel_plan()?;
        Ok(plan[plan.len() - 1])
    }

    /// Checks that the forward pass can run this config: valid structure,
    /// 3 input channels, 2 classes and no branch convs.
    pub fn validate_executable(&self) -> Result<(), ModelError> {
        let classes = self.num_classes()?;
        let reason = if self.input.channels != 3 {
            Some(format!("expects 3 input channels, config has {}", self.input.channels))
        } else if classes != NUM_CLASSES {
            Some(format!("produces {classes} classes, expected {NUM_CLASSES}"))
        } else if self.convs().any(|c| c.branch) {
            Some("branch convs are count-only".into())
        } else {
            None
        };
        match reason {
            Some(reason) => Err(ModelError::NotExecutable {
                name: self.name.clone(),
                reason,
            }),
            None => Ok(()),
        }
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvSpec> {
        self.layers.iter().filter_map(|l| match l {
            LayerSpec::Conv(c) => Some(c),
            _ => None,
        })
    }

    /// Trainable and non-trainable parameter totals.
    pub fn count_params(&self) -> Result<ParamCount, ModelError> {
        let plan = self.channel_plan()?;
        let mut count = ParamCount {
            trainable: 0,
            non_trainable: 0,
        };
        for (layer, &width) in self.layers.iter().zip(&plan) {
            match layer {
                LayerSpec::Conv(c) => {
                    let k = c.kernel_size as u64;
                    count.trainable += k * k * (c.in_ch * c.out_ch) as u64;
                    if c.bias {
                        count.trainable += c.out_ch as u64;
                    }
                }
                LayerSpec::BatchNorm => {
                    count.trainable += 2 * width as u64;
                    count.non_trainable += 2 * width as u64;
                }
                _ => {}
            }
        }
        Ok(count)
    }

    /// `1 + Σ dilation·(k − 1)` over the trunk convs of a stride-1 stack.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .convs()
            .filter(|c| !c.branch)
            .map(|c| c.dilation * (c.kernel_size - 1))
            .sum::<usize>()
    }

    pub fn count_flops(&self, height: usize, width: usize) -> Result<FlopCount, ModelError> {
        let plan = self.channel_plan()?;
        let plane = (height * width) as u64;
        let mut flops = FlopCount {
            conv: 0,
            elementwise: 0,
        };
        for (layer, &ch) in self.layers.iter().zip(&plan) {
            let ch = ch as u64;
            match layer {
                LayerSpec::Conv(c) => flops.conv += conv_flops(c, height, width),
                LayerSpec::BatchNorm => flops.elementwise += 2 * ch * plane,
                LayerSpec::Relu | LayerSpec::GlobalAvgPool => flops.elementwise += ch * plane,
                LayerSpec::Softmax => flops.elementwise += 3 * ch,
            }
        }
        Ok(flops)
    }
}

/// The default stack: seven 3×3 conv/batchnorm/relu blocks with dilations
/// `[1, 1, 1, 2, 4, 8, 1]`, a 1×1 conv to two class maps, global average
/// pooling and softmax. Panics if `channels < 2`.
pub fn default_mela_d(channels: usize) -> ArchitectureConfig {
    assert!(channels >= 2, "mela-d needs at least 2 channels, got {channels}");
    let name = match channels {
        128 => "mela-d".to_string(),
        32 => "mela-d-lite".to_string(),
        c => format!("mela-d-c{c}"),
    };
    let mut layers = Vec::new();
    let mut in_ch = 3;
    for &dilation in &MELA_D_DILATIONS {
        layers.push(LayerSpec::Conv(ConvSpec {
            in_ch,
            out_ch: channels,
            kernel_size: 3,
            dilation,
            bias: true,
            branch: false,
        }));
        layers.push(LayerSpec::BatchNorm);
        layers.push(LayerSpec::Relu);
        in_ch = channels;
    }
    layers.push(LayerSpec::Conv(ConvSpec {
        in_ch,
        out_ch: NUM_CLASSES,
        kernel_size: 1,
        dilation: 1,
        bias: true,
        branch: false,
    }));
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Softmax);
    ArchitectureConfig {
        name,
        input: InputSpec {
            channels: 3,
            height: DEFAULT_INPUT_SIZE,
            width: DEFAULT_INPUT_SIZE,
        },
        layers,
    }
}

const MELA_D_JSON: &str = include_str!("../../assets/mela-d.json");
const MELA_D_LITE_JSON: &str = include_str!("../../assets/mela-d-lite.json");
const RESNET50_JSON: &str = include_str!("../../assets/resnet50-reference.json");

/// Names of the shipped configs.
pub const PRESETS: [&str; 3] = ["mela-d", "mela-d-lite", "resnet50-reference"];

/// Shipped config by name.
pub fn preset(name: &str) -> Option<ArchitectureConfig> {
    let text = match name {
        "mela-d" => MELA_D_JSON,
        "mela-d-lite" => MELA_D_LITE_JSON,
        "resnet50-reference" => RESNET50_JSON,
        _ => return None,
    };
    Some(ArchitectureConfig::from_json(text).expect("shipped config is valid"))
}

/// Resolves a preset name or a path to a JSON config.
pub fn resolve_config(name_or_path: &str) -> Result<ArchitectureConfig, ModelError> {
    match preset(name_or_path) {
        Some(cfg) => Ok(cfg),
        None => ArchitectureConfig::load(Path::new(name_or_path)),
    }
}
