//! Supervised training of Mela-D configs with Adam, class balancing and
//! geometric augmentation, plus a synthetic dataset generator.
//!
//! All randomness derives from [`TrainConfig::seed`] through separate ChaCha8
//! streams (weight init, shuffling, balancing, augmentation). In
//! [`ExecMode::Deterministic`] a run is bit-reproducible regardless of the
//! number of worker threads.

mod adam;
mod augment;
mod balance;
mod synthetic;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamParams, AdamState};
pub use augment::{
    apply_params, augment, flip_horizontal, flip_vertical, sample_params, AugmentConfig, AugmentParams,
};
pub use balance::balance_50_50;
pub use synthetic::{render_lesion, synthetic_dataset, MANIFEST_FILE, SYNTHETIC_SOURCE};

use crate::data::{preprocess, DataError, DatasetManifest, SampleRecord};
use crate::label::Label;
use crate::model::{ArchitectureConfig, LayerSpec, LayerWeights, ModelError, Prediction, WeightBundle};
use crate::tensor::{
    batch_norm_backward, batch_norm_train, conv2d_backward_parts, conv2d_dilated_with,
    global_avg_pool_batch, relu_in_place, softmax, BatchStats, ExecMode, Tensor, TensorError,
    PROB_FLOOR,
};

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const BALANCE_STREAM: u64 = 2;
/// Per-epoch augmentation streams start here.
const AUGMENT_STREAM: u64 = 1 << 32;

/// Preprocessed images are kept in memory when they fit in this many bytes.
const CACHE_LIMIT: usize = 1 << 30;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("the manifest has no records")]
    EmptyManifest,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Which records are augmented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPolicy {
    /// Only records carrying an `augment_seed` (the copies made by
    /// [`balance_50_50`]); each copy is transformed the same way every epoch.
    #[default]
    Oversampled,
    /// Every record, with fresh parameters each epoch.
    All,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub seed: u64,
    /// Square side images are resized to; defaults to the config's input.
    pub input_size: Option<usize>,
    pub augment_policy: AugmentPolicy,
    pub augmentation: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamParams::default();
        Self {
            learning_rate: adam.learning_rate,
            batch_size: 32,
            epochs: 20,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            input_size: None,
            augment_policy: AugmentPolicy::default(),
            augmentation: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::InvalidConfig(what.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.input_size == Some(0) {
            return bad("input_size must be positive");
        }
        self.augmentation.validate()
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Starts at 1.
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's samples.
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: WeightBundle,
    pub history: Vec<EpochStats>,
}

/// CSV with header `epoch,loss,accuracy`; values are printed with enough
/// digits to round-trip.
pub fn write_history_csv<W: Write>(history: &[EpochStats], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,loss,accuracy")?;
    for e in history {
        writeln!(out, "{},{},{}", e.epoch, e.loss, e.accuracy)?;
    }
    Ok(())
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The balancing step of [`train`] for a given training seed.
pub fn balance_seeded(manifest: &DatasetManifest, seed: u64) -> Result<DatasetManifest, DataError> {
    balance_50_50(manifest, &mut seeded(seed, BALANCE_STREAM))
}

/// Conv kernels drawn He-uniform (`±sqrt(6 / fan_in)`), biases zero, batch
/// norms the identity.
pub fn init_weights(arch: &ArchitectureConfig, seed: u64) -> Result<WeightBundle, ModelError> {
    let (config, mut layers) = WeightBundle::zeros(arch.clone())?.into_parts();
    let mut rng = seeded(seed, INIT_STREAM);
    for w in &mut layers {
        if let LayerWeights::Conv(p) = w {
            let fan_in = p.in_channels() * p.kernel_size() * p.kernel_size();
            let limit = (6.0 / fan_in as f64).sqrt() as f32;
            p.kernel.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-limit..limit));
        }
    }
    WeightBundle::new(config, layers)
}

/// What the backward pass needs from each layer.
enum Saved {
    Input(Tensor),
    Norm(Tensor, BatchStats),
    /// Relu whose output was stored as the next layer's input.
    ReluShared,
    ReluOutput(Tensor),
    Pool(usize, usize),
    Nothing,
}

/// Gradient for the trainable arrays of one layer.
enum LayerGrad {
    Conv(Tensor, Vec<f32>),
    Norm(Vec<f32>, Vec<f32>),
    None,
}

fn relu_mask(grad: &mut Tensor, output: &Tensor) {
    grad.data_mut()
        .par_chunks_mut(4096)
        .zip(output.data().par_chunks(4096))
        .for_each(|(g, o)| {
            g.iter_mut().zip(o).for_each(|(g, &o)| {
                if o <= 0.0 {
                    *g = 0.0
                }
            })
        });
}

/// Optimizer state bound to a weight bundle.
pub struct Trainer {
    bundle: WeightBundle,
    adam: AdamState,
    hp: AdamParams,
    mode: ExecMode,
}

impl Trainer {
    pub fn new(bundle: WeightBundle, hp: AdamParams, mode: ExecMode) -> Result<Self, TrainError> {
        bundle.config().validate_executable()?;
        let mut t = Self {
            bundle,
            adam: AdamState::new(&[]),
            hp,
            mode,
        };
        let lens: Vec<usize> = t.param_slices().iter().map(|s| s.len()).collect();
        t.adam = AdamState::new(&lens);
        Ok(t)
    }

    pub fn bundle(&self) -> &WeightBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> WeightBundle {
        self.bundle
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    /// Trainable arrays in layer order: kernel and (if present) bias of each
    /// conv, gamma and beta of each batch norm.
    fn param_slices(&mut self) -> Vec<&mut [f32]> {
        let biased: Vec<bool> = self
            .bundle
            .config()
            .layers
            .iter()
            .map(|l| matches!(l, LayerSpec::Conv(c) if c.bias))
            .collect();
        let mut out = Vec::new();
        for (w, &bias) in self.bundle.layers_mut().iter_mut().zip(&biased) {
            match w {
                LayerWeights::Conv(p) => {
                    out.push(p.kernel.data_mut());
                    if bias {
                        out.push(&mut p.bias[..]);
                    }
                }
                LayerWeights::BatchNorm(bn) => {
                    out.push(&mut bn.gamma[..]);
                    out.push(&mut bn.beta[..]);
                }
                LayerWeights::Stateless => {}
            }
        }
        out
    }

    /// Forward pass with batch statistics (running statistics are advanced),
    /// returning the logits and what backward needs.
    fn forward(&mut self, batch: &Tensor) -> Result<(Vec<[f32; 2]>, Vec<Saved>), TrainError> {
        let specs = self.bundle.config().layers.clone();
        let mode = self.mode;
        let mut cur = batch.clone();
        let mut tape = Vec::with_capacity(specs.len());
        let mut logits = Vec::new();
        for (i, (spec, w)) in specs.iter().zip(self.bundle.layers_mut()).enumerate() {
            let saved = match (spec, w) {
                (LayerSpec::Conv(_), LayerWeights::Conv(p)) => {
                    let out = conv2d_dilated_with(&cur, p, mode)?;
                    Saved::Input(std::mem::replace(&mut cur, out))
                }
                (LayerSpec::BatchNorm, LayerWeights::BatchNorm(bn)) => {
                    let (out, stats) = batch_norm_train(&cur, bn)?;
                    Saved::Norm(std::mem::replace(&mut cur, out), stats)
                }
                (LayerSpec::Relu, _) => {
                    relu_in_place(&mut cur);
                    match specs.get(i + 1) {
                        Some(LayerSpec::Conv(_) | LayerSpec::BatchNorm) => Saved::ReluShared,
                        _ => Saved::ReluOutput(cur.clone()),
                    }
                }
                (LayerSpec::GlobalAvgPool, _) => {
                    let (_, h, w) = cur.chw()?;
                    logits = global_avg_pool_batch(&cur)?.into_iter().map(|v| [v[0], v[1]]).collect();
                    Saved::Pool(h, w)
                }
                (LayerSpec::Softmax, _) => Saved::Nothing,
                _ => unreachable!("bundle layers are checked against the config"),
            };
            tape.push(saved);
        }
        Ok((logits, tape))
    }

    /// Mean cross-entropy of the batch and its gradient for every trainable
    /// array (in [`Trainer::param_slices`] order). Batch-norm running
    /// statistics are updated as a side effect.
    pub fn loss_and_grads(
        &mut self,
        batch: &Tensor,
        labels: &[Label],
    ) -> Result<(StepStats, Vec<Vec<f32>>), TrainError> {
        if batch.rank() != 4 || batch.batch_len() != labels.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "batch dims {:?} with {} labels",
                batch.dims(),
                labels.len()
            )));
        }
        let (logits, mut tape) = self.forward(batch)?;
        let n = labels.len();
        let mut loss = 0.0f64;
        let mut correct = 0;
        let mut dlogits = Vec::with_capacity(n);
        for (z, &label) in logits.iter().zip(labels) {
            let p = softmax(z)?;
            loss -= (p[label.index()].max(PROB_FLOOR) as f64).ln();
            correct += usize::from(Prediction::from_logits(*z).label == label);
            let t = label.one_hot();
            dlogits.push([(p[0] - t[0]) / n as f32, (p[1] - t[1]) / n as f32]);
        }

        let specs = &self.bundle.config().layers;
        let layers = self.bundle.layers();
        let first_conv = specs.iter().position(|s| matches!(s, LayerSpec::Conv(_)));
        let mut grads: Vec<LayerGrad> = (0..specs.len()).map(|_| LayerGrad::None).collect();
        let mut grad: Option<Tensor> = None;
        for i in (0..specs.len()).rev() {
            let saved = std::mem::replace(&mut tape[i], Saved::Nothing);
            match (&specs[i], &layers[i], saved) {
                (LayerSpec::Softmax, _, _) => {}
                (LayerSpec::GlobalAvgPool, _, Saved::Pool(h, w)) => {
                    let c = 2;
                    let mut data = Vec::with_capacity(n * c * h * w);
                    for d in &dlogits {
                        for &v in d {
                            data.extend(std::iter::repeat_n(v / (h * w) as f32, h * w));
                        }
                    }
                    grad = Some(Tensor::new(vec![n, c, h, w], data)?);
                }
                (LayerSpec::Relu, _, saved) => {
                    let g = grad.as_mut().expect("upstream gradient");
                    match saved {
                        Saved::ReluOutput(out) => relu_mask(g, &out),
                        Saved::ReluShared => match &tape[i + 1] {
                            Saved::Input(out) | Saved::Norm(out, _) => relu_mask(g, out),
                            _ => unreachable!("shared relu output is stored by the next layer"),
                        },
                        _ => unreachable!(),
                    }
                }
                (LayerSpec::BatchNorm, LayerWeights::BatchNorm(bn), Saved::Norm(input, stats)) => {
                    let g = grad.take().expect("upstream gradient");
                    let ng = batch_norm_backward(&input, bn, Some(&stats), &g)?;
                    grads[i] = LayerGrad::Norm(ng.gamma, ng.beta);
                    grad = Some(ng.input);
                    tape[i] = Saved::Norm(input, stats);
                }
                (LayerSpec::Conv(_), LayerWeights::Conv(p), Saved::Input(input)) => {
                    let g = grad.take().expect("upstream gradient");
                    let want_input = Some(i) != first_conv;
                    let (gi, gk, gb) = conv2d_backward_parts(&input, p, &g, self.mode, want_input)?;
                    grads[i] = LayerGrad::Conv(gk, gb);
                    grad = gi;
                    tape[i] = Saved::Input(input);
                }
                _ => unreachable!("tape entries mirror the layers"),
            }
            // Inputs stored for relus further up are no longer needed once
            // those relus are done.
            if i + 1 < tape.len() && matches!(specs[i], LayerSpec::Relu) {
                tape[i + 1] = Saved::Nothing;
            }
        }

        let mut flat = Vec::new();
        for (spec, g) in specs.iter().zip(grads) {
            match (spec, g) {
                (LayerSpec::Conv(c), LayerGrad::Conv(k, b)) => {
                    flat.push(k.into_data());
                    if c.bias {
                        flat.push(b);
                    }
                }
                (_, LayerGrad::Norm(gamma, beta)) => {
                    flat.push(gamma);
                    flat.push(beta);
                }
                _ => {}
            }
        }
        let stats = StepStats {
            loss: loss / n as f64,
            correct,
            count: n,
        };
        Ok((stats, flat))
    }

    /// Forward, backward and one Adam update on `batch`.
    pub fn step(&mut self, batch: &Tensor, labels: &[Label]) -> Result<StepStats, TrainError> {
        let (stats, grads) = self.loss_and_grads(batch, labels)?;
        let hp = self.hp;
        let mut adam = std::mem::replace(&mut self.adam, AdamState::new(&[]));
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        let result = adam_step(&mut self.param_slices(), &grad_refs, &mut adam, &hp);
        self.adam = adam;
        result?;
        Ok(stats)
    }
}

/// Supplies preprocessed (and, per the policy, augmented) training images.
struct ImageSource<'a> {
    records: &'a [SampleRecord],
    size: usize,
    policy: AugmentPolicy,
    augmentation: AugmentConfig,
    seed: u64,
    /// Base images in record order, when they fit in memory.
    cache: Option<Vec<Tensor>>,
}

impl<'a> ImageSource<'a> {
    fn new(records: &'a [SampleRecord], cfg: &TrainConfig, size: usize) -> Result<Self, TrainError> {
        let mut src = Self {
            records,
            size,
            policy: cfg.augment_policy,
            augmentation: cfg.augmentation,
            seed: cfg.seed,
            cache: None,
        };
        if records.len() * 3 * size * size * 4 <= CACHE_LIMIT {
            let all: Vec<usize> = (0..records.len()).collect();
            src.cache = Some(src.load_fixed(&all)?);
        }
        Ok(src)
    }

    /// The image of record `i` with any augmentation that does not change
    /// from epoch to epoch.
    fn fixed(&self, i: usize) -> Result<Tensor, TrainError> {
        let r = &self.records[i];
        let img = preprocess(&r.image_path, self.size)?;
        Ok(match (self.policy, r.augment_seed) {
            (AugmentPolicy::Oversampled, Some(s)) => {
                augment(&img, &self.augmentation, &mut ChaCha8Rng::seed_from_u64(s))
            }
            _ => img,
        })
    }

    fn load_fixed(&self, indices: &[usize]) -> Result<Vec<Tensor>, TrainError> {
        // Collected before checking so the first failure in record order is
        // the one reported.
        let loaded: Vec<Result<Tensor, TrainError>> = indices.par_iter().map(|&i| self.fixed(i)).collect();
        loaded.into_iter().collect()
    }

    fn batch(&self, epoch: usize, indices: &[usize]) -> Result<Tensor, TrainError> {
        let images = match &self.cache {
            Some(cache) => indices.iter().map(|&i| cache[i].clone()).collect(),
            None => self.load_fixed(indices)?,
        };
        let images: Vec<Tensor> = if self.policy == AugmentPolicy::All {
            let n = self.records.len() as u64;
            images
                .into_par_iter()
                .zip(indices)
                .map(|(img, &i)| {
                    let stream = AUGMENT_STREAM + epoch as u64 * n + i as u64;
                    augment(&img, &self.augmentation, &mut seeded(self.seed, stream))
                })
                .collect()
        } else {
            images
        };
        Ok(Tensor::stack(&images)?)
    }
}

/// Trains a freshly initialized network on `manifest`.
pub fn train(
    arch: &ArchitectureConfig,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with(arch, manifest, cfg, ExecMode::Deterministic, &mut |_| {})
}

/// [`train`] with an execution mode and a callback run after every epoch.
///
/// An unbalanced manifest is first balanced by oversampling the minority
/// class. Each epoch visits the records in a fresh random order in batches of
/// `batch_size` (the last batch may be smaller).
pub fn train_with(
    arch: &ArchitectureConfig,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    mode: ExecMode,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    arch.validate_executable()?;
    if manifest.is_empty() {
        return Err(TrainError::EmptyManifest);
    }
    let balanced = balance_seeded(manifest, cfg.seed)?;
    let records = balanced.records();
    let size = cfg.input_size.unwrap_or(arch.input.height);
    let source = ImageSource::new(records, cfg, size)?;
    log::info!(
        "training {} on {} records ({} after balancing) at {size}x{size}",
        arch.name,
        manifest.len(),
        records.len()
    );

    let mut trainer = Trainer::new(init_weights(arch, cfg.seed)?, cfg.adam(), mode)?;
    let mut shuffle = seeded(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = source.batch(epoch, chunk)?;
            let labels: Vec<Label> = chunk.iter().map(|&i| records[i].label).collect();
            let s = trainer.step(&batch, &labels)?;
            loss_sum += s.loss * s.count as f64;
            correct += s.correct;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / records.len() as f64,
            accuracy: correct as f64 / records.len() as f64,
        };
        log::info!("epoch {}: loss {:.4}, accuracy {:.4}", stats.epoch, stats.loss, stats.accuracy);
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(TrainOutcome {
        bundle: trainer.into_bundle(),
        history,
    })
}
