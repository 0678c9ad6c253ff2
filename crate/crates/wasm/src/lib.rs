//! Browser build of the engine.
//!
//! The page decodes an image to RGBA with its own canvas, hands the pixels to
//! [`Engine::classify_rgba`] and gets back a JSON string. Resizing and
//! scaling happen here with the same code the native CLI uses, so results
//! match native inference on the same decoded pixels. Timing is left to the
//! caller (`performance.now()`), since `std::time` is unavailable in the
//! browser.

use melad::data::preprocess_rgba;
use melad::model::{decode_weights, logits_batch, Prediction, WeightBundle};
use melad::ExecMode;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// A loaded weight bundle.
#[wasm_bindgen]
pub struct Engine {
    bundle: WeightBundle,
}

#[wasm_bindgen]
impl Engine {
    /// Parses `.meld` bytes. Bundle errors (bad magic, checksum, version,
    /// shape) surface with the engine's own message.
    #[wasm_bindgen(constructor)]
    pub fn new(bytes: &[u8]) -> Result<Engine, JsError> {
        Self::from_bytes(bytes).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(getter, js_name = modelName)]
    pub fn model_name(&self) -> String {
        self.bundle.config().name.clone()
    }

    /// Side of the square input the network expects.
    #[wasm_bindgen(getter, js_name = inputSize)]
    pub fn input_size(&self) -> usize {
        self.bundle.config().input.height
    }

    /// Trainable parameters.
    #[wasm_bindgen(getter, js_name = paramCount)]
    pub fn param_count(&self) -> f64 {
        self.bundle.config().count_params().map(|c| c.trainable as f64).unwrap_or(0.0)
    }

    /// Classifies `width × height` RGBA pixels (alpha ignored). Returns
    /// `{"label", "p_benign", "p_malignant", "model"}` as JSON.
    #[wasm_bindgen(js_name = classifyRgba)]
    pub fn classify_rgba(&self, width: usize, height: usize, rgba: &[u8]) -> Result<String, JsError> {
        self.classify(width, height, rgba).map_err(|e| JsError::new(&e))
    }
}

impl Engine {
    pub fn from_bytes(bytes: &[u8]) -> Result<Engine, String> {
        let bundle = decode_weights(bytes).map_err(|e| e.to_string())?;
        bundle.config().validate_executable().map_err(|e| e.to_string())?;
        Ok(Engine { bundle })
    }

    pub fn predict(&self, width: usize, height: usize, rgba: &[u8]) -> Result<Prediction, String> {
        if width == 0 || height == 0 {
            return Err("empty image".into());
        }
        if rgba.len() != width * height * 4 {
            return Err(format!(
                "expected {} RGBA bytes for {width}x{height}, got {}",
                width * height * 4,
                rgba.len()
            ));
        }
        let input = preprocess_rgba(width, height, rgba, self.input_size());
        let logits = logits_batch(&self.bundle, &input, ExecMode::Deterministic).map_err(|e| e.to_string())?;
        Ok(Prediction::from_logits(logits[0]))
    }

    pub fn classify(&self, width: usize, height: usize, rgba: &[u8]) -> Result<String, String> {
        let p = self.predict(width, height, rgba)?;
        Ok(json!({
            "label": p.label,
            "p_benign": p.p_benign,
            "p_malignant": p.p_malignant,
            "model": self.model_name(),
        })
        .to_string())
    }
}
