//! Run configuration: a flat JSON document whose keys can be overridden
//! with `key=value` pairs (dotted keys reach into `phantom`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, LossClasses, UNetConfig, UpsampleMode};
use crate::phantom::DatasetSpec;
use crate::saliency::{SaliencyParams, StructuringElement};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub patients: usize,
    pub fractions: usize,
    pub n_test: usize,
    pub n_folds: usize,
    pub n_val_per_fold: usize,
    /// Training patients per fold, drawn from the non-test, non-validation pool.
    pub n_train_per_fold: usize,
    pub target_spacing_mm: f64,
    pub crop_size: usize,
    pub hu_window_lo: f32,
    pub hu_window_hi: f32,
    pub marker_threshold_lo_hu: f32,
    pub marker_threshold_hi_hu: f32,
    pub saliency_sigma: f64,
    pub structuring_element: StructuringElement,
    pub connectivity: u8,
    pub base_channels: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    pub activation: Activation,
    pub upsample: UpsampleMode,
    pub loss_classes: LossClasses,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub threshold: f32,
    pub jobs: usize,
    pub ablation_cases: usize,
    pub ablation_markers: usize,
    pub phantom: DatasetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sal = SaliencyParams::default();
        let net = UNetConfig::default();
        let adam = AdamConfig::default();
        RunConfig {
            seed: 7,
            patients: 29,
            fractions: 5,
            n_test: 5,
            n_folds: 4,
            n_val_per_fold: 4,
            n_train_per_fold: 19,
            target_spacing_mm: 2.0,
            crop_size: 32,
            hu_window_lo: -200.0,
            hu_window_hi: 200.0,
            marker_threshold_lo_hu: sal.threshold_lo_hu,
            marker_threshold_hi_hu: sal.threshold_hi_hu,
            saliency_sigma: sal.sigma,
            structuring_element: sal.structuring_element,
            connectivity: sal.connectivity,
            base_channels: net.base_channels,
            depth: net.depth,
            dropout_rate: net.dropout_rate,
            activation: net.activation,
            upsample: net.upsample,
            loss_classes: LossClasses::default(),
            epochs: 200,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            threshold: 0.5,
            jobs: 1,
            ablation_cases: 20,
            ablation_markers: 5,
            phantom: DatasetSpec::default(),
        }
    }
}

impl RunConfig {
    /// Settings sized for a single CPU core: 32^3 crops, 8 base channels and
    /// a short schedule.
    pub fn desk() -> Self {
        RunConfig {
            epochs: 16,
            lr: 5e-4,
            dropout_rate: 0.0,
            ..Default::default()
        }
    }

    pub fn saliency(&self) -> SaliencyParams {
        SaliencyParams {
            threshold_lo_hu: self.marker_threshold_lo_hu,
            threshold_hi_hu: self.marker_threshold_hi_hu,
            sigma: self.saliency_sigma,
            structuring_element: self.structuring_element,
            connectivity: self.connectivity,
        }
    }

    /// Network for `in_channels` inputs (2 with saliency, 1 for CT only).
    pub fn network(&self, in_channels: usize) -> UNetConfig {
        UNetConfig {
            in_channels,
            base_channels: self.base_channels,
            depth: self.depth,
            dropout_rate: self.dropout_rate,
            activation: self.activation,
            upsample: self.upsample,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn hu_window(&self) -> (f32, f32) {
        (self.hu_window_lo, self.hu_window_hi)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_folds == 0 || self.n_val_per_fold == 0 || self.n_train_per_fold == 0 {
            return bad("n_folds, n_val_per_fold and n_train_per_fold must be positive");
        }
        if self.crop_size == 0 || self.crop_size % (1 << self.depth) != 0 {
            return bad("crop_size must be a positive multiple of 2^depth");
        }
        if !(self.target_spacing_mm > 0.0) {
            return bad("target_spacing_mm must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1");
        }
        self.network(2).validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))
    }

    /// Applies `key=value` overrides. Values are parsed as JSON, falling back
    /// to a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self).map_err(|e| Error::Format(format!("config: {e}")))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("override {o:?} is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown config key {key:?}")))?;
            }
            *slot = value;
        }
        serde_json::from_value(doc).map_err(|e| Error::InvalidArgument(format!("config override: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let c = RunConfig::default()
            .with_overrides(&["epochs=3".into(), "phantom.tbv_offset_hu=20".into(), "activation=relu".into()])
            .unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.phantom.tbv_offset_hu, 20.0);
        assert_eq!(c.activation, Activation::Relu);
        assert!(RunConfig::default().with_overrides(&["nope=1".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["epochs".into()]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::desk();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<RunConfig>("{\"bogus\": 1}").is_err());
    }
}
