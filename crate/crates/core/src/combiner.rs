//! Two-stage prediction: trust the discriminative head when its temperature-scaled
//! confidence reaches the threshold, otherwise defer to the compositional model.

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::compnet::{argmax, CompNet};
use crate::error::{ensure, Result};
use crate::finetune::softmax_in_place;
use crate::head::SoftmaxHead;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Head,
    Compnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombinerConfig {
    pub threshold: f64,
    pub temperature: f64,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        Self {
            threshold: 0.95,
            temperature: 1.0,
        }
    }
}

impl CombinerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.threshold),
            InvalidArgument,
            "threshold must lie in [0, 1], got {}",
            self.threshold
        );
        ensure!(
            self.temperature > 0.0 && self.temperature.is_finite(),
            InvalidArgument,
            "temperature must be positive, got {}",
            self.temperature
        );
        Ok(())
    }
}

/// `max softmax(logits / T)`.
pub fn routing_confidence(logits: &[f64], temperature: f64) -> f64 {
    let mut z: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    softmax_in_place(&mut z);
    z.into_iter().fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutedPrediction {
    pub label: usize,
    pub source: Source,
    /// Routing confidence of the head.
    pub confidence: f64,
}

/// Routes on head logits; the CompNet is only evaluated when the head defers.
pub fn route<F>(logits: &[f64], config: &CombinerConfig, compnet_label: F) -> Result<RoutedPrediction>
where
    F: FnOnce() -> Result<usize>,
{
    config.validate()?;
    let confidence = routing_confidence(logits, config.temperature);
    if confidence >= config.threshold {
        Ok(RoutedPrediction {
            label: argmax(logits),
            source: Source::Head,
            confidence,
        })
    } else {
        Ok(RoutedPrediction {
            label: compnet_label()?,
            source: Source::Compnet,
            confidence,
        })
    }
}

pub fn combined_predict(map: &FeatureMap, head: &SoftmaxHead, compnet: &CompNet, config: &CombinerConfig) -> Result<RoutedPrediction> {
    ensure!(
        head.n_classes == compnet.n_classes(),
        DimensionMismatch,
        "head predicts {} classes, compnet {}",
        head.n_classes,
        compnet.n_classes()
    );
    let logits = head.logits(map)?;
    route(&logits, config, || compnet.classify(map).map(|c| c.label))
}
