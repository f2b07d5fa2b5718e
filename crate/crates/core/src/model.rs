//! Complete image classifiers (backbone plus head) behind one prediction interface.

use serde::{Deserialize, Serialize};

use crate::backbone::{extract_features, BackboneParams, FeatureCache, FeatureMap};
use crate::combiner::{route, CombinerConfig, Source};
use crate::compnet::{argmax, CompNet};
use crate::error::{ensure, Result};
use crate::finetune::softmax_in_place;
use crate::head::SoftmaxHead;
use crate::image::Image;

/// The head placed on top of the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    Head(SoftmaxHead),
    Compnet {
        net: CompNet,
        /// Softmax temperature used to turn per-class log-likelihoods into query outputs.
        temperature: f64,
    },
    Combined {
        head: SoftmaxHead,
        net: CompNet,
        compnet_temperature: f64,
        config: CombinerConfig,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: Vec<f64>,
    /// Which branch produced the label (combined models only).
    pub source: Option<Source>,
}

/// Class probabilities of a compositional model: `softmax(values / T)`.
pub fn compnet_probabilities(values: &[f64], temperature: f64) -> Vec<f64> {
    let mut z: Vec<f64> = values.iter().map(|v| v / temperature).collect();
    softmax_in_place(&mut z);
    z
}

/// Default output temperature: the number of feature positions, so that the
/// probabilities reflect the mean per-position log-likelihood gap.
pub fn default_compnet_temperature(net: &CompNet) -> f64 {
    let (h, w, _) = net.classes[0].shape();
    (h * w) as f64
}

impl Classifier {
    pub fn compnet(net: CompNet) -> Self {
        let temperature = default_compnet_temperature(&net);
        Self::Compnet { net, temperature }
    }

    pub fn combined(head: SoftmaxHead, net: CompNet, config: CombinerConfig) -> Self {
        let compnet_temperature = default_compnet_temperature(&net);
        Self::Combined {
            head,
            net,
            compnet_temperature,
            config,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Self::Head(h) => h.n_classes,
            Self::Compnet { net, .. } | Self::Combined { net, .. } => net.n_classes(),
        }
    }

    pub fn predict_map(&self, map: &FeatureMap) -> Result<Prediction> {
        match self {
            Self::Head(h) => {
                let p = h.probabilities(map)?;
                Ok(Prediction {
                    label: argmax(&p),
                    probabilities: p,
                    source: None,
                })
            }
            Self::Compnet { net, temperature } => {
                let c = net.classify(map)?;
                Ok(Prediction {
                    label: c.label,
                    probabilities: compnet_probabilities(&c.values, *temperature),
                    source: None,
                })
            }
            Self::Combined {
                head,
                net,
                compnet_temperature,
                config,
            } => {
                let logits = head.logits(map)?;
                let mut probs = None;
                let r = route(&logits, config, || {
                    let c = net.classify(map)?;
                    probs = Some(compnet_probabilities(&c.values, *compnet_temperature));
                    Ok(c.label)
                })?;
                let probabilities = match probs {
                    Some(p) => p,
                    None => {
                        let mut p = logits;
                        softmax_in_place(&mut p);
                        p
                    }
                };
                Ok(Prediction {
                    label: r.label,
                    probabilities,
                    source: Some(r.source),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub backbone: BackboneParams,
    pub classifier: Classifier,
}

impl Model {
    pub fn new(backbone: BackboneParams, classifier: Classifier) -> Result<Self> {
        backbone.validate()?;
        let d = backbone.depth();
        let ok = match &classifier {
            Classifier::Head(h) => h.dim == d,
            Classifier::Compnet { net, .. } => net.dictionary.dim() == d,
            Classifier::Combined { head, net, .. } => head.dim == d && net.dictionary.dim() == d,
        };
        ensure!(ok, DimensionMismatch, "classifier does not match backbone depth {d}");
        Ok(Self { backbone, classifier })
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.n_classes()
    }

    pub fn predict(&self, img: &Image) -> Result<Prediction> {
        self.classifier.predict_map(&extract_features(img, &self.backbone)?)
    }

    /// A stateful probability oracle for black-box attacks. Consecutive queries that
    /// differ in few pixels reuse most of the convolution work.
    pub fn query_fn(&self) -> impl FnMut(&Image) -> Result<Vec<f64>> + '_ {
        let mut cache = FeatureCache::new(&self.backbone);
        move |img| Ok(self.classifier.predict_map(&cache.extract(img)?)?.probabilities)
    }
}
