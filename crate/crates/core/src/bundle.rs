//! Model files: a JSON header holding shapes, hyperparameters and metadata, plus a
//! companion blob of little-endian `f64` values. Every numeric array of the model is
//! moved into the blob and replaced in the header by `{"$f64": [offset, len]}`, where
//! `offset` counts values (not bytes) from the start of the blob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{ensure, Error, Result};
use crate::experiment::ModelKind;
use crate::finetune::PartClassifier;
use crate::model::{Classifier, Model};

pub const BUNDLE_FORMAT: &str = "compdef-bundle";
pub const BUNDLE_VERSION: u32 = 1;
const BLOB_KEY: &str = "$f64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBundle {
    pub kind: ModelKind,
    pub class_names: Vec<String>,
    pub image_height: usize,
    pub image_width: usize,
    pub model: Model,
    #[serde(default)]
    pub part_classifier: Option<PartClassifier>,
    /// Training summaries (loss traces and the like) kept for inspection.
    #[serde(default)]
    pub training: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    blob: String,
    blob_values: usize,
    bundle: Value,
}

/// Moves every array of floats into `blob`.
fn extract_arrays(v: &mut Value, blob: &mut Vec<f64>) {
    match v {
        Value::Array(items) if !items.is_empty() && items.iter().all(|x| x.as_number().is_some_and(|n| n.is_f64())) => {
            let offset = blob.len();
            blob.extend(items.iter().map(|x| x.as_f64().expect("checked float")));
            *v = json!({ BLOB_KEY: [offset, items.len()] });
        }
        Value::Array(items) => items.iter_mut().for_each(|x| extract_arrays(x, blob)),
        Value::Object(map) => map.values_mut().for_each(|x| extract_arrays(x, blob)),
        _ => {}
    }
}

fn restore_arrays(v: &mut Value, blob: &[f64]) -> std::result::Result<(), String> {
    match v {
        Value::Object(map) if map.len() == 1 && map.contains_key(BLOB_KEY) => {
            let r = map[BLOB_KEY]
                .as_array()
                .filter(|a| a.len() == 2)
                .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
                .ok_or("malformed blob reference")?;
            let slice = r
                .0
                .checked_add(r.1)
                .and_then(|end| blob.get(r.0..end))
                .ok_or_else(|| format!("blob reference {}+{} beyond {} values", r.0, r.1, blob.len()))?;
            *v = Value::Array(slice.iter().map(|&x| json!(x)).collect());
            Ok(())
        }
        Value::Array(items) => items.iter_mut().try_for_each(|x| restore_arrays(x, blob)),
        Value::Object(map) => map.values_mut().try_for_each(|x| restore_arrays(x, blob)),
        _ => Ok(()),
    }
}

/// Blob path next to a header path: `model.json` → `model.bin`.
pub fn blob_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

impl ModelBundle {
    pub fn new(kind: ModelKind, class_names: Vec<String>, image_dims: (usize, usize), model: Model) -> Result<Self> {
        let b = Self {
            kind,
            class_names,
            image_height: image_dims.0,
            image_width: image_dims.1,
            model,
            part_classifier: None,
            training: Map::new(),
        };
        b.validate()?;
        Ok(b)
    }

    /// Cross-checks shapes: classes, feature depth, dictionary size and map geometry.
    pub fn validate(&self) -> Result<()> {
        self.model.backbone.validate()?;
        let m = Model::new(self.model.backbone.clone(), self.model.classifier.clone())?;
        ensure!(
            m.n_classes() == self.class_names.len(),
            DimensionMismatch,
            "model predicts {} classes but {} names are listed",
            m.n_classes(),
            self.class_names.len()
        );
        let g = self.model.backbone.geometry(self.image_height, self.image_width)?;
        let kind_ok = matches!(
            (&self.kind, &self.model.classifier),
            (ModelKind::Plain | ModelKind::PatchAug, Classifier::Head(_))
                | (ModelKind::Compnet | ModelKind::CompnetFt, Classifier::Compnet { .. })
                | (ModelKind::Combined, Classifier::Combined { .. })
        );
        ensure!(kind_ok, InvalidArgument, "bundle kind {:?} does not match its classifier", self.kind);
        match &self.model.classifier {
            Classifier::Head(h) => h.validate()?,
            Classifier::Compnet { net, temperature } => {
                ensure!(*temperature > 0.0, InvalidArgument, "compnet temperature must be positive");
                check_net(net, g.map_height, g.map_width)?;
            }
            Classifier::Combined {
                head,
                net,
                compnet_temperature,
                config,
            } => {
                head.validate()?;
                config.validate()?;
                ensure!(*compnet_temperature > 0.0, InvalidArgument, "compnet temperature must be positive");
                check_net(net, g.map_height, g.map_width)?;
            }
        }
        if let Some(pc) = &self.part_classifier {
            ensure!(
                pc.dim == self.model.backbone.depth() && pc.n_classes == self.class_names.len(),
                DimensionMismatch,
                "part classifier shape does not match the model"
            );
        }
        Ok(())
    }

    /// Header JSON and blob bytes.
    pub fn encode(&self, blob_name: &str) -> Result<(String, Vec<u8>)> {
        let mut value = serde_json::to_value(self)?;
        let mut blob = Vec::new();
        extract_arrays(&mut value, &mut blob);
        let header = Header {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            blob: blob_name.into(),
            blob_values: blob.len(),
            bundle: value,
        };
        let bytes = blob.iter().flat_map(|x| x.to_le_bytes()).collect();
        Ok((serde_json::to_string_pretty(&header)?, bytes))
    }

    pub fn decode(header: &str, blob: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::malformed(path, reason);
        let raw: Value = serde_json::from_str(header).map_err(|e| bad(e.to_string()))?;
        match (raw.get("format").and_then(Value::as_str), raw.get("version").and_then(Value::as_u64)) {
            (Some(BUNDLE_FORMAT), Some(v)) if v == u64::from(BUNDLE_VERSION) => {}
            (Some(BUNDLE_FORMAT), v) => return Err(bad(format!("unrecognized bundle version {v:?} (expected {BUNDLE_VERSION})"))),
            _ => return Err(bad("not a compdef model bundle".into())),
        }
        let h: Header = serde_json::from_value(raw).map_err(|e| bad(e.to_string()))?;
        if blob.len() % 8 != 0 {
            return Err(bad(format!("blob length {} is not a multiple of 8", blob.len())));
        }
        let values: Vec<f64> = blob.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        if values.len() != h.blob_values {
            return Err(bad(format!("blob holds {} values, header expects {}", values.len(), h.blob_values)));
        }
        let mut v = h.bundle;
        restore_arrays(&mut v, &values).map_err(bad)?;
        let b: Self = serde_json::from_value(v).map_err(|e| bad(e.to_string()))?;
        b.validate().map_err(|e| bad(e.to_string()))?;
        Ok(b)
    }

    /// Writes `path` (header) and the blob beside it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let blob = blob_path(path);
        let name = blob.file_name().and_then(|n| n.to_str()).unwrap_or("model.bin").to_string();
        let (header, bytes) = self.encode(&name)?;
        std::fs::write(path, header).map_err(|e| Error::io(path, e))?;
        std::fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let header = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = serde_json::from_str::<Value>(&header)
            .ok()
            .and_then(|v| v.get("blob").and_then(Value::as_str).map(String::from))
            .ok_or_else(|| Error::malformed(path, "header names no blob"))?;
        let blob = path.parent().unwrap_or(Path::new(".")).join(name);
        let bytes = std::fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        Self::decode(&header, &bytes, path)
    }
}

fn check_net(net: &crate::compnet::CompNet, h: usize, w: usize) -> Result<()> {
    let (nh, nw, k) = net.classes[0].shape();
    ensure!(
        (nh, nw) == (h, w),
        DimensionMismatch,
        "class models are {nh}x{nw}, the backbone produces {h}x{w} maps"
    );
    ensure!(k == net.dictionary.len(), DimensionMismatch, "class models use K={k}, dictionary has {}", net.dictionary.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arrays_move_to_blob_and_back() {
        let mut v = json!({"a": [1.5, 2.0], "b": [1, 2], "c": {"d": [[0.25], []]}, "e": 3.0});
        let orig = v.clone();
        let mut blob = Vec::new();
        extract_arrays(&mut v, &mut blob);
        assert_eq!(blob, vec![1.5, 2.0, 0.25]);
        assert_eq!(v["a"], json!({"$f64": [0, 2]}));
        assert_eq!(v["b"], json!([1, 2]));
        restore_arrays(&mut v, &blob).unwrap();
        assert_eq!(v, orig);
    }

    #[test]
    fn out_of_range_reference_rejected() {
        let mut v = json!({"a": {"$f64": [1, 5]}});
        assert!(restore_arrays(&mut v, &[0.0; 3]).is_err());
    }
}
