//! Occlusion heat maps: per-position scores painted back onto their receptive fields
//! and shown beside the input image.

use crate::backbone::{extract_features, FeatureGeometry};
use crate::compnet::OcclusionMap;
use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::model::{Classifier, Model};

/// Pixel grid where each pixel takes the largest positive score among the positions
/// whose receptive field covers it (0 when none is positive).
pub fn paint_receptive_fields(scores: &[f64], geometry: &FeatureGeometry) -> Result<Vec<f64>> {
    ensure!(
        scores.len() == geometry.n_positions(),
        DimensionMismatch,
        "{} scores for {} positions",
        scores.len(),
        geometry.n_positions()
    );
    let (h, w) = (geometry.image_height, geometry.image_width);
    let mut out = vec![0.0f64; h * w];
    for r in 0..geometry.map_height {
        for c in 0..geometry.map_width {
            let s = scores[r * geometry.map_width + c];
            if !(s > 0.0) {
                continue;
            }
            let (r0, c0, r1, c1) = geometry.receptive_field_of(r, c);
            for y in r0..r1 {
                for x in c0..c1 {
                    let p = &mut out[y * w + x];
                    *p = p.max(s);
                }
            }
        }
    }
    Ok(out)
}

/// Black → red → yellow → white; brightness increases with `t ∈ [0, 1]`.
pub fn heat_color(t: f64) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0) as f32;
    [(3.0 * t).min(1.0), (3.0 * t - 1.0).clamp(0.0, 1.0), (3.0 * t - 2.0).clamp(0.0, 1.0)]
}

/// The heat panel: painted scores normalized by their maximum, over a dimmed copy of `img`.
pub fn occlusion_overlay(img: &Image, map: &OcclusionMap, geometry: &FeatureGeometry) -> Result<Image> {
    ensure!(
        (img.height(), img.width()) == (geometry.image_height, geometry.image_width)
            && (map.height, map.width) == (geometry.map_height, geometry.map_width),
        DimensionMismatch,
        "image, occlusion map and geometry disagree"
    );
    let painted = paint_receptive_fields(&map.scores, geometry)?;
    let top = painted.iter().copied().fold(0.0, f64::max);
    let mut out = img.clone();
    for r in 0..img.height() {
        for c in 0..img.width() {
            let v = painted[r * img.width() + c];
            let heat = heat_color(if top > 0.0 { v / top } else { 0.0 });
            let px = img.get(r, c);
            let gray = (px[0] + px[1] + px[2]) / 3.0;
            out.set(r, c, heat.map(|h| 0.15 * gray + 0.85 * h));
        }
    }
    Ok(out)
}

/// Input image beside its occlusion overlay for `class` (the model's compositional
/// prediction when `None`). Output width is twice the input width.
pub fn visualize_occlusion(model: &Model, img: &Image, class: Option<usize>) -> Result<Image> {
    let net = match &model.classifier {
        Classifier::Compnet { net, .. } | Classifier::Combined { net, .. } => net,
        Classifier::Head(_) => {
            return Err(Error::InvalidArgument(
                "occlusion maps need a model with a compositional head".into(),
            ))
        }
    };
    let map = extract_features(img, &model.backbone)?;
    let class = match class {
        Some(c) => c,
        None => net.classify(&map)?.label,
    };
    let occ = net.occlusion_score_map(&map, class)?;
    let geometry = model.backbone.geometry(img.height(), img.width())?;
    img.hconcat(&occlusion_overlay(img, &occ, &geometry)?)
}
