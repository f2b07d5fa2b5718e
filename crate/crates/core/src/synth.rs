//! Seeded synthetic "sign" datasets: colored silhouettes on cluttered
//! backgrounds, with a fine-grained variant in which every class shares the
//! silhouette and differs only by an interior glyph.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Item, LabeledDataset, Split};
use crate::error::{ensure, Result};
use crate::image::{Image, PatchMask, MIN_IMAGE_SIDE};
use crate::rng::{derive_seed_path, rng_from_seed, Rng};

/// Largest glyph area, as a fraction of the image, in fine-grained mode.
pub const MAX_GLYPH_AREA: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub image_size: usize,
    /// Background clutter level in `[0, 1]`.
    pub clutter: f64,
    pub fine_grained: bool,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Object radius as a fraction of the image side.
    #[serde(default = "default_object_scale")]
    pub object_scale: f64,
    pub seed: u64,
}

fn default_object_scale() -> f64 {
    0.3
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            image_size: 64,
            clutter: 0.6,
            fine_grained: false,
            train_per_class: 40,
            test_per_class: 15,
            object_scale: default_object_scale(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_classes >= 2, InvalidArgument, "n_classes must be >= 2, got {}", self.n_classes);
        ensure!(
            self.image_size >= MIN_IMAGE_SIDE,
            InvalidArgument,
            "image_size must be >= {MIN_IMAGE_SIDE}, got {}",
            self.image_size
        );
        ensure!(
            (0.0..=1.0).contains(&self.clutter),
            InvalidArgument,
            "clutter must lie in [0, 1], got {}",
            self.clutter
        );
        ensure!(
            self.object_scale > 0.05 && self.object_scale <= 0.5,
            InvalidArgument,
            "object_scale must lie in (0.05, 0.5], got {}",
            self.object_scale
        );
        ensure!(
            self.train_per_class + self.test_per_class >= 1,
            InvalidArgument,
            "dataset would be empty"
        );
        if self.fine_grained {
            ensure!(
                self.n_classes <= GLYPHS.len(),
                InvalidArgument,
                "fine-grained mode supports at most {} classes",
                GLYPHS.len()
            );
            ensure!(
                glyph_area_fraction(self) <= MAX_GLYPH_AREA,
                InvalidArgument,
                "glyph region exceeds {MAX_GLYPH_AREA} of the image"
            );
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes)
            .map(|c| {
                if self.fine_grained {
                    format!("glyph-{c}")
                } else {
                    let shape = SHAPES[c % SHAPES.len()];
                    format!("{}-{}", PALETTE[c % PALETTE.len()].0, shape.name())
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Circle,
    Triangle,
    Square,
    Diamond,
    Cross,
    Ring,
    Star,
    Hexagon,
    Pentagon,
    WideEllipse,
    TallBar,
    Crescent,
}

const SHAPES: [Shape; 12] = [
    Shape::Circle,
    Shape::Triangle,
    Shape::Square,
    Shape::Diamond,
    Shape::Cross,
    Shape::Ring,
    Shape::Star,
    Shape::Hexagon,
    Shape::Pentagon,
    Shape::WideEllipse,
    Shape::TallBar,
    Shape::Crescent,
];

const PALETTE: [(&str, [f32; 3]); 10] = [
    ("red", [0.85, 0.12, 0.10]),
    ("blue", [0.10, 0.25, 0.85]),
    ("green", [0.10, 0.65, 0.20]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("purple", [0.55, 0.15, 0.70]),
    ("orange", [0.95, 0.50, 0.05]),
    ("cyan", [0.10, 0.75, 0.80]),
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.05, 0.05, 0.05]),
    ("pink", [0.95, 0.45, 0.65]),
];

impl Shape {
    fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Square => "square",
            Shape::Diamond => "diamond",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Star => "star",
            Shape::Hexagon => "hexagon",
            Shape::Pentagon => "pentagon",
            Shape::WideEllipse => "ellipse",
            Shape::TallBar => "bar",
            Shape::Crescent => "crescent",
        }
    }

    /// Membership test in object coordinates, where the object spans `[-1, 1]^2`.
    fn contains(self, u: f64, v: f64) -> bool {
        let r = (u * u + v * v).sqrt();
        match self {
            Shape::Circle => r <= 1.0,
            Shape::Triangle => regular_polygon(u, v, 3, -std::f64::consts::FRAC_PI_2),
            Shape::Square => u.abs().max(v.abs()) <= 0.82,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Cross => {
                (u.abs() <= 0.32 && v.abs() <= 0.95) || (v.abs() <= 0.32 && u.abs() <= 0.95)
            }
            Shape::Ring => (0.55..=1.0).contains(&r),
            Shape::Star => {
                let a = v.atan2(u) + std::f64::consts::FRAC_PI_2;
                let k = (a * 5.0 / (2.0 * std::f64::consts::PI)).rem_euclid(1.0);
                let edge = 0.45 + 0.55 * (1.0 - 2.0 * (k - 0.5).abs());
                r <= edge
            }
            Shape::Hexagon => regular_polygon(u, v, 6, 0.0),
            Shape::Pentagon => regular_polygon(u, v, 5, -std::f64::consts::FRAC_PI_2),
            Shape::WideEllipse => (u / 1.0).powi(2) + (v / 0.55).powi(2) <= 1.0,
            Shape::TallBar => u.abs() <= 0.38 && v.abs() <= 1.0,
            Shape::Crescent => r <= 1.0 && ((u - 0.45).powi(2) + v * v).sqrt() > 0.75,
        }
    }
}

fn regular_polygon(u: f64, v: f64, sides: usize, phase: f64) -> bool {
    let apothem = (std::f64::consts::PI / sides as f64).cos();
    (0..sides).all(|s| {
        let a = phase + (s as f64 + 0.5) * 2.0 * std::f64::consts::PI / sides as f64;
        u * a.cos() + v * a.sin() <= apothem
    })
}

/// Seven-segment glyphs; class `c` in fine-grained mode shows digit `c`.
const GLYPHS: [u8; 10] = [
    0b0111111, 0b0000110, 0b1011011, 0b1001111, 0b1100110, 0b1101101, 0b1111101, 0b0000111,
    0b1111111, 0b1101111,
];

/// Segment test in glyph coordinates `[0,1]^2` (x right, y down).
fn glyph_contains(mask: u8, x: f64, y: f64) -> bool {
    let t = 0.16;
    let seg = |i: usize| mask & (1 << i) != 0;
    let horiz = |cy: f64| (y - cy).abs() <= t / 2.0 && (0.1..=0.9).contains(&x);
    let vert = |cx: f64, y0: f64, y1: f64| (x - cx).abs() <= t / 2.0 && (y0..=y1).contains(&y);
    (seg(0) && horiz(0.08))
        || (seg(1) && vert(0.9, 0.08, 0.5))
        || (seg(2) && vert(0.9, 0.5, 0.92))
        || (seg(3) && horiz(0.92))
        || (seg(4) && vert(0.1, 0.5, 0.92))
        || (seg(5) && vert(0.1, 0.08, 0.5))
        || (seg(6) && horiz(0.5))
}

fn glyph_side(spec: &SyntheticSpec) -> f64 {
    spec.image_size as f64 * spec.object_scale * 0.95
}

fn glyph_area_fraction(spec: &SyntheticSpec) -> f64 {
    let g = glyph_side(spec);
    // glyph box is g wide and 1.3 g tall
    (g * g * 1.3) / (spec.image_size as f64).powi(2)
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Paints a clutter-only background of the given side.
fn render_background(size: usize, clutter: f64, rng: &mut Rng) -> Vec<[f32; 3]> {
    let gray: f32 = rng.random_range(0.3..0.7);
    let tint = [rng.random_range(-0.1..0.1f32), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
    let base = [gray + tint[0], gray + tint[1], gray + tint[2]];
    let mut px = vec![base; size * size];

    // Low-frequency shading.
    let (fx, fy, ph) = (
        rng.random_range(0.5..2.0f64),
        rng.random_range(0.5..2.0f64),
        rng.random_range(0.0..6.3f64),
    );
    let amp = 0.08 * clutter as f32;
    for r in 0..size {
        for c in 0..size {
            let s = ((c as f64 / size as f64 * fx + r as f64 / size as f64 * fy) * 6.28 + ph).sin() as f32;
            for ch in 0..3 {
                px[r * size + c][ch] += amp * s;
            }
        }
    }

    let n_blobs = (clutter * 14.0).round() as usize;
    let sz = size as f64;
    for _ in 0..n_blobs {
        let col: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        // desaturate towards gray so clutter rarely matches object colors exactly
        let col = lerp3(col, [0.5; 3], rng.random_range(0.2..0.6));
        let kind: u32 = rng.random_range(0..4);
        let cx = rng.random_range(0.0..sz);
        let cy = rng.random_range(0.0..sz);
        let rx = rng.random_range(0.04..0.18) * sz;
        let ry = rng.random_range(0.04..0.18) * sz;
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let period = rng.random_range(3.0..8.0);
        let alpha: f32 = rng.random_range(0.5..0.95);
        for r in 0..size {
            for c in 0..size {
                let dx = c as f64 + 0.5 - cx;
                let dy = r as f64 + 0.5 - cy;
                let (u, v) = (dx * theta.cos() + dy * theta.sin(), -dx * theta.sin() + dy * theta.cos());
                let inside = match kind {
                    0 => (u / rx).powi(2) + (v / ry).powi(2) <= 1.0,
                    1 => u.abs() <= rx && v.abs() <= ry,
                    2 => u.abs() <= rx * 1.5 && v.abs() <= ry * 1.5 && (u / period).rem_euclid(2.0) < 1.0,
                    _ => u.abs() <= rx * 1.2 && v.abs() <= 0.8,
                };
                if inside {
                    let p = &mut px[r * size + c];
                    *p = lerp3(*p, col, alpha);
                }
            }
        }
    }
    px
}

fn finish(size: usize, px: Vec<[f32; 3]>, noise: f64, rng: &mut Rng) -> Image {
    let normal = Normal::new(0.0, noise).expect("valid noise level");
    let mut data = Vec::with_capacity(size * size * 3);
    for p in px {
        for ch in p {
            let n = if noise > 0.0 { normal.sample(rng) as f32 } else { 0.0 };
            data.push((ch + n).clamp(0.0, 1.0));
        }
    }
    Image::from_vec(size, size, data).expect("rendered image is valid")
}

/// Renders one object of class `label` onto a fresh cluttered background, with the
/// mask of pixels at least half covered by the object.
fn render_item(spec: &SyntheticSpec, label: usize, rng: &mut Rng) -> (Image, PatchMask) {
    let size = spec.image_size;
    let sz = size as f64;
    let mut px = render_background(size, spec.clutter, rng);
    let mut mask = PatchMask::empty(size, size);
    let jitter = 0.03 * sz;
    let cx = sz / 2.0 + rng.random_range(-jitter..=jitter);
    let cy = sz / 2.0 + rng.random_range(-jitter..=jitter);
    let radius = spec.object_scale * sz * rng.random_range(0.93..1.07);
    let shade: f32 = rng.random_range(0.85..1.0);

    const SS: usize = 3;
    for r in 0..size {
        for c in 0..size {
            let mut hits_obj = 0usize;
            let mut hits_inner = 0usize;
            let mut hits_glyph = 0usize;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = c as f64 + (sx as f64 + 0.5) / SS as f64;
                    let y = r as f64 + (sy as f64 + 0.5) / SS as f64;
                    let (u, v) = ((x - cx) / radius, (y - cy) / radius);
                    if spec.fine_grained {
                        let rr = (u * u + v * v).sqrt();
                        if rr <= 1.0 {
                            hits_obj += 1;
                            if rr <= 0.74 {
                                hits_inner += 1;
                                let g = glyph_side(spec);
                                let gx = (x - (cx - g / 2.0)) / g;
                                let gy = (y - (cy - 0.65 * g)) / (1.3 * g);
                                if (0.0..=1.0).contains(&gx)
                                    && (0.0..=1.0).contains(&gy)
                                    && glyph_contains(GLYPHS[label], gx, gy)
                                {
                                    hits_glyph += 1;
                                }
                            }
                        }
                    } else if SHAPES[label % SHAPES.len()].contains(u, v) {
                        hits_obj += 1;
                    }
                }
            }
            if hits_obj == 0 {
                continue;
            }
            if 2 * hits_obj >= SS * SS {
                mask.set(r, c);
            }
            let total = (SS * SS) as f32;
            let p = &mut px[r * size + c];
            if spec.fine_grained {
                let rim = [0.85 * shade, 0.1, 0.1];
                let inner = [0.95 * shade, 0.95 * shade, 0.95 * shade];
                let ink = [0.05, 0.05, 0.05];
                let n_rim = (hits_obj - hits_inner) as f32;
                let n_inner = (hits_inner - hits_glyph) as f32;
                let n_glyph = hits_glyph as f32;
                let n_bg = total - hits_obj as f32;
                for ch in 0..3 {
                    p[ch] = (p[ch] * n_bg + rim[ch] * n_rim + inner[ch] * n_inner + ink[ch] * n_glyph) / total;
                }
            } else {
                let base = PALETTE[label % PALETTE.len()].1;
                let col = base.map(|v| v * shade);
                *p = lerp3(*p, col, hits_obj as f32 / total);
            }
        }
    }
    (finish(size, px, 0.02, rng), mask)
}

fn item_rng(spec: &SyntheticSpec, label: usize, index: usize) -> Rng {
    rng_from_seed(derive_seed_path(spec.seed, &["item", &label.to_string()], index as u64))
}

/// The `index`-th image of class `label` exactly as [`generate_synthetic_dataset`]
/// renders it (train items first, then test), plus its object mask.
pub fn render_synthetic_item(spec: &SyntheticSpec, label: usize, index: usize) -> Result<(Image, PatchMask)> {
    spec.validate()?;
    ensure!(label < spec.n_classes, InvalidArgument, "label {label} out of range");
    Ok(render_item(spec, label, &mut item_rng(spec, label, index)))
}

/// Generates the dataset described by `spec`. The result is a pure function of `spec`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let per_class = spec.train_per_class + spec.test_per_class;
    let mut items = Vec::with_capacity(per_class * spec.n_classes);
    for label in 0..spec.n_classes {
        for i in 0..per_class {
            let (image, _) = render_item(spec, label, &mut item_rng(spec, label, i));
            let split = if i < spec.train_per_class { Split::Train } else { Split::Test };
            items.push(Item { image, label, split });
        }
    }
    // interleave classes so that prefixes of the test split stay balanced
    let (train, test): (Vec<_>, Vec<_>) = items.into_iter().partition(|it| it.split == Split::Train);
    let items = interleave(train, spec.n_classes)
        .into_iter()
        .chain(interleave(test, spec.n_classes))
        .collect();
    LabeledDataset::new(items, spec.class_names())
}

fn interleave(items: Vec<Item>, n_classes: usize) -> Vec<Item> {
    let mut buckets: Vec<Vec<Item>> = vec![Vec::new(); n_classes];
    for it in items {
        buckets[it.label].push(it);
    }
    let mut out = Vec::new();
    let mut iters: Vec<_> = buckets.into_iter().map(|b| b.into_iter()).collect();
    loop {
        let mut any = false;
        for it in iters.iter_mut() {
            if let Some(x) = it.next() {
                out.push(x);
                any = true;
            }
        }
        if !any {
            break;
        }
    }
    out
}

/// Clutter-only images (no class objects) drawn with the same background process.
pub fn background_corpus(spec: &SyntheticSpec, count: usize, seed: u64) -> Vec<Image> {
    (0..count)
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed_path(seed, &["background"], i as u64));
            let px = render_background(spec.image_size, spec.clutter, &mut rng);
            finish(spec.image_size, px, 0.02, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_classes: 3,
            image_size: 32,
            train_per_class: 2,
            test_per_class: 1,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_dataset(&small(7)).unwrap();
        let b = generate_synthetic_dataset(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&small(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_class_rejected() {
        let spec = SyntheticSpec { n_classes: 1, ..small(0) };
        assert!(generate_synthetic_dataset(&spec).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let ds = generate_synthetic_dataset(&small(1)).unwrap();
        assert_eq!(ds.train().unwrap().len(), 6);
        assert_eq!(ds.test().unwrap().len(), 3);
        assert_eq!(ds.len(), 9);
    }

    #[test]
    fn fine_grained_glyph_within_budget() {
        let spec = SyntheticSpec { fine_grained: true, n_classes: 10, ..SyntheticSpec::default() };
        spec.validate().unwrap();
        assert!(glyph_area_fraction(&spec) <= MAX_GLYPH_AREA);
        let too_many = SyntheticSpec { n_classes: 11, ..spec };
        assert!(too_many.validate().is_err());
    }

    #[test]
    fn empty_corpus_request() {
        assert!(background_corpus(&small(0), 0, 1).is_empty());
        assert_eq!(background_corpus(&small(0), 3, 1), background_corpus(&small(0), 3, 1));
    }

    #[test]
    fn glyph_digits_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for g in GLYPHS {
            assert!(seen.insert(g));
        }
    }
}
