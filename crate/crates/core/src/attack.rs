//! Query-budgeted black-box patch attacks: a random search over patch locations and
//! extreme-color pixels, and a texture attack searching over dictionary crops.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{ensure, Error, Result};
use crate::image::{Image, PatchMask};
use crate::rng::{derive_seed, derive_seed_path, rng_from_seed, Rng};

/// Patch contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    /// `side × side × 3` values, channel-last row-major.
    Pixels(Vec<f32>),
    /// Crop of a dictionary texture starting at (`crop_row`, `crop_col`).
    Texture { texture: usize, crop_row: usize, crop_col: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub row: usize,
    pub col: usize,
    pub side: usize,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub class: usize,
    pub image: Image,
    /// Index of the source image within the class's training items, and the crop's top-left corner.
    pub source_item: usize,
    pub source_row: usize,
    pub source_col: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureDictionary {
    pub textures: Vec<Texture>,
    /// Texture indices per class.
    pub by_class: Vec<Vec<usize>>,
}

impl TextureDictionary {
    pub fn len(&self) -> usize {
        self.textures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.textures.is_empty()
    }

    /// Side of the smallest texture.
    pub fn min_side(&self) -> usize {
        self.textures.iter().map(|t| t.image.height().min(t.image.width())).min().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub n_patches: usize,
    /// Total patched area as a fraction of the image.
    pub area: f64,
    pub budget: usize,
    pub target: Option<usize>,
    /// Probability of proposing a relocation instead of a pixel update (random search).
    pub p_location: f64,
    /// Initial relocation radius as a fraction of the free range.
    pub initial_radius: f64,
    /// Initial fraction of a patch's pixels resampled per proposal.
    pub initial_fraction: f64,
    /// Texture search: restarts-or-sweeps bound.
    pub iterations: usize,
    /// Texture search: queries without improvement before a restart.
    pub patience: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            n_patches: 1,
            area: 0.1,
            budget: 2000,
            target: None,
            p_location: 0.2,
            initial_radius: 0.5,
            initial_fraction: 0.3,
            iterations: 40,
            patience: 60,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_patches >= 1, InvalidArgument, "n_patches must be at least 1");
        ensure!(self.area > 0.0 && self.area < 1.0, InvalidArgument, "area must lie in (0, 1), got {}", self.area);
        ensure!(self.budget >= 1, InvalidArgument, "query budget must be at least 1");
        ensure!((0.0..=1.0).contains(&self.p_location), InvalidArgument, "p_location must lie in [0, 1]");
        ensure!(
            (0.0..=1.0).contains(&self.initial_radius) && self.initial_fraction > 0.0 && self.initial_fraction <= 1.0,
            InvalidArgument,
            "schedule parameters out of range"
        );
        ensure!(self.iterations >= 1 && self.patience >= 1, InvalidArgument, "iterations and patience must be positive");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackResult {
    pub success: bool,
    pub queries: usize,
    pub patches: Vec<PatchSpec>,
    /// Best loss after every query.
    pub trace: Vec<f64>,
    pub final_label: usize,
    pub final_probabilities: Vec<f64>,
    #[serde(skip)]
    pub image: Image,
    #[serde(skip)]
    pub mask: PatchMask,
}

/// Side of every patch: `floor(sqrt(area · H · W / n))`.
pub fn patch_geometry(area: f64, n_patches: usize, height: usize, width: usize) -> Result<usize> {
    ensure!(n_patches >= 1, InvalidArgument, "n_patches must be at least 1");
    let side = (area * (height * width) as f64 / n_patches as f64).sqrt().floor() as usize;
    ensure!(side >= 1, InvalidArgument, "patch side would be 0 for area {area} and {n_patches} patches");
    ensure!(
        side <= height && side <= width,
        InvalidArgument,
        "patch side {side} exceeds the {height}x{width} image"
    );
    Ok(side)
}

/// Pastes patches in order; later patches overwrite earlier ones where they overlap.
pub fn apply_patches(img: &Image, patches: &[PatchSpec], dictionary: Option<&TextureDictionary>) -> Result<(Image, PatchMask)> {
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    let mut mask = PatchMask::empty(h, w);
    for (n, p) in patches.iter().enumerate() {
        ensure!(
            p.side >= 1 && p.row + p.side <= h && p.col + p.side <= w,
            InvalidArgument,
            "patch {n} at ({}, {}) with side {} is out of bounds",
            p.row,
            p.col,
            p.side
        );
        match &p.payload {
            Payload::Pixels(px) => {
                ensure!(px.len() == p.side * p.side * 3, DimensionMismatch, "patch {n} payload has wrong size");
                for r in 0..p.side {
                    for c in 0..p.side {
                        let o = (r * p.side + c) * 3;
                        out.set(p.row + r, p.col + c, [px[o], px[o + 1], px[o + 2]]);
                        mask.set(p.row + r, p.col + c);
                    }
                }
            }
            Payload::Texture { texture, crop_row, crop_col } => {
                let dict = dictionary.ok_or_else(|| Error::InvalidArgument(format!("patch {n} needs a texture dictionary")))?;
                let t = dict
                    .textures
                    .get(*texture)
                    .ok_or_else(|| Error::InvalidArgument(format!("patch {n}: unknown texture {texture}")))?;
                ensure!(
                    crop_row + p.side <= t.image.height() && crop_col + p.side <= t.image.width(),
                    InvalidArgument,
                    "patch {n}: crop exceeds texture {texture}"
                );
                for r in 0..p.side {
                    for c in 0..p.side {
                        out.set(p.row + r, p.col + c, t.image.get(crop_row + r, crop_col + c));
                        mask.set(p.row + r, p.col + c);
                    }
                }
            }
        }
    }
    Ok((out, mask))
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    let s: f64 = probs.iter().sum();
    ensure!(
        !probs.is_empty() && probs.iter().all(|p| p.is_finite() && *p >= 0.0) && (s - 1.0).abs() <= 1e-6,
        InvalidDistribution,
        "query output is not a probability vector (sum {s})"
    );
    Ok(())
}

/// Untargeted: `p(true) − max_{y≠true} p(y)`. Targeted: `−p(target)`. Lower is better.
pub fn attack_loss(probs: &[f64], true_label: usize, target: Option<usize>) -> Result<f64> {
    check_distribution(probs)?;
    ensure!(true_label < probs.len(), InvalidArgument, "label {true_label} out of range");
    match target {
        Some(t) => {
            ensure!(t < probs.len(), InvalidArgument, "target {t} out of range");
            Ok(-probs[t])
        }
        None => {
            let other = probs
                .iter()
                .enumerate()
                .filter(|&(y, _)| y != true_label)
                .map(|(_, &p)| p)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(probs[true_label] - other.max(0.0))
        }
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    crate::compnet::argmax(p)
}

/// Success test matching [`attack_loss`].
pub fn is_success(probs: &[f64], true_label: usize, target: Option<usize>) -> bool {
    match target {
        Some(t) => argmax(probs) == t,
        None => attack_loss(probs, true_label, None).is_ok_and(|l| l < 0.0),
    }
}

/// Wraps a query function and refuses calls beyond the budget.
pub struct QueryCounter<F> {
    f: F,
    used: usize,
    budget: usize,
}

impl<F> QueryCounter<F>
where
    F: FnMut(&Image) -> Result<Vec<f64>>,
{
    pub fn new(f: F, budget: usize) -> Self {
        Self { f, used: 0, budget }
    }

    /// `None` once the budget is spent.
    pub fn query(&mut self, img: &Image) -> Result<Option<Vec<f64>>> {
        if self.used >= self.budget {
            return Ok(None);
        }
        self.used += 1;
        let p = (self.f)(img)?;
        check_distribution(&p)?;
        Ok(Some(p))
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.used
    }
}

/// Best state seen so far and the per-query trace.
struct Tracker {
    best_loss: f64,
    best_patches: Vec<PatchSpec>,
    best_probs: Vec<f64>,
    trace: Vec<f64>,
    success: bool,
}

impl Tracker {
    fn new() -> Self {
        Self {
            best_loss: f64::INFINITY,
            best_patches: Vec::new(),
            best_probs: Vec::new(),
            trace: Vec::new(),
            success: false,
        }
    }

    /// Records one query outcome; returns whether it improved on the best.
    fn record(&mut self, loss: f64, patches: &[PatchSpec], probs: Vec<f64>, true_label: usize, target: Option<usize>) -> bool {
        let improved = loss < self.best_loss;
        if improved {
            self.best_loss = loss;
            self.best_patches = patches.to_vec();
            self.success = is_success(&probs, true_label, target);
            self.best_probs = probs;
        }
        self.trace.push(self.best_loss);
        improved
    }

    fn finish(self, img: &Image, dict: Option<&TextureDictionary>, queries: usize) -> Result<AttackResult> {
        let (image, mask) = apply_patches(img, &self.best_patches, dict)?;
        Ok(AttackResult {
            success: self.success,
            queries,
            patches: self.best_patches,
            trace: self.trace,
            final_label: argmax(&self.best_probs),
            final_probabilities: self.best_probs,
            image,
            mask,
        })
    }
}

const CORNERS: [[f32; 3]; 8] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 0.0],
    [1.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 1.0, 1.0],
];

fn random_corner(rng: &mut Rng) -> [f32; 3] {
    CORNERS[rng.random_range(0..CORNERS.len())]
}

/// Uniform move of at most `radius` from `pos`, clamped to `[0, max]`.
fn jitter(rng: &mut Rng, pos: usize, radius: usize, max: usize) -> usize {
    let lo = pos.saturating_sub(radius);
    let hi = (pos + radius).min(max);
    let d = rng.random_range(0..=2 * radius);
    (pos + d).saturating_sub(radius).clamp(lo, hi)
}

fn check_label(n_classes: usize, true_label: usize, config: &AttackConfig) -> Result<()> {
    ensure!(true_label < n_classes, InvalidArgument, "true label {true_label} out of range");
    if let Some(t) = config.target {
        ensure!(t < n_classes, InvalidArgument, "target {t} out of range");
    }
    Ok(())
}

/// Random search over patch locations and RGB-corner pixel values. Proposals either move
/// one patch within a linearly shrinking radius or repaint a shrinking square window of
/// one patch with a single corner color; a proposal is kept only if it strictly lowers
/// the loss. Stops at success or when the budget is spent.
pub fn sparse_rs_patch_attack<F>(query_fn: F, img: &Image, true_label: usize, config: &AttackConfig) -> Result<AttackResult>
where
    F: FnMut(&Image) -> Result<Vec<f64>>,
{
    config.validate()?;
    let (h, w) = (img.height(), img.width());
    let side = patch_geometry(config.area, config.n_patches, h, w)?;
    let mut rng = rng_from_seed(derive_seed(config.seed, "sparse-rs"));
    let mut oracle = QueryCounter::new(query_fn, config.budget);
    let mut current: Vec<PatchSpec> = (0..config.n_patches)
        .map(|_| {
            let px: Vec<f32> = (0..side * side).flat_map(|_| random_corner(&mut rng)).collect();
            PatchSpec {
                row: rng.random_range(0..=h - side),
                col: rng.random_range(0..=w - side),
                side,
                payload: Payload::Pixels(px),
            }
        })
        .collect();
    let mut tracker = Tracker::new();
    let (first, _) = apply_patches(img, &current, None)?;
    let probs = oracle.query(&first)?.expect("budget is at least 1");
    check_label(probs.len(), true_label, config)?;
    let loss = attack_loss(&probs, true_label, config.target)?;
    tracker.record(loss, &current, probs, true_label, config.target);
    let mut current_loss = loss;
    let free = (h - side).max(w - side);
    while !tracker.success && oracle.remaining() > 0 {
        let t = oracle.used() as f64 / config.budget as f64;
        let mut proposal = current.clone();
        let k = rng.random_range(0..config.n_patches);
        let p = &mut proposal[k];
        if free > 0 && rng.random::<f64>() < config.p_location {
            let radius = ((config.initial_radius * (1.0 - t) * free as f64).round() as usize).max(1);
            p.row = jitter(&mut rng, p.row, radius, h - side);
            p.col = jitter(&mut rng, p.col, radius, w - side);
        } else {
            let frac = config.initial_fraction * (1.0 - t);
            let ws = ((frac.sqrt() * side as f64).round() as usize).clamp(1, side);
            let r0 = rng.random_range(0..=side - ws);
            let c0 = rng.random_range(0..=side - ws);
            let color = random_corner(&mut rng);
            let Payload::Pixels(px) = &mut p.payload else { unreachable!("pixel payloads only") };
            for r in r0..r0 + ws {
                for c in c0..c0 + ws {
                    let o = (r * side + c) * 3;
                    px[o..o + 3].copy_from_slice(&color);
                }
            }
        }
        if proposal == current {
            continue;
        }
        let (cand, _) = apply_patches(img, &proposal, None)?;
        let Some(probs) = oracle.query(&cand)? else { break };
        let loss = attack_loss(&probs, true_label, config.target)?;
        tracker.record(loss, &proposal, probs, true_label, config.target);
        if loss < current_loss {
            current = proposal;
            current_loss = loss;
        }
    }
    tracker.finish(img, None, oracle.used())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureDictionaryConfig {
    pub clusters_per_class: usize,
    /// Side of each square texture.
    pub texture_side: usize,
    /// Crops sampled per class before clustering.
    pub crops_per_class: usize,
    /// With model feedback, candidates clustered per kept texture.
    pub candidate_factor: usize,
    pub seed: u64,
}

impl Default for TextureDictionaryConfig {
    fn default() -> Self {
        Self {
            clusters_per_class: 4,
            texture_side: 32,
            crops_per_class: 40,
            candidate_factor: 3,
            seed: 0,
        }
    }
}

/// Mean and standard deviation of each channel.
fn color_stats(img: &Image) -> [f64; 6] {
    let n = (img.height() * img.width()) as f64;
    let mut s = [0.0; 6];
    for px in img.data().chunks_exact(3) {
        for c in 0..3 {
            let v = f64::from(px[c]);
            s[c] += v;
            s[3 + c] += v * v;
        }
    }
    for c in 0..3 {
        s[c] /= n;
        s[3 + c] = (s[3 + c] / n - s[c] * s[c]).max(0.0).sqrt();
    }
    s
}

fn sq_dist(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Euclidean k-means (k-means++ seeding) returning the medoid index of each non-empty cluster,
/// ordered by cluster index.
fn medoids(points: &[[f64; 6]], k: usize, rng: &mut Rng) -> Vec<usize> {
    let k = k.min(points.len());
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, di) in d.iter().enumerate() {
            if u < *di {
                pick = i;
                break;
            }
            u -= di;
        }
        centers.push(points[pick]);
    }
    let mut assign = vec![0usize; points.len()];
    for _ in 0..50 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centers.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            if assign[i] != best.0 {
                assign[i] = best.0;
                changed = true;
            }
        }
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<&[f64; 6]> = points.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let mut m = [0.0; 6];
            for p in &members {
                m.iter_mut().zip(p.iter()).for_each(|(a, b)| *a += b);
            }
            m.iter_mut().for_each(|a| *a /= members.len() as f64);
            *c = m;
        }
        if !changed {
            break;
        }
    }
    centers
        .iter()
        .enumerate()
        .filter_map(|(j, c)| {
            points
                .iter()
                .enumerate()
                .filter(|&(i, _)| assign[i] == j)
                .min_by(|a, b| sq_dist(a.1, c).total_cmp(&sq_dist(b.1, c)))
                .map(|(i, _)| i)
        })
        .collect()
}

/// Mean probability of `class` when `texture` is pasted at the centre of neutral backgrounds.
pub fn paste_score<F>(query_fn: &mut F, texture: &Image, class: usize, height: usize, width: usize) -> Result<f64>
where
    F: FnMut(&Image) -> Result<Vec<f64>>,
{
    let side = texture.height().min(texture.width()).min(height).min(width);
    let mut total = 0.0;
    let backgrounds = [[0.5f32; 3], [0.2; 3], [0.8; 3]];
    for bg in backgrounds {
        let mut img = Image::filled(height, width, bg);
        let (r0, c0) = ((height - side) / 2, (width - side) / 2);
        for r in 0..side {
            for c in 0..side {
                img.set(r0 + r, c0 + c, texture.get(r, c));
            }
        }
        let p = query_fn(&img)?;
        check_distribution(&p)?;
        ensure!(class < p.len(), InvalidArgument, "class {class} out of range");
        total += p[class];
    }
    Ok(total / backgrounds.len() as f64)
}

/// Builds per-class textures from crops of training images: crops are clustered on
/// colour statistics and cluster medoids are kept. With a query function, more
/// candidates are clustered and the ones that most raise their class's probability
/// when pasted on neutral backgrounds are kept.
pub fn build_texture_dictionary<F>(
    dataset: &LabeledDataset,
    config: &TextureDictionaryConfig,
    mut query_fn: Option<F>,
) -> Result<TextureDictionary>
where
    F: FnMut(&Image) -> Result<Vec<f64>>,
{
    ensure!(config.clusters_per_class >= 1, InvalidArgument, "need at least one cluster per class");
    ensure!(config.crops_per_class >= 1, InvalidArgument, "need at least one crop per class");
    let (h, w) = dataset.image_dims();
    let side = config.texture_side;
    ensure!(side >= 1 && side <= h && side <= w, InvalidArgument, "texture side {side} does not fit {h}x{w} images");
    let mut textures = Vec::new();
    let mut by_class = Vec::new();
    for class in 0..dataset.n_classes() {
        let items: Vec<&Image> = dataset.items().iter().filter(|it| it.label == class).map(|it| &it.image).collect();
        ensure!(!items.is_empty(), Empty, "class {class} has no images");
        let mut rng = rng_from_seed(derive_seed_path(config.seed, &["textures"], class as u64));
        // crops are centred near the image centre, where the object lies
        let mut crops = Vec::with_capacity(config.crops_per_class);
        for _ in 0..config.crops_per_class {
            let item = rng.random_range(0..items.len());
            let jitter_r = (h - side) / 4;
            let jitter_c = (w - side) / 4;
            let r = (h - side) / 2 - jitter_r + rng.random_range(0..=2 * jitter_r);
            let c = (w - side) / 2 - jitter_c + rng.random_range(0..=2 * jitter_c);
            crops.push((item, r, c, items[item].crop(r, c, side, side)?));
        }
        let stats: Vec<[f64; 6]> = crops.iter().map(|c| color_stats(&c.3)).collect();
        let want = config.clusters_per_class;
        let mut chosen = match query_fn.as_mut() {
            None => medoids(&stats, want, &mut rng),
            Some(f) => {
                let cands = medoids(&stats, want * config.candidate_factor.max(1), &mut rng);
                let mut scored = Vec::with_capacity(cands.len());
                for i in cands {
                    scored.push((i, paste_score(f, &crops[i].3, class, h, w)?));
                }
                scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                scored.into_iter().take(want).map(|(i, _)| i).collect()
            }
        };
        chosen.truncate(want);
        let mut ids = Vec::with_capacity(chosen.len());
        for i in chosen {
            let (item, r, c, ref img) = crops[i];
            ids.push(textures.len());
            textures.push(Texture {
                class,
                image: img.clone(),
                source_item: item,
                source_row: r,
                source_col: c,
            });
        }
        by_class.push(ids);
    }
    Ok(TextureDictionary { textures, by_class })
}

/// Hill climbing over (texture, crop offset, location) per patch with random restarts.
/// Each proposal changes one coordinate of one patch and is kept on strict improvement;
/// after `patience` queries without improvement the search restarts from a random state.
/// The search ends at success, after `iterations` episodes, or when the budget is spent.
pub fn texture_patch_attack<F>(
    query_fn: F,
    img: &Image,
    true_label: usize,
    dictionary: &TextureDictionary,
    config: &AttackConfig,
) -> Result<AttackResult>
where
    F: FnMut(&Image) -> Result<Vec<f64>>,
{
    config.validate()?;
    ensure!(!dictionary.is_empty(), Empty, "texture dictionary is empty");
    let (h, w) = (img.height(), img.width());
    let side = patch_geometry(config.area, config.n_patches, h, w)?;
    ensure!(
        dictionary.min_side() >= side,
        InvalidArgument,
        "textures of side {} are smaller than the patch side {side}",
        dictionary.min_side()
    );
    let allowed: Vec<usize> = match config.target {
        Some(t) => {
            let ids = dictionary.by_class.get(t).cloned().unwrap_or_default();
            ensure!(!ids.is_empty(), Empty, "no textures for target class {t}");
            ids
        }
        None => (0..dictionary.len()).collect(),
    };
    let mut rng = rng_from_seed(derive_seed(config.seed, "texture"));
    let mut oracle = QueryCounter::new(query_fn, config.budget);
    let random_patch = |rng: &mut Rng| {
        let texture = *allowed.choose(rng).expect("non-empty");
        let t = &dictionary.textures[texture].image;
        PatchSpec {
            row: rng.random_range(0..=h - side),
            col: rng.random_range(0..=w - side),
            side,
            payload: Payload::Texture {
                texture,
                crop_row: rng.random_range(0..=t.height() - side),
                crop_col: rng.random_range(0..=t.width() - side),
            },
        }
    };
    let mut tracker = Tracker::new();
    let mut episode = 0;
    'episodes: while episode < config.iterations && !tracker.success && oracle.remaining() > 0 {
        episode += 1;
        let mut current: Vec<PatchSpec> = (0..config.n_patches).map(|_| random_patch(&mut rng)).collect();
        let (cand, _) = apply_patches(img, &current, Some(dictionary))?;
        let Some(probs) = oracle.query(&cand)? else { break };
        check_label(probs.len(), true_label, config)?;
        let mut current_loss = attack_loss(&probs, true_label, config.target)?;
        tracker.record(current_loss, &current, probs, true_label, config.target);
        let mut stale = 0;
        while !tracker.success && stale < config.patience {
            let mut proposal = current.clone();
            let k = rng.random_range(0..config.n_patches);
            let p = &mut proposal[k];
            let Payload::Texture { texture, crop_row, crop_col } = &mut p.payload else {
                unreachable!("texture payloads only")
            };
            match rng.random_range(0..3) {
                0 => {
                    if allowed.len() > 1 {
                        let t = *allowed.choose(&mut rng).expect("non-empty");
                        let img_t = &dictionary.textures[t].image;
                        *texture = t;
                        *crop_row = (*crop_row).min(img_t.height() - side);
                        *crop_col = (*crop_col).min(img_t.width() - side);
                    }
                }
                1 => {
                    let t = &dictionary.textures[*texture].image;
                    let j = ((t.height() - side) / 4).max(1);
                    *crop_row = jitter(&mut rng, *crop_row, j, t.height() - side);
                    *crop_col = jitter(&mut rng, *crop_col, j, t.width() - side);
                }
                _ => {
                    let j = ((h.max(w) - side) / 4).max(1);
                    p.row = jitter(&mut rng, p.row, j, h - side);
                    p.col = jitter(&mut rng, p.col, j, w - side);
                }
            }
            if proposal == current {
                stale += 1;
                continue;
            }
            let (cand, _) = apply_patches(img, &proposal, Some(dictionary))?;
            let Some(probs) = oracle.query(&cand)? else { break 'episodes };
            let loss = attack_loss(&probs, true_label, config.target)?;
            tracker.record(loss, &proposal, probs, true_label, config.target);
            if loss < current_loss {
                current = proposal;
                current_loss = loss;
                stale = 0;
            } else {
                stale += 1;
            }
        }
    }
    tracker.finish(img, Some(dictionary), oracle.used())
}
