//! The compositional classification head.
//!
//! Each class owns `M` spatial mixtures; each mixture holds a simplex of vMF
//! coefficients per feature position. A position-independent occluder
//! simplex competes with the object model at every position, and the
//! winning term is kept, so patches the object model cannot explain are
//! attributed to the occluder instead of counting against the class.

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::dictionary::{learn_dictionary, spherical_kmeans, DictionaryConfig};
use crate::rng::{derive_seed, derive_seed_path, rng_from_seed};
use crate::error::{ensure, Error, Result};
use crate::vmf::{log_sphere_area, normalize, VmfDictionary};

const SIMPLEX_TOLERANCE: f64 = 1e-8;

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("{what} is not a simplex (sum {sum})")));
    }
    Ok(())
}

#[derive(Deserialize)]
struct MixtureParts {
    height: usize,
    width: usize,
    k: usize,
    alpha: Vec<f64>,
}

impl TryFrom<MixtureParts> for MixtureCoefficients {
    type Error = Error;

    fn try_from(p: MixtureParts) -> Result<Self> {
        Self::new(p.height, p.width, p.k, p.alpha)
    }
}

#[derive(Deserialize)]
struct ClassParts {
    class_id: usize,
    mixtures: Vec<MixtureCoefficients>,
}

impl TryFrom<ClassParts> for ClassModel {
    type Error = Error;

    fn try_from(p: ClassParts) -> Result<Self> {
        Self::new(p.class_id, p.mixtures)
    }
}

#[derive(Deserialize)]
struct OccluderParts {
    beta: Vec<f64>,
}

impl TryFrom<OccluderParts> for OccluderModel {
    type Error = Error;

    fn try_from(p: OccluderParts) -> Result<Self> {
        Self::new(p.beta)
    }
}

/// Per-position simplexes over the `K` dictionary components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureParts")]
pub struct MixtureCoefficients {
    height: usize,
    width: usize,
    k: usize,
    alpha: Vec<f64>,
}

impl MixtureCoefficients {
    pub fn new(height: usize, width: usize, k: usize, alpha: Vec<f64>) -> Result<Self> {
        ensure!(k >= 1, InvalidArgument, "mixtures need at least one component");
        ensure!(
            alpha.len() == height * width * k,
            DimensionMismatch,
            "expected {} coefficients, got {}",
            height * width * k,
            alpha.len()
        );
        for (i, a) in alpha.chunks_exact(k).enumerate() {
            check_simplex(a, &format!("coefficients at position {i}"))?;
        }
        Ok(Self { height, width, k, alpha })
    }

    pub fn uniform(height: usize, width: usize, k: usize) -> Self {
        Self {
            height,
            width,
            k,
            alpha: vec![1.0 / k as f64; height * width * k],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn at(&self, i: usize) -> &[f64] {
        &self.alpha[i * self.k..(i + 1) * self.k]
    }

    pub fn raw(&self) -> &[f64] {
        &self.alpha
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClassParts")]
pub struct ClassModel {
    pub class_id: usize,
    mixtures: Vec<MixtureCoefficients>,
}

impl ClassModel {
    pub fn new(class_id: usize, mixtures: Vec<MixtureCoefficients>) -> Result<Self> {
        ensure!(!mixtures.is_empty(), Empty, "class model needs at least one mixture");
        let (h, w, k) = (mixtures[0].height, mixtures[0].width, mixtures[0].k);
        ensure!(
            mixtures.iter().all(|m| m.height == h && m.width == w && m.k == k),
            DimensionMismatch,
            "mixtures of class {class_id} disagree on shape"
        );
        Ok(Self { class_id, mixtures })
    }

    pub fn mixtures(&self) -> &[MixtureCoefficients] {
        &self.mixtures
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let m = &self.mixtures[0];
        (m.height, m.width, m.k)
    }
}

/// Position-independent occluder coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OccluderParts")]
pub struct OccluderModel {
    beta: Vec<f64>,
}

impl OccluderModel {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        ensure!(!beta.is_empty(), Empty, "occluder needs at least one coefficient");
        check_simplex(&beta, "occluder coefficients")?;
        Ok(Self { beta })
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }
}

/// Per-position occlusion flags and scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionMap {
    pub height: usize,
    pub width: usize,
    pub occluded: Vec<bool>,
    pub scores: Vec<f64>,
}

/// Evaluation settings shared by all classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionConfig {
    /// Log-prior offset added to the occluder branch; `-inf` disables the occluder.
    pub occluder_log_prior: f64,
    /// Log-likelihood assigned to invalid (zero-norm) positions by every model.
    pub background_floor: f64,
}

impl OcclusionConfig {
    pub fn for_dim(dim: usize) -> Self {
        Self {
            occluder_log_prior: 0.0,
            background_floor: -log_sphere_area(dim),
        }
    }
}

/// Dictionary log-densities of every position of one feature map, stored as a
/// per-position maximum plus exponentiated residuals so that any simplex can be
/// scored with one dot product and one logarithm.
#[derive(Debug, Clone)]
pub struct LikelihoodTable {
    height: usize,
    width: usize,
    k: usize,
    max: Vec<f64>,
    scaled: Vec<f64>,
    valid: Vec<bool>,
    floor: f64,
}

impl LikelihoodTable {
    pub fn new(map: &FeatureMap, dict: &VmfDictionary, floor: f64) -> Result<Self> {
        ensure!(
            map.depth() == dict.dim(),
            DimensionMismatch,
            "feature depth {} != dictionary dimension {}",
            map.depth(),
            dict.dim()
        );
        let k = dict.len();
        let n = map.n_positions();
        let mut max = vec![0.0; n];
        let mut scaled = vec![0.0; n * k];
        let mut valid = vec![false; n];
        for i in 0..n {
            if let Some(f) = map.vector(i) {
                let row = &mut scaled[i * k..(i + 1) * k];
                dict.log_densities_into(f, row);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|v| *v = (*v - m).exp());
                max[i] = m;
                valid[i] = true;
            }
        }
        Ok(Self {
            height: map.height(),
            width: map.width(),
            k,
            max,
            scaled,
            valid,
            floor,
        })
    }

    pub fn n_positions(&self) -> usize {
        self.max.len()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    /// Exponentiated residuals `p(f_i|λ_k) / max_k p(f_i|λ_k)`.
    pub fn scaled_row(&self, i: usize) -> &[f64] {
        &self.scaled[i * self.k..(i + 1) * self.k]
    }

    /// `log Σ_k w_k p(f_i | λ_k)`, or the floor at invalid positions.
    #[inline]
    pub fn mix(&self, i: usize, weights: &[f64]) -> f64 {
        if !self.valid[i] {
            return self.floor;
        }
        let row = &self.scaled[i * self.k..(i + 1) * self.k];
        let s: f64 = row.iter().zip(weights).map(|(a, b)| a * b).sum();
        self.max[i] + s.ln()
    }

    fn check(&self, m: &MixtureCoefficients) -> Result<()> {
        ensure!(
            m.height == self.height && m.width == self.width && m.k == self.k,
            DimensionMismatch,
            "model {}x{}x{} vs features {}x{}x{}",
            m.height,
            m.width,
            m.k,
            self.height,
            self.width,
            self.k
        );
        Ok(())
    }
}

/// `log Σ_k α_k p(f | λ_k)` at one position; `None` marks an invalid position.
pub fn position_log_likelihood(f: Option<&[f64]>, alpha: &[f64], dict: &VmfDictionary, floor: f64) -> Result<f64> {
    ensure!(
        alpha.len() == dict.len(),
        DimensionMismatch,
        "{} coefficients for {} components",
        alpha.len(),
        dict.len()
    );
    check_simplex(alpha, "position coefficients")?;
    let Some(f) = f else { return Ok(floor) };
    ensure!(f.len() == dict.dim(), DimensionMismatch, "vector dimension {} != {}", f.len(), dict.dim());
    let l = dict.log_densities(f);
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = l.iter().zip(alpha).map(|(v, a)| a * (v - m).exp()).sum();
    Ok(m + s.ln())
}

/// Sum over positions of the object-model log-likelihood.
pub fn mixture_log_likelihood(table: &LikelihoodTable, theta: &MixtureCoefficients) -> Result<f64> {
    table.check(theta)?;
    Ok((0..table.n_positions()).map(|i| table.mix(i, theta.at(i))).sum())
}

/// Best mixture value and its index (lowest index on ties).
pub fn class_log_likelihood(table: &LikelihoodTable, model: &ClassModel) -> Result<(f64, usize)> {
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (m, theta) in model.mixtures.iter().enumerate() {
        let v = mixture_log_likelihood(table, theta)?;
        if v > best.0 {
            best = (v, m);
        }
    }
    Ok(best)
}

/// Occluder log-likelihood (including the log-prior offset) at position `i`.
#[inline]
fn occluder_term(table: &LikelihoodTable, occluder: &OccluderModel, log_prior: f64, i: usize) -> f64 {
    if !table.valid[i] {
        return table.floor;
    }
    table.mix(i, &occluder.beta) + log_prior
}

/// Occlusion-aware log-likelihood: each position keeps the larger of the object and
/// occluder terms. The returned map flags occluded positions and stores the occluder
/// term there (`-inf` elsewhere).
pub fn occluded_log_likelihood(
    table: &LikelihoodTable,
    theta: &MixtureCoefficients,
    occluder: &OccluderModel,
    log_prior: f64,
) -> Result<(f64, OcclusionMap)> {
    table.check(theta)?;
    ensure!(occluder.beta.len() == table.k, DimensionMismatch, "occluder has wrong K");
    let n = table.n_positions();
    let mut occluded = vec![false; n];
    let mut scores = vec![f64::NEG_INFINITY; n];
    let mut total = 0.0;
    for i in 0..n {
        let obj = table.mix(i, theta.at(i));
        if !table.valid[i] {
            total += obj;
            continue;
        }
        let occ = occluder_term(table, occluder, log_prior, i);
        if occ > obj {
            occluded[i] = true;
            scores[i] = occ;
            total += occ;
        } else {
            total += obj;
        }
    }
    Ok((
        total,
        OcclusionMap {
            height: table.height,
            width: table.width,
            occluded,
            scores,
        },
    ))
}

fn occluded_value(table: &LikelihoodTable, theta: &MixtureCoefficients, occ: &[f64]) -> f64 {
    (0..table.n_positions())
        .map(|i| {
            let obj = table.mix(i, theta.at(i));
            if table.valid[i] && occ[i] > obj {
                occ[i]
            } else {
                obj
            }
        })
        .sum()
}

/// The complete head: dictionary, class models and occluder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompNet {
    pub dictionary: VmfDictionary,
    pub classes: Vec<ClassModel>,
    pub occluder: OccluderModel,
    pub config: OcclusionConfig,
}

/// Outcome of classifying one feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: usize,
    /// Per-class occlusion-aware log-likelihood (maximized over mixtures).
    pub values: Vec<f64>,
    /// Winning mixture per class.
    pub mixtures: Vec<usize>,
}

impl CompNet {
    pub fn new(dictionary: VmfDictionary, classes: Vec<ClassModel>, occluder: OccluderModel, config: OcclusionConfig) -> Result<Self> {
        ensure!(!classes.is_empty(), Empty, "need at least one class model");
        let shape = classes[0].shape();
        ensure!(
            classes.iter().all(|c| c.shape() == shape),
            DimensionMismatch,
            "class models disagree on shape"
        );
        ensure!(
            shape.2 == dictionary.len() && occluder.beta.len() == dictionary.len(),
            DimensionMismatch,
            "models and dictionary disagree on K"
        );
        Ok(Self {
            dictionary,
            classes,
            occluder,
            config,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn table(&self, map: &FeatureMap) -> Result<LikelihoodTable> {
        LikelihoodTable::new(map, &self.dictionary, self.config.background_floor)
    }

    pub fn classify_table(&self, table: &LikelihoodTable) -> Result<Classification> {
        table.check(&self.classes[0].mixtures[0])?;
        let occ: Vec<f64> = (0..table.n_positions())
            .map(|i| occluder_term(table, &self.occluder, self.config.occluder_log_prior, i))
            .collect();
        let mut values = Vec::with_capacity(self.classes.len());
        let mut mixtures = Vec::with_capacity(self.classes.len());
        for class in &self.classes {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (m, theta) in class.mixtures.iter().enumerate() {
                let v = occluded_value(table, theta, &occ);
                if v > best.0 {
                    best = (v, m);
                }
            }
            values.push(best.0);
            mixtures.push(best.1);
        }
        let label = argmax(&values);
        Ok(Classification { label, values, mixtures })
    }

    /// Uniform class prior: the label with the largest occlusion-aware likelihood (lowest on ties).
    pub fn classify(&self, map: &FeatureMap) -> Result<Classification> {
        self.classify_table(&self.table(map)?)
    }

    /// Log-odds of occlusion (`occ − obj`) at every position for the winning mixture of
    /// `class`. Positive exactly where the occluder wins; invalid positions score 0.
    pub fn occlusion_score_map(&self, map: &FeatureMap, class: usize) -> Result<OcclusionMap> {
        ensure!(class < self.classes.len(), InvalidArgument, "class {class} out of range");
        let table = self.table(map)?;
        let c = self.classify_table(&table)?;
        Ok(occlusion_log_odds(
            &table,
            &self.classes[class].mixtures[c.mixtures[class]],
            &self.occluder,
            self.config.occluder_log_prior,
        ))
    }
}

/// Log-odds map for one mixture.
pub fn occlusion_log_odds(
    table: &LikelihoodTable,
    theta: &MixtureCoefficients,
    occluder: &OccluderModel,
    log_prior: f64,
) -> OcclusionMap {
    let n = table.n_positions();
    let mut occluded = vec![false; n];
    let mut scores = vec![0.0; n];
    for i in 0..n {
        if !table.valid[i] {
            continue;
        }
        let obj = table.mix(i, theta.at(i));
        let occ = occluder_term(table, occluder, log_prior, i);
        scores[i] = occ - obj;
        occluded[i] = occ > obj;
    }
    OcclusionMap {
        height: table.height,
        width: table.width,
        occluded,
        scores,
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Settings for maximum-likelihood training of class and occluder models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub mixtures: usize,
    pub iters: usize,
    /// Weight of the uniform floor mixed into every simplex: `α = (1−η)γ + η/K`.
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            mixtures: 2,
            iters: 10,
            smoothing: 1e-3,
            seed: 0,
        }
    }
}

/// Free simplex parameters plus the fixed uniform floor.
struct SmoothedSimplexes {
    gamma: Vec<f64>,
    k: usize,
    eta: f64,
}

impl SmoothedSimplexes {
    fn uniform(n: usize, k: usize, eta: f64) -> Self {
        Self { gamma: vec![1.0 / k as f64; n * k], k, eta }
    }

    fn alpha(&self) -> Vec<f64> {
        let u = self.eta / self.k as f64;
        self.gamma.iter().map(|g| (1.0 - self.eta) * g + u).collect()
    }

    /// One EM update of `gamma` over the given tables; `positions_shared` pools every
    /// position into a single simplex.
    fn em_step(&mut self, tables: &[&LikelihoodTable], positions_shared: bool) {
        let k = self.k;
        let alpha = self.alpha();
        let mut acc = vec![0.0; self.gamma.len()];
        let mut r = vec![0.0; k];
        for t in tables {
            for i in 0..t.n_positions() {
                if !t.valid[i] {
                    continue;
                }
                let slot = if positions_shared { 0 } else { i };
                let a = &alpha[slot * k..(slot + 1) * k];
                let g = &self.gamma[slot * k..(slot + 1) * k];
                let row = t.scaled_row(i);
                let denom: f64 = row.iter().zip(a).map(|(p, w)| p * w).sum();
                for j in 0..k {
                    r[j] = (1.0 - self.eta) * g[j] * row[j] / denom;
                }
                acc[slot * k..(slot + 1) * k].iter_mut().zip(&r).for_each(|(x, y)| *x += y);
            }
        }
        for (g, a) in self.gamma.chunks_exact_mut(k).zip(acc.chunks_exact(k)) {
            let s: f64 = a.iter().sum();
            if s > 0.0 {
                g.iter_mut().zip(a).for_each(|(x, y)| *x = y / s);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedClassModel {
    pub model: ClassModel,
    /// Total training log-likelihood after initialization and after every iteration.
    pub log_likelihood_trace: Vec<f64>,
    pub assignments: Vec<usize>,
}

fn check_maps(maps: &[&FeatureMap], dict: &VmfDictionary) -> Result<(usize, usize)> {
    ensure!(!maps.is_empty(), Empty, "no feature maps");
    let (h, w) = (maps[0].height(), maps[0].width());
    for m in maps {
        ensure!(
            m.height() == h && m.width() == w && m.depth() == dict.dim(),
            DimensionMismatch,
            "feature maps disagree on shape"
        );
    }
    Ok((h, w))
}

/// Initial mixture assignment by spherical k-means over whole flattened maps.
fn cluster_maps(maps: &[&FeatureMap], m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 1 {
        return Ok(vec![0; maps.len()]);
    }
    let flat: Vec<Vec<f64>> = maps
        .iter()
        .map(|f| {
            let mut v = f.raw().to_vec();
            if normalize(&mut v) == 0.0 {
                v[0] = 1.0;
            }
            v
        })
        .collect();
    let refs: Vec<&[f64]> = flat.iter().map(|v| v.as_slice()).collect();
    Ok(spherical_kmeans(&refs, m, 30, seed)?.assignments)
}

/// Hard-EM training of one class model. Every iteration reassigns each map to its
/// best mixture and then applies one EM update to each mixture's coefficients, so
/// the total log-likelihood never decreases.
pub fn learn_class_model(
    class_id: usize,
    maps: &[&FeatureMap],
    dict: &VmfDictionary,
    floor: f64,
    config: &EmConfig,
) -> Result<TrainedClassModel> {
    ensure!(config.mixtures >= 1, InvalidArgument, "need at least one mixture");
    ensure!(
        (0.0..1.0).contains(&config.smoothing),
        InvalidArgument,
        "smoothing must lie in [0, 1)"
    );
    ensure!(
        maps.len() >= config.mixtures,
        InvalidArgument,
        "class {class_id}: {} maps for {} mixtures",
        maps.len(),
        config.mixtures
    );
    let (h, w) = check_maps(maps, dict)?;
    let k = dict.len();
    let tables = maps
        .iter()
        .map(|m| LikelihoodTable::new(m, dict, floor))
        .collect::<Result<Vec<_>>>()?;
    let mut assignments = cluster_maps(maps, config.mixtures, config.seed)?;
    let mut params: Vec<SmoothedSimplexes> =
        (0..config.mixtures).map(|_| SmoothedSimplexes::uniform(h * w, k, config.smoothing)).collect();

    let m_step = |params: &mut [SmoothedSimplexes], assignments: &[usize]| {
        for (m, p) in params.iter_mut().enumerate() {
            let assigned: Vec<&LikelihoodTable> =
                tables.iter().zip(assignments).filter(|(_, &a)| a == m).map(|(t, _)| t).collect();
            if !assigned.is_empty() {
                p.em_step(&assigned, false);
            }
        }
    };
    let e_step = |params: &[SmoothedSimplexes], assignments: &mut [usize]| -> Result<f64> {
        let alphas: Vec<MixtureCoefficients> = params
            .iter()
            .map(|p| MixtureCoefficients { height: h, width: w, k, alpha: p.alpha() })
            .collect();
        let model = ClassModel { class_id, mixtures: alphas };
        let mut total = 0.0;
        for (t, a) in tables.iter().zip(assignments.iter_mut()) {
            let (v, m) = class_log_likelihood(t, &model)?;
            *a = m;
            total += v;
        }
        Ok(total)
    };

    m_step(&mut params, &assignments);
    let mut trace = Vec::with_capacity(config.iters + 1);
    trace.push(e_step(&params, &mut assignments)?);
    for _ in 0..config.iters {
        m_step(&mut params, &assignments);
        trace.push(e_step(&params, &mut assignments)?);
    }
    let mixtures = params
        .iter()
        .map(|p| MixtureCoefficients::new(h, w, k, p.alpha()))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainedClassModel {
        model: ClassModel::new(class_id, mixtures)?,
        log_likelihood_trace: trace,
        assignments,
    })
}

/// Learns the occluder simplex from feature maps of object-free images by EM over
/// all of their positions pooled together.
pub fn learn_occluder_model(maps: &[&FeatureMap], dict: &VmfDictionary, config: &EmConfig) -> Result<OccluderModel> {
    ensure!(!maps.is_empty(), Empty, "background corpus is empty");
    check_maps(maps, dict)?;
    let tables = maps
        .iter()
        .map(|m| LikelihoodTable::new(m, dict, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&LikelihoodTable> = tables.iter().collect();
    let mut p = SmoothedSimplexes::uniform(1, dict.len(), config.smoothing);
    for _ in 0..config.iters.max(1) {
        p.em_step(&refs, true);
    }
    let mut beta = p.alpha();
    let s: f64 = beta.iter().sum();
    beta.iter_mut().for_each(|b| *b /= s);
    OccluderModel::new(beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompNetTrainConfig {
    pub dictionary: DictionaryConfig,
    pub em: EmConfig,
    /// Feature vectors sampled (without replacement) for dictionary learning.
    pub max_dictionary_vectors: usize,
    pub occluder_log_prior: f64,
}

impl Default for CompNetTrainConfig {
    fn default() -> Self {
        Self {
            dictionary: DictionaryConfig::default(),
            em: EmConfig::default(),
            max_dictionary_vectors: 20_000,
            occluder_log_prior: 0.0,
        }
    }
}

/// Learns the dictionary from training features, then every class model and the occluder.
pub fn fit_compnet(
    maps: &[FeatureMap],
    labels: &[usize],
    n_classes: usize,
    backgrounds: &[FeatureMap],
    config: &CompNetTrainConfig,
) -> Result<CompNet> {
    ensure!(!maps.is_empty(), Empty, "no training maps");
    ensure!(maps.len() == labels.len(), DimensionMismatch, "maps and labels differ in length");
    ensure!(!backgrounds.is_empty(), Empty, "background corpus is empty");
    let mut vectors: Vec<&[f64]> = maps.iter().flat_map(|m| (0..m.n_positions()).filter_map(|i| m.vector(i))).collect();
    ensure!(!vectors.is_empty(), Empty, "training maps hold no valid feature vectors");
    if vectors.len() > config.max_dictionary_vectors {
        let mut rng = rng_from_seed(derive_seed(config.dictionary.seed, "dictionary-sample"));
        vectors.shuffle(&mut rng);
        vectors.truncate(config.max_dictionary_vectors);
    }
    let dictionary = learn_dictionary(&vectors, &config.dictionary)?.dictionary;
    let dim = dictionary.dim();
    let occlusion = OcclusionConfig {
        occluder_log_prior: config.occluder_log_prior,
        ..OcclusionConfig::for_dim(dim)
    };
    let classes = (0..n_classes)
        .into_par_iter()
        .map(|y| {
            let own: Vec<&FeatureMap> = maps.iter().zip(labels).filter(|(_, &l)| l == y).map(|(m, _)| m).collect();
            ensure!(!own.is_empty(), Empty, "class {y} has no training maps");
            let em = EmConfig {
                seed: derive_seed_path(config.em.seed, &["class"], y as u64),
                ..config.em.clone()
            };
            learn_class_model(y, &own, &dictionary, occlusion.background_floor, &em).map(|t| t.model)
        })
        .collect::<Result<Vec<_>>>()?;
    let bg: Vec<&FeatureMap> = backgrounds.iter().collect();
    let occluder = learn_occluder_model(&bg, &dictionary, &config.em)?;
    CompNet::new(dictionary, classes, occluder, occlusion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vmf::VmfComponent;

    fn dict3() -> VmfDictionary {
        VmfDictionary::new(vec![
            VmfComponent { mu: vec![1.0, 0.0, 0.0], sigma: 40.0 },
            VmfComponent { mu: vec![0.0, 1.0, 0.0], sigma: 40.0 },
            VmfComponent { mu: vec![0.0, 0.0, 1.0], sigma: 40.0 },
            VmfComponent { mu: vec![-1.0, 0.0, 0.0], sigma: 40.0 },
        ])
        .unwrap()
    }

    #[test]
    fn simplex_violation_rejected() {
        let d = dict3();
        let f = [1.0, 0.0, 0.0];
        assert!(position_log_likelihood(Some(&f), &[0.5, 0.5, 0.5, 0.0], &d, 0.0).is_err());
        assert!(MixtureCoefficients::new(1, 1, 2, vec![0.7, 0.7]).is_err());
        assert!(OccluderModel::new(vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn invalid_position_returns_floor() {
        let d = dict3();
        assert_eq!(position_log_likelihood(None, &[0.25; 4], &d, -7.5).unwrap(), -7.5);
    }

    #[test]
    fn occluder_planted_corpus() {
        let d = dict3();
        let maps: Vec<FeatureMap> = (0..3)
            .map(|_| FeatureMap::from_raw(2, 2, 3, [0.0, 0.0, 1.0].repeat(4), 1e-9).unwrap())
            .collect();
        let refs: Vec<&FeatureMap> = maps.iter().collect();
        let occ = learn_occluder_model(&refs, &d, &EmConfig { iters: 20, ..EmConfig::default() }).unwrap();
        assert!(occ.beta()[2] >= 0.99, "{:?}", occ.beta());
        assert!(learn_occluder_model(&[], &d, &EmConfig::default()).is_err());
    }

    #[test]
    fn too_few_maps_for_mixtures() {
        let d = dict3();
        let m = FeatureMap::from_raw(2, 2, 3, [1.0, 0.0, 0.0].repeat(4), 1e-9).unwrap();
        let cfg = EmConfig { mixtures: 2, ..EmConfig::default() };
        assert!(learn_class_model(0, &[&m], &d, 0.0, &cfg).is_err());
    }
}
