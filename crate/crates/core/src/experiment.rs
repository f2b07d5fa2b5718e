//! Experiment grids: train a roster of models from shared seeds, attack each on its
//! correctly classified test images, and collect accuracy, success rates, query counts,
//! localization AUCs and routing statistics into a report.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    build_texture_dictionary, patch_geometry, sparse_rs_patch_attack, texture_patch_attack, AttackConfig,
    TextureDictionary, TextureDictionaryConfig,
};
use crate::backbone::{extract_features, BackboneParams};
use crate::combiner::{CombinerConfig, Source};
use crate::compnet::{fit_compnet, CompNet, CompNetTrainConfig};
use crate::dataset::{load_image_dir, load_manifest, LabeledDataset};
use crate::error::{ensure, Error, Result};
use crate::eval::{attack_success_rate, localization_labels, localization_roc, AttackRecord, Roc, RocMode};
use crate::filters::{init_filters, FilterInitConfig};
use crate::finetune::{extract_all, finetune, FinetuneConfig, FinetuneResult};
use crate::head::{train_softmax_head, train_with_random_patches, HeadTrainConfig, SoftmaxHead};
use crate::image::Image;
use crate::model::{Classifier, Model};
use crate::rng::{derive_seed, derive_seed_path};
use crate::synth::{background_corpus, generate_synthetic_dataset, SyntheticSpec};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// First line of the flat cell CSV.
pub const CELLS_CSV_SCHEMA: &str = "# compdef-cells v1";

/// Environment variable capping the worker threads used by experiments.
pub const THREADS_ENV: &str = "COMPDEF_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// A dataset manifest plus a directory of object-free background images.
    Manifest { path: PathBuf, backgrounds: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Plain,
    PatchAug,
    Compnet,
    CompnetFt,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Defaults to a name derived from the kind and its parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Patch area fraction used during training (`patch-aug` only; default 0.1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    /// Routing threshold (`combined` only; default 0.95).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Routing temperature (`combined` only; default 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Use the finetuned backbone and compositional model (`combined` only).
    #[serde(default)]
    pub finetuned: bool,
}

impl ModelSpec {
    pub fn of(kind: ModelKind) -> Self {
        Self {
            kind,
            name: None,
            area: None,
            threshold: None,
            temperature: None,
            finetuned: false,
        }
    }

    pub fn combined(threshold: f64, temperature: f64) -> Self {
        Self {
            threshold: Some(threshold),
            temperature: Some(temperature),
            ..Self::of(ModelKind::Combined)
        }
    }

    fn augment_area(&self) -> f64 {
        self.area.unwrap_or(0.1)
    }

    fn combiner(&self) -> CombinerConfig {
        let d = CombinerConfig::default();
        CombinerConfig {
            threshold: self.threshold.unwrap_or(d.threshold),
            temperature: self.temperature.unwrap_or(d.temperature),
        }
    }

    pub fn id(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match self.kind {
            ModelKind::Plain => "plain".into(),
            ModelKind::PatchAug => format!("patch-aug-a{}", self.augment_area()),
            ModelKind::Compnet => "compnet".into(),
            ModelKind::CompnetFt => "compnet-ft".into(),
            ModelKind::Combined => {
                let c = self.combiner();
                let ft = if self.finetuned { "-ft" } else { "" };
                format!("combined{ft}-t{}-T{}", c.threshold, c.temperature)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let id = self.id();
        if self.kind != ModelKind::PatchAug {
            ensure!(self.area.is_none(), InvalidArgument, "model {id}: `area` only applies to patch-aug");
        }
        if self.kind != ModelKind::Combined {
            ensure!(
                self.threshold.is_none() && self.temperature.is_none() && !self.finetuned,
                InvalidArgument,
                "model {id}: `threshold`, `temperature` and `finetuned` only apply to combined"
            );
        }
        ensure!(
            self.augment_area() > 0.0 && self.augment_area() <= 0.5,
            InvalidArgument,
            "model {id}: area must lie in (0, 0.5]"
        );
        self.combiner().validate()
    }

    pub fn uses_compnet(&self) -> bool {
        matches!(self.kind, ModelKind::Compnet | ModelKind::CompnetFt | ModelKind::Combined)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    SparseRs,
    Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// The seed inside is ignored: each attack run is seeded from the experiment
    /// seed, the model id, the attack id and the image index.
    #[serde(default)]
    pub config: AttackConfig,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, config: AttackConfig) -> Self {
        Self { kind, name: None, config }
    }

    pub fn id(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let kind = match self.kind {
            AttackKind::SparseRs => "sparse-rs",
            AttackKind::Texture => "texture",
        };
        let target = self.config.target.map(|t| format!("-y{t}")).unwrap_or_default();
        format!("{kind}-a{}-n{}-q{}{target}", self.config.area, self.config.n_patches, self.config.budget)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub backbone: FilterInitConfig,
    pub head: HeadTrainConfig,
    pub compnet: CompNetTrainConfig,
    pub finetune: FinetuneConfig,
    pub texture: TextureDictionaryConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizationConfig {
    /// Fraction of a receptive field that must be patched for a position to count as occluded.
    pub overlap: f64,
    pub mode: RocMode,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            overlap: 0.5,
            mode: RocMode::Pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "config_version")]
    pub schema_version: u32,
    pub dataset: DatasetSource,
    /// Background images generated for synthetic datasets.
    #[serde(default = "default_backgrounds")]
    pub n_backgrounds: usize,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    /// Size of the seeded test subsample.
    pub n_test: usize,
    pub seed: u64,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub localization: LocalizationConfig,
}

fn config_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}

fn default_backgrounds() -> usize {
    60
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == CONFIG_SCHEMA_VERSION,
            InvalidArgument,
            "unsupported experiment schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
            self.schema_version
        );
        ensure!(!self.models.is_empty(), InvalidArgument, "models: roster is empty");
        ensure!(self.n_test >= 20, InvalidArgument, "n_test must be at least 20, got {}", self.n_test);
        let mut seen = HashSet::new();
        for m in &self.models {
            m.validate()?;
            ensure!(seen.insert(m.id()), InvalidArgument, "models: duplicate id {}", m.id());
        }
        let mut seen = HashSet::new();
        for a in &self.attacks {
            a.config.validate().map_err(|e| Error::InvalidArgument(format!("attack {}: {e}", a.id())))?;
            ensure!(seen.insert(a.id()), InvalidArgument, "attacks: duplicate id {}", a.id());
        }
        ensure!(
            self.localization.overlap > 0.0 && self.localization.overlap <= 1.0,
            InvalidArgument,
            "localization.overlap must lie in (0, 1]"
        );
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
        c.validate().map_err(|e| Error::malformed(path, e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub to_head: usize,
    pub to_compnet: usize,
    pub head_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub id: String,
    pub kind: ModelKind,
    pub clean_accuracy: f64,
    pub n_test: usize,
    /// Routing of the clean test images (combined models).
    pub routing: Option<RoutingStats>,
    /// Pooled over every attacked image of every attack (models with an occluder).
    pub localization_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub model: String,
    pub attack: String,
    pub attack_kind: AttackKind,
    pub area: f64,
    pub n_patches: usize,
    pub budget: usize,
    pub target: Option<usize>,
    pub clean_accuracy: f64,
    pub n_attacked: usize,
    pub n_success: usize,
    /// Absent when no test image was classified correctly.
    pub attack_success_rate: Option<f64>,
    pub mean_queries: Option<f64>,
    pub localization_auc: Option<f64>,
    /// Routing of the final adversarial images (combined models).
    pub adversarial_routing: Option<RoutingStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub crate_version: String,
    pub os: String,
    pub arch: String,
}

impl Environment {
    fn current() -> Self {
        Self {
            crate_version: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub environment: Environment,
    pub models: Vec<ModelReport>,
    pub cells: Vec<CellReport>,
    /// Localization ROC per (model, attack) cell.
    #[serde(skip)]
    pub rocs: BTreeMap<(String, String), Roc>,
    /// Raw attack records per (model, attack) cell.
    #[serde(skip)]
    pub records: BTreeMap<(String, String), Vec<AttackRecord>>,
}

impl Report {
    pub fn cell(&self, model: &str, attack: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.model == model && c.attack == attack)
    }

    pub fn model(&self, id: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per cell; models without attacks get a row with an empty attack.
    pub fn to_csv(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut s = format!(
            "{CELLS_CSV_SCHEMA}\nmodel,attack,attack_kind,area,n_patches,budget,target,clean_accuracy,n_attacked,n_success,attack_success_rate,mean_queries,localization_auc,head_fraction\n"
        );
        for m in &self.models {
            let cells: Vec<&CellReport> = self.cells.iter().filter(|c| c.model == m.id).collect();
            if cells.is_empty() {
                let hf = m.routing.map(|r| r.head_fraction);
                let _ = writeln!(s, "{},,,,,,,{},,,,,{},{}", m.id, m.clean_accuracy, opt(m.localization_auc), opt(hf));
            }
            for c in cells {
                let kind = match c.attack_kind {
                    AttackKind::SparseRs => "sparse-rs",
                    AttackKind::Texture => "texture",
                };
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    c.model,
                    c.attack,
                    kind,
                    c.area,
                    c.n_patches,
                    c.budget,
                    c.target.map(|t| t.to_string()).unwrap_or_default(),
                    c.clean_accuracy,
                    c.n_attacked,
                    c.n_success,
                    opt(c.attack_success_rate),
                    opt(c.mean_queries),
                    opt(c.localization_auc),
                    opt(c.adversarial_routing.map(|r| r.head_fraction)),
                );
            }
        }
        s
    }

    /// Writes `report.json`, `cells.csv` and one `roc_<model>__<attack>.csv` per cell with a curve.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("report.json");
        std::fs::write(&p, self.to_json()?).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("cells.csv");
        std::fs::write(&p, self.to_csv()).map_err(|e| Error::io(&p, e))?;
        for ((m, a), roc) in &self.rocs {
            roc.write_csv(dir.join(format!("roc_{}__{}.csv", file_safe(m), file_safe(a))))?;
        }
        Ok(())
    }
}

pub fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

/// A rayon pool honouring [`THREADS_ENV`] (all cores when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))
}

/// Dataset and background corpus described by a source.
pub fn load_source(source: &DatasetSource, n_backgrounds: usize, seed: u64) -> Result<(LabeledDataset, Vec<Image>)> {
    match source {
        DatasetSource::Synthetic(spec) => {
            let ds = generate_synthetic_dataset(spec)?;
            let bg = background_corpus(spec, n_backgrounds, derive_seed(seed, "backgrounds"));
            Ok((ds, bg))
        }
        DatasetSource::Manifest { path, backgrounds } => Ok((load_manifest(path)?, load_image_dir(backgrounds)?)),
    }
}

/// Component seeds: a function of the experiment seed and the component's own seed.
fn seeded(seed: u64, component: &str, own: u64) -> u64 {
    derive_seed_path(seed, &["train", component], own)
}

/// Everything trained for an experiment, built on demand and shared between models.
pub struct TrainedArtifacts<'a> {
    dataset: &'a LabeledDataset,
    backgrounds: &'a [Image],
    training: TrainingConfig,
    seed: u64,
    backbone: Option<BackboneParams>,
    plain: Option<SoftmaxHead>,
    augmented: BTreeMap<String, SoftmaxHead>,
    compnet: Option<CompNet>,
    finetuned: Option<(FinetuneResult, CompNet)>,
    finetuned_head: Option<SoftmaxHead>,
}

impl<'a> TrainedArtifacts<'a> {
    pub fn new(dataset: &'a LabeledDataset, backgrounds: &'a [Image], training: &TrainingConfig, seed: u64) -> Self {
        Self {
            dataset,
            backgrounds,
            training: training.clone(),
            seed,
            backbone: None,
            plain: None,
            augmented: BTreeMap::new(),
            compnet: None,
            finetuned: None,
            finetuned_head: None,
        }
    }

    pub fn backbone(&mut self) -> Result<BackboneParams> {
        if self.backbone.is_none() {
            let mut c = self.training.backbone.clone();
            c.seed = seeded(self.seed, "backbone", c.seed);
            let train = self.dataset.train()?;
            self.backbone = Some(init_filters(&train, &c)?);
        }
        Ok(self.backbone.clone().expect("set above"))
    }

    fn head_config(&self) -> HeadTrainConfig {
        let mut c = self.training.head.clone();
        c.seed = seeded(self.seed, "head", c.seed);
        c
    }

    pub fn plain_head(&mut self) -> Result<SoftmaxHead> {
        if self.plain.is_none() {
            let bb = self.backbone()?;
            self.plain = Some(train_softmax_head(self.dataset, &bb, &self.head_config())?);
        }
        Ok(self.plain.clone().expect("set above"))
    }

    pub fn augmented_head(&mut self, area: f64) -> Result<SoftmaxHead> {
        let key = area.to_string();
        if !self.augmented.contains_key(&key) {
            let bb = self.backbone()?;
            let h = train_with_random_patches(self.dataset, &bb, area, &self.head_config())?;
            self.augmented.insert(key.clone(), h);
        }
        Ok(self.augmented[&key].clone())
    }

    fn fit(&self, backbone: &BackboneParams, component: &str) -> Result<CompNet> {
        let mut c = self.training.compnet.clone();
        c.dictionary.seed = seeded(self.seed, &format!("{component}-dictionary"), c.dictionary.seed);
        c.em.seed = seeded(self.seed, &format!("{component}-em"), c.em.seed);
        let train = self.dataset.train()?;
        let imgs: Vec<&Image> = train.items().iter().map(|it| &it.image).collect();
        let labels: Vec<usize> = train.items().iter().map(|it| it.label).collect();
        let maps = extract_all(&imgs, backbone)?;
        let bg_refs: Vec<&Image> = self.backgrounds.iter().collect();
        let bg = extract_all(&bg_refs, backbone)?;
        fit_compnet(&maps, &labels, self.dataset.n_classes(), &bg, &c)
    }

    pub fn compnet(&mut self) -> Result<CompNet> {
        if self.compnet.is_none() {
            ensure!(!self.backgrounds.is_empty(), Empty, "compositional models need a background corpus");
            let bb = self.backbone()?;
            self.compnet = Some(self.fit(&bb, "compnet")?);
        }
        Ok(self.compnet.clone().expect("set above"))
    }

    /// Finetuning output and the compositional model refit on the finetuned backbone.
    pub fn finetuned(&mut self) -> Result<(FinetuneResult, CompNet)> {
        if self.finetuned.is_none() {
            ensure!(!self.backgrounds.is_empty(), Empty, "compositional models need a background corpus");
            let bb = self.backbone()?;
            let mut c = self.training.finetune.clone();
            c.seed = seeded(self.seed, "finetune", c.seed);
            let ft = finetune(self.dataset, &bb, &c)?;
            let net = self.fit(&ft.backbone, "compnet-ft")?;
            self.finetuned = Some((ft, net));
        }
        Ok(self.finetuned.clone().expect("set above"))
    }

    /// A plain head trained on the finetuned backbone.
    pub fn finetuned_head(&mut self) -> Result<SoftmaxHead> {
        if self.finetuned_head.is_none() {
            let (ft, _) = self.finetuned()?;
            self.finetuned_head = Some(train_softmax_head(self.dataset, &ft.backbone, &self.head_config())?);
        }
        Ok(self.finetuned_head.clone().expect("set above"))
    }

    pub fn model(&mut self, spec: &ModelSpec) -> Result<Model> {
        match spec.kind {
            ModelKind::Plain => Model::new(self.backbone()?, Classifier::Head(self.plain_head()?)),
            ModelKind::PatchAug => Model::new(self.backbone()?, Classifier::Head(self.augmented_head(spec.augment_area())?)),
            ModelKind::Compnet => Model::new(self.backbone()?, Classifier::compnet(self.compnet()?)),
            ModelKind::CompnetFt => {
                let (ft, net) = self.finetuned()?;
                Model::new(ft.backbone, Classifier::compnet(net))
            }
            ModelKind::Combined => {
                if spec.finetuned {
                    let head = self.finetuned_head()?;
                    let (ft, net) = self.finetuned()?;
                    Model::new(ft.backbone, Classifier::combined(head, net, spec.combiner()))
                } else {
                    Model::new(self.backbone()?, Classifier::combined(self.plain_head()?, self.compnet()?, spec.combiner()))
                }
            }
        }
    }
}

fn routing(sources: impl Iterator<Item = Option<Source>>) -> Option<RoutingStats> {
    let (mut h, mut c) = (0, 0);
    for s in sources {
        match s? {
            Source::Head => h += 1,
            Source::Compnet => c += 1,
        }
    }
    let n = h + c;
    (n > 0).then(|| RoutingStats {
        to_head: h,
        to_compnet: c,
        head_fraction: h as f64 / n as f64,
    })
}

fn compnet_of(model: &Model) -> Option<&CompNet> {
    match &model.classifier {
        Classifier::Head(_) => None,
        Classifier::Compnet { net, .. } | Classifier::Combined { net, .. } => Some(net),
    }
}

/// Runs one attack on every image of `subset` whose clean prediction is correct.
pub fn attack_subset(
    model: &Model,
    subset: &LabeledDataset,
    clean: &[usize],
    spec: &AttackSpec,
    dictionary: Option<&TextureDictionary>,
    seed_for: impl Fn(usize) -> u64 + Sync,
) -> Result<Vec<AttackRecord>> {
    let jobs: Vec<usize> = (0..subset.len()).filter(|&i| clean[i] == subset.items()[i].label).collect();
    jobs.par_iter()
        .map(|&i| {
            let it = &subset.items()[i];
            let config = AttackConfig {
                seed: seed_for(i),
                ..spec.config.clone()
            };
            let result = match spec.kind {
                AttackKind::SparseRs => sparse_rs_patch_attack(model.query_fn(), &it.image, it.label, &config)?,
                AttackKind::Texture => {
                    let dict = dictionary.ok_or_else(|| Error::InvalidArgument("texture attack needs a dictionary".into()))?;
                    texture_patch_attack(model.query_fn(), &it.image, it.label, dict, &config)?
                }
            };
            Ok(AttackRecord {
                image: i,
                label: it.label,
                clean_label: clean[i],
                result,
            })
        })
        .collect()
}

/// Per-position occlusion scores (for the true class) and ground-truth labels of attacked images.
pub fn localization_data(model: &Model, records: &[AttackRecord], overlap: f64) -> Result<Option<(Vec<Vec<f64>>, Vec<Vec<bool>>)>> {
    let Some(net) = compnet_of(model) else {
        return Ok(None);
    };
    let pairs: Vec<(Vec<f64>, Vec<bool>)> = records
        .par_iter()
        .map(|r| {
            let img = &r.result.image;
            let geometry = model.backbone.geometry(img.height(), img.width())?;
            let map = extract_features(img, &model.backbone)?;
            let scores = net.occlusion_score_map(&map, r.label)?.scores;
            Ok((scores, localization_labels(&r.result.mask, &geometry, overlap)?))
        })
        .collect::<Result<_>>()?;
    Ok(Some(pairs.into_iter().unzip()))
}

fn auc_of(data: &Option<(Vec<Vec<f64>>, Vec<Vec<bool>>)>, mode: RocMode) -> Option<Roc> {
    let (s, l) = data.as_ref()?;
    localization_roc(s, l, mode).ok()
}

/// Side of the largest patch any texture attack in `attacks` will request.
fn texture_side_needed(attacks: &[&AttackSpec], h: usize, w: usize) -> Result<usize> {
    attacks.iter().try_fold(0, |m, a| Ok(m.max(patch_geometry(a.config.area, a.config.n_patches, h, w)?)))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    thread_pool()?.install(|| run_inner(config))
}

fn run_inner(config: &ExperimentConfig) -> Result<Report> {
    let (dataset, backgrounds) = load_source(&config.dataset, config.n_backgrounds, config.seed)?;
    let subset = dataset.test()?.subsample(config.n_test, derive_seed(config.seed, "test-subset"));
    ensure!(!subset.is_empty(), Empty, "dataset has no test items");
    let (h, w) = dataset.image_dims();
    let mut artifacts = TrainedArtifacts::new(&dataset, &backgrounds, &config.training, config.seed);
    let mut model_reports = Vec::new();
    let mut cells = Vec::new();
    let mut rocs = BTreeMap::new();
    let mut records_out = BTreeMap::new();
    let labels: Vec<usize> = subset.items().iter().map(|it| it.label).collect();
    let texture_attacks: Vec<&AttackSpec> = config.attacks.iter().filter(|a| a.kind == AttackKind::Texture).collect();
    for spec in &config.models {
        let id = spec.id();
        let cell_err = |attack: &str, e: Error| Error::Cell {
            cell: if attack.is_empty() { id.clone() } else { format!("{id} × {attack}") },
            source: Box::new(e),
        };
        let model = artifacts.model(spec).map_err(|e| cell_err("", e))?;
        log::info!("model {id} trained");
        let clean: Vec<(usize, Option<Source>)> = subset
            .items()
            .par_iter()
            .map(|it| model.predict(&it.image).map(|p| (p.label, p.source)))
            .collect::<Result<_>>()
            .map_err(|e| cell_err("", e))?;
        let clean_labels: Vec<usize> = clean.iter().map(|c| c.0).collect();
        let acc = crate::eval::accuracy(&clean_labels, &labels)?;
        let dictionary = if texture_attacks.is_empty() {
            None
        } else {
            let mut c = config.training.texture.clone();
            c.seed = seeded(config.seed, &format!("texture-{id}"), c.seed);
            c.texture_side = c.texture_side.max(texture_side_needed(&texture_attacks, h, w)?);
            let train = dataset.train()?;
            Some(build_texture_dictionary(&train, &c, Some(model.query_fn())).map_err(|e| cell_err("texture dictionary", e))?)
        };
        let mut pooled_scores = Vec::new();
        let mut pooled_labels = Vec::new();
        for attack in &config.attacks {
            let aid = attack.id();
            let records = attack_subset(&model, &subset, &clean_labels, attack, dictionary.as_ref(), |i| {
                derive_seed_path(config.seed, &["attack", &id, &aid], i as u64)
            })
            .map_err(|e| cell_err(&aid, e))?;
            let asr = if records.is_empty() { None } else { Some(attack_success_rate(&records)?) };
            let mean_queries = (!records.is_empty())
                .then(|| records.iter().map(|r| r.result.queries as f64).sum::<f64>() / records.len() as f64);
            let loc = localization_data(&model, &records, config.localization.overlap).map_err(|e| cell_err(&aid, e))?;
            let roc = auc_of(&loc, config.localization.mode);
            if let Some((s, l)) = loc {
                pooled_scores.extend(s);
                pooled_labels.extend(l);
            }
            let adversarial_routing = match &model.classifier {
                Classifier::Combined { .. } => {
                    let preds: Vec<Option<Source>> = records
                        .par_iter()
                        .map(|r| model.predict(&r.result.image).map(|p| p.source))
                        .collect::<Result<_>>()?;
                    routing(preds.into_iter())
                }
                _ => None,
            };
            log::info!("cell {id} × {aid}: asr {asr:?} over {}", records.len());
            cells.push(CellReport {
                model: id.clone(),
                attack: aid.clone(),
                attack_kind: attack.kind,
                area: attack.config.area,
                n_patches: attack.config.n_patches,
                budget: attack.config.budget,
                target: attack.config.target,
                clean_accuracy: acc,
                n_attacked: records.len(),
                n_success: records.iter().filter(|r| r.result.success).count(),
                attack_success_rate: asr,
                mean_queries,
                localization_auc: roc.as_ref().map(|r| r.auc),
                adversarial_routing,
            });
            if let Some(r) = roc {
                rocs.insert((id.clone(), aid.clone()), r);
            }
            records_out.insert((id.clone(), aid), records);
        }
        let localization_auc = if pooled_scores.is_empty() {
            None
        } else {
            localization_roc(&pooled_scores, &pooled_labels, config.localization.mode).ok().map(|r| r.auc)
        };
        model_reports.push(ModelReport {
            id: id.clone(),
            kind: spec.kind,
            clean_accuracy: acc,
            n_test: subset.len(),
            routing: routing(clean.iter().map(|c| c.1)),
            localization_auc,
        });
    }
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: config.seed,
        config: config.clone(),
        environment: Environment::current(),
        models: model_reports,
        cells,
        rocs,
        records: records_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_ids_follow_parameters() {
        assert_eq!(ModelSpec::of(ModelKind::Plain).id(), "plain");
        assert_eq!(ModelSpec::combined(0.99, 2.0).id(), "combined-t0.99-T2");
        let a = AttackSpec::new(AttackKind::SparseRs, AttackConfig::default());
        assert_eq!(a.id(), "sparse-rs-a0.1-n1-q2000");
    }

    #[test]
    fn misplaced_model_fields_rejected() {
        let mut m = ModelSpec::of(ModelKind::Plain);
        m.threshold = Some(0.5);
        assert!(m.validate().is_err());
    }

    #[test]
    fn file_names_are_sanitized() {
        assert_eq!(file_safe("a/b c×d"), "a_b_c_d");
    }
}
