//! `compdef`: synthesize data, train models, attack them, run experiment grids and
//! render occlusion maps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map};

use compdef::attack::AttackConfig;
use compdef::bundle::ModelBundle;
use compdef::dataset::{load_image_dir, load_manifest, LabeledDataset};
use compdef::eval::{accuracy, attack_success_rate, predict_all};
use compdef::experiment::{
    attack_subset, run_experiment, thread_pool, AttackKind, AttackSpec, ExperimentConfig, ModelKind,
    ModelSpec, TrainedArtifacts, TrainingConfig,
};
use compdef::image::Image;
use compdef::rng::{derive_seed, derive_seed_path};
use compdef::synth::{background_corpus, generate_synthetic_dataset, SyntheticSpec};
use compdef::viz::visualize_occlusion;

#[derive(Parser)]
#[command(name = "compdef", version, about = "Compositional classifiers under black-box patch attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest plus PNG images).
    SynthData(SynthArgs),
    /// Train a model and write a model bundle.
    Train(TrainArgs),
    /// Attack a trained model on the correctly classified test images.
    Attack(AttackArgs),
    /// Run an experiment grid described by a JSON config.
    Evaluate(EvaluateArgs),
    /// Render an image beside its occlusion-score heat map.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.6)]
    clutter: f64,
    /// Object radius as a fraction of the image side.
    #[arg(long, default_value_t = 0.3)]
    object_scale: f64,
    /// Shared silhouette; classes differ only in a small glyph.
    #[arg(long)]
    fine_grained: bool,
    #[arg(long, default_value_t = 40)]
    train_per_class: usize,
    #[arg(long, default_value_t = 15)]
    test_per_class: usize,
    /// Also write this many object-free background images to `<out>/backgrounds/`.
    #[arg(long, default_value_t = 60)]
    backgrounds: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Plain,
    PatchAug,
    Compnet,
    CompnetFt,
    Combined,
}

impl From<Kind> for ModelKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Plain => ModelKind::Plain,
            Kind::PatchAug => ModelKind::PatchAug,
            Kind::Compnet => ModelKind::Compnet,
            Kind::CompnetFt => ModelKind::CompnetFt,
            Kind::Combined => ModelKind::Combined,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (or its directory).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    kind: Kind,
    /// Directory of object-free background images (compositional kinds).
    #[arg(long)]
    background: Option<PathBuf>,
    /// Bundle header path; the blob is written beside it with extension `.bin`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training patch area fraction (patch-aug).
    #[arg(long)]
    area: Option<f64>,
    /// Routing threshold (combined).
    #[arg(long)]
    threshold: Option<f64>,
    /// Routing temperature (combined).
    #[arg(long)]
    temperature: Option<f64>,
    /// Combine with the finetuned compositional model (combined).
    #[arg(long)]
    finetuned: bool,
    /// Vocabulary size of the vMF dictionary.
    #[arg(long)]
    dictionary_size: Option<usize>,
    /// Mixture components per class.
    #[arg(long)]
    mixtures: Option<usize>,
    /// Finetuning epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Finetuning learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Full training configuration as JSON (flags above override it).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackName {
    SparseRs,
    Texture,
}

#[derive(Args)]
struct AttackArgs {
    /// Model bundle header.
    #[arg(long)]
    model: PathBuf,
    /// Dataset manifest (or its directory); its test split is attacked.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "sparse-rs")]
    attack: AttackName,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total patched area as a fraction of the image.
    #[arg(long, default_value_t = 0.1)]
    area: f64,
    #[arg(long, default_value_t = 1)]
    patches: usize,
    #[arg(long, default_value_t = 2000)]
    budget: usize,
    /// Targeted attack (requires --target).
    #[arg(long, requires = "target")]
    targeted: bool,
    /// Target label; images of that class are skipped.
    #[arg(long)]
    target: Option<usize>,
    /// Attack at most this many test images.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for report.json, cells.csv and ROC curves.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output PNG (input and overlay side by side).
    #[arg(long)]
    out: PathBuf,
    /// Class whose occlusion map is drawn (default: the predicted class).
    #[arg(long)]
    class: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = thread_pool()
        .map_err(anyhow::Error::from)
        .and_then(|pool| pool.install(|| run(cli.command)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Visualize(a) => visualize(a),
    }
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_classes: a.classes,
        image_size: a.size,
        clutter: a.clutter,
        fine_grained: a.fine_grained,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        object_scale: a.object_scale,
        seed: a.seed,
    };
    let ds = generate_synthetic_dataset(&spec)?;
    let manifest = ds.write(&a.out)?;
    let dir = a.out.join("backgrounds");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, img) in background_corpus(&spec, a.backgrounds, derive_seed(a.seed, "backgrounds")).iter().enumerate() {
        img.save(dir.join(format!("{i:06}.png")))?;
    }
    let spec_path = a.out.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&spec)?).with_context(|| format!("writing {}", spec_path.display()))?;
    println!("wrote {} items to {} and {} backgrounds to {}", ds.len(), manifest.display(), a.backgrounds, dir.display());
    Ok(())
}

fn split_accuracy(bundle: &ModelBundle, ds: &LabeledDataset) -> Result<Option<f64>> {
    if ds.is_empty() {
        return Ok(None);
    }
    let labels: Vec<usize> = ds.items().iter().map(|it| it.label).collect();
    Ok(Some(accuracy(&predict_all(&bundle.model, ds)?, &labels)?))
}

fn train(a: TrainArgs) -> Result<()> {
    let kind: ModelKind = a.kind.into();
    let needs_background = matches!(kind, ModelKind::Compnet | ModelKind::CompnetFt | ModelKind::Combined);
    let backgrounds: Vec<Image> = match (&a.background, needs_background) {
        (Some(dir), true) => load_image_dir(dir)?,
        (None, true) => bail!(
            "--kind {} needs a background corpus: pass --background DIR with object-free images",
            kind_name(kind)
        ),
        (Some(_), false) => bail!("--background only applies to compnet, compnet-ft and combined"),
        (None, false) => Vec::new(),
    };
    if needs_background && backgrounds.is_empty() {
        bail!("background directory {} holds no PNG/PPM images", a.background.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
    }
    let ds = load_manifest(&a.data)?;
    let mut training: TrainingConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing training config {}", p.display()))?
        }
        None => TrainingConfig::default(),
    };
    if let Some(k) = a.dictionary_size {
        training.compnet.dictionary.k = k;
    }
    if let Some(m) = a.mixtures {
        training.compnet.em.mixtures = m;
    }
    if let Some(e) = a.epochs {
        training.finetune.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        training.finetune.learning_rate = lr;
    }
    let spec = ModelSpec {
        kind,
        name: None,
        area: a.area,
        threshold: a.threshold,
        temperature: a.temperature,
        finetuned: a.finetuned,
    };
    let check = ExperimentConfig {
        schema_version: compdef::experiment::CONFIG_SCHEMA_VERSION,
        dataset: compdef::experiment::DatasetSource::Manifest {
            path: a.data.clone(),
            backgrounds: a.background.clone().unwrap_or_default(),
        },
        n_backgrounds: 0,
        models: vec![spec.clone()],
        attacks: Vec::new(),
        n_test: 20,
        seed: a.seed,
        training: training.clone(),
        localization: Default::default(),
    };
    check.validate()?;
    let mut artifacts = TrainedArtifacts::new(&ds, &backgrounds, &training, a.seed);
    let model = artifacts.model(&spec)?;
    let mut bundle = ModelBundle::new(kind, ds.class_names().to_vec(), ds.image_dims(), model)?;
    let mut summary = Map::new();
    summary.insert("seed".into(), json!(a.seed));
    summary.insert("config".into(), serde_json::to_value(&training)?);
    if kind == ModelKind::CompnetFt || (kind == ModelKind::Combined && a.finetuned) {
        let (ft, _) = artifacts.finetuned()?;
        bundle.part_classifier = Some(ft.classifier.clone());
        summary.insert("finetune_loss".into(), json!(ft.loss_trace));
        let csv = a.out.with_extension("loss.csv");
        let mut text = String::from("epoch,loss\n");
        for (i, l) in ft.loss_trace.iter().enumerate() {
            text.push_str(&format!("{i},{l}\n"));
        }
        std::fs::write(&csv, text).with_context(|| format!("writing {}", csv.display()))?;
        println!("finetune loss {:.4} -> {:.4} (trace in {})", ft.loss_trace[0], ft.loss_trace[ft.loss_trace.len() - 1], csv.display());
    }
    let train_acc = split_accuracy(&bundle, &ds.train()?)?;
    let test_acc = split_accuracy(&bundle, &ds.test()?)?;
    summary.insert("train_accuracy".into(), json!(train_acc));
    summary.insert("test_accuracy".into(), json!(test_acc));
    bundle.training = summary;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    bundle.save(&a.out)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into());
    println!(
        "trained {}: train accuracy {}, test accuracy {}; wrote {}",
        kind_name(kind),
        fmt(train_acc),
        fmt(test_acc),
        a.out.display()
    );
    Ok(())
}

fn kind_name(k: ModelKind) -> String {
    serde_json::to_value(k).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

fn attack(a: AttackArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.model)?;
    let ds = load_manifest(&a.data)?;
    let test = ds.test()?;
    let mut subset = if test.is_empty() { ds.clone() } else { test };
    if let Some(n) = a.limit {
        let items: Vec<_> = subset.items().iter().take(n).cloned().collect();
        subset = LabeledDataset::new(items, ds.class_names().to_vec())?;
    }
    if let Some(t) = a.target {
        if t >= ds.n_classes() {
            bail!("--target {t} is not a class (dataset has {})", ds.n_classes());
        }
        let items: Vec<_> = subset.items().iter().filter(|it| it.label != t).cloned().collect();
        subset = LabeledDataset::new(items, ds.class_names().to_vec())?;
    }
    let config = AttackConfig {
        n_patches: a.patches,
        area: a.area,
        budget: a.budget,
        target: a.target,
        seed: a.seed,
        ..AttackConfig::default()
    };
    config.validate()?;
    let kind = match a.attack {
        AttackName::SparseRs => AttackKind::SparseRs,
        AttackName::Texture => AttackKind::Texture,
    };
    let spec = AttackSpec::new(kind, config.clone());
    let clean = predict_all(&bundle.model, &subset)?;
    let dictionary = match kind {
        AttackKind::SparseRs => None,
        AttackKind::Texture => {
            let (h, w) = ds.image_dims();
            let side = compdef::attack::patch_geometry(a.area, a.patches, h, w)?;
            let mut c = compdef::attack::TextureDictionaryConfig {
                seed: derive_seed(a.seed, "texture-dictionary"),
                ..Default::default()
            };
            c.texture_side = c.texture_side.max(side);
            let train = ds.train()?;
            Some(compdef::attack::build_texture_dictionary(&train, &c, Some(bundle.model.query_fn()))?)
        }
    };
    let aid = spec.id();
    let records = attack_subset(&bundle.model, &subset, &clean, &spec, dictionary.as_ref(), |i| {
        derive_seed_path(a.seed, &["attack", &aid], i as u64)
    })?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for r in &records {
        r.result.image.save(a.out.join(format!("adv_{:04}.png", r.image)))?;
        r.result.mask.to_image().save(a.out.join(format!("mask_{:04}.png", r.image)))?;
    }
    let asr = if records.is_empty() { None } else { Some(attack_success_rate(&records)?) };
    let out = json!({
        "schema": "compdef-attack-results",
        "version": 1,
        "attack": aid,
        "config": config,
        "n_images": subset.len(),
        "n_attacked": records.len(),
        "attack_success_rate": asr,
        "results": records,
    });
    let path = a.out.join("results.json");
    std::fs::write(&path, serde_json::to_string_pretty(&out)?).with_context(|| format!("writing {}", path.display()))?;
    let asr_text = asr.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
    println!(
        "attacked {} of {} images ({} clean-correct): success rate {}; wrote {}",
        records.len(),
        subset.len(),
        records.len(),
        asr_text,
        path.display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let config = ExperimentConfig::load(&a.config)?;
    let config = resolve_paths(config, a.config.parent().unwrap_or(Path::new(".")));
    let report = run_experiment(&config)?;
    report.write(&a.out)?;
    for m in &report.models {
        println!("{}: clean accuracy {:.3}", m.id, m.clean_accuracy);
    }
    for c in &report.cells {
        let asr = c.attack_success_rate.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
        println!("{} x {}: success rate {asr} over {}", c.model, c.attack, c.n_attacked);
    }
    println!("wrote {}", a.out.join("report.json").display());
    Ok(())
}

/// Manifest paths in a config are relative to the config file.
fn resolve_paths(mut config: ExperimentConfig, base: &Path) -> ExperimentConfig {
    if let compdef::experiment::DatasetSource::Manifest { path, backgrounds } = &mut config.dataset {
        if path.is_relative() {
            *path = base.join(&*path);
        }
        if backgrounds.is_relative() {
            *backgrounds = base.join(&*backgrounds);
        }
    }
    config
}

fn visualize(a: VisualizeArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.model)?;
    let img = Image::load(&a.image)?;
    if (img.height(), img.width()) != (bundle.image_height, bundle.image_width) {
        bail!(
            "image is {}x{}, the model expects {}x{}",
            img.height(),
            img.width(),
            bundle.image_height,
            bundle.image_width
        );
    }
    let out = visualize_occlusion(&bundle.model, &img, a.class)?;
    out.save(&a.out)?;
    println!("wrote {} ({}x{})", a.out.display(), out.width(), out.height());
    Ok(())
}
