//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if any fails.
//!
//! `ACCEPTANCE_ONLY=6,7` restricts the run to the listed criteria.

use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng;

use compdef::attack::{
    build_texture_dictionary, patch_geometry, sparse_rs_patch_attack, texture_patch_attack, AttackConfig, AttackResult,
    Payload, TextureDictionary, TextureDictionaryConfig,
};
use compdef::backbone::{BackboneParams, FeatureMap};
use compdef::compnet::{
    learn_class_model, mixture_log_likelihood, occluded_log_likelihood, EmConfig, LikelihoodTable, MixtureCoefficients,
    OccluderModel,
};
use compdef::dataset::LabeledDataset;
use compdef::dictionary::{learn_dictionary, DictionaryConfig, SigmaMode};
use compdef::eval::{model_accuracy, predict_all};
use compdef::experiment::{
    load_source, run_experiment, AttackKind, AttackSpec, DatasetSource, ExperimentConfig, ModelKind, ModelSpec, Report,
    TrainedArtifacts, TrainingConfig,
};
use compdef::finetune::{cluster_purity, extract_all, finetune_loss, finetune_loss_and_gradient, PartClassifier};
use compdef::image::Image;
use compdef::model::{Classifier, Model};
use compdef::rng::{derive_seed, rng_from_seed};
use compdef::synth::{generate_synthetic_dataset, SyntheticSpec};
use compdef::vmf::{dot, log_normalizer, sample_uniform_sphere, sample_vmf, VmfComponent, VmfDictionary};

/// The attack benchmark: 8 classes of 64×64 signs on heavy clutter.
fn benchmark_spec() -> SyntheticSpec {
    SyntheticSpec {
        object_scale: 0.37,
        clutter: 1.0,
        train_per_class: 200,
        seed: 0,
        ..SyntheticSpec::default()
    }
}

const N_TEST: usize = 100;
const BUDGET: usize = 2000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn sparse_rs(area: f64, n_patches: usize) -> AttackSpec {
    AttackSpec::new(
        AttackKind::SparseRs,
        AttackConfig {
            area,
            n_patches,
            budget: BUDGET,
            ..AttackConfig::default()
        },
    )
}

fn benchmark_report() -> Report {
    let config = ExperimentConfig {
        schema_version: 1,
        dataset: DatasetSource::Synthetic(benchmark_spec()),
        n_backgrounds: 60,
        models: vec![
            ModelSpec::of(ModelKind::Plain),
            ModelSpec::of(ModelKind::PatchAug),
            ModelSpec::of(ModelKind::Compnet),
            ModelSpec::combined(0.95, 1.0),
        ],
        attacks: vec![sparse_rs(0.1, 1)],
        n_test: N_TEST,
        seed: 0,
        training: TrainingConfig::default(),
        localization: Default::default(),
    };
    run_experiment(&config).expect("benchmark experiment")
}

fn trend_report() -> Report {
    let config = ExperimentConfig {
        schema_version: 1,
        dataset: DatasetSource::Synthetic(benchmark_spec()),
        n_backgrounds: 60,
        models: vec![ModelSpec::of(ModelKind::Plain)],
        attacks: vec![sparse_rs(0.01, 1), sparse_rs(0.1, 1), sparse_rs(0.5, 1), sparse_rs(0.1, 4)],
        n_test: N_TEST,
        seed: 0,
        training: TrainingConfig::default(),
        localization: Default::default(),
    };
    run_experiment(&config).expect("trend experiment")
}

fn asr(report: &Report, model: &str, attack: &AttackSpec) -> f64 {
    report
        .cell(model, &attack.id())
        .and_then(|c| c.attack_success_rate)
        .unwrap_or_else(|| panic!("no attack success rate for {model} x {}", attack.id()))
}

fn clean(report: &Report, model: &str) -> f64 {
    report.model(model).unwrap_or_else(|| panic!("no model {model}")).clean_accuracy
}

fn c1_vmf_normalization() -> Outcome {
    let mut rng = rng_from_seed(1);
    let n = 1_000_000;
    let mut worst_mc: f64 = 0.0;
    let mut parts = Vec::new();
    for sigma in [0.5, 2.0, 10.0] {
        let mu = [0.0, 0.0, 1.0];
        let log_z = log_normalizer(sigma, 3);
        let mut sum = 0.0;
        for _ in 0..n {
            let f = sample_uniform_sphere(3, &mut rng);
            sum += (sigma * dot(&mu, &f) - log_z).exp();
        }
        let integral = 4.0 * PI * sum / n as f64;
        worst_mc = worst_mc.max((integral - 1.0).abs());
        parts.push(format!("σ={sigma}: {integral:.4}"));
    }
    let mut worst_closed: f64 = 0.0;
    for i in 1..=400 {
        let sigma = i as f64 * 0.125;
        let closed = (4.0 * PI * sigma.sinh() / sigma).ln();
        worst_closed = worst_closed.max(((log_normalizer(sigma, 3) - closed) / closed).abs());
    }
    outcome(
        worst_mc <= 0.01 && worst_closed <= 1e-8,
        format!("{}; max closed-form rel err {worst_closed:.1e}", parts.join(", ")),
    )
}

fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0).acos().to_degrees()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn c2_dictionary_recovery() -> Outcome {
    let (d, kappa, n, k) = (16, 30.0, 5000, 5);
    let mut rng = rng_from_seed(2);
    let means: Vec<Vec<f64>> = (0..k).map(|_| sample_uniform_sphere(d, &mut rng)).collect();
    let samples: Vec<Vec<f64>> = (0..n).map(|i| sample_vmf(&means[i % k], kappa, &mut rng)).collect();
    let refs: Vec<&[f64]> = samples.iter().map(|v| v.as_slice()).collect();
    let learned = learn_dictionary(
        &refs,
        &DictionaryConfig {
            k,
            max_iters: 100,
            sigma_mode: SigmaMode::PerCluster,
            seed: 3,
            ..DictionaryConfig::default()
        },
    )
    .expect("dictionary learning");
    let comps = learned.dictionary.components();
    let best = permutations(k)
        .into_iter()
        .map(|p| {
            let worst = (0..k).map(|i| angle_deg(&means[i], &comps[p[i]].mu)).fold(0.0, f64::max);
            (worst, p)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("permutations");
    let kappa_err = best.1.iter().map(|&j| (comps[j].sigma - kappa).abs() / kappa).fold(0.0, f64::max);
    outcome(
        best.0 <= 5.0 && kappa_err <= 0.2,
        format!("max angle {:.2}°, max κ rel err {:.3}", best.0, kappa_err),
    )
}

fn random_dictionary<R: Rng>(k: usize, d: usize, rng: &mut R) -> VmfDictionary {
    VmfDictionary::new(
        (0..k)
            .map(|_| VmfComponent {
                mu: sample_uniform_sphere(d, rng),
                sigma: rng.random_range(1.0..30.0),
            })
            .collect(),
    )
    .expect("dictionary")
}

fn random_map<R: Rng>(h: usize, w: usize, dict: &VmfDictionary, p_invalid: f64, rng: &mut R) -> FeatureMap {
    let d = dict.dim();
    let mut data = Vec::with_capacity(h * w * d);
    for _ in 0..h * w {
        if rng.random_bool(p_invalid) {
            data.extend(std::iter::repeat_n(0.0, d));
        } else {
            let c = &dict.components()[rng.random_range(0..dict.len())];
            data.extend(sample_vmf(&c.mu, c.sigma, rng));
        }
    }
    FeatureMap::from_raw(h, w, d, data, 1e-9).expect("feature map")
}

fn random_simplexes<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = row.iter().sum();
        out.extend(row.iter().map(|x| x / s));
    }
    out
}

fn c3_em_monotonicity() -> Outcome {
    let mut worst = f64::INFINITY;
    let mut failures = 0;
    for seed in 0..10u64 {
        let mut rng = rng_from_seed(100 + seed);
        let dict = random_dictionary(12, 8, &mut rng);
        let maps: Vec<FeatureMap> = (0..24).map(|_| random_map(5, 5, &dict, 0.05, &mut rng)).collect();
        let refs: Vec<&FeatureMap> = maps.iter().collect();
        let config = EmConfig {
            mixtures: 3,
            iters: 15,
            smoothing: 1e-3,
            seed,
        };
        let trained = learn_class_model(0, &refs, &dict, -5.0, &config).expect("em");
        for w in trained.log_likelihood_trace.windows(2) {
            let slack = (w[1] - w[0]) / w[0].abs().max(1.0);
            worst = worst.min(slack);
            if slack < -1e-9 {
                failures += 1;
            }
        }
    }
    outcome(failures == 0, format!("10 seeds, worst relative step {worst:.2e}"))
}

fn c4_occlusion_dominance() -> Outcome {
    let mut rng = rng_from_seed(4);
    let (mut violations, mut unequal) = (0, 0);
    for _ in 0..1000 {
        let (k, d) = (rng.random_range(2..8), rng.random_range(3..8));
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        let dict = random_dictionary(k, d, &mut rng);
        let map = random_map(h, w, &dict, 0.1, &mut rng);
        let floor = rng.random_range(-10.0..0.0);
        let table = LikelihoodTable::new(&map, &dict, floor).expect("table");
        let theta = MixtureCoefficients::new(h, w, k, random_simplexes(h * w, k, &mut rng)).expect("theta");
        let occluder = OccluderModel::new(random_simplexes(1, k, &mut rng)).expect("occluder");
        let plain = mixture_log_likelihood(&table, &theta).expect("plain");
        let prior = rng.random_range(-5.0..5.0);
        let (with, _) = occluded_log_likelihood(&table, &theta, &occluder, prior).expect("occluded");
        if with < plain {
            violations += 1;
        }
        let (off, map) = occluded_log_likelihood(&table, &theta, &occluder, f64::NEG_INFINITY).expect("disabled");
        if off != plain || map.occluded.iter().any(|&z| z) {
            unequal += 1;
        }
    }
    outcome(
        violations == 0 && unequal == 0,
        format!("1000 instances: {violations} dominance violations, {unequal} inequalities at prior -inf"),
    )
}

fn random_image<R: Rng>(h: usize, w: usize, rng: &mut R) -> Image {
    Image::from_vec(h, w, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).expect("image")
}

fn c5_gradient_check() -> Outcome {
    let mut worst: f64 = 0.0;
    for cfg in 0..20u64 {
        let mut rng = rng_from_seed(500 + cfg);
        let (channels, kernel) = (8, [3, 5][rng.random_range(0..2)]);
        let mut bb = BackboneParams::zeros(channels, kernel);
        bb.pool = rng.random_range(1..3);
        bb.pool_stride = bb.pool;
        bb.filters.iter_mut().for_each(|f| *f = rng.random_range(-0.5..0.5));
        bb.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.05..0.1));
        let n_classes = rng.random_range(2..5);
        let pc = PartClassifier::new(
            n_classes,
            channels,
            (0..n_classes * channels).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .expect("classifier");
        let side = rng.random_range(10..15);
        let images: Vec<Image> = (0..rng.random_range(1..4)).map(|_| random_image(side, side, &mut rng)).collect();
        let items: Vec<(&Image, usize)> = images.iter().map(|im| (im, rng.random_range(0..n_classes))).collect();
        let g = finetune_loss_and_gradient(&items, &bb, &pc, true).expect("gradient");
        let analytic: Vec<f64> = g.classifier.iter().chain(&g.filters).chain(&g.bias).copied().collect();
        let n_w = pc.weights.len();
        let n_f = bb.filters.len();
        let eps = 1e-6;
        let loss_at = |j: usize, delta: f64| {
            let (mut pc, mut bb) = (pc.clone(), bb.clone());
            if j < n_w {
                pc.weights[j] += delta;
            } else if j < n_w + n_f {
                bb.filters[j - n_w] += delta;
            } else {
                bb.bias[j - n_w - n_f] += delta;
            }
            finetune_loss(&items, &bb, &pc).expect("loss")
        };
        let numeric: Vec<f64> = (0..analytic.len()).map(|j| (loss_at(j, eps) - loss_at(j, -eps)) / (2.0 * eps)).collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst = worst.max(diff / scale.max(1e-12));
    }
    outcome(worst <= 1e-4, format!("20 configurations, worst relative error {worst:.2e}"))
}

fn c6_robustness_gap(r: &Report) -> Outcome {
    let a = sparse_rs(0.1, 1);
    let (plain, net) = (asr(r, "plain", &a), asr(r, "compnet", &a));
    outcome(
        plain >= 0.60 && net <= 0.5 * plain,
        format!("plain ASR {plain:.3}, CompNet ASR {net:.3}"),
    )
}

fn c7_patch_augmentation(r: &Report) -> Outcome {
    let a = sparse_rs(0.1, 1);
    let aug_id = ModelSpec::of(ModelKind::PatchAug).id();
    let (plain, aug, net) = (asr(r, "plain", &a), asr(r, &aug_id, &a), asr(r, "compnet", &a));
    outcome(
        aug < plain && net <= aug,
        format!("plain {plain:.3}, patch-augmented {aug:.3}, CompNet {net:.3}"),
    )
}

fn c8_part_finetuning() -> Outcome {
    let spec = SyntheticSpec {
        fine_grained: true,
        train_per_class: 100,
        seed: 0,
        ..SyntheticSpec::default()
    };
    let (ds, backgrounds) = load_source(&DatasetSource::Synthetic(spec), 60, 0).expect("fine-grained data");
    let training = TrainingConfig::default();
    let mut art = TrainedArtifacts::new(&ds, &backgrounds, &training, 0);
    let test = ds.test().expect("test split");
    let train = ds.train().expect("train split");
    let images: Vec<&Image> = train.items().iter().map(|i| &i.image).collect();
    let labels: Vec<usize> = train.items().iter().map(|i| i.label).collect();
    let bb = art.backbone().expect("backbone");
    let net = art.compnet().expect("compnet");
    let before = model_accuracy(&Model::new(bb.clone(), Classifier::compnet(net.clone())).expect("model"), &test).expect("acc");
    let p0 = cluster_purity(&extract_all(&images, &bb).expect("features"), &labels, ds.n_classes(), &net).expect("purity");
    let (ft, net_ft) = art.finetuned().expect("finetune");
    let after = model_accuracy(&Model::new(ft.backbone.clone(), Classifier::compnet(net_ft.clone())).expect("model"), &test)
        .expect("acc");
    let p1 = cluster_purity(&extract_all(&images, &ft.backbone).expect("features"), &labels, ds.n_classes(), &net_ft)
        .expect("purity");
    outcome(
        after - before >= 0.05 - 1e-12 && p1.mean > p0.mean,
        format!(
            "accuracy {before:.3} -> {after:.3}; cluster purity {:.4} -> {:.4} (vector-weighted {:.4} -> {:.4})",
            p0.mean, p1.mean, p0.pooled, p1.pooled
        ),
    )
}

fn c9_combination(r: &Report) -> Outcome {
    let a = sparse_rs(0.1, 1);
    let id = ModelSpec::combined(0.95, 1.0).id();
    let (acc_c, acc_n) = (clean(r, &id), clean(r, "compnet"));
    let (asr_c, asr_p) = (asr(r, &id, &a), asr(r, "plain", &a));
    outcome(
        acc_c >= acc_n && asr_c <= asr_p,
        format!("accuracy combined {acc_c:.3} vs CompNet {acc_n:.3}; ASR combined {asr_c:.3} vs plain {asr_p:.3}"),
    )
}

fn c10_localization(r: &Report) -> Outcome {
    let auc = r
        .cell("compnet", &sparse_rs(0.1, 1).id())
        .and_then(|c| c.localization_auc)
        .expect("localization AUC");
    outcome(auc >= 0.85, format!("pooled AUC {auc:.3}"))
}

fn c11_attack_trends(r: &Report) -> Outcome {
    let area: Vec<f64> = [0.01, 0.1, 0.5].iter().map(|&a| asr(r, "plain", &sparse_rs(a, 1))).collect();
    let (one, four) = (area[1], asr(r, "plain", &sparse_rs(0.1, 4)));
    let slack = 0.02;
    let pass = area.windows(2).all(|w| w[1] >= w[0] - slack) && four >= one - slack;
    outcome(
        pass,
        format!(
            "area 1%/10%/50%: {:.3}/{:.3}/{:.3}; patches 1/4 at 10%: {one:.3}/{four:.3}",
            area[0], area[1], area[2]
        ),
    )
}

fn hygiene_violations(img: &Image, r: &AttackResult, config: &AttackConfig, dict: Option<&TextureDictionary>) -> Vec<String> {
    let (h, w) = (img.height(), img.width());
    let side = patch_geometry(config.area, config.n_patches, h, w).expect("geometry");
    let mut bad = Vec::new();
    if r.queries > config.budget {
        bad.push(format!("{} queries over budget {}", r.queries, config.budget));
    }
    if r.mask.count() as f64 > config.area * (h * w) as f64 || r.mask.count() > config.n_patches * side * side {
        bad.push(format!("mask covers {} pixels", r.mask.count()));
    }
    if r.patches.len() != config.n_patches {
        bad.push(format!("{} patches", r.patches.len()));
    }
    for p in &r.patches {
        if p.side != side || p.row + p.side > h || p.col + p.side > w {
            bad.push(format!("patch out of bounds at ({}, {}) side {}", p.row, p.col, p.side));
        }
        match (&p.payload, dict) {
            (Payload::Pixels(v), _) if v.iter().any(|x| !(0.0..=1.0).contains(x)) => bad.push("pixel out of range".into()),
            (Payload::Texture { texture, crop_row, crop_col }, Some(d)) => {
                let t = &d.textures[*texture].image;
                if crop_row + side > t.height() || crop_col + side > t.width() {
                    bad.push("texture crop out of bounds".into());
                }
            }
            _ => {}
        }
    }
    for row in 0..h {
        for col in 0..w {
            if !r.mask.get(row, col) && r.image.get(row, col) != img.get(row, col) {
                bad.push(format!("pixel ({row}, {col}) changed outside the mask"));
                return bad;
            }
        }
    }
    if r.trace.windows(2).any(|t| t[1] > t[0]) {
        bad.push("best-loss trace increases".into());
    }
    if r.trace.len() != r.queries {
        bad.push(format!("trace has {} entries for {} queries", r.trace.len(), r.queries));
    }
    bad
}

fn c12_attack_hygiene() -> Outcome {
    let spec = SyntheticSpec {
        n_classes: 4,
        image_size: 32,
        train_per_class: 6,
        test_per_class: 4,
        seed: 12,
        ..SyntheticSpec::default()
    };
    let ds: LabeledDataset = generate_synthetic_dataset(&spec).expect("data");
    let mut training = TrainingConfig::default();
    training.backbone.channels = 8;
    let mut art = TrainedArtifacts::new(&ds, &[], &training, 12);
    let model = art.model(&ModelSpec::of(ModelKind::Plain)).expect("plain model");
    let train = ds.train().expect("train");
    let test = ds.test().expect("test");
    let dict = build_texture_dictionary(
        &train,
        &TextureDictionaryConfig {
            texture_side: 20,
            crops_per_class: 8,
            clusters_per_class: 2,
            ..TextureDictionaryConfig::default()
        },
        Some(model.query_fn()),
    )
    .expect("texture dictionary");
    let clean = predict_all(&model, &test).expect("predictions");
    let mut rng = rng_from_seed(derive_seed(12, "hygiene"));
    let (mut runs, mut problems) = (0, Vec::new());
    for trial in 0..60 {
        let i = rng.random_range(0..test.len());
        let item = &test.items()[i];
        let n_patches = rng.random_range(1..4);
        let config = AttackConfig {
            n_patches,
            area: rng.random_range(0.02..0.35),
            budget: rng.random_range(1..150),
            target: rng.random_bool(0.3).then(|| (item.label + 1) % 4),
            seed: rng.random(),
            ..AttackConfig::default()
        };
        let texture = trial % 2 == 1;
        if texture && patch_geometry(config.area, n_patches, 32, 32).expect("geometry") > dict.min_side() {
            continue;
        }
        let label = clean[i];
        let run = || {
            if texture {
                texture_patch_attack(model.query_fn(), &item.image, label, &dict, &config)
            } else {
                sparse_rs_patch_attack(model.query_fn(), &item.image, label, &config)
            }
            .expect("attack")
        };
        let (a, b) = (run(), run());
        runs += 1;
        for v in hygiene_violations(&item.image, &a, &config, Some(&dict)) {
            problems.push(format!("trial {trial}: {v}"));
        }
        if a != b {
            problems.push(format!("trial {trial}: rerun with the same seed differs"));
        }
    }
    let detail = if problems.is_empty() {
        format!("{runs} randomized runs, no violations")
    } else {
        format!("{runs} runs; {}", problems.join("; "))
    };
    outcome(problems.is_empty() && runs >= 40, detail)
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        if wanted(n) {
            let t = Instant::now();
            let o = f();
            let secs = t.elapsed().as_secs_f64();
            println!("[{}] {n:>2} {name}: {} ({secs:.1}s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((n, name, o, secs));
        }
    };
    run(1, "vMF normalization", &c1_vmf_normalization);
    run(2, "dictionary recovery", &c2_dictionary_recovery);
    run(3, "EM monotonicity", &c3_em_monotonicity);
    run(4, "occlusion dominance", &c4_occlusion_dominance);
    run(5, "finetuning gradient", &c5_gradient_check);
    run(12, "attack hygiene", &c12_attack_hygiene);
    run(8, "part-based finetuning", &c8_part_finetuning);
    if [6, 7, 9, 10].into_iter().any(wanted) {
        let t = Instant::now();
        let report = benchmark_report();
        println!("       benchmark experiment finished in {:.1}s", t.elapsed().as_secs_f64());
        run(6, "robustness gap", &|| c6_robustness_gap(&report));
        run(7, "patch-augmentation baseline", &|| c7_patch_augmentation(&report));
        run(9, "combination", &|| c9_combination(&report));
        run(10, "patch localization", &|| c10_localization(&report));
    }
    if wanted(11) {
        let report = trend_report();
        run(11, "attack trends", &|| c11_attack_trends(&report));
    }
    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| format!("{} ({})", r.0, r.1)).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
