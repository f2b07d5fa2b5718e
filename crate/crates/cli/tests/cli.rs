use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use compdef::bundle::ModelBundle;
use compdef::image::Image;

fn compdef(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compdef"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("COMPDEF_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = compdef(args);
    assert!(
        out.status.success(),
        "compdef {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_data(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("data{seed}"));
    ok(&[
        "synth-data",
        "--out",
        s(&out),
        "--seed",
        seed,
        "--classes",
        "3",
        "--size",
        "32",
        "--train-per-class",
        "4",
        "--test-per-class",
        "2",
        "--backgrounds",
        "4",
    ]);
    out
}

fn train_compnet(dir: &Path, data: &Path) -> PathBuf {
    let model = dir.join("net.json");
    ok(&[
        "train",
        "--data",
        s(data),
        "--kind",
        "compnet",
        "--background",
        s(&data.join("backgrounds")),
        "--dictionary-size",
        "8",
        "--mixtures",
        "1",
        "--out",
        s(&model),
    ]);
    model
}

#[test]
fn synth_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_data(dir.path(), "5");
    let b = dir.path().join("again");
    std::fs::rename(&a, &b).unwrap();
    let a = tiny_data(dir.path(), "5");
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(a.join("manifest.json")), read(b.join("manifest.json")));
    assert_eq!(read(a.join("images/000000.png")), read(b.join("images/000000.png")));
    assert_eq!(read(a.join("backgrounds/000003.png")), read(b.join("backgrounds/000003.png")));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = compdef(&["synth-data", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn targeted_without_target_is_a_usage_error() {
    let out = compdef(&["attack", "--model", "m.json", "--data", "d", "--out", "o", "--targeted"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compnet_without_background_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), "1");
    let out = compdef(&["train", "--data", s(&data), "--kind", "compnet", "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--background"));
    assert!(!dir.path().join("m.json").exists());
}

#[test]
fn train_attack_visualize_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), "2");
    let model = train_compnet(dir.path(), &data);
    assert!(model.with_extension("bin").exists());

    let bundle = ModelBundle::load(&model).unwrap();
    assert_eq!(bundle.class_names.len(), 3);
    let resaved = dir.path().join("resaved.json");
    bundle.save(&resaved).unwrap();
    assert_eq!(std::fs::read(&model.with_extension("bin")).unwrap(), std::fs::read(resaved.with_extension("bin")).unwrap());
    let header = std::fs::read_to_string(&resaved).unwrap().replace("resaved.bin", "net.bin");
    assert_eq!(std::fs::read_to_string(&model).unwrap(), header);

    let adv = dir.path().join("adv");
    ok(&["attack", "--model", s(&model), "--data", s(&data), "--out", s(&adv), "--budget", "1", "--seed", "3"]);
    let results: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(adv.join("results.json")).unwrap()).unwrap();
    let records = results["results"].as_array().unwrap();
    assert_eq!(records.len(), results["n_attacked"].as_u64().unwrap() as usize);
    for r in records {
        assert_eq!(r["result"]["queries"].as_u64().unwrap(), 1);
        let i = r["image"].as_u64().unwrap();
        let adv_img = Image::load(adv.join(format!("adv_{i:04}.png"))).unwrap();
        assert_eq!((adv_img.height(), adv_img.width()), (32, 32));
        // area 0.1 of a 32x32 image gives a 10x10 patch
        let mask = Image::load(adv.join(format!("mask_{i:04}.png"))).unwrap();
        let lit = (0..32).flat_map(|r| (0..32).map(move |c| (r, c))).filter(|&(r, c)| mask.get(r, c)[0] > 0.5).count();
        assert_eq!(lit, 100);
    }

    let viz = dir.path().join("viz.png");
    let input = data.join("images/000000.png");
    ok(&["visualize", "--model", s(&model), "--image", s(&input), "--out", s(&viz)]);
    let img = Image::load(&viz).unwrap();
    assert_eq!((img.height(), img.width()), (32, 64));
    ok(&["visualize", "--model", s(&model), "--image", s(&input), "--out", s(&viz), "--class", "2"]);
    let out = compdef(&["visualize", "--model", s(&model), "--image", s(&input), "--out", s(&viz), "--class", "9"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn training_with_a_fixed_seed_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), "6");
    let train = |name: &str| {
        let model = dir.path().join(name).join("m.json");
        std::fs::create_dir_all(model.parent().unwrap()).unwrap();
        ok(&["train", "--data", s(&data), "--kind", "plain", "--seed", "11", "--out", s(&model)]);
        (std::fs::read(&model).unwrap(), std::fs::read(model.with_extension("bin")).unwrap())
    };
    assert_eq!(train("a"), train("b"));
}

#[test]
fn attack_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), "3");
    let model = dir.path().join("plain.json");
    ok(&["train", "--data", s(&data), "--kind", "plain", "--out", s(&model)]);
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["attack", "--model", s(&model), "--data", s(&data), "--out", s(&out), "--budget", "30", "--seed", "9"]);
        std::fs::read(out.join("results.json")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(
        &cfg,
        r#"{"dataset": {"synthetic": {}}, "models": [{"kind": "plain"}], "n_test": 20, "seed": 0, "n_tset": 3}"#,
    )
    .unwrap();
    let out = compdef(&["evaluate", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("n_tset"), "{err}");
    assert!(err.contains("bad.json"), "{err}");
}

#[test]
fn evaluate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), "4");
    let cfg = dir.path().join("exp.json");
    std::fs::write(
        &cfg,
        r#"{
  "dataset": {"manifest": {"path": "data4/manifest.json", "backgrounds": "data4/backgrounds"}},
  "models": [{"kind": "plain"}, {"kind": "compnet"}],
  "attacks": [{"kind": "sparse-rs", "config": {"budget": 20}}],
  "n_test": 20,
  "seed": 1,
  "training": {"compnet": {"dictionary": {"k": 8}, "em": {"mixtures": 1}}}
}"#,
    )
    .unwrap();
    assert!(data.exists());
    let out = dir.path().join("report");
    ok(&["evaluate", "--config", s(&cfg), "--out", s(&out)]);
    let csv = std::fs::read_to_string(out.join("cells.csv")).unwrap();
    assert!(csv.starts_with("# compdef-cells v1\n"));
    assert_eq!(csv.lines().count(), 4);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["models"].as_array().unwrap().len(), 2);
}
