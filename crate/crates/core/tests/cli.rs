use std::path::Path;
use std::process::{Command, Output};

use convlens::artifact::{schema, Artifact};
use convlens::cluster::FilterClusters;
use convlens::negation::FilterNegatives;
use convlens::report::{FilterSummary, PredictionExplanation};
use convlens::slots::SlotsReport;
use convlens::threshold::FilterProfile;

fn convlens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convlens"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("CONVLENS_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = convlens(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn exit_codes() {
    assert_eq!(convlens(&["train", "--help"]).status.code(), Some(0));
    assert_eq!(convlens(&["--version"]).status.code(), Some(0));
    let unknown = convlens(&["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));
    assert_eq!(convlens(&["analyze", "slots", "--model", "m"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = p(dir.path(), "bad.tsv");
    std::fs::write(&bad, "1\tfine\nnot-a-label\ttext\n").unwrap();
    let out = convlens(&["train", "--train", &bad, "--out", &p(dir.path(), "m.bin")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let garbage = p(dir.path(), "garbage.bin");
    std::fs::write(&garbage, b"not a model").unwrap();
    let out = convlens(&["analyze", "thresholds", "--model", &garbage, "--corpus", &bad, "--out", &p(dir.path(), "x.json")]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = p(dir.path(), "run.conf");
    std::fs::write(&cfg, "colour = blue\n").unwrap();
    let out = convlens(&["--config", &cfg, "synth", "--out-dir", &p(dir.path(), "s")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = p(dir, "run.conf");
    std::fs::write(&cfg, "# small run\nepochs = 2\nlr = 0.01\ndim = 16\ntrain-size = 400\ndev-size = 100\ntest-size = 100\n").unwrap();
    ok(&["--config", &cfg, "synth", "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(dir.join("train.tsv")).unwrap().lines().count(), 400);

    let (train, test, model) = (p(dir, "train.tsv"), p(dir, "test.tsv"), p(dir, "model.bin"));
    ok(&["--config", &cfg, "train", "--train", &train, "--dev", &p(dir, "dev.tsv"), "--out", &model, "--filters", "2:3,3:2"]);
    ok(&["analyze", "thresholds", "--model", &model, "--corpus", &train, "--out", &p(dir, "profiles.json")]);
    ok(&["analyze", "slots", "--model", &model, "--corpus", &train, "--top-k", "3", "--out", &p(dir, "slots.json")]);
    ok(&["analyze", "clusters", "--model", &model, "--corpus", &train, "--profiles", &p(dir, "profiles.json"), "--out", &p(dir, "clusters.json")]);
    ok(&[
        "analyze", "negatives", "--model", &model, "--corpus", &train, "--profiles", &p(dir, "profiles.json"), "--clusters",
        &p(dir, "clusters.json"), "--hamming", "1", "--out", &p(dir, "negatives.json"),
    ]);
    ok(&[
        "summarize", "--model", &model, "--corpus", &train, "--profiles", &p(dir, "profiles.json"), "--clusters",
        &p(dir, "clusters.json"), "--negatives", &p(dir, "negatives.json"), "--out", &p(dir, "summary.json"),
    ]);
    let text = ok(&[
        "summarize", "--model", &model, "--profiles", &p(dir, "profiles.json"), "--clusters", &p(dir, "clusters.json"), "--negatives",
        &p(dir, "negatives.json"), "--format", "text",
    ]);
    assert!(text.contains("filter 0"));

    let profiles = Artifact::<Vec<FilterProfile>>::read(&dir.join("profiles.json"), schema::PROFILES).unwrap();
    assert_eq!(profiles.payload.len(), 5);
    assert_eq!(profiles.inputs.iter().map(|i| i.role.as_str()).collect::<Vec<_>>(), ["model", "corpus"]);
    let slots = Artifact::<SlotsReport>::read(&dir.join("slots.json"), schema::SLOTS).unwrap();
    assert!(slots.payload.filters.iter().all(|f| f.top_natural.len() <= 3));
    Artifact::<Vec<FilterClusters>>::read(&dir.join("clusters.json"), schema::CLUSTERS).unwrap();
    Artifact::<Vec<FilterNegatives>>::read(&dir.join("negatives.json"), schema::NEGATIVES).unwrap();
    let summary = Artifact::<Vec<FilterSummary>>::read(&dir.join("summary.json"), schema::SUMMARY).unwrap();
    assert_eq!(summary.payload.len(), 5);
    assert!(Artifact::<Vec<FilterSummary>>::read(&dir.join("summary.json"), schema::PROFILES).is_err());

    let shown = ok(&["explain", "--model", &model, "--profiles", &p(dir, "profiles.json"), "--text", "It was very good, really pleased!"]);
    assert!(shown.starts_with("document: it was very good , really pleased !"));
    assert_eq!(shown.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count(), 5);
    let json = ok(&["explain", "--model", &model, "--profiles", &p(dir, "profiles.json"), "--file", &test, "--format", "json"]);
    let explained = Artifact::<Vec<PredictionExplanation>>::from_json(&json, schema::EXPLANATIONS).unwrap();
    assert_eq!(explained.payload.len(), 100);

    let eval = ok(&["eval", "--model", &model, "--corpus", &test, "--profiles", &p(dir, "profiles.json"), "--sweep", "--sweep-step", "0.25", "--fit-corpus", &train]);
    assert!(eval.contains("relu accuracy") && eval.contains("thresholded accuracy") && eval.contains("mean coverage"));
    assert_eq!(eval.lines().filter(|l| l.starts_with("0.") || l.starts_with("1.")).count(), 5);
}

#[test]
fn seed_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |sub: &str, seed: Option<&str>| {
        let out_dir = tmp.path().join(sub);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_convlens"));
        cmd.args(["synth", "--out-dir", out_dir.to_str().unwrap(), "--train-size", "20", "--dev-size", "1", "--test-size", "1"]);
        cmd.env_remove("CONVLENS_SEED");
        if let Some(s) = seed {
            cmd.env("CONVLENS_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        std::fs::read_to_string(out_dir.join("train.tsv")).unwrap()
    };
    let default = run("a", None);
    assert_eq!(run("b", Some("2019")), default);
    assert_ne!(run("c", Some("7")), default);
}
