use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::Parser;

use nmgrad::cli::{execute, Cli};
use nmgrad::embedstore::{read_annotations, read_events, synth_generate, ScaleMode, Split, SynthConfig};
use nmgrad::evalreport::{auc_rank, build_report, predict_all, read_predictions, MetricReport};
use nmgrad::milmodels::{load_model, Aggregator, ModelConfig};
use nmgrad::regiongrid::RegionConfig;
use nmgrad::trainer::{train, TrainConfig};

fn run(args: &[&str]) {
    let argv: Vec<OsString> = std::iter::once("nmgrad").chain(args.iter().copied()).map(Into::into).collect();
    execute(Cli::try_parse_from(argv).unwrap()).unwrap();
}

fn small_dataset(dir: &Path) {
    run(&[
        "synth", "--seed", "11", "--n-train", "40", "--n-val", "12", "--n-test", "16", "--d-f", "16", "--out",
        dir.to_str().unwrap(),
    ]);
}

#[test]
fn report_matches_recomputation_from_predictions() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let model = root.path().join("model");
    let eval = root.path().join("eval");
    small_dataset(&data);
    let d = data.to_str().unwrap();
    run(&[
        "train", "--dataset", d, "--lr", "0.05", "--max-epochs", "6", "--hidden", "8", "--quiet", "--out",
        model.to_str().unwrap(),
    ]);
    let annotations = data.join("annotations.jsonl");
    let events = data.join("events.jsonl");
    run(&[
        "eval",
        "--checkpoint",
        model.join("checkpoint.nmgp").to_str().unwrap(),
        "--dataset",
        d,
        "--annotations",
        annotations.to_str().unwrap(),
        "--events",
        events.to_str().unwrap(),
        "--out",
        eval.to_str().unwrap(),
    ]);

    let preds = read_predictions(&eval.join("predictions.jsonl")).unwrap();
    let written: MetricReport = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    let ann = read_annotations(&annotations).unwrap();
    let ev: Vec<_> = read_events(&events)
        .unwrap()
        .into_iter()
        .filter(|e| preds.iter().any(|p| p.slide_id == e.slide_id))
        .collect();
    let recomputed = build_report(&preds, Some(&ann), Some(&ev)).unwrap();
    assert_eq!(written, recomputed);
    assert_eq!(written.n_slides, 16);
    assert!(written.regions.is_some());
    assert!(written.cramers_v_label.is_some());

    // predictions come from the saved checkpoint, not a re-trained model
    let loaded = load_model(&model.join("checkpoint.nmgp")).unwrap();
    assert_eq!(loaded.config.aggregator, Aggregator::Nmia);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "eval");
}

#[test]
fn library_pipeline_learns_planted_signal() {
    let ds = synth_generate(&SynthConfig {
        n_slides: [60, 20, 30],
        d_f: 16,
        mu_pos: 2.0,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let regions = RegionConfig::default();
    let train_bags = ds.bags(Split::Train, ScaleMode::Mono, &regions).unwrap();
    let val_bags = ds.bags(Split::Val, ScaleMode::Mono, &regions).unwrap();
    let test_bags = ds.bags(Split::Test, ScaleMode::Mono, &regions).unwrap();
    let mut config = ModelConfig::new(Aggregator::Nmia, ScaleMode::Mono, 16);
    config.hidden = 16;
    let tc = TrainConfig {
        lr: 0.05,
        max_epochs: 40,
        patience: 10,
        seed: 5,
        ..TrainConfig::default()
    };
    let (model, history) = train(&config, &train_bags, &val_bags, &tc).unwrap();
    assert!(history.best_epoch >= 1 && history.best_epoch <= history.stopped_epoch);
    let preds = predict_all(&model, &test_bags).unwrap();
    let scores: Vec<f64> = preds.iter().map(|p| p.p_hg).collect();
    let labels: Vec<_> = preds.iter().map(|p| p.label).collect();
    assert!(auc_rank(&scores, &labels).unwrap() > 0.8);
    // region attention sums to one per slide
    for p in &preds {
        let total: f64 = p.regions.iter().map(|r| r.attention).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}
