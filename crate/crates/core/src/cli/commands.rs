use std::path::Path;

use super::dataset::{Dataset, DatasetPaths, LoadedBags};
use super::{prepare_out, write_json, CliError, EvalArgs, HeatmapArgs, RegionsArgs, RunManifest, SynthArgs, TrainArgs};
use crate::embedstore::{read_annotations, read_events, synth_generate, SynthConfig};
use crate::evalreport::{build_report, export_heatmap, predict_all, write_heatmap, write_predictions, write_report};
use crate::milmodels::{load_model, save_model, Aggregator, ModelConfig};
use crate::regiongrid::{define_regions, group_by_slide, read_manifest};
use crate::trainer::{train_with_progress, LossConfig, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.nmgp";
pub const CHECKPOINT_SIDECAR: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";

fn record_paths(manifest: &mut RunManifest, paths: &DatasetPaths) {
    manifest.input("manifest", &paths.manifest);
    manifest.input("embeddings_dir", &paths.embeddings_dir);
    manifest.input("labels", &paths.labels);
    if let Some(s) = &paths.splits {
        manifest.input("splits", s);
    }
}

fn warn_excluded(loaded: &LoadedBags) {
    if !loaded.excluded.is_empty() {
        eprintln!("skipping slides without usable regions: {}", loaded.excluded.join(", "));
    }
}

pub fn cmd_regions(args: &RegionsArgs) -> Result<RunManifest, CliError> {
    let config = args.region.config();
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let slides = group_by_slide(read_manifest(&args.manifest)?);
    prepare_out(&args.out)?;
    let out = &args.out.out;
    let mut manifest = RunManifest::new("regions", args, out);
    manifest.input("manifest", &args.manifest);
    manifest.seeds.insert("kmeans".into(), config.kmeans_seed);
    for (slide_id, tiles) in &slides {
        let assignment = define_regions(tiles, &config)?;
        let name = format!("{slide_id}.regions.json");
        write_json(&out.join(&name), &assignment)?;
        manifest.outputs.push(name);
    }
    manifest.write(out)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<RunManifest, CliError> {
    let defaults = SynthConfig::default();
    let config = SynthConfig {
        n_slides: [args.n_train, args.n_val, args.n_test],
        hg_fraction: args.hg_fraction.map_or(defaults.hg_fraction, |f| [f; 3]),
        d_f: args.d_f,
        mu_pos: args.mu_pos,
        p_pos: args.p_pos,
        seed: args.seed,
        ..defaults
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let regions = args.region.config();
    regions.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    prepare_out(&args.out)?;
    let out = &args.out.out;
    let ds = synth_generate(&config)?;
    let mut manifest = RunManifest::new("synth", args, out);
    manifest.seeds.insert("synth".into(), config.seed);
    manifest.seeds.insert("kmeans".into(), regions.kmeans_seed);
    manifest.outputs = super::write_dataset(&ds, out, &regions)?;
    write_json(&out.join("synth_config.json"), &config)?;
    manifest.outputs.push("synth_config.json".into());
    manifest.write(out)
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest, CliError> {
    let paths = DatasetPaths::resolve(&args.data)?;
    let regions = args.region.config();
    regions.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let train_config = TrainConfig {
        lr: args.lr,
        max_epochs: args.max_epochs,
        patience: args.patience,
        tiles_per_step: args.tiles_per_step,
        seed: args.seed,
        loss: LossConfig {
            alpha: args.alpha,
            beta: args.beta,
            gamma: args.gamma,
            epsilon: args.epsilon,
        },
    };
    train_config.validate()?;
    prepare_out(&args.out)?;
    let out = &args.out.out;

    let data = Dataset::load(paths.clone())?;
    let mode = args.model.scales;
    let train = data.bags(&data.split_ids("train")?, mode, &regions, true)?;
    let val = data.bags(&data.split_ids("val")?, mode, &regions, true)?;
    warn_excluded(&train);
    warn_excluded(&val);
    let dim = train
        .bags
        .first()
        .map(|b| b.dim())
        .ok_or_else(|| CliError::Data("train split has no usable slides".into()))?;
    let model_config = ModelConfig {
        aggregator: args.model.aggregator,
        scale_mode: mode,
        dim,
        hidden: args.model.hidden,
        init_seed: args.seed,
    };
    let quiet = args.quiet;
    let (model, history) = train_with_progress(&model_config, &train.bags, &val.bags, &train_config, |e| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  loss {:.6}  val_auc {:.4}  best {}",
                e.epoch, e.train_loss, e.val_auc, e.best_epoch
            );
        }
    })?;
    save_model(&model, &out.join(CHECKPOINT_FILE))?;
    write_json(&out.join(HISTORY_FILE), &history)?;

    let mut manifest = RunManifest::new("train", args, out);
    record_paths(&mut manifest, &paths);
    manifest.seeds.insert("train".into(), args.seed);
    manifest.seeds.insert("kmeans".into(), regions.kmeans_seed);
    manifest.outputs = vec![CHECKPOINT_FILE.into(), CHECKPOINT_SIDECAR.into(), HISTORY_FILE.into()];
    manifest.write(out)
}

fn load_checkpoint(path: &Path) -> Result<crate::milmodels::MilModel, CliError> {
    load_model(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<RunManifest, CliError> {
    let paths = DatasetPaths::resolve(&args.data)?;
    let regions = args.region.config();
    regions.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let model = load_checkpoint(&args.checkpoint)?;
    let data = Dataset::load(paths.clone())?;
    let annotations = args.annotations.as_deref().map(read_annotations).transpose()?;
    let events = args.events.as_deref().map(read_events).transpose()?;
    prepare_out(&args.out)?;
    let out = &args.out.out;

    let loaded = data.bags(&data.split_ids(&args.split)?, model.config.scale_mode, &regions, true)?;
    warn_excluded(&loaded);
    let predictions = predict_all(&model, &loaded.bags)?;
    let events = events.map(|ev| {
        ev.into_iter()
            .filter(|e| predictions.iter().any(|p| p.slide_id == e.slide_id))
            .collect::<Vec<_>>()
    });
    let report = build_report(&predictions, annotations.as_deref(), events.as_deref())?;
    write_predictions(&out.join(PREDICTIONS_FILE), &predictions)?;
    write_report(&out.join(REPORT_FILE), &report)?;

    let mut manifest = RunManifest::new("eval", args, out);
    record_paths(&mut manifest, &paths);
    manifest.input("checkpoint", &args.checkpoint);
    if let Some(a) = &args.annotations {
        manifest.input("annotations", a);
    }
    if let Some(e) = &args.events {
        manifest.input("events", e);
    }
    manifest.seeds.insert("init".into(), model.config.init_seed);
    manifest.seeds.insert("kmeans".into(), regions.kmeans_seed);
    manifest.outputs = vec![PREDICTIONS_FILE.into(), REPORT_FILE.into()];
    manifest.write(out)
}

pub fn cmd_heatmap(args: &HeatmapArgs) -> Result<RunManifest, CliError> {
    if args.all == !args.slides.is_empty() {
        return Err(CliError::Usage("pass either --all or one or more --slide".into()));
    }
    let paths = DatasetPaths::resolve(&args.data)?;
    let regions = args.region.config();
    regions.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let model = load_checkpoint(&args.checkpoint)?;
    if model.config.aggregator != Aggregator::Nmia {
        return Err(CliError::Usage(format!(
            "heatmaps need region attention; checkpoint aggregator is {}",
            model.config.aggregator
        )));
    }
    let data = Dataset::load(paths.clone())?;
    let ids: Vec<String> = if args.all {
        data.tiles.keys().cloned().collect()
    } else {
        args.slides.clone()
    };
    let loaded = data.bags(&ids, model.config.scale_mode, &regions, false)?;
    if !args.all && !loaded.excluded.is_empty() {
        return Err(CliError::Data(format!(
            "slides without usable regions: {}",
            loaded.excluded.join(", ")
        )));
    }
    warn_excluded(&loaded);
    prepare_out(&args.out)?;
    let out = &args.out.out;

    let mut manifest = RunManifest::new("heatmap", args, out);
    for bag in &loaded.bags {
        let pass = model.forward(bag)?;
        let trace = pass
            .trace()
            .ok_or_else(|| CliError::Internal("nested model returned no trace".into()))?;
        let heatmap = export_heatmap(trace, bag, &loaded.assignments[&bag.slide_id], &data.tiles[&bag.slide_id])?;
        for path in write_heatmap(out, &heatmap)? {
            manifest
                .outputs
                .push(path.file_name().expect("file path").to_string_lossy().into_owned());
        }
    }
    record_paths(&mut manifest, &paths);
    manifest.input("checkpoint", &args.checkpoint);
    manifest.seeds.insert("kmeans".into(), regions.kmeans_seed);
    manifest.write(out)
}
