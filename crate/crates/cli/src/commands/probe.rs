use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use epgt_core::attention::NUM_LAYERS;
use epgt_core::probing::{
    evaluate_probe, load_probe, save_probe, train_layers, Aggregate, ProbeEvalRow, ProbeSample,
    ProbeTrainConfig,
};
use epgt_core::report::{fmt_num, write_report, SavedReport};
use epgt_core::tensor_io::{PairRun, RunDir};
use rayon::prelude::*;

use super::{runs_by_split, ALL_SPLIT};
use crate::args::{AggregateArg, ProbeEvalArgs, ProbeTrainArgs};
use crate::config::{parse_layers, Context};
use crate::error::{CliError, Result};

pub fn probe_stem(dir: &Path, layer: u32) -> PathBuf {
    dir.join(format!("probe_L{layer:02}"))
}

fn probe_dir(ctx: &Context, flag: &Option<PathBuf>) -> Result<PathBuf> {
    match flag {
        Some(d) => Ok(d.clone()),
        None => Ok(ctx.run_dir()?.join("probes")),
    }
}

/// Samples of every run with features for `layer`.
fn samples(runs: &[PairRun], layer: u32) -> Result<Vec<ProbeSample>> {
    runs.par_iter()
        .filter(|r| r.features_path(layer).is_file())
        .map(|r| ProbeSample::from_run(r, layer).map_err(CliError::from))
        .collect()
}

pub fn train_config(ctx: &Context, args: &ProbeTrainArgs) -> ProbeTrainConfig {
    let mut cfg = ctx.file.probe.unwrap_or_default();
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    cfg
}

pub fn train(ctx: &Context, args: &ProbeTrainArgs) -> Result<String> {
    let root = RunDir::new(ctx.run_dir()?);
    let mut by_split = runs_by_split(&root)?;
    let runs = by_split
        .remove(&args.split)
        .or_else(|| by_split.remove(ALL_SPLIT))
        .ok_or_else(|| {
            CliError::data(format!(
                "no {} runs under {}",
                args.split,
                root.root.display()
            ))
        })?;
    let cfg = train_config(ctx, args);
    let mut per_layer = Vec::new();
    for layer in parse_layers(&args.layers, NUM_LAYERS)? {
        let s = samples(&runs, layer)?;
        if !s.is_empty() {
            per_layer.push((layer, s));
        }
    }
    if per_layer.is_empty() {
        return Err(CliError::data(
            "no camera-token features found for the requested layers",
        ));
    }
    let trained = train_layers(&per_layer, &cfg)?;
    let dir = probe_dir(ctx, &args.probe_dir)?;
    for t in &trained {
        save_probe(&probe_stem(&dir, t.model.layer), t, &cfg)?;
    }
    let last = trained.last().expect("nonempty");
    let final_loss = last.epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "trained {} probes on {} scenes into {}; layer {} final loss {} px^2",
        trained.len(),
        per_layer[0].1.len(),
        dir.display(),
        last.model.layer,
        fmt_num(final_loss)
    ))
}

pub fn evaluate(ctx: &Context, args: &ProbeEvalArgs) -> Result<String> {
    let root = RunDir::new(ctx.run_dir()?);
    let by_split: BTreeMap<String, Vec<PairRun>> = runs_by_split(&root)?;
    if by_split.is_empty() {
        return Err(CliError::data(format!(
            "no runs under {}",
            root.root.display()
        )));
    }
    let dir = probe_dir(ctx, &args.probe_dir)?;
    let aggregate = match args.aggregate {
        AggregateArg::Mean => Aggregate::Mean,
        AggregateArg::Median => Aggregate::Median,
    };
    let mut rows: Vec<ProbeEvalRow> = Vec::new();
    for layer in parse_layers(&args.layers, NUM_LAYERS)? {
        let stem = probe_stem(&dir, layer);
        if !stem.with_extension("json").is_file() {
            continue;
        }
        let (_, model) = load_probe(&stem)?;
        for (split, runs) in &by_split {
            let s = samples(runs, layer)?;
            if !s.is_empty() {
                rows.push(evaluate_probe(&model, &s, split, aggregate)?);
            }
        }
    }
    if rows.is_empty() {
        return Err(CliError::data(format!(
            "no probes with matching features in {}",
            dir.display()
        )));
    }
    let out = ctx.out_dir()?;
    write_report(&out, &SavedReport::Probe(rows.clone()), ctx.format)?;
    let held_out = rows
        .iter()
        .filter(|r| r.split != "train")
        .min_by(|a, b| a.root_sampson_px.total_cmp(&b.root_sampson_px));
    let best = held_out.or_else(|| {
        rows.iter()
            .min_by(|a, b| a.root_sampson_px.total_cmp(&b.root_sampson_px))
    });
    let best = best.expect("nonempty");
    Ok(format!(
        "evaluated {} rows into {}; best {} layer {} at {} px",
        rows.len(),
        out.display(),
        best.split,
        best.layer,
        fmt_num(best.root_sampson_px)
    ))
}
