use std::path::PathBuf;

use epgt_core::interventions::{
    evaluate_intervention, ordered_by_degradation, score_run, select_targets, serialize_spec,
    HeadTarget, InterventionOutcome, InterventionSpec, KnockoutMode, KnockoutVariant, Readout,
    SceneScore, TargetStrategy,
};
use epgt_core::probing::{load_probe, ProbeModel};
use epgt_core::report::{fmt_num, parse_matrix_csv, write_report, SavedReport};
use epgt_core::tensor_io::{atomic_write, PairRun};
use rayon::prelude::*;

use super::discover_nonempty;
use crate::args::{InterveneEvalArgs, InterveneSpecArgs, ModeArg, ReadoutArg, VariantArg};
use crate::config::Context;
use crate::error::{CliError, Result};

/// `L:H,L:H,...`.
pub fn parse_targets(s: &str) -> Result<Vec<HeadTarget>> {
    s.split(',')
        .map(|t| {
            let (l, h) = t
                .trim()
                .split_once(':')
                .ok_or_else(|| CliError::usage(format!("target {t:?} is not L:H")))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<u32>()
                    .map_err(|e| CliError::usage(format!("target {t:?}: {e}")))
            };
            Ok(HeadTarget {
                layer: num(l)?,
                head: num(h)?,
            })
        })
        .collect()
}

/// `top:FIRST-LAST:K`, `random-early:N` or `random-late:N`.
pub fn parse_strategy(s: &str) -> Result<TargetStrategy> {
    let bad = || {
        CliError::usage(format!(
            "strategy {s:?}: expected top:FIRST-LAST:K, random-early:N or random-late:N"
        ))
    };
    let num = |v: &str| v.trim().parse::<u32>().map_err(|_| bad());
    let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
    match kind {
        "top" => {
            let (range, k) = rest.split_once(':').ok_or_else(bad)?;
            let (first, last) = range.split_once('-').ok_or_else(bad)?;
            Ok(TargetStrategy::TopKHeadsInLayerRange {
                first: num(first)?,
                last: num(last)?,
                k: num(k)?,
            })
        }
        "random-early" => Ok(TargetStrategy::RandomEarly { count: num(rest)? }),
        "random-late" => Ok(TargetStrategy::RandomLate { count: num(rest)? }),
        _ => Err(bad()),
    }
}

pub fn spec(ctx: &Context, args: &InterveneSpecArgs) -> Result<String> {
    let targets = match (&args.targets, &args.strategy, &args.matrix) {
        (Some(t), _, _) => parse_targets(t)?,
        (None, Some(s), Some(m)) => {
            let text = std::fs::read_to_string(m)
                .map_err(|e| CliError::data(format!("{}: {e}", m.display())))?;
            select_targets(
                &parse_matrix_csv(&text)?,
                parse_strategy(s)?,
                ctx.seed_or(0),
            )?
        }
        _ => {
            return Err(CliError::usage(
                "give --targets, or --strategy with --matrix",
            ))
        }
    };
    let mode = match args.mode {
        ModeArg::FullMapZero => KnockoutMode::FullMapZero,
        ModeArg::CorrespondingRowZero => KnockoutMode::CorrespondingRowZero,
        ModeArg::TargetedZeroResoftmax => KnockoutMode::TargetedZeroResoftmax,
    };
    let mut spec = InterventionSpec::new(&args.label, mode, targets);
    spec.variant = match args.variant {
        VariantArg::PostSoftmaxZero => KnockoutVariant::PostSoftmaxZero,
        VariantArg::PreSoftmaxMask => KnockoutVariant::PreSoftmaxMask,
    };
    let text = serialize_spec(&spec)?;
    let path = match &args.output {
        Some(p) => p.clone(),
        None => ctx
            .out_dir()?
            .join(format!("intervention_{}.json", args.label)),
    };
    atomic_write(&path, text.as_bytes())?;
    Ok(format!(
        "wrote spec {} ({} heads) to {}",
        spec.label,
        spec.targets.len(),
        path.display()
    ))
}

fn scores(runs: &[PairRun], readout: Readout<'_>) -> Result<Vec<SceneScore>> {
    runs.par_iter()
        .map(|r| {
            let gt = r.read_ground_truth()?;
            Ok(score_run(r, &gt, readout)?)
        })
        .collect()
}

pub fn evaluate(ctx: &Context, args: &InterveneEvalArgs) -> Result<String> {
    let baseline_root: PathBuf = match &args.baseline {
        Some(b) => b.clone(),
        None => ctx.run_dir()?.to_path_buf(),
    };
    let model: Option<ProbeModel> = match (args.readout, &args.probe) {
        (ReadoutArg::Cameras, _) => None,
        (ReadoutArg::Probe, Some(stem)) => Some(load_probe(stem).map_err(CliError::from)?.1),
        (ReadoutArg::Probe, None) => return Err(CliError::usage("--readout probe needs --probe")),
    };
    let readout = model
        .as_ref()
        .map_or(Readout::PredictedCameras, Readout::Probe);
    let baseline = scores(&discover_nonempty(&baseline_root)?, readout)?;
    let mut outcomes: Vec<InterventionOutcome> = Vec::new();
    for (label, dir) in &args.intervened {
        let intervened = scores(&discover_nonempty(dir)?, readout)?;
        outcomes.push(evaluate_intervention(label, &baseline, &intervened)?);
    }
    let out = match &ctx.out {
        Some(o) => o.clone(),
        None => baseline_root.join("reports"),
    };
    write_report(
        &out,
        &SavedReport::Intervention(outcomes.clone()),
        ctx.format,
    )?;
    let worst = ordered_by_degradation(&outcomes)[0];
    Ok(format!(
        "evaluated {} interventions over {} scenes into {}; largest delta {} ({} px)",
        outcomes.len(),
        baseline.len(),
        out.display(),
        worst.label,
        fmt_num(worst.delta)
    ))
}
