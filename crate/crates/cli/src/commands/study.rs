use epgt_core::report::{fmt_num, write_report, SavedReport};
use epgt_core::robustness::{run_study, StudyConfig, StudyKind};

use super::generate::OCCLUDED_DIR;
use crate::args::{StudyArgs, StudyKindArg};
use crate::config::Context;
use crate::error::{CliError, Result};

fn kind(k: StudyKindArg) -> StudyKind {
    match k {
        StudyKindArg::Occlusion => StudyKind::Occlusion,
        StudyKindArg::FocalSweep => StudyKind::FocalSweep,
        StudyKindArg::Ambiguity => StudyKind::Ambiguity,
        StudyKindArg::ExternalCondition => StudyKind::ExternalCondition,
    }
}

/// Study file or `[study]` table, then flags, then run-dir fallbacks.
pub fn config(ctx: &Context, args: &StudyArgs) -> Result<StudyConfig> {
    let mut cfg = if let Some(path) = &args.file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        toml::from_str::<StudyConfig>(&text)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
    } else if let Some(c) = &ctx.file.study {
        c.clone()
    } else if let Some(k) = args.kind {
        StudyConfig::new(kind(k))
    } else {
        return Err(CliError::usage(
            "give a study file, a [study] config table or --kind",
        ));
    };
    if let Some(k) = args.kind {
        cfg.study = kind(k);
    }
    if let Some(l) = &args.label {
        cfg.label = Some(l.clone());
    }
    if let Some(n) = args.scenes {
        cfg.scenes = n;
    }
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    let needs_runs = matches!(
        cfg.study,
        StudyKind::Occlusion | StudyKind::ExternalCondition
    );
    if needs_runs && cfg.run_dir.is_none() {
        cfg.run_dir = ctx.run_dir.clone();
    }
    if cfg.study == StudyKind::Occlusion {
        if let Some(d) = &args.occluded_run_dir {
            cfg.occluded_run_dir = Some(d.clone());
        } else if cfg.occluded_run_dir.is_none() {
            cfg.occluded_run_dir = cfg.run_dir.as_ref().map(|r| r.join(OCCLUDED_DIR));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(ctx: &Context, args: &StudyArgs) -> Result<String> {
    let cfg = config(ctx, args)?;
    let report = run_study(&cfg)?;
    let out = ctx.out_dir()?;
    write_report(&out, &SavedReport::Study(report.clone()), ctx.format)?;
    report.check_complete()?;
    let worst = report.rows.iter().max_by(|a, b| {
        a.failure_rate
            .total_cmp(&b.failure_rate)
            .then_with(|| b.condition.cmp(&a.condition))
    });
    let tail = match worst {
        Some(r) => format!(
            "; highest failure rate {} ({}, {})",
            fmt_num(r.failure_rate),
            r.condition,
            r.method.name()
        ),
        None => String::new(),
    };
    Ok(format!(
        "study {}: {} rows into {}{tail}",
        report.label,
        report.rows.len(),
        out.display()
    ))
}
