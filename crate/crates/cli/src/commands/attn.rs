use epgt_core::attention::{
    aggregate_matching, matching_accuracy, ArgmaxScope, MatchingRow, SceneMatching,
};
use epgt_core::report::{fmt_num, write_report, SavedReport};
use epgt_core::scene::Direction;
use epgt_core::tensor_io::PairRun;
use rayon::prelude::*;

use super::discover_nonempty;
use crate::args::{AttnMatchArgs, DirectionArg, ScopeArg};
use crate::config::Context;
use crate::error::{CliError, Result};

fn scene_matching(
    run: &PairRun,
    directions: &[Direction],
    scope: ArgmaxScope,
) -> Result<Option<SceneMatching>> {
    let layers = run.attention_layers();
    if layers.is_empty() {
        return Ok(None);
    }
    let gt = run.read_ground_truth()?;
    let mut rows = Vec::new();
    for layer in layers {
        let attn = run.read_attention(layer)?;
        for &d in directions {
            if !gt.patch_corrs.map(d).is_empty() {
                rows.extend(matching_accuracy(&attn, &gt.patch_corrs, d, scope)?);
            }
        }
    }
    Ok(Some(SceneMatching {
        scene: run.key.to_string(),
        mode: run.key.mode.clone(),
        rows,
    }))
}

pub fn run(ctx: &Context, args: &AttnMatchArgs) -> Result<String> {
    let runs = discover_nonempty(ctx.run_dir()?)?;
    let directions: Vec<Direction> = match args.direction {
        DirectionArg::OneToTwo => vec![Direction::OneToTwo],
        DirectionArg::TwoToOne => vec![Direction::TwoToOne],
        DirectionArg::Both => Direction::BOTH.to_vec(),
    };
    let scope = match args.scope {
        ScopeArg::Target => ArgmaxScope::TargetPatches,
        ScopeArg::Global => ArgmaxScope::Global,
    };
    let items: Vec<SceneMatching> = runs
        .par_iter()
        .map(|r| scene_matching(r, &directions, scope))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if items.is_empty() {
        return Err(CliError::data("no run has attention files"));
    }
    let rows: Vec<MatchingRow> = aggregate_matching(&items)?;
    let out = ctx.out_dir()?;
    write_report(&out, &SavedReport::Matching(rows.clone()), ctx.format)?;
    let best = rows
        .iter()
        .max_by(|a, b| {
            a.accuracy
                .total_cmp(&b.accuracy)
                .then_with(|| (b.layer, b.head).cmp(&(a.layer, a.head)))
        })
        .ok_or_else(|| CliError::data("no source patch has a correspondence"))?;
    Ok(format!(
        "matched {} runs into {}; best head layer {} head {} ({}) accuracy {}",
        items.len(),
        out.display(),
        best.layer,
        best.head,
        best.direction,
        fmt_num(best.accuracy)
    ))
}
