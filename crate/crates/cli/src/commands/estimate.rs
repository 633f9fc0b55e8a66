use epgt_core::estimators::{classify_failure, eight_point, ransac_fundamental, RansacConfig};
use epgt_core::tensor_io::read_correspondences;

use crate::args::EstimateArgs;
use crate::config::Context;
use crate::error::{CliError, Result};

pub fn run(ctx: &Context, args: &EstimateArgs) -> Result<String> {
    let file = read_correspondences(&args.corrs, args.image_size)?;
    let corrs = &file.corrs;
    let (method, result) = if args.ransac {
        let mut cfg = RansacConfig::with_seed(ctx.seed_or(0));
        if let Some(t) = args.threshold {
            cfg.inlier_threshold_px = t;
        }
        ("ransac", ransac_fundamental(corrs, &cfg)?)
    } else {
        let f = eight_point(corrs)?;
        ("eight-point", classify_failure(Some(&f), corrs))
    };
    let median = result.median_root_sampson_px.ok_or_else(|| {
        CliError::Numerical("no correspondence could be scored against the estimate".into())
    })?;
    let verdict = if result.is_failure { "failure" } else { "ok" };
    let mut line = format!(
        "{method}: median root Sampson {} px over {} correspondences",
        epgt_core::report::fmt_num(median),
        corrs.len()
    );
    if args.ransac {
        line.push_str(&format!(", {} inliers", result.inliers.len()));
    }
    if !file.rejected.is_empty() {
        line.push_str(&format!(", {} rows rejected", file.rejected.len()));
    }
    line.push_str(&format!(" ({verdict})"));
    Ok(line)
}
