pub mod attn;
pub mod estimate;
pub mod generate;
pub mod intervene;
pub mod probe;
pub mod render;
pub mod study;

use std::collections::BTreeMap;
use std::path::Path;

use epgt_core::tensor_io::{PairRun, RunDir};

use crate::error::{CliError, Result};

/// Label for runs of a root without a dataset manifest.
pub const ALL_SPLIT: &str = "all";

/// Discovered runs grouped by split name. Runs the manifest does not list
/// are ignored; without a manifest every run lands in [`ALL_SPLIT`].
pub fn runs_by_split(root: &RunDir) -> Result<BTreeMap<String, Vec<PairRun>>> {
    let runs = root.discover()?;
    let mut out: BTreeMap<String, Vec<PairRun>> = BTreeMap::new();
    match root.read_dataset()? {
        Some(manifest) => {
            let splits = manifest.splits_by_dir();
            for run in runs {
                if let Some(split) = splits.get(&run.key.to_string()) {
                    out.entry(split.name().to_string()).or_default().push(run);
                }
            }
        }
        None if !runs.is_empty() => {
            out.insert(ALL_SPLIT.to_string(), runs);
        }
        None => {}
    }
    Ok(out)
}

pub fn discover_nonempty(root: &Path) -> Result<Vec<PairRun>> {
    let runs = RunDir::new(root).discover()?;
    if runs.is_empty() {
        return Err(CliError::data(format!("no runs under {}", root.display())));
    }
    Ok(runs)
}
