use epgt_core::report::{write_report, SavedReport};

use crate::args::ReportArgs;
use crate::config::Context;
use crate::error::{CliError, Result};

pub fn run(ctx: &Context, args: &ReportArgs) -> Result<String> {
    let mut written = 0;
    for input in &args.inputs {
        let text = std::fs::read_to_string(input)
            .map_err(|e| CliError::data(format!("{}: {e}", input.display())))?;
        let report = SavedReport::from_json(&text)?;
        let dir = match &ctx.out {
            Some(o) => o.clone(),
            None => input.parent().map(|p| p.to_path_buf()).unwrap_or_default(),
        };
        written += write_report(&dir, &report, ctx.format)?.len();
    }
    Ok(format!(
        "rendered {} reports into {written} files",
        args.inputs.len()
    ))
}
