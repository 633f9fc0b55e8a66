use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use epgt_core::report::OutputFormat;
use epgt_core::scene::Ambiguity;

const EXIT_CODES: &str = "Exit codes:
  0  success
  1  usage error (bad flag, config value or missing option)
  2  data error (missing, malformed or incomplete input)
  3  numerical failure (degenerate design, non-finite loss)";

/// Two-view geometry and attention analysis of multi-view transformer runs.
#[derive(Debug, Parser)]
#[command(name = "epgt", version, after_help = EXIT_CODES, propagate_version = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Root of the run directory.
    #[arg(long, env = "EPGT_RUN_DIR", global = true)]
    pub run_dir: Option<PathBuf>,
    /// Base seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with defaults; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Report files to write: `csv`, `svg` or `both` [default: both].
    #[arg(long, global = true, value_parser = parse_format)]
    pub format: Option<OutputFormat>,
    /// Worker threads for scene-level work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Report directory [default: <run-dir>/reports].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

fn parse_format(s: &str) -> Result<OutputFormat, String> {
    s.parse()
}

fn parse_ambiguity(s: &str) -> Result<Ambiguity, String> {
    s.parse()
        .map_err(|e: epgt_core::scene::SceneError| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a dataset manifest and ground truth for a scene grid.
    #[command(after_help = EXIT_CODES)]
    Generate(GenerateArgs),
    /// Estimate F from a correspondence CSV and report its root Sampson error.
    #[command(after_help = EXIT_CODES)]
    Estimate(EstimateArgs),
    /// Train one camera-token probe per layer.
    #[command(after_help = EXIT_CODES)]
    ProbeTrain(ProbeTrainArgs),
    /// Evaluate trained probes per layer and split.
    #[command(after_help = EXIT_CODES)]
    ProbeEval(ProbeEvalArgs),
    /// Per-head correspondence-matching accuracy over all runs.
    #[command(after_help = EXIT_CODES)]
    AttnMatch(AttnMatchArgs),
    /// Write an attention-knockout spec for the exporter.
    #[command(after_help = EXIT_CODES)]
    InterveneSpec(InterveneSpecArgs),
    /// Compare intervened runs with a baseline.
    #[command(after_help = EXIT_CODES)]
    InterveneEval(InterveneEvalArgs),
    /// Run a robustness study.
    #[command(after_help = EXIT_CODES)]
    Study(StudyArgs),
    /// Re-render a saved report JSON.
    #[command(after_help = EXIT_CODES)]
    Report(ReportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenerateArgs {
    /// Camera modes: `all` or a comma-separated list.
    #[arg(long)]
    pub modes: Option<String>,
    /// Focal lengths in mm: `all` or a comma-separated list.
    #[arg(long)]
    pub focals: Option<String>,
    /// Scene groups per (mode, focal length) cell.
    #[arg(long)]
    pub scenes: Option<u32>,
    /// Camera pairs per scene group.
    #[arg(long)]
    pub pairs: Option<u32>,
    /// 3D points per scene.
    #[arg(long)]
    pub points: Option<usize>,
    /// `unique`, `repeated_ring` or `repeated_ring_with_shadow_proxy`.
    #[arg(long, value_parser = parse_ambiguity)]
    pub ambiguity: Option<Ambiguity>,
    /// Also write oracle features, attention and predicted cameras.
    #[arg(long)]
    pub oracle: bool,
    /// Occlude this many view-2 patches in a copy under `<run-dir>/occluded`.
    #[arg(long)]
    pub occlude: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    /// Correspondence CSV (`x1,y1,x2,y2` with optional `point_id`).
    #[arg(long)]
    pub corrs: PathBuf,
    /// Use RANSAC instead of plain eight-point.
    #[arg(long)]
    pub ransac: bool,
    /// RANSAC inlier threshold, px.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Image size `WxH` for bounds checks.
    #[arg(long, default_value = "518x518", value_parser = parse_size)]
    pub image_size: (u32, u32),
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(w)?, p(h)?))
}

#[derive(Debug, Clone, Args)]
pub struct ProbeTrainArgs {
    /// Layers: `all`, a list, or ranges like `0-11,20`.
    #[arg(long, default_value = "all")]
    pub layers: String,
    /// Checkpoint directory [default: <run-dir>/probes].
    #[arg(long)]
    pub probe_dir: Option<PathBuf>,
    /// Split to train on when the run dir has a dataset manifest.
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Training epochs [default: 50].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initial Adam learning rate [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Hidden width [default: 512].
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Scenes per optimizer step [default: 32].
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum AggregateArg {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, Args)]
pub struct ProbeEvalArgs {
    /// Layers: `all`, a list, or ranges like `0-11,20`.
    #[arg(long, default_value = "all")]
    pub layers: String,
    /// Checkpoint directory [default: <run-dir>/probes].
    #[arg(long)]
    pub probe_dir: Option<PathBuf>,
    /// Reduction of per-scene errors.
    #[arg(long, value_enum, default_value_t)]
    pub aggregate: AggregateArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    #[value(name = "1to2")]
    OneToTwo,
    #[value(name = "2to1")]
    TwoToOne,
    Both,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    /// Argmax over the other view's patches.
    #[default]
    Target,
    /// Argmax over the whole sequence.
    Global,
}

#[derive(Debug, Clone, Args)]
pub struct AttnMatchArgs {
    /// Source view to target view.
    #[arg(long, value_enum, default_value = "both")]
    pub direction: DirectionArg,
    #[arg(long, value_enum, default_value_t)]
    pub scope: ScopeArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    FullMapZero,
    CorrespondingRowZero,
    TargetedZeroResoftmax,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    #[default]
    PostSoftmaxZero,
    PreSoftmaxMask,
}

#[derive(Debug, Clone, Args)]
pub struct InterveneSpecArgs {
    /// Name of the intervention in reports.
    #[arg(long)]
    pub label: String,
    /// Knockout applied to each targeted head.
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t)]
    pub variant: VariantArg,
    /// Explicit targets `L:H,L:H,...`.
    #[arg(long, conflicts_with = "strategy")]
    pub targets: Option<String>,
    /// `top:FIRST-LAST:K`, `random-early:N` or `random-late:N`.
    #[arg(long, requires = "matrix")]
    pub strategy: Option<String>,
    /// 24x16 matching-accuracy CSV from `attn-match`.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Spec file [default: <out>/intervention_<label>.json].
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum ReadoutArg {
    /// F from the exported predicted cameras.
    #[default]
    Cameras,
    /// F from a trained probe applied to camera-token features.
    Probe,
}

#[derive(Debug, Clone, Args)]
pub struct InterveneEvalArgs {
    /// Baseline run root [default: --run-dir].
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Intervened run root as `label=DIR`; repeatable.
    #[arg(long = "intervened", required = true, value_parser = parse_labeled)]
    pub intervened: Vec<(String, PathBuf)>,
    #[arg(long, value_enum, default_value_t)]
    pub readout: ReadoutArg,
    /// Probe checkpoint stem for `--readout probe`.
    #[arg(long)]
    pub probe: Option<PathBuf>,
}

fn parse_labeled(s: &str) -> Result<(String, PathBuf), String> {
    let (label, dir) = s
        .split_once('=')
        .ok_or_else(|| format!("expected label=DIR, got {s:?}"))?;
    if label.is_empty() || dir.is_empty() {
        return Err(format!("expected label=DIR, got {s:?}"));
    }
    Ok((label.to_string(), PathBuf::from(dir)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StudyKindArg {
    Occlusion,
    FocalSweep,
    Ambiguity,
    ExternalCondition,
}

#[derive(Debug, Clone, Args)]
pub struct StudyArgs {
    /// Study TOML; otherwise the `[study]` table of --config.
    pub file: Option<PathBuf>,
    /// Study kind when no study file is given.
    #[arg(long, value_enum)]
    pub kind: Option<StudyKindArg>,
    /// Report label [default: the study kind].
    #[arg(long)]
    pub label: Option<String>,
    /// Synthetic scenes per condition.
    #[arg(long)]
    pub scenes: Option<u32>,
    /// Occluded run root for occlusion studies [default: <run-dir>/occluded].
    #[arg(long)]
    pub occluded_run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Saved report JSON files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["epgt", "estimate", "--corrs", "a.csv", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["epgt", "estimate", "--corrs", "a.csv", "--ransac"]).is_ok());
    }

    #[test]
    fn value_parsers() {
        assert_eq!(parse_size("640x480"), Ok((640, 480)));
        assert!(parse_size("640").is_err());
        assert_eq!(
            parse_labeled("a=b/c").unwrap(),
            ("a".into(), PathBuf::from("b/c"))
        );
        assert!(parse_labeled("=b").is_err());
        let cli = Cli::try_parse_from([
            "epgt",
            "--format",
            "csv",
            "attn-match",
            "--direction",
            "2to1",
        ])
        .unwrap();
        assert_eq!(cli.global.format, Some(OutputFormat::Csv));
        assert!(matches!(
            cli.command,
            Command::AttnMatch(AttnMatchArgs {
                direction: DirectionArg::TwoToOne,
                ..
            })
        ));
    }
}
