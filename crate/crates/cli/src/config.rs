//! Config file and its merge with command-line flags.

use std::path::{Path, PathBuf};

use epgt_core::probing::ProbeTrainConfig;
use epgt_core::report::OutputFormat;
use epgt_core::robustness::StudyConfig;
use epgt_core::scene::{Ambiguity, CameraConfigMode, FOCAL_LENGTHS_MM};
use epgt_core::synth::OracleRunOptions;
use serde::Deserialize;

use crate::args::GlobalArgs;
use crate::error::{CliError, Result};

/// `[generate]` table; every key optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub modes: Option<Vec<CameraConfigMode>>,
    pub focals_mm: Option<Vec<f64>>,
    pub scenes: Option<u32>,
    pub pairs: Option<u32>,
    pub points: Option<usize>,
    pub ambiguity: Option<Ambiguity>,
    pub oracle: Option<bool>,
    pub occlude: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub run_dir: Option<PathBuf>,
    pub format: Option<String>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub generate: Option<GenerateSection>,
    pub oracle: Option<OracleRunOptions>,
    pub probe: Option<ProbeTrainConfig>,
    pub study: Option<StudyConfig>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }
}

/// Global settings after merging flags over the config file.
#[derive(Debug, Clone)]
pub struct Context {
    pub run_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub format: OutputFormat,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub file: FileConfig,
}

impl Context {
    pub fn new(global: &GlobalArgs) -> Result<Self> {
        let file = match &global.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let format = match (global.format, &file.format) {
            (Some(f), _) => f,
            (None, Some(s)) => s.parse().map_err(CliError::Usage)?,
            (None, None) => OutputFormat::default(),
        };
        Ok(Self {
            run_dir: global.run_dir.clone().or_else(|| file.run_dir.clone()),
            seed: global.seed.or(file.seed),
            format,
            jobs: global.jobs.or(file.jobs),
            out: global.out.clone().or_else(|| file.out.clone()),
            file,
        })
    }

    pub fn run_dir(&self) -> Result<&Path> {
        self.run_dir
            .as_deref()
            .ok_or_else(|| CliError::usage("--run-dir (or EPGT_RUN_DIR) is required"))
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        if let Some(out) = &self.out {
            return Ok(out.clone());
        }
        Ok(self
            .run_dir()
            .map_err(|_| CliError::usage("--out or --run-dir is required"))?
            .join("reports"))
    }

    pub fn seed_or(&self, fallback: u64) -> u64 {
        self.seed.unwrap_or(fallback)
    }
}

/// `all` or a comma-separated list of camera modes.
pub fn parse_modes(s: &str) -> Result<Vec<CameraConfigMode>> {
    if s.trim() == "all" {
        return Ok(CameraConfigMode::ALL.to_vec());
    }
    s.split(',').map(|m| Ok(m.trim().parse()?)).collect()
}

/// `all` or a comma-separated list of focal lengths in mm.
pub fn parse_focals(s: &str) -> Result<Vec<f64>> {
    if s.trim() == "all" {
        return Ok(FOCAL_LENGTHS_MM.to_vec());
    }
    s.split(',')
        .map(|f| {
            let f = f.trim().trim_end_matches("mm");
            f.parse::<f64>()
                .map_err(|e| CliError::usage(format!("focal {f:?}: {e}")))
        })
        .collect()
}

/// `all`, or comma-separated layers and inclusive ranges `a-b`.
pub fn parse_layers(s: &str, n_layers: u32) -> Result<Vec<u32>> {
    if s.trim() == "all" {
        return Ok((0..n_layers).collect());
    }
    let num = |v: &str| {
        v.trim()
            .parse::<u32>()
            .map_err(|e| CliError::usage(format!("layer {v:?}: {e}")))
    };
    let mut out = Vec::new();
    for part in s.split(',') {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(CliError::usage(format!("empty layer range {part:?}")));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    if let Some(l) = out.iter().find(|&&l| l >= n_layers) {
        return Err(CliError::usage(format!(
            "layer {l} out of range 0..{n_layers}"
        )));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let file =
            FileConfig::parse("seed = 3\nrun_dir = \"a\"\nformat = \"svg\"\n[probe]\nepochs = 2\n")
                .unwrap();
        assert_eq!(file.probe.unwrap().epochs, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\nrun_dir = \"a\"\nformat = \"svg\"\n").unwrap();
        let global = GlobalArgs {
            config: Some(path.clone()),
            seed: Some(9),
            ..Default::default()
        };
        let ctx = Context::new(&global).unwrap();
        assert_eq!(ctx.seed, Some(9));
        assert_eq!(ctx.run_dir.as_deref(), Some(Path::new("a")));
        assert_eq!(ctx.format, OutputFormat::Svg);
        assert_eq!(ctx.out_dir().unwrap(), Path::new("a").join("reports"));
        let global = GlobalArgs {
            config: Some(path),
            format: Some(OutputFormat::Csv),
            ..Default::default()
        };
        assert_eq!(Context::new(&global).unwrap().format, OutputFormat::Csv);
    }

    #[test]
    fn unknown_config_keys_are_usage_errors() {
        assert_eq!(FileConfig::parse("sed = 3").unwrap_err().code(), 1);
        assert_eq!(
            FileConfig::parse("[generate]\nscene = 3")
                .unwrap_err()
                .code(),
            1
        );
    }

    #[test]
    fn list_parsers() {
        assert_eq!(parse_modes("all").unwrap().len(), 4);
        assert_eq!(
            parse_modes("small, large").unwrap(),
            [CameraConfigMode::Small, CameraConfigMode::Large]
        );
        assert!(parse_modes("tiny").is_err());
        assert_eq!(parse_focals("all").unwrap().len(), 7);
        assert_eq!(parse_focals("50mm,24").unwrap(), [50.0, 24.0]);
        assert_eq!(parse_layers("0-2,2,7", 24).unwrap(), [0, 1, 2, 7]);
        assert_eq!(parse_layers("all", 24).unwrap().len(), 24);
        assert!(parse_layers("3-1", 24).is_err());
        assert!(parse_layers("24", 24).is_err());
    }
}
