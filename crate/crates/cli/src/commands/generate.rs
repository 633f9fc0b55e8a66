use epgt_core::rng::derive_seed;
use epgt_core::scene::{
    generate_scene_retrying, make_occlusion_spec, Ambiguity, CameraConfigMode, DatasetManifest,
    GenerateRequest, SplitPlan, FOCAL_LENGTHS_MM, PAIRS_PER_SCENE,
};
use epgt_core::synth::{oracle_key, write_oracle_run};
use epgt_core::tensor_io::RunDir;
use rayon::prelude::*;

use crate::args::GenerateArgs;
use crate::config::{parse_focals, parse_modes, Context};
use crate::error::Result;

const DEFAULT_SCENES: u32 = 10;
const DEFAULT_POINTS: usize = 100;
const SCENE_ATTEMPTS: u32 = 50;
const STREAM_OCCLUSION: u64 = 7;

/// Subdirectory of the run root holding occluded variants.
pub const OCCLUDED_DIR: &str = "occluded";

pub fn request(ctx: &Context, args: &GenerateArgs) -> Result<GenerateRequest> {
    let sec = ctx.file.generate.clone().unwrap_or_default();
    let modes = match &args.modes {
        Some(s) => parse_modes(s)?,
        None => sec.modes.unwrap_or_else(|| CameraConfigMode::ALL.to_vec()),
    };
    let focals_mm = match &args.focals {
        Some(s) => parse_focals(s)?,
        None => sec.focals_mm.unwrap_or_else(|| FOCAL_LENGTHS_MM.to_vec()),
    };
    Ok(GenerateRequest {
        modes,
        focals_mm,
        n_scenes: args.scenes.or(sec.scenes).unwrap_or(DEFAULT_SCENES),
        pairs_per_scene: args.pairs.or(sec.pairs).unwrap_or(PAIRS_PER_SCENE),
        n_points: args.points.or(sec.points).unwrap_or(DEFAULT_POINTS),
        ambiguity: args
            .ambiguity
            .or(sec.ambiguity)
            .unwrap_or(Ambiguity::Unique),
        split_plan: SplitPlan::default(),
        split_override: None,
        seed: ctx.seed_or(0),
    })
}

pub fn run(ctx: &Context, args: &GenerateArgs) -> Result<String> {
    let request = request(ctx, args)?;
    let manifest = DatasetManifest::build(&request)?;
    let root = RunDir::new(ctx.run_dir()?);
    let occluded = RunDir::new(root.root.join(OCCLUDED_DIR));
    let sec = ctx.file.generate.clone().unwrap_or_default();
    let oracle = args.oracle || sec.oracle.unwrap_or(false);
    let occlude = args.occlude.or(sec.occlude);
    let mut opts = ctx.file.oracle.clone().unwrap_or_default();
    if let Some(seed) = ctx.seed {
        opts.seed = seed;
    }
    opts.validate()?;

    let entries: Vec<_> = manifest.pairs().collect();
    entries
        .par_iter()
        .try_for_each(|(group, entry)| -> Result<()> {
            let pair = generate_scene_retrying(&entry.config, SCENE_ATTEMPTS)?;
            let key = oracle_key(
                group.scene_index,
                entry.pair_index,
                group.mode,
                group.focal_length_mm,
            );
            if oracle {
                write_oracle_run(&root, key.clone(), &pair, &opts, None)?;
            } else {
                root.pair(key.clone()).write_ground_truth(&pair)?;
            }
            if let Some(n) = occlude {
                let seed = derive_seed(
                    entry.config.seed,
                    &[STREAM_OCCLUSION, u64::from(entry.pair_index)],
                );
                let spec = make_occlusion_spec(&pair, n, seed)?;
                if oracle {
                    write_oracle_run(&occluded, key, &pair, &opts, Some(&spec))?;
                } else {
                    let run = occluded.pair(key);
                    run.write_ground_truth(&pair)?;
                    run.write_occlusion(&spec)?;
                }
            }
            Ok(())
        })?;
    root.write_dataset(&manifest)?;
    if occlude.is_some() {
        occluded.write_dataset(&manifest)?;
    }
    Ok(format!(
        "generated {} scene-pair groups ({} pairs) under {}",
        manifest.groups.len(),
        entries.len(),
        root.root.display()
    ))
}
