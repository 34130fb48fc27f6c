use std::path::Path;

use silm_core::scene::write_scenes;
use silm_core::train::synth::{generate_synthetic, SyntheticSpec};

use super::{create, read_config};
use crate::error::{scene_error, CliError, Result};

/// Writes the synthetic corpus for `spec` (defaults when absent) and
/// returns the scene count.
pub fn run(spec: Option<&Path>, seed: u64, out: &Path) -> Result<usize> {
    let spec: SyntheticSpec = match spec {
        Some(p) => read_config(p)?,
        None => SyntheticSpec::default(),
    };
    let scenes = generate_synthetic(&spec, seed).map_err(|e| CliError::invalid(e.to_string()))?;
    write_scenes(create(out)?, &scenes).map_err(|e| scene_error(out, e))?;
    Ok(scenes.len())
}
