//! One module per subcommand, plus shared file helpers.

pub mod bench;
pub mod eval;
pub mod gen;
pub mod predict;
pub mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::de::DeserializeOwned;
use silm_core::model::checkpoint::Checkpoint;
use silm_core::scene::{read_scenes, Scene};

use crate::error::{checkpoint_error, scene_error, CliError, Result};

/// Parses a JSON config, reporting the offending field path on failure.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        CliError::invalid(format!("{}: at `{at}`: {}", path.display(), e.inner()))
    })
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_scenes(BufReader::new(f)).map_err(|e| scene_error(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| checkpoint_error(path, e))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}
