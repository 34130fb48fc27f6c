use std::path::Path;

use rayon::prelude::*;
use silm_core::model::checkpoint::Checkpoint;
use silm_core::model::{predict, ModelConfig};
use silm_core::scene::Scene;
use silm_core::tensor::{ParamRegistry, Real};

use super::{create, load_checkpoint, load_scenes};
use crate::error::{checkpoint_error, model_error, CliError, Result};
use crate::format::{write_predictions, PredictionRecord};
use crate::Precision;

/// Rejects scenes whose history length or sampling rate differ from what
/// the checkpoint was trained on.
pub fn check_compatible(ck: &Checkpoint, scenes: &[Scene]) -> Result<()> {
    let t_h = ck.hyperparams.t_h;
    for s in scenes {
        if s.t_h() != t_h {
            return Err(CliError::invalid(format!(
                "scene `{}`: T_h={} but the checkpoint expects {t_h}",
                s.scene_id,
                s.t_h()
            )));
        }
        if let Some(rate) = ck.meta.rate_hz {
            if (s.rate_hz - rate).abs() > 1e-9 {
                return Err(CliError::invalid(format!(
                    "scene `{}`: rate_hz={} but the checkpoint was trained at {rate}",
                    s.scene_id, s.rate_hz
                )));
            }
        }
    }
    Ok(())
}

fn predict_all<F: Real>(params: &ParamRegistry<F>, cfg: &ModelConfig, scenes: &[Scene]) -> Result<Vec<PredictionRecord>> {
    scenes
        .par_iter()
        .map(|s| {
            let pred = predict(params, cfg, s).map_err(model_error)?;
            Ok(PredictionRecord::from_prediction(s, &pred))
        })
        .collect()
}

/// Free-running predictions in input order.
pub fn predictions(
    ck: &Checkpoint,
    params: &ParamRegistry<f64>,
    scenes: &[Scene],
    precision: Precision,
) -> Result<Vec<PredictionRecord>> {
    check_compatible(ck, scenes)?;
    let cfg = &ck.hyperparams;
    let records = match precision {
        Precision::F64 => predict_all(params, cfg, scenes)?,
        Precision::F32 => predict_all(&params.cast::<f32>(), cfg, scenes)?,
    };
    if let Some(bad) = records.iter().find(|r| !r.all_finite()) {
        return Err(CliError::Numeric(format!("scene `{}`: non-finite prediction", bad.scene_id)));
    }
    Ok(records)
}

pub fn run(checkpoint: &Path, scenes: &Path, out: &Path, precision: Precision) -> Result<usize> {
    let ck = load_checkpoint(checkpoint)?;
    let scenes = load_scenes(scenes)?;
    let params = ck.registry().map_err(|e| checkpoint_error(checkpoint, e))?;
    let records = predictions(&ck, &params, &scenes, precision)?;
    write_predictions(create(out)?, &records).map_err(|e| CliError::io(out, e))?;
    Ok(records.len())
}
