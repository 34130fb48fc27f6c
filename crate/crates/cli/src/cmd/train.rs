use std::io::Write;
use std::path::{Path, PathBuf};

use silm_core::train::{log_to_csv, train_with, LogRow, TrainConfig, TrainError};

use super::{create, load_checkpoint, load_scenes, read_config};
use crate::error::{checkpoint_error, train_error, CliError, Result};

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub seed: Option<u64>,
    pub data: &'a Path,
    pub out: &'a Path,
    /// Defaults to the checkpoint path with a `.log.csv` extension.
    pub log: Option<&'a Path>,
    pub resume: Option<&'a Path>,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub config: TrainConfig,
    pub log_path: PathBuf,
    pub steps: u64,
    pub last: Option<LogRow>,
}

/// Config with unset fields at their defaults and `--seed` applied.
pub fn effective_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match path {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(train_error)?;
    Ok(cfg)
}

pub fn run(args: &TrainArgs<'_>) -> Result<TrainSummary> {
    let cfg = effective_config(args.config, args.seed)?;
    let scenes = load_scenes(args.data)?;
    let resume = args.resume.map(load_checkpoint).transpose()?;
    let log_path = args.log.map_or_else(|| args.out.with_extension("log.csv"), Path::to_path_buf);

    let mut rows = Vec::new();
    let outcome = train_with(&cfg, &scenes, resume.as_ref(), |r| rows.push(r.clone()));
    let write_log = |rows: &[LogRow]| -> Result<()> {
        let mut w = create(&log_path)?;
        w.write_all(log_to_csv(rows).as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| CliError::io(&log_path, e))
    };
    match outcome {
        Ok(out) => {
            out.checkpoint.save(args.out).map_err(|e| checkpoint_error(args.out, e))?;
            write_log(&out.log)?;
            Ok(TrainSummary {
                steps: out.checkpoint.optimizer.as_ref().map_or(0, |o| o.step),
                last: out.log.last().cloned(),
                config: cfg,
                log_path,
            })
        }
        Err(TrainError::DivergenceDetected { step, last_good }) => {
            last_good.save(args.out).map_err(|e| checkpoint_error(args.out, e))?;
            write_log(&rows)?;
            Err(CliError::Numeric(format!(
                "loss diverged at step {step}; last good checkpoint written to {}",
                args.out.display()
            )))
        }
        Err(e) => Err(train_error(e)),
    }
}
