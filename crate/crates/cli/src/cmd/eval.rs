use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use silm_core::metrics::{agent_rows, evaluate, rows_to_csv, EvalReport};
use silm_core::scene::Scene;

use super::{create, load_scenes};
use crate::error::{CliError, Result};
use crate::format::{align, read_predictions, PredictionRecord, ReadError};

pub fn report(records: &[PredictionRecord], scenes: &[Scene], tau: f64) -> Result<(EvalReport, String)> {
    let agents = align(records, scenes)?;
    let report = evaluate(&agents, tau).map_err(|e| CliError::invalid(e.to_string()))?;
    let rows = agent_rows(&agents, tau).map_err(|e| CliError::invalid(e.to_string()))?;
    Ok((report, rows_to_csv(&rows)))
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_predictions(BufReader::new(f)).map_err(|e| match e {
        ReadError::Io(e) => CliError::io(path, e),
        ReadError::Parse(m) => CliError::invalid(format!("{}: {m}", path.display())),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

pub fn run(predictions: &Path, scenes: &Path, tau: f64, json: Option<&Path>, csv: Option<&Path>) -> Result<EvalReport> {
    let records = load_predictions(predictions)?;
    let scenes = load_scenes(scenes)?;
    let (report, rows) = report(&records, &scenes, tau)?;
    if let Some(p) = json {
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Numeric(e.to_string()))?;
        write_text(p, &(text + "\n"))?;
    }
    if let Some(p) = csv {
        write_text(p, &rows)?;
    }
    Ok(report)
}
