//! Prediction dump: one JSON record per scene.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use silm_core::metrics::AgentEval;
use silm_core::model::PredictionSet;
use silm_core::scene::Scene;
use silm_core::tensor::Real;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeRecord {
    pub prob: f64,
    /// `[μx, μy, bx, by]` per future step.
    pub points: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentRecord {
    pub agent_id: String,
    pub modes: Vec<ModeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub scene_id: String,
    pub agents: Vec<AgentRecord>,
}

impl PredictionRecord {
    pub fn from_prediction<F: Real>(scene: &Scene, pred: &PredictionSet<F>) -> Self {
        let f = |v: F| v.to_f64().unwrap_or(f64::NAN);
        let agents = scene
            .tracks
            .iter()
            .enumerate()
            .map(|(i, tr)| AgentRecord {
                agent_id: tr.agent_id.clone(),
                modes: (0..pred.modes())
                    .map(|m| ModeRecord {
                        prob: f(pred.prob(i, m)),
                        points: (0..pred.horizon()).map(|t| pred.point(i, m, t).map(f)).collect(),
                    })
                    .collect(),
            })
            .collect();
        Self {
            scene_id: scene.scene_id.clone(),
            agents,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.agents
            .iter()
            .flat_map(|a| &a.modes)
            .all(|m| m.prob.is_finite() && m.points.iter().flatten().all(|v| v.is_finite()))
    }
}

pub fn write_predictions<W: Write>(mut w: W, records: &[PredictionRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Reads one record per non-empty line; parse errors report the line.
pub fn read_predictions<R: BufRead>(r: R) -> std::result::Result<Vec<PredictionRecord>, ReadError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(ReadError::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| ReadError::Parse(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug)]
pub enum ReadError {
    Io(std::io::Error),
    Parse(String),
}

/// Pairs every labeled agent with its predicted modes. Any scene or agent
/// present on one side only is an error naming the ids.
pub fn align(records: &[PredictionRecord], scenes: &[Scene]) -> Result<Vec<AgentEval>> {
    let by_scene: BTreeMap<&str, &PredictionRecord> = records.iter().map(|r| (r.scene_id.as_str(), r)).collect();
    let mut missing = Vec::new();
    let mut evals = Vec::new();
    for scene in scenes {
        if !scene.is_labeled() {
            return Err(CliError::invalid(format!("scene `{}`: future missing", scene.scene_id)));
        }
        let Some(rec) = by_scene.get(scene.scene_id.as_str()) else {
            missing.push(format!("scene {}", scene.scene_id));
            continue;
        };
        let by_agent: BTreeMap<&str, &AgentRecord> = rec.agents.iter().map(|a| (a.agent_id.as_str(), a)).collect();
        for tr in &scene.tracks {
            let Some(a) = by_agent.get(tr.agent_id.as_str()) else {
                missing.push(format!("agent {}/{}", scene.scene_id, tr.agent_id));
                continue;
            };
            evals.push(AgentEval {
                scene_id: scene.scene_id.clone(),
                agent_id: tr.agent_id.clone(),
                class: tr.class,
                rate_hz: scene.rate_hz,
                last_observed: tr.last_state().position(),
                gt: tr.future.clone().unwrap_or_default(),
                modes: a.modes.iter().map(|m| m.points.iter().map(|p| [p[0], p[1]]).collect()).collect(),
                probs: a.modes.iter().map(|m| m.prob).collect(),
            });
        }
        for a in &rec.agents {
            if !scene.tracks.iter().any(|t| t.agent_id == a.agent_id) {
                missing.push(format!("unexpected agent {}/{}", scene.scene_id, a.agent_id));
            }
        }
    }
    for r in records {
        if !scenes.iter().any(|s| s.scene_id == r.scene_id) {
            missing.push(format!("unexpected scene {}", r.scene_id));
        }
    }
    if !missing.is_empty() {
        return Err(CliError::invalid(format!(
            "predictions and scenes do not align: {}",
            missing.join(", ")
        )));
    }
    Ok(evals)
}
