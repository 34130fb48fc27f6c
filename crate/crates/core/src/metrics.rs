//! Displacement metrics, class-weighted scores and miss rate.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::AgentClass;

pub const DEFAULT_TAU: f64 = 2.0;
/// Lower bound on a class's mean speed when forming weights, m/s.
pub const SPEED_FLOOR: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: prediction has {pred} steps, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("no agents with ground truth to evaluate")]
    EmptyEvalSet,
    #[error("at least one mode is required")]
    NoModes,
    #[error("tau must be positive, got {0}")]
    InvalidTau(f64),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

type Point = [f64; 2];

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check(pred: &[Point], gt: &[Point]) -> Result<()> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

/// Mean Euclidean error over the horizon.
pub fn ade(pred: &[Point], gt: &[Point]) -> Result<f64> {
    check(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(&p, &g)| dist(p, g)).sum::<f64>() / gt.len() as f64)
}

/// Euclidean error at the final step.
pub fn fde(pred: &[Point], gt: &[Point]) -> Result<f64> {
    check(pred, gt)?;
    Ok(dist(pred[pred.len() - 1], gt[gt.len() - 1]))
}

fn min_over(modes: &[Vec<Point>], gt: &[Point], f: fn(&[Point], &[Point]) -> Result<f64>) -> Result<f64> {
    if modes.is_empty() {
        return Err(MetricsError::NoModes);
    }
    modes.iter().try_fold(f64::INFINITY, |m, p| Ok(m.min(f(p, gt)?)))
}

/// Best ADE over one agent's modes.
pub fn min_ade(modes: &[Vec<Point>], gt: &[Point]) -> Result<f64> {
    min_over(modes, gt, ade)
}

/// Best FDE over one agent's modes.
pub fn min_fde(modes: &[Vec<Point>], gt: &[Point]) -> Result<f64> {
    min_over(modes, gt, fde)
}

/// One agent's predictions and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentEval {
    pub scene_id: String,
    pub agent_id: String,
    pub class: AgentClass,
    pub rate_hz: f64,
    /// Last observed position, the start of the ground-truth path.
    pub last_observed: Point,
    pub gt: Vec<Point>,
    pub modes: Vec<Vec<Point>>,
    pub probs: Vec<f64>,
}

impl AgentEval {
    /// Index of the highest-probability mode (lowest index on ties).
    pub fn top_mode(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = k;
            }
        }
        best
    }

    /// Ground-truth path length over the horizon duration.
    pub fn gt_speed(&self) -> f64 {
        let mut prev = self.last_observed;
        let mut len = 0.0;
        for &p in &self.gt {
            len += dist(prev, p);
            prev = p;
        }
        len / (self.gt.len() as f64 / self.rate_hz)
    }
}

/// Per-class weights inversely proportional to mean ground-truth speed,
/// normalized over the classes present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: BTreeMap<AgentClass, f64>,
    pub mean_speed: BTreeMap<AgentClass, f64>,
}

impl ClassWeights {
    pub fn get(&self, c: AgentClass) -> f64 {
        self.weights.get(&c).copied().unwrap_or(0.0)
    }

    /// Weights from per-class mean speeds; classes absent from the map get 0.
    pub fn from_mean_speeds(mean_speed: BTreeMap<AgentClass, f64>) -> Result<Self> {
        if mean_speed.is_empty() {
            return Err(MetricsError::EmptyEvalSet);
        }
        let inv: BTreeMap<_, _> = mean_speed.iter().map(|(&c, &v)| (c, 1.0 / v.max(SPEED_FLOOR))).collect();
        let z: f64 = inv.values().sum();
        let weights = AgentClass::ALL
            .iter()
            .map(|&c| (c, inv.get(&c).map_or(0.0, |w| w / z)))
            .collect();
        Ok(Self { weights, mean_speed })
    }
}

pub fn class_weights(agents: &[AgentEval]) -> Result<ClassWeights> {
    let mut acc: BTreeMap<AgentClass, (f64, usize)> = BTreeMap::new();
    for a in agents {
        let e = acc.entry(a.class).or_default();
        e.0 += a.gt_speed();
        e.1 += 1;
    }
    ClassWeights::from_mean_speeds(acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect())
}

/// Fraction of agents whose best final error exceeds `tau`.
pub fn miss_rate(agents: &[AgentEval], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(MetricsError::InvalidTau(tau));
    }
    if agents.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    let mut misses = 0usize;
    for a in agents {
        if min_fde(&a.modes, &a.gt)? > tau {
            misses += 1;
        }
    }
    Ok(misses as f64 / agents.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    #[serde(rename = "ADE")]
    pub ade: f64,
    #[serde(rename = "FDE")]
    pub fde: f64,
    pub count: usize,
    pub mean_speed: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "minADE_k")]
    pub min_ade: f64,
    #[serde(rename = "minFDE_k")]
    pub min_fde: f64,
    #[serde(rename = "WSADE")]
    pub wsade: f64,
    #[serde(rename = "WSFDE")]
    pub wsfde: f64,
    #[serde(rename = "MR")]
    pub miss_rate: f64,
    pub per_class: BTreeMap<AgentClass, ClassStats>,
    pub k: usize,
    pub tau: f64,
    pub n_agents: usize,
}

/// Per-agent values behind the report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentRow {
    pub scene_id: String,
    pub agent_id: String,
    pub class: AgentClass,
    pub min_ade: f64,
    pub min_fde: f64,
    pub top_mode: usize,
    pub top_ade: f64,
    pub top_fde: f64,
    pub speed: f64,
    pub missed: bool,
}

pub fn agent_rows(agents: &[AgentEval], tau: f64) -> Result<Vec<AgentRow>> {
    agents
        .iter()
        .map(|a| {
            let top = a.top_mode();
            let top_path = a.modes.get(top).ok_or(MetricsError::NoModes)?;
            let min_fde = min_fde(&a.modes, &a.gt)?;
            Ok(AgentRow {
                scene_id: a.scene_id.clone(),
                agent_id: a.agent_id.clone(),
                class: a.class,
                min_ade: min_ade(&a.modes, &a.gt)?,
                min_fde,
                top_mode: top,
                top_ade: ade(top_path, &a.gt)?,
                top_fde: fde(top_path, &a.gt)?,
                speed: a.gt_speed(),
                missed: min_fde > tau,
            })
        })
        .collect()
}

/// Weighted sum of per-class values.
pub fn weighted_score(per_class: &BTreeMap<AgentClass, f64>, weights: &ClassWeights) -> f64 {
    per_class.iter().map(|(&c, &v)| weights.get(c) * v).sum()
}

/// The full metric suite over every agent.
pub fn evaluate(agents: &[AgentEval], tau: f64) -> Result<EvalReport> {
    let rows = agent_rows(agents, tau)?;
    let mr = miss_rate(agents, tau)?;
    let weights = class_weights(agents)?;
    let n = rows.len() as f64;
    let mut sums: BTreeMap<AgentClass, (f64, f64, usize)> = BTreeMap::new();
    for r in &rows {
        let e = sums.entry(r.class).or_default();
        e.0 += r.top_ade;
        e.1 += r.top_fde;
        e.2 += 1;
    }
    let ade_c: BTreeMap<_, _> = sums.iter().map(|(&c, s)| (c, s.0 / s.2 as f64)).collect();
    let fde_c: BTreeMap<_, _> = sums.iter().map(|(&c, s)| (c, s.1 / s.2 as f64)).collect();
    let per_class = sums
        .iter()
        .map(|(&c, s)| {
            (
                c,
                ClassStats {
                    ade: ade_c[&c],
                    fde: fde_c[&c],
                    count: s.2,
                    mean_speed: weights.mean_speed[&c],
                    weight: weights.get(c),
                },
            )
        })
        .collect();
    Ok(EvalReport {
        min_ade: rows.iter().map(|r| r.min_ade).sum::<f64>() / n,
        min_fde: rows.iter().map(|r| r.min_fde).sum::<f64>() / n,
        wsade: weighted_score(&ade_c, &weights),
        wsfde: weighted_score(&fde_c, &weights),
        miss_rate: mr,
        per_class,
        k: agents.iter().map(|a| a.modes.len()).max().unwrap_or(0),
        tau,
        n_agents: rows.len(),
    })
}

impl EvalReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "agents {}  k {}  tau {:.2} m", self.n_agents, self.k, self.tau);
        let _ = writeln!(
            s,
            "{:>10} {:>10} {:>10} {:>10} {:>8}",
            format!("minADE_{}", self.k),
            format!("minFDE_{}", self.k),
            "WSADE",
            "WSFDE",
            "MR"
        );
        let _ = writeln!(
            s,
            "{:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>8.4}",
            self.min_ade, self.min_fde, self.wsade, self.wsfde, self.miss_rate
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<11} {:>6} {:>10} {:>10} {:>10} {:>8}",
            "class", "count", "ADE", "FDE", "speed", "weight"
        );
        for (c, st) in &self.per_class {
            let _ = writeln!(
                s,
                "{:<11} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>8.4}",
                c.as_str(),
                st.count,
                st.ade,
                st.fde,
                st.mean_speed,
                st.weight
            );
        }
        s
    }
}

/// CSV with one row per agent.
pub fn rows_to_csv(rows: &[AgentRow]) -> String {
    let mut s = String::from("scene_id,agent_id,class,min_ade,min_fde,top_mode,top_ade,top_fde,speed,missed\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.scene_id, r.agent_id, r.class, r.min_ade, r.min_fde, r.top_mode, r.top_ade, r.top_fde, r.speed, r.missed
        );
    }
    s
}
