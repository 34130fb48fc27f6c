//! Agents, tracks, keypoints and scenes, plus validation and JSONL I/O.
//!
//! Positions are in the ego frame: the ego vehicle's pose at the last
//! observed step is the origin and its heading is the x axis. Keypoints are
//! agent-local (centroid origin, x axis along the agent's yaw).

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_KEYPOINTS: usize = 9;
/// Sanity bound on agent-local keypoint coordinates, meters.
pub const KEYPOINT_BOUND: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("malformed scene at {path}: {msg}")]
    MalformedScene { path: String, msg: String },
    #[error("rate_hz must be positive and finite, got {0}")]
    RateMismatch(f64),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn malformed(path: impl Into<String>, msg: impl Into<String>) -> SceneError {
    SceneError::MalformedScene {
        path: path.into(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentClass {
    Vehicle,
    Pedestrian,
    Bicycle,
}

impl AgentClass {
    pub const ALL: [AgentClass; 3] = [Self::Vehicle, Self::Pedestrian, Self::Bicycle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Vehicle => "vehicle",
            Self::Pedestrian => "pedestrian",
            Self::Bicycle => "bicycle",
        }
    }
}

impl fmt::Display for AgentClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown agent class `{s}`"))
    }
}

/// Kinematic state; serialized as `[x, y, vx, vy, yaw]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 5]", into = "[f64; 5]")]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub yaw: f64,
}

impl From<[f64; 5]> for AgentState {
    fn from([x, y, vx, vy, yaw]: [f64; 5]) -> Self {
        Self { x, y, vx, vy, yaw }
    }
}

impl From<AgentState> for [f64; 5] {
    fn from(s: AgentState) -> Self {
        [s.x, s.y, s.vx, s.vy, s.yaw]
    }
}

impl AgentState {
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyPointFrame {
    pub points: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
}

impl KeyPointFrame {
    /// Frame with every point hidden.
    pub fn invisible() -> Self {
        Self {
            points: vec![[0.0; 2]; NUM_KEYPOINTS],
            visibility: vec![false; NUM_KEYPOINTS],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrackWire", into = "TrackWire")]
pub struct ObservedTrack {
    pub agent_id: String,
    pub class: AgentClass,
    pub states: Vec<AgentState>,
    pub keypoints: Vec<KeyPointFrame>,
    pub future: Option<Vec<[f64; 2]>>,
}

impl ObservedTrack {
    pub fn last_state(&self) -> &AgentState {
        self.states.last().expect("validated track has states")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackWire {
    agent_id: String,
    class: AgentClass,
    states: Vec<AgentState>,
    keypoints: Vec<Vec<[f64; 2]>>,
    visibility: Vec<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    future: Option<Vec<[f64; 2]>>,
}

impl TryFrom<TrackWire> for ObservedTrack {
    type Error = String;

    fn try_from(w: TrackWire) -> Result<Self, Self::Error> {
        if w.keypoints.len() != w.visibility.len() {
            return Err(format!(
                "visibility: {} frames but keypoints has {}",
                w.visibility.len(),
                w.keypoints.len()
            ));
        }
        Ok(Self {
            agent_id: w.agent_id,
            class: w.class,
            states: w.states,
            keypoints: w
                .keypoints
                .into_iter()
                .zip(w.visibility)
                .map(|(points, visibility)| KeyPointFrame { points, visibility })
                .collect(),
            future: w.future,
        })
    }
}

impl From<ObservedTrack> for TrackWire {
    fn from(t: ObservedTrack) -> Self {
        let (keypoints, visibility) = t
            .keypoints
            .into_iter()
            .map(|f| (f.points, f.visibility))
            .unzip();
        Self {
            agent_id: t.agent_id,
            class: t.class,
            states: t.states,
            keypoints,
            visibility,
            future: t.future,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub scene_id: String,
    pub rate_hz: f64,
    pub ego_index: usize,
    pub tracks: Vec<ObservedTrack>,
}

impl Scene {
    pub fn num_agents(&self) -> usize {
        self.tracks.len()
    }

    /// Observed history length (all tracks share it once validated).
    pub fn t_h(&self) -> usize {
        self.tracks.first().map_or(0, |t| t.states.len())
    }

    /// Future horizon when every track is labeled.
    pub fn t_f(&self) -> Option<usize> {
        let mut lens = self.tracks.iter().map(|t| t.future.as_ref().map(Vec::len));
        let first = lens.next()??;
        lens.all(|l| l == Some(first)).then_some(first)
    }

    pub fn is_labeled(&self) -> bool {
        self.t_f().is_some()
    }

    /// Re-expresses a scene given in world coordinates in the frame of the ego
    /// agent's last observed pose. Keypoints are agent-local and pass through.
    pub fn to_ego_frame(&self) -> Scene {
        let ego = *self.tracks[self.ego_index].last_state();
        let (s, c) = (-ego.yaw).sin_cos();
        let rot = |x: f64, y: f64| [c * x - s * y, s * x + c * y];
        let mut out = self.clone();
        for track in &mut out.tracks {
            for st in &mut track.states {
                let [x, y] = rot(st.x - ego.x, st.y - ego.y);
                let [vx, vy] = rot(st.vx, st.vy);
                *st = AgentState {
                    x,
                    y,
                    vx,
                    vy,
                    yaw: wrap_angle(st.yaw - ego.yaw),
                };
            }
            if let Some(future) = &mut track.future {
                for p in future.iter_mut() {
                    *p = rot(p[0] - ego.x, p[1] - ego.y);
                }
            }
        }
        out
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

fn yaw_in_range(yaw: f64) -> bool {
    yaw > -PI && yaw <= PI
}

/// Checks every scene invariant and hands the scene back unchanged.
pub fn validate_scene(scene: Scene) -> Result<Scene, SceneError> {
    if !(scene.rate_hz.is_finite() && scene.rate_hz > 0.0) {
        return Err(SceneError::RateMismatch(scene.rate_hz));
    }
    if scene.tracks.is_empty() {
        return Err(malformed("tracks", "at least one track required"));
    }
    if scene.ego_index >= scene.tracks.len() {
        return Err(malformed(
            "ego_index",
            format!("{} out of range for {} tracks", scene.ego_index, scene.tracks.len()),
        ));
    }
    let t_h = scene.tracks[0].states.len();
    let mut t_f = None;
    let mut ids = HashSet::new();
    for (i, track) in scene.tracks.iter().enumerate() {
        let p = format!("tracks[{i}]");
        if !ids.insert(track.agent_id.as_str()) {
            return Err(malformed(format!("{p}.agent_id"), format!("duplicate id `{}`", track.agent_id)));
        }
        if track.states.len() != t_h {
            return Err(malformed("tracks", "inconsistent T_h"));
        }
        if t_h < 2 {
            return Err(malformed(format!("{p}.states"), "T_h must be at least 2"));
        }
        if track.keypoints.len() != t_h {
            return Err(malformed(
                format!("{p}.keypoints"),
                format!("expected {t_h} frames, got {}", track.keypoints.len()),
            ));
        }
        for (t, st) in track.states.iter().enumerate() {
            let arr: [f64; 5] = (*st).into();
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(malformed(format!("{p}.states[{t}]"), "non-finite value"));
            }
            if !yaw_in_range(st.yaw) {
                return Err(malformed(format!("{p}.states[{t}].yaw"), format!("{} outside (-pi, pi]", st.yaw)));
            }
        }
        for (t, frame) in track.keypoints.iter().enumerate() {
            let fp = format!("{p}.keypoints[{t}]");
            if frame.points.len() != NUM_KEYPOINTS {
                return Err(malformed(
                    format!("{fp}.points"),
                    format!("expected {NUM_KEYPOINTS}, got {}", frame.points.len()),
                ));
            }
            if frame.visibility.len() != NUM_KEYPOINTS {
                return Err(malformed(
                    format!("{fp}.visibility"),
                    format!("expected {NUM_KEYPOINTS}, got {}", frame.visibility.len()),
                ));
            }
            for (k, (pt, &vis)) in frame.points.iter().zip(&frame.visibility).enumerate() {
                if pt.iter().any(|v| !v.is_finite() || v.abs() > KEYPOINT_BOUND) {
                    return Err(malformed(format!("{fp}.points[{k}]"), "non-finite or beyond 10 m"));
                }
                if !vis && *pt != [0.0, 0.0] {
                    return Err(malformed(format!("{fp}.points[{k}]"), "invisible point must be (0, 0)"));
                }
            }
        }
        if let Some(future) = &track.future {
            if future.is_empty() {
                return Err(malformed(format!("{p}.future"), "empty future"));
            }
            match t_f {
                None => t_f = Some(future.len()),
                Some(n) if n != future.len() => return Err(malformed("tracks", "inconsistent T_f")),
                _ => {}
            }
            if future.iter().flatten().any(|v| !v.is_finite()) {
                return Err(malformed(format!("{p}.future"), "non-finite value"));
            }
        }
    }
    Ok(scene)
}

/// Per-step node features `(Δx, Δy, vx, vy, yaw)`; the first step's
/// displacement is zero.
pub fn derive_node_features(track: &ObservedTrack) -> Vec<[f64; 5]> {
    let mut prev: Option<&AgentState> = None;
    track
        .states
        .iter()
        .map(|s| {
            let (dx, dy) = prev.map_or((0.0, 0.0), |p| (s.x - p.x, s.y - p.y));
            prev = Some(s);
            [dx, dy, s.vx, s.vy, s.yaw]
        })
        .collect()
}

pub fn parse_scene(line: &str) -> Result<Scene, serde_json::Error> {
    serde_json::from_str(line)
}

/// Reads and validates one scene per non-empty line.
pub fn read_scenes<R: BufRead>(reader: R) -> Result<Vec<Scene>, SceneError> {
    let mut scenes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene = parse_scene(&line).map_err(|source| SceneError::Parse { line: i + 1, source })?;
        scenes.push(validate_scene(scene).map_err(|e| match e {
            SceneError::MalformedScene { path, msg } => malformed(format!("line {}: {path}", i + 1), msg),
            other => other,
        })?);
    }
    Ok(scenes)
}

pub fn write_scenes<W: Write>(mut writer: W, scenes: &[Scene]) -> Result<(), SceneError> {
    for s in scenes {
        serde_json::to_writer(&mut writer, s).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}
