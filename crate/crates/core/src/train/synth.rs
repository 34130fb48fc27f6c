//! Deterministic synthetic scenes whose keypoints foreshadow each agent's
//! maneuver before the kinematics change.
//!
//! Every agent drives at constant velocity through the observed window, so
//! histories carry no hint of what comes next. The maneuver starts at the
//! last observed step. Keypoints begin to turn (or compress, for a stop)
//! `intent_lead_steps` steps earlier.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{wrap_angle, AgentClass, AgentState, KeyPointFrame, ObservedTrack, Scene, NUM_KEYPOINTS};

#[derive(Debug, Error, PartialEq)]
#[error("invalid synthetic spec at {path}: {msg}")]
pub struct SpecError {
    pub path: String,
    pub msg: String,
}

fn spec_err(path: &str, msg: impl Into<String>) -> SpecError {
    SpecError {
        path: path.into(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    Straight,
    LeftTurn,
    RightTurn,
    LaneChange,
    Stop,
}

impl Maneuver {
    pub const ALL: [Maneuver; 5] = [
        Self::Straight,
        Self::LeftTurn,
        Self::RightTurn,
        Self::LaneChange,
        Self::Stop,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManeuverMix {
    pub straight: f64,
    pub left_turn: f64,
    pub right_turn: f64,
    pub lane_change: f64,
    pub stop: f64,
}

impl Default for ManeuverMix {
    fn default() -> Self {
        Self {
            straight: 0.2,
            left_turn: 0.2,
            right_turn: 0.2,
            lane_change: 0.2,
            stop: 0.2,
        }
    }
}

impl ManeuverMix {
    fn weights(&self) -> [f64; 5] {
        [self.straight, self.left_turn, self.right_turn, self.lane_change, self.stop]
    }

    pub fn only(m: Maneuver) -> Self {
        let mut w = [0.0; 5];
        w[Maneuver::ALL.iter().position(|&x| x == m).unwrap_or(0)] = 1.0;
        Self {
            straight: w[0],
            left_turn: w[1],
            right_turn: w[2],
            lane_change: w[3],
            stop: w[4],
        }
    }
}

/// Corpus description. Speeds are scaled per class (vehicles 1, bicycles
/// 0.6, pedestrians 0.25).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_scenes: usize,
    pub agents_per_scene: [usize; 2],
    pub t_h: usize,
    pub t_f: usize,
    pub rate_hz: f64,
    pub maneuver_mix: ManeuverMix,
    /// Weights for vehicle, pedestrian, bicycle.
    pub class_mix: [f64; 3],
    pub noise_std: f64,
    pub intent_lead_steps: usize,
    /// Vehicle speed range, m/s.
    pub speed_range: [f64; 2],
    /// Turn-rate magnitude range, rad/s.
    pub turn_rate_range: [f64; 2],
    /// Agents start within this many meters of the origin.
    pub spread: f64,
    pub lane_width: f64,
    /// Headings lie within this many radians of the x axis, in either
    /// direction; π gives uniform headings.
    pub heading_jitter: f64,
    pub occlusion_prob: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_scenes: 100,
            agents_per_scene: [2, 6],
            t_h: 4,
            t_f: 6,
            rate_hz: 2.0,
            maneuver_mix: ManeuverMix::default(),
            class_mix: [0.6, 0.2, 0.2],
            noise_std: 0.05,
            intent_lead_steps: 2,
            speed_range: [3.0, 8.0],
            turn_rate_range: [0.2, 0.6],
            spread: 30.0,
            lane_width: 3.5,
            heading_jitter: PI,
            occlusion_prob: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let mix = self.maneuver_mix.weights();
        if mix.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(spec_err("maneuver_mix", "weights must be finite and nonnegative"));
        }
        let total: f64 = mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(spec_err("maneuver_mix", format!("weights sum to {total}, expected 1")));
        }
        if self.class_mix.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.class_mix.iter().sum::<f64>() <= 0.0 {
            return Err(spec_err("class_mix", "weights must be nonnegative with a positive sum"));
        }
        let [lo, hi] = self.agents_per_scene;
        if lo == 0 || lo > hi {
            return Err(spec_err("agents_per_scene", format!("need 1 <= min <= max, got [{lo}, {hi}]")));
        }
        if self.t_h < 2 {
            return Err(spec_err("t_h", "must be at least 2"));
        }
        if self.t_f == 0 {
            return Err(spec_err("t_f", "must be positive"));
        }
        if !(self.rate_hz.is_finite() && self.rate_hz > 0.0) {
            return Err(spec_err("rate_hz", "must be positive"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(spec_err("noise_std", "must be nonnegative"));
        }
        if self.intent_lead_steps > self.t_h {
            return Err(spec_err("intent_lead_steps", format!("exceeds t_h={}", self.t_h)));
        }
        for (path, [a, b]) in [("speed_range", self.speed_range), ("turn_rate_range", self.turn_rate_range)] {
            if !(a.is_finite() && b.is_finite() && 0.0 <= a && a <= b) {
                return Err(spec_err(path, format!("need 0 <= min <= max, got [{a}, {b}]")));
            }
        }
        if !(self.spread.is_finite() && self.spread >= 0.0) {
            return Err(spec_err("spread", "must be nonnegative"));
        }
        if !(self.lane_width.is_finite() && self.lane_width >= 0.0) {
            return Err(spec_err("lane_width", "must be nonnegative"));
        }
        if !(self.heading_jitter.is_finite() && (0.0..=PI).contains(&self.heading_jitter)) {
            return Err(spec_err("heading_jitter", "must lie in [0, π]"));
        }
        if !(0.0..1.0).contains(&self.occlusion_prob) {
            return Err(spec_err("occlusion_prob", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Everything that determines one agent's motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentPlan {
    pub class: AgentClass,
    pub maneuver: Maneuver,
    pub start: [f64; 2],
    pub heading: f64,
    pub speed: f64,
    /// Signed yaw rate for turns, rad/s.
    pub turn_rate: f64,
    /// +1 for a lane change to the left, −1 to the right.
    pub side: f64,
}

fn class_speed_factor(c: AgentClass) -> f64 {
    match c {
        AgentClass::Vehicle => 1.0,
        AgentClass::Bicycle => 0.6,
        AgentClass::Pedestrian => 0.25,
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Noiseless states for `t_h + t_f` steps.
pub fn rollout(plan: &AgentPlan, t_h: usize, t_f: usize, rate_hz: f64) -> Vec<AgentState> {
    let dt = 1.0 / rate_hz;
    let (ch, sh) = (plan.heading.cos(), plan.heading.sin());
    let v = plan.speed;
    let t_last = (t_h - 1) as f64 * dt;
    let horizon = t_f as f64 * dt;
    let anchor = [plan.start[0] + v * t_last * ch, plan.start[1] + v * t_last * sh];
    (0..t_h + t_f)
        .map(|k| {
            let t = k as f64 * dt;
            if k < t_h {
                return AgentState {
                    x: plan.start[0] + v * t * ch,
                    y: plan.start[1] + v * t * sh,
                    vx: v * ch,
                    vy: v * sh,
                    yaw: wrap_angle(plan.heading),
                };
            }
            let tau = t - t_last;
            let (along, lateral, v_along, v_lat, yaw) = match plan.maneuver {
                Maneuver::LeftTurn | Maneuver::RightTurn if plan.turn_rate != 0.0 => {
                    let w = plan.turn_rate;
                    let th = w * tau;
                    (v / w * th.sin(), v / w * (1.0 - th.cos()), v * th.cos(), v * th.sin(), plan.heading + th)
                }
                Maneuver::LaneChange => {
                    let k = 8.0;
                    let (lo, hi) = (logistic(-k / 2.0), logistic(k / 2.0));
                    let u = tau / horizon;
                    let s = (logistic(k * (u - 0.5)) - lo) / (hi - lo);
                    let ds = k * logistic(k * (u - 0.5)) * (1.0 - logistic(k * (u - 0.5))) / (hi - lo) / horizon;
                    let lat = plan.side * s;
                    let vl = plan.side * ds;
                    (v * tau, lat, v, vl, plan.heading + vl.atan2(v))
                }
                Maneuver::Stop => {
                    let a = v / horizon;
                    (v * tau - 0.5 * a * tau * tau, 0.0, v - a * tau, 0.0, plan.heading)
                }
                _ => (v * tau, 0.0, v, 0.0, plan.heading),
            };
            AgentState {
                x: anchor[0] + along * ch - lateral * sh,
                y: anchor[1] + along * sh + lateral * ch,
                vx: v_along * ch - v_lat * sh,
                vy: v_along * sh + v_lat * ch,
                yaw: wrap_angle(yaw),
            }
        })
        .collect()
}

/// Class keypoint template in the agent frame, with the indices that move
/// to signal intent and the pivot they rotate about.
fn template(class: AgentClass) -> ([[f64; 2]; NUM_KEYPOINTS], &'static [usize], [f64; 2]) {
    match class {
        // wheels, front/rear centers, headlights, roof
        AgentClass::Vehicle => (
            [
                [1.4, 0.8],
                [1.4, -0.8],
                [-1.4, 0.8],
                [-1.4, -0.8],
                [2.2, 0.0],
                [-2.2, 0.0],
                [2.2, 0.7],
                [2.2, -0.7],
                [0.0, 0.0],
            ],
            &[0, 1, 4, 6, 7],
            [1.4, 0.0],
        ),
        // nose, neck, shoulders, hands, hips, pelvis
        AgentClass::Pedestrian => (
            [
                [0.15, 0.0],
                [0.0, 0.0],
                [0.0, 0.2],
                [0.0, -0.2],
                [0.05, 0.3],
                [0.05, -0.3],
                [0.0, 0.15],
                [0.0, -0.15],
                [-0.05, 0.0],
            ],
            &[0, 2, 3, 4, 5],
            [0.0, 0.0],
        ),
        // wheels, handlebar ends, stem, seat, head, pedals
        AgentClass::Bicycle => (
            [
                [0.6, 0.0],
                [-0.6, 0.0],
                [0.45, 0.3],
                [0.45, -0.3],
                [0.45, 0.0],
                [-0.2, 0.0],
                [0.0, 0.0],
                [0.0, 0.15],
                [0.0, -0.15],
            ],
            &[0, 2, 3],
            [0.45, 0.0],
        ),
    }
}

/// Full intent cue for a maneuver: a rotation angle for the moving points,
/// a longitudinal compression factor and a lateral shift of the moving
/// points in meters.
fn intent_cue(plan: &AgentPlan, spec_turn_hi: f64) -> (f64, f64, f64) {
    match plan.maneuver {
        Maneuver::Straight => (0.0, 0.0, 0.0),
        Maneuver::LeftTurn | Maneuver::RightTurn => {
            let hi = if spec_turn_hi > 0.0 { spec_turn_hi } else { 1.0 };
            (0.6 * (plan.turn_rate / hi).clamp(-1.0, 1.0), 0.0, 0.0)
        }
        Maneuver::LaneChange => (0.0, 0.0, 0.3 * plan.side.signum()),
        Maneuver::Stop => (0.0, 0.25, 0.0),
    }
}

/// Keypoint frames for the observed window. `cue_steps` is how many of the
/// last observed frames carry the intent cue, ramping to full strength at
/// the last one.
pub fn keypoint_frames<R: Rng>(
    plan: &AgentPlan,
    t_h: usize,
    cue_steps: usize,
    turn_rate_hi: f64,
    occlusion_prob: f64,
    rng: &mut R,
) -> Vec<KeyPointFrame> {
    let (base, moving, pivot) = template(plan.class);
    let (angle, squash, shift) = intent_cue(plan, turn_rate_hi);
    (0..t_h)
        .map(|k| {
            let first = t_h - cue_steps;
            let p = if cue_steps > 0 && k >= first {
                (k - first + 1) as f64 / cue_steps as f64
            } else {
                0.0
            };
            let (s, c) = (angle * p).sin_cos();
            let squash = 1.0 - squash * p;
            let mut points = base;
            for &i in moving {
                let (dx, dy) = (base[i][0] - pivot[0], base[i][1] - pivot[1]);
                points[i] = [pivot[0] + c * dx - s * dy, pivot[1] + s * dx + c * dy + shift * p];
            }
            for pt in &mut points {
                pt[0] *= squash;
            }
            let visibility: Vec<bool> = (0..NUM_KEYPOINTS).map(|_| !rng.random_bool(occlusion_prob)).collect();
            let points = points
                .iter()
                .zip(&visibility)
                .map(|(&pt, &v)| if v { pt } else { [0.0, 0.0] })
                .collect();
            KeyPointFrame { points, visibility }
        })
        .collect()
}

/// Orientation of the intent-bearing keypoints: angle of the line through
/// the first two moving points, relative to its rest orientation.
pub fn intent_angle(class: AgentClass, frame: &KeyPointFrame) -> f64 {
    let (base, moving, _) = template(class);
    let (a, b) = (moving[1], moving[2]);
    let rest = (base[b][1] - base[a][1]).atan2(base[b][0] - base[a][0]);
    let now = (frame.points[b][1] - frame.points[a][1]).atan2(frame.points[b][0] - frame.points[a][0]);
    wrap_angle(now - rest)
}

fn pick<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn sample_plan<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> AgentPlan {
    let class = AgentClass::ALL[pick(&spec.class_mix, rng)];
    let maneuver = Maneuver::ALL[pick(&spec.maneuver_mix.weights(), rng)];
    let r = spec.spread * rng.random_range(0.0f64..1.0).sqrt();
    let phi = rng.random_range(-PI..PI);
    let [s_lo, s_hi] = spec.speed_range;
    let speed = class_speed_factor(class) * if s_hi > s_lo { rng.random_range(s_lo..=s_hi) } else { s_lo };
    let [w_lo, w_hi] = spec.turn_rate_range;
    let w = if w_hi > w_lo { rng.random_range(w_lo..=w_hi) } else { w_lo };
    let turn_rate = match maneuver {
        Maneuver::LeftTurn => w,
        Maneuver::RightTurn => -w,
        _ => 0.0,
    };
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 } * spec.lane_width;
    let axis = if rng.random_bool(0.5) { 0.0 } else { PI };
    let j = spec.heading_jitter;
    let heading = wrap_angle(axis + if j > 0.0 { rng.random_range(-j..j) } else { 0.0 });
    AgentPlan {
        class,
        maneuver,
        start: [r * phi.cos(), r * phi.sin()],
        heading,
        speed,
        turn_rate,
        side,
    }
}

/// Builds one labeled world-frame track from a plan.
pub fn synthesize_track<R: Rng>(id: String, plan: &AgentPlan, spec: &SyntheticSpec, rng: &mut R) -> ObservedTrack {
    let states = rollout(plan, spec.t_h, spec.t_f, spec.rate_hz);
    let keypoints = keypoint_frames(
        plan,
        spec.t_h,
        spec.intent_lead_steps,
        spec.turn_rate_range[1],
        spec.occlusion_prob,
        rng,
    );
    let future = states[spec.t_h..].iter().map(|s| s.position()).collect();
    let mut observed = states[..spec.t_h].to_vec();
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
        for s in &mut observed {
            s.x += noise.sample(rng);
            s.y += noise.sample(rng);
        }
    }
    ObservedTrack {
        agent_id: id,
        class: plan.class,
        states: observed,
        keypoints,
        future: Some(future),
    }
}

/// `spec.n_scenes` ego-frame scenes; agent 0 is the ego vehicle.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Scene>, SpecError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..spec.n_scenes)
        .map(|s| {
            let [lo, hi] = spec.agents_per_scene;
            let n = rng.random_range(lo..=hi);
            let tracks = (0..n)
                .map(|i| {
                    let plan = sample_plan(spec, &mut rng);
                    synthesize_track(format!("agent-{i}"), &plan, spec, &mut rng)
                })
                .collect();
            Scene {
                scene_id: format!("syn-{seed}-{s:05}"),
                rate_hz: spec.rate_hz,
                ego_index: 0,
                tracks,
            }
            .to_ego_frame()
        })
        .collect())
}
