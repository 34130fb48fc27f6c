//! The prediction network: keypoint intent encoder, local spatiotemporal
//! encoder, global interaction encoder, and multimodal decoder.

pub mod checkpoint;
pub mod global;
pub mod local;
pub mod predictor;
pub mod si;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{derive_node_features, Scene, NUM_KEYPOINTS};
use crate::tensor::nn::{layer_norm_specs, mlp_specs, projection_specs};
use crate::tensor::{Graph, Init, ParamRegistry, ParamSpec, Real, TensorError, Var};

pub use predictor::{LossBreakdown, LossVariant, PredictionSet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("scene has T_h={scene} but the model expects {model}")]
    HistoryMismatch { scene: usize, model: usize },
    #[error("ground-truth future missing")]
    MissingGroundTruth,
    #[error("ground truth has T_f={scene} but the model predicts {model}")]
    HorizonMismatch { scene: usize, model: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Architecture hyperparameters; serialized as the checkpoint's
/// `hyperparams` record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_h: usize,
    pub heads: usize,
    #[serde(rename = "M")]
    pub modes: usize,
    #[serde(rename = "T_h")]
    pub t_h: usize,
    #[serde(rename = "T_f")]
    pub t_f: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub si_enabled: bool,
    pub activation: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_h: 64,
            heads: 4,
            modes: 6,
            t_h: 4,
            t_f: 6,
            alpha: 0.5,
            gamma: 40.0,
            si_enabled: true,
            activation: "relu".into(),
        }
    }
}

impl ModelConfig {
    /// Small configuration used for gradient checks and overfitting tests.
    pub fn micro() -> Self {
        Self {
            d_h: 8,
            heads: 2,
            modes: 2,
            t_h: 4,
            t_f: 3,
            ..Self::default()
        }
    }

    /// Width of local/global features (trajectory and pose halves).
    pub fn width(&self) -> usize {
        2 * self.d_h
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_h == 0 || self.modes == 0 || self.t_h == 0 || self.t_f == 0 || self.heads == 0 {
            return fail("d_h, heads, M, T_h and T_f must be positive".into());
        }
        if self.d_h % self.heads != 0 {
            return fail(format!("heads={} must divide d_h={}", self.heads, self.d_h));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha={} outside [0, 1]", self.alpha));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return fail(format!("gamma={} must be positive", self.gamma));
        }
        if self.activation != "relu" {
            return fail(format!("unsupported activation `{}`", self.activation));
        }
        Ok(())
    }

    /// Attention scale used by the spatial, temporal and global layers.
    pub(crate) fn interaction_scale<F: Real>(&self) -> F {
        F::lit(1.0 / (self.d_h as f64).sqrt())
    }

    /// Every trainable tensor, with its initialization rule.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, w) = (self.d_h, self.width());
        let emb = Init::Normal(0.02);
        let mut s = Vec::new();
        if self.si_enabled {
            s.push(ParamSpec::new("si.tok.w", vec![3, d], Init::Xavier));
            s.push(ParamSpec::new("si.tok.b", vec![d], Init::Zeros));
            s.push(ParamSpec::new("si.idx_emb", vec![NUM_KEYPOINTS, d], emb));
            s.push(ParamSpec::new("si.cls_emb", vec![3, d], emb));
            s.extend(projection_specs("si.attn", d, d, d, true));
            s.extend(layer_norm_specs("si.ln1", d));
            s.extend(mlp_specs("si.ffn", &[d, 2 * d, d]));
            s.extend(layer_norm_specs("si.ln2", d));
        } else {
            s.push(ParamSpec::new("si.null", vec![d], emb));
        }
        s.extend(mlp_specs("local.mlp", &[5, d, d]));
        s.extend(projection_specs("local.spa", w, w, w, false));
        s.push(ParamSpec::new("local.pos", vec![self.t_h, w], emb));
        s.extend(projection_specs("local.tem", w, w, w, false));
        s.extend(layer_norm_specs("local.tem.ln1", w));
        s.extend(mlp_specs("local.tem.ffn", &[w, 2 * w, w]));
        s.extend(layer_norm_specs("local.tem.ln2", w));

        s.extend(mlp_specs("global.edge", &[6, d, d]));
        s.extend(projection_specs("global", w, w + d, w, false));
        s.extend(layer_norm_specs("global.ln", w));

        s.extend(mlp_specs("pred.gate", &[w, d, self.t_h]));
        s.push(ParamSpec::new("pred.mode_q", vec![self.modes, w], emb));
        s.push(ParamSpec::new("pred.step_emb", vec![self.t_f, w], emb));
        s.push(ParamSpec::new("pred.prev.w", vec![2, w], Init::Xavier));
        s.push(ParamSpec::new("pred.prev.b", vec![w], Init::Zeros));
        s.extend(projection_specs("pred.self", w, w, w, true));
        s.extend(layer_norm_specs("pred.ln1", w));
        s.extend(projection_specs("pred.cross", w, w, w, true));
        s.extend(layer_norm_specs("pred.ln2", w));
        s.extend(mlp_specs("pred.ffn", &[w, 2 * w, w]));
        s.extend(layer_norm_specs("pred.ln3", w));
        s.push(ParamSpec::new("pred.head.w", vec![w, 4], emb));
        s.push(ParamSpec::new("pred.head.b", vec![4], Init::Zeros));
        s.push(ParamSpec::new("pred.prob.w", vec![w, 1], Init::Xavier));
        s.push(ParamSpec::new("pred.prob.b", vec![1], Init::Zeros));
        s
    }
}

/// Dense per-scene inputs in ego-frame coordinates.
#[derive(Debug, Clone)]
pub struct SceneInputs {
    pub n: usize,
    pub t_h: usize,
    /// `(N, T_h, 5)` node features.
    pub node_features: Vec<f64>,
    /// `(N·T_h, 9, 3)` keypoint tokens `(kx, ky, visible)`.
    pub pose_tokens: Vec<f64>,
    pub classes: Vec<usize>,
    /// `(N, T_h, 2)` observed positions.
    pub positions: Vec<f64>,
    /// `(N, N, 6)` relative-pose edges at the last observed step.
    pub edges: Vec<f64>,
    /// `(N, 2)` positions at the last observed step.
    pub last_pos: Vec<f64>,
    /// `(N, 2)` velocities at the last observed step.
    pub last_vel: Vec<f64>,
    /// Seconds per step.
    pub dt: f64,
    /// `(N, T_f, 2)` ground-truth future, when labeled.
    pub future: Option<Vec<f64>>,
    pub t_f: Option<usize>,
}

impl SceneInputs {
    pub fn from_scene(scene: &Scene) -> Self {
        let n = scene.num_agents();
        let t_h = scene.t_h();
        let mut node_features = Vec::with_capacity(n * t_h * 5);
        let mut pose_tokens = Vec::with_capacity(n * t_h * NUM_KEYPOINTS * 3);
        let mut positions = Vec::with_capacity(n * t_h * 2);
        for track in &scene.tracks {
            node_features.extend(derive_node_features(track).into_iter().flatten());
            for frame in &track.keypoints {
                pose_tokens.extend(si::frame_tokens(frame));
            }
            positions.extend(track.states.iter().flat_map(|s| s.position()));
        }
        let t_f = scene.t_f();
        let future = t_f.map(|_| {
            scene
                .tracks
                .iter()
                .flat_map(|t| t.future.as_deref().unwrap_or_default().iter().flatten().copied())
                .collect()
        });
        Self {
            n,
            t_h,
            node_features,
            pose_tokens,
            classes: scene.tracks.iter().map(|t| t.class.index()).collect(),
            positions,
            edges: global::edge_features(scene).into_iter().flatten().collect(),
            last_pos: scene.tracks.iter().flat_map(|t| t.last_state().position()).collect(),
            last_vel: scene.tracks.iter().flat_map(|t| [t.last_state().vx, t.last_state().vy]).collect(),
            dt: 1.0 / scene.rate_hz,
            future,
            t_f,
        }
    }

    pub fn anchor(&self) -> predictor::Anchor<'_> {
        predictor::Anchor {
            position: &self.last_pos,
            velocity: &self.last_vel,
            dt: self.dt,
        }
    }

    /// Ground-truth future offsets from each agent's last observed position.
    pub fn future_offsets(&self) -> Option<Vec<f64>> {
        let (fut, t_f) = (self.future.as_ref()?, self.t_f?);
        Some(
            fut.chunks(2)
                .enumerate()
                .flat_map(|(k, p)| {
                    let i = k / t_f;
                    [p[0] - self.last_pos[2 * i], p[1] - self.last_pos[2 * i + 1]]
                })
                .collect(),
        )
    }
}

pub(crate) fn cast_vec<F: Real>(v: &[f64]) -> Vec<F> {
    v.iter().map(|&x| F::lit(x)).collect()
}

/// Intermediate and final graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub pose: Var,
    pub local_embedding: Var,
    pub spatial: Var,
    pub local_sequence: Var,
    pub global: Var,
    pub fused: Var,
    /// `(N, M, T_f, 4)` with absolute ego-frame means.
    pub trajectories: Var,
    /// `(N, M, T_f, 2)` mean offsets from each agent's last position.
    pub offsets: Var,
    pub mode_probs: Var,
}

/// Decoder feedback during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoding {
    /// Feed ground-truth previous offsets (training).
    TeacherForced,
    /// Feed the model's own previous outputs.
    FreeRunning,
}

/// Full forward pass through every encoder and the decoder.
pub fn forward<'a, F: Real>(
    g: &mut Graph<'a, F>,
    params: &'a ParamRegistry<F>,
    cfg: &ModelConfig,
    inputs: &SceneInputs,
    decoding: Decoding,
) -> Result<ForwardVars> {
    if inputs.t_h != cfg.t_h {
        return Err(ModelError::HistoryMismatch {
            scene: inputs.t_h,
            model: cfg.t_h,
        });
    }
    let pose = if cfg.si_enabled {
        si::encode_pose(g, params, cfg, inputs)?
    } else {
        si::si_disabled_embedding(g, params, inputs.n, cfg.t_h)?
    };
    let local_embedding = local::embed_and_concat(g, params, inputs, pose)?;
    let neighbors = local::NeighborSets::from_positions(&inputs.positions, inputs.n, inputs.t_h, cfg.gamma);
    let spatial = local::spatial_attend(g, params, cfg, local_embedding, &neighbors)?;
    let local_sequence = local::temporal_attend(g, params, cfg, spatial)?;
    let last = local::local_final(g, local_sequence)?;
    let global = global::global_attend(g, params, cfg, last, &inputs.edges)?;
    let fused = predictor::fuse(g, params, local_sequence, global)?;
    let teacher = match decoding {
        Decoding::TeacherForced => {
            let t_f = inputs.t_f.ok_or(ModelError::MissingGroundTruth)?;
            if t_f != cfg.t_f {
                return Err(ModelError::HorizonMismatch {
                    scene: t_f,
                    model: cfg.t_f,
                });
            }
            Some(inputs.future_offsets().ok_or(ModelError::MissingGroundTruth)?)
        }
        Decoding::FreeRunning => None,
    };
    let dec = predictor::decode(g, params, cfg, fused, inputs.anchor(), teacher.as_deref())?;
    Ok(ForwardVars {
        pose,
        local_embedding,
        spatial,
        local_sequence,
        global,
        fused,
        trajectories: dec.trajectories,
        offsets: dec.offsets,
        mode_probs: dec.mode_probs,
    })
}

/// Free-running inference with frozen parameters.
pub fn predict<F: Real>(params: &ParamRegistry<F>, cfg: &ModelConfig, scene: &Scene) -> Result<PredictionSet<F>> {
    predict_inputs(params, cfg, &SceneInputs::from_scene(scene))
}

pub fn predict_inputs<F: Real>(params: &ParamRegistry<F>, cfg: &ModelConfig, inputs: &SceneInputs) -> Result<PredictionSet<F>> {
    let mut g = Graph::inference();
    let out = forward(&mut g, params, cfg, inputs, Decoding::FreeRunning)?;
    Ok(PredictionSet {
        trajectories: g.tensor(out.trajectories),
        mode_probs: g.tensor(out.mode_probs),
    })
}

/// Forward + loss + backward on one labeled scene.
pub fn loss_and_grads(
    params: &ParamRegistry<f64>,
    cfg: &ModelConfig,
    inputs: &SceneInputs,
    decoding: Decoding,
    variant: LossVariant,
) -> Result<(LossBreakdown, crate::tensor::ParamGrads<f64>)> {
    let mut g = Graph::new();
    let out = forward(&mut g, params, cfg, inputs, decoding)?;
    let gt = inputs.future.as_deref().ok_or(ModelError::MissingGroundTruth)?;
    let loss = predictor::total_loss(&mut g, out.trajectories, out.mode_probs, gt, variant)?;
    let grads = g.backward(loss.total)?;
    Ok((loss.values(&g), g.param_grads(&grads)))
}

/// Loss and parameter gradients with the winning modes fixed, plus the
/// modes that were used.
pub fn loss_and_grads_given(
    params: &ParamRegistry<f64>,
    cfg: &ModelConfig,
    inputs: &SceneInputs,
    decoding: Decoding,
    variant: LossVariant,
    best: Option<&[usize]>,
) -> Result<(f64, crate::tensor::ParamGrads<f64>, Vec<usize>)> {
    let mut g = Graph::new();
    let out = forward(&mut g, params, cfg, inputs, decoding)?;
    let gt = inputs.future.as_deref().ok_or(ModelError::MissingGroundTruth)?;
    let best = match best {
        Some(b) => b.to_vec(),
        None => predictor::select_best_mode(g.value(out.trajectories), 4, inputs.n, cfg.modes, cfg.t_f, gt),
    };
    let loss = predictor::total_loss_given(&mut g, out.trajectories, out.mode_probs, gt, variant, &best)?;
    let grads = g.backward(loss.total)?;
    Ok((g.value(loss.total)[0], g.param_grads(&grads), best))
}

/// Loss value with the winning modes fixed.
pub fn loss_value_given(
    params: &ParamRegistry<f64>,
    cfg: &ModelConfig,
    inputs: &SceneInputs,
    decoding: Decoding,
    variant: LossVariant,
    best: &[usize],
) -> Result<f64> {
    let mut g = Graph::inference();
    let out = forward(&mut g, params, cfg, inputs, decoding)?;
    let gt = inputs.future.as_deref().ok_or(ModelError::MissingGroundTruth)?;
    let loss = predictor::total_loss_given(&mut g, out.trajectories, out.mode_probs, gt, variant, best)?;
    Ok(g.value(loss.total)[0])
}

/// Metric inputs for every labeled agent of `scene`.
pub fn agent_evals(scene: &Scene, pred: &PredictionSet<f64>) -> Vec<crate::metrics::AgentEval> {
    if !scene.is_labeled() {
        return Vec::new();
    }
    scene
        .tracks
        .iter()
        .enumerate()
        .map(|(i, tr)| crate::metrics::AgentEval {
            scene_id: scene.scene_id.clone(),
            agent_id: tr.agent_id.clone(),
            class: tr.class,
            rate_hz: scene.rate_hz,
            last_observed: tr.last_state().position(),
            gt: tr.future.clone().unwrap_or_default(),
            modes: (0..pred.modes())
                .map(|m| {
                    (0..pred.horizon())
                        .map(|t| {
                            let p = pred.point(i, m, t);
                            [p[0], p[1]]
                        })
                        .collect()
                })
                .collect(),
            probs: (0..pred.modes()).map(|m| pred.prob(i, m)).collect(),
        })
        .collect()
}

/// Loss value only (no gradient bookkeeping).
pub fn loss_value(
    params: &ParamRegistry<f64>,
    cfg: &ModelConfig,
    inputs: &SceneInputs,
    decoding: Decoding,
    variant: LossVariant,
) -> Result<LossBreakdown> {
    let mut g = Graph::inference();
    let out = forward(&mut g, params, cfg, inputs, decoding)?;
    let gt = inputs.future.as_deref().ok_or(ModelError::MissingGroundTruth)?;
    let loss = predictor::total_loss(&mut g, out.trajectories, out.mode_probs, gt, variant)?;
    Ok(loss.values(&g))
}

/// Fresh parameters for `cfg` drawn from a seeded ChaCha8 stream.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamRegistry<f64>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Ok(ParamRegistry::initialize(&cfg.param_specs(), &mut rng)?)
}
