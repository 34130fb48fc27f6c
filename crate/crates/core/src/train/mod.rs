//! Optimization loop, synthetic data, gradient checking and the keypoint
//! ablation driver.

pub mod ablation;
pub mod adam;
pub mod gradcheck;
pub mod synth;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics;
use crate::model::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta};
use crate::model::{self, Decoding, LossBreakdown, LossVariant, ModelConfig, ModelError, SceneInputs};
use crate::scene::Scene;
use crate::tensor::{ParamGrads, ParamRegistry};

pub use adam::Adam;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("scene `{0}`: future missing")]
    MissingFuture(String),
    #[error("scene `{scene}`: {msg}")]
    Incompatible { scene: String, msg: String },
    #[error("no training scenes left after the validation split")]
    EmptyTrainingSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("loss diverged at step {step}")]
    DivergenceDetected { step: u64, last_good: Box<Checkpoint> },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Training hyperparameters. Unset fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub d_h: usize,
    pub alpha: f64,
    pub gamma_radius: f64,
    pub heads: usize,
    #[serde(rename = "M")]
    pub modes: usize,
    #[serde(rename = "T_h")]
    pub t_h: usize,
    #[serde(rename = "T_f")]
    pub t_f: usize,
    pub rate_hz: f64,
    pub si_enabled: bool,
    pub seed: u64,
    pub loss_variant: LossVariant,
    pub teacher_forcing: bool,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
    /// Fraction of scenes (by id hash) held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 128,
            d_h: 64,
            alpha: 0.5,
            gamma_radius: 40.0,
            heads: 4,
            modes: 6,
            t_h: 4,
            t_f: 6,
            rate_hz: 2.0,
            si_enabled: true,
            seed: 0,
            loss_variant: LossVariant::PaperL2,
            teacher_forcing: true,
            max_steps: None,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    /// Micro configuration used by the overfitting and gradient checks.
    pub fn micro() -> Self {
        let m = ModelConfig::micro();
        Self {
            d_h: m.d_h,
            heads: m.heads,
            modes: m.modes,
            t_h: m.t_h,
            t_f: m.t_f,
            ..Self::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_h: self.d_h,
            heads: self.heads,
            modes: self.modes,
            t_h: self.t_h,
            t_f: self.t_f,
            alpha: self.alpha,
            gamma: self.gamma_radius,
            si_enabled: self.si_enabled,
            activation: "relu".into(),
        }
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            rate_hz: Some(self.rate_hz),
            teacher_forcing: self.teacher_forcing,
            loss_variant: self.loss_variant,
            ..CheckpointMeta::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!("learning_rate={} must be finite and nonnegative", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay={} must be finite and nonnegative", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be positive".into());
        }
        if !(self.rate_hz.is_finite() && self.rate_hz > 0.0) {
            return fail(format!("rate_hz={} must be positive", self.rate_hz));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction={} must lie in [0, 1)", self.val_fraction));
        }
        self.model_config().validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    fn decoding(&self) -> Decoding {
        if self.teacher_forcing {
            Decoding::TeacherForced
        } else {
            Decoding::FreeRunning
        }
    }
}

/// Deterministic, order-independent hold-out: a scene is in the validation
/// split when the first 8 bytes of SHA-256(scene_id), read as a fraction of
/// 2⁶⁴, fall below `val_fraction`.
pub fn is_validation(scene_id: &str, val_fraction: f64) -> bool {
    let digest = Sha256::digest(scene_id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(head) as f64 / 2f64.powi(64)) < val_fraction
}

pub fn split_scenes(scenes: &[Scene], val_fraction: f64) -> (Vec<&Scene>, Vec<&Scene>) {
    scenes.iter().partition(|s| !is_validation(&s.scene_id, val_fraction))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
    pub val_min_ade: Option<f64>,
    pub val_min_fde: Option<f64>,
    pub wall_ms_per_step: f64,
}

pub const LOG_HEADER: &str = "epoch,step,loss_cls,loss_reg,loss,val_minADE,val_minFDE,wall_ms_per_step";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.loss.cls,
            self.loss.reg,
            self.loss.total,
            opt(self.val_min_ade),
            opt(self.val_min_fde),
            self.wall_ms_per_step
        )
    }
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Mean batch loss before each optimizer step, indexed from step 1.
    pub step_losses: Vec<(u64, LossBreakdown)>,
}

fn check_scenes(cfg: &TrainConfig, scenes: &[&Scene]) -> Result<()> {
    for s in scenes {
        if !s.is_labeled() {
            return Err(TrainError::MissingFuture(s.scene_id.clone()));
        }
        let bad = |msg: String| {
            Err(TrainError::Incompatible {
                scene: s.scene_id.clone(),
                msg,
            })
        };
        if s.t_h() != cfg.t_h {
            return bad(format!("T_h={} but config has {}", s.t_h(), cfg.t_h));
        }
        if s.t_f() != Some(cfg.t_f) {
            return bad(format!("T_f={:?} but config has {}", s.t_f(), cfg.t_f));
        }
        if (s.rate_hz - cfg.rate_hz).abs() > 1e-9 {
            return bad(format!("rate_hz={} but config has {}", s.rate_hz, cfg.rate_hz));
        }
    }
    Ok(())
}

/// Mean over scenes of the loss, in scene order.
pub fn mean_loss(params: &ParamRegistry<f64>, cfg: &TrainConfig, inputs: &[SceneInputs]) -> Result<LossBreakdown> {
    let mcfg = cfg.model_config();
    let losses: Vec<LossBreakdown> = inputs
        .par_iter()
        .map(|x| model::loss_value(params, &mcfg, x, cfg.decoding(), cfg.loss_variant))
        .collect::<std::result::Result<_, _>>()?;
    Ok(average(&losses))
}

fn average(losses: &[LossBreakdown]) -> LossBreakdown {
    let n = losses.len().max(1) as f64;
    let mut acc = LossBreakdown {
        cls: 0.0,
        reg: 0.0,
        total: 0.0,
    };
    for l in losses {
        acc.cls += l.cls;
        acc.reg += l.reg;
        acc.total += l.total;
    }
    LossBreakdown {
        cls: acc.cls / n,
        reg: acc.reg / n,
        total: acc.total / n,
    }
}

/// Free-running minADE / minFDE over labeled scenes.
pub fn evaluate_displacement(params: &ParamRegistry<f64>, cfg: &ModelConfig, scenes: &[&Scene]) -> Result<(f64, f64)> {
    let evals: Vec<Vec<metrics::AgentEval>> = scenes
        .par_iter()
        .map(|s| {
            let pred = model::predict(params, cfg, s)?;
            Ok(model::agent_evals(s, &pred))
        })
        .collect::<Result<_>>()?;
    let evals: Vec<_> = evals.into_iter().flatten().collect();
    if evals.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let n = evals.len() as f64;
    let (mut a, mut f) = (0.0, 0.0);
    for e in &evals {
        a += metrics::min_ade(&e.modes, &e.gt).map_err(|e| TrainError::Config(e.to_string()))?;
        f += metrics::min_fde(&e.modes, &e.gt).map_err(|e| TrainError::Config(e.to_string()))?;
    }
    Ok((a / n, f / n))
}

fn all_finite(grads: &ParamGrads<f64>) -> bool {
    grads.values().all(|g| g.iter().all(|v| v.is_finite()))
}

/// Runs Adam over the training split. With `resume`, parameters and
/// optimizer moments continue from the checkpoint's step.
pub fn train(cfg: &TrainConfig, scenes: &[Scene], resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    train_with(cfg, scenes, resume, |_| {})
}

pub fn train_with(
    cfg: &TrainConfig,
    scenes: &[Scene],
    resume: Option<&Checkpoint>,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = cfg.model_config();
    let (train_set, val_set) = split_scenes(scenes, cfg.val_fraction);
    check_scenes(cfg, &train_set)?;
    check_scenes(cfg, &val_set)?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let inputs: Vec<SceneInputs> = train_set.iter().map(|s| SceneInputs::from_scene(s)).collect();

    let (mut params, mut opt) = match resume {
        Some(ck) => {
            if ck.hyperparams != mcfg {
                return Err(TrainError::Config("resume checkpoint hyperparameters differ from config".into()));
            }
            let state = ck
                .optimizer
                .as_ref()
                .ok_or_else(|| TrainError::Config("resume checkpoint has no optimizer state".into()))?;
            (
                ck.registry()?,
                Adam::from_state(cfg.learning_rate, cfg.weight_decay, state),
            )
        }
        None => (
            model::init_params(&mcfg, cfg.seed)?,
            Adam::new(cfg.learning_rate, cfg.weight_decay),
        ),
    };
    let snapshot = |params: &ParamRegistry<f64>, opt: &Adam| {
        let mut ck = Checkpoint::new(&mcfg, cfg.meta(), params);
        ck.optimizer = Some(opt.state());
        ck
    };

    let validate = |params: &ParamRegistry<f64>| -> Result<(Option<f64>, Option<f64>)> {
        if val_set.is_empty() {
            return Ok((None, None));
        }
        let (a, f) = evaluate_displacement(params, &mcfg, &val_set)?;
        Ok((Some(a), Some(f)))
    };

    let batches_per_epoch = inputs.len().div_ceil(cfg.batch_size) as u64;
    let max_steps = cfg.max_steps.unwrap_or(u64::MAX).min(batches_per_epoch * cfg.epochs as u64);
    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    let mut step = opt.step_count();

    if step == 0 {
        let initial = mean_loss(&params, cfg, &inputs)?;
        if !initial.total.is_finite() {
            return Err(TrainError::DivergenceDetected {
                step,
                last_good: Box::new(snapshot(&params, &opt)),
            });
        }
        let (va, vf) = validate(&params)?;
        let row = LogRow {
            epoch: 0,
            step: 0,
            loss: initial,
            val_min_ade: va,
            val_min_fde: vf,
            wall_ms_per_step: 0.0,
        };
        on_row(&row);
        log.push(row);
    }

    while step < max_steps {
        let epoch = (step / batches_per_epoch) as usize;
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let first_batch = (step % batches_per_epoch) as usize;
        let started = Instant::now();
        let mut epoch_losses = Vec::new();
        for batch in order.chunks(cfg.batch_size).skip(first_batch) {
            if step >= max_steps {
                break;
            }
            let results: Vec<(LossBreakdown, ParamGrads<f64>)> = batch
                .par_iter()
                .map(|&i| model::loss_and_grads(&params, &mcfg, &inputs[i], cfg.decoding(), cfg.loss_variant))
                .collect::<std::result::Result<_, _>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads = ParamGrads::<f64>::new();
            for (_, g) in &results {
                for (name, v) in g {
                    let acc = grads.entry(name.clone()).or_insert_with(|| vec![0.0; v.len()]);
                    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                }
            }
            grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
            let losses: Vec<LossBreakdown> = results.iter().map(|r| r.0).collect();
            let batch_loss = average(&losses);
            if !batch_loss.total.is_finite() || !all_finite(&grads) {
                return Err(TrainError::DivergenceDetected {
                    step,
                    last_good: Box::new(snapshot(&params, &opt)),
                });
            }
            opt.update(&mut params, &grads);
            step += 1;
            step_losses.push((step, batch_loss));
            epoch_losses.push(batch_loss);
        }
        let steps_run = epoch_losses.len().max(1) as f64;
        let wall = started.elapsed().as_secs_f64() * 1e3 / steps_run;
        let (va, vf) = validate(&params)?;
        let row = LogRow {
            epoch: epoch + 1,
            step,
            loss: average(&epoch_losses),
            val_min_ade: va,
            val_min_fde: vf,
            wall_ms_per_step: wall,
        };
        on_row(&row);
        log.push(row);
    }

    Ok(TrainOutcome {
        checkpoint: snapshot(&params, &opt),
        log,
        step_losses,
    })
}
