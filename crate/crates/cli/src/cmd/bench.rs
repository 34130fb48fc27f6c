use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use silm_core::model::{predict_inputs, ModelConfig, SceneInputs};
use silm_core::tensor::{ParamRegistry, Real};
use silm_core::train::synth::{generate_synthetic, SyntheticSpec};

use super::{create, load_checkpoint};
use crate::error::{checkpoint_error, model_error, CliError, Result};
use crate::Precision;

pub const DEFAULT_SWEEP: [usize; 4] = [1, 8, 32, 128];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub n_agents: usize,
    pub t_h: usize,
    pub t_f: usize,
    pub modes: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub threads: usize,
    pub precision: Precision,
}

pub const CSV_HEADER: &str = "n_agents,t_h,t_f,modes,p50_ms,p95_ms,p99_ms,threads,precision";

impl BenchResult {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{},{}",
            self.n_agents,
            self.t_h,
            self.t_f,
            self.modes,
            self.p50_ms,
            self.p95_ms,
            self.p99_ms,
            self.threads,
            self.precision.as_str()
        )
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub sweep: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub precision: Precision,
}

fn time_forward<F: Real>(params: &ParamRegistry<F>, cfg: &ModelConfig, inputs: &SceneInputs, args: &BenchArgs) -> Result<Vec<f64>> {
    for _ in 0..args.warmup {
        predict_inputs(params, cfg, inputs).map_err(model_error)?;
    }
    let mut ms = Vec::with_capacity(args.repeats);
    for _ in 0..args.repeats {
        let start = Instant::now();
        let out = predict_inputs(params, cfg, inputs).map_err(model_error)?;
        ms.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    ms.sort_by(f64::total_cmp);
    Ok(ms)
}

/// Per-scene forward latency over the sweep of agent counts, on synthetic
/// scenes shaped like the checkpoint's training data.
pub fn sweep(params: &ParamRegistry<f64>, cfg: &ModelConfig, rate_hz: f64, args: &BenchArgs) -> Result<Vec<BenchResult>> {
    if args.repeats == 0 {
        return Err(CliError::invalid("repeats must be positive"));
    }
    let params32 = params.cast::<f32>();
    let mut rows = Vec::with_capacity(args.sweep.len());
    for &n in &args.sweep {
        if n == 0 {
            return Err(CliError::invalid("agent counts must be positive"));
        }
        let spec = SyntheticSpec {
            n_scenes: 1,
            agents_per_scene: [n, n],
            t_h: cfg.t_h,
            t_f: cfg.t_f,
            rate_hz,
            intent_lead_steps: cfg.t_h.min(SyntheticSpec::default().intent_lead_steps),
            ..SyntheticSpec::default()
        };
        let scene = generate_synthetic(&spec, args.seed).map_err(|e| CliError::invalid(e.to_string()))?;
        let inputs = SceneInputs::from_scene(&scene[0]);
        let ms = match args.precision {
            Precision::F64 => time_forward(params, cfg, &inputs, args)?,
            Precision::F32 => time_forward(&params32, cfg, &inputs, args)?,
        };
        rows.push(BenchResult {
            n_agents: n,
            t_h: cfg.t_h,
            t_f: cfg.t_f,
            modes: cfg.modes,
            p50_ms: percentile(&ms, 50.0),
            p95_ms: percentile(&ms, 95.0),
            p99_ms: percentile(&ms, 99.0),
            threads: rayon::current_num_threads(),
            precision: args.precision,
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn run(checkpoint: &Path, args: &BenchArgs, out: Option<&Path>) -> Result<Vec<BenchResult>> {
    let ck = load_checkpoint(checkpoint)?;
    let params = ck.registry().map_err(|e| checkpoint_error(checkpoint, e))?;
    let rows = sweep(&params, &ck.hyperparams, ck.meta.rate_hz.unwrap_or(2.0), args)?;
    if let Some(p) = out {
        use std::io::Write;
        let mut w = create(p)?;
        w.write_all(to_csv(&rows).as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| CliError::io(p, e))?;
    }
    Ok(rows)
}
