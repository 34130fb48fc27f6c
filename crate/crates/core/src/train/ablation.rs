//! Paired training runs with and without the keypoint encoder.

use serde::{Deserialize, Serialize};

use super::synth::{generate_synthetic, SyntheticSpec};
use super::{evaluate_displacement, split_scenes, train, Result, TrainConfig, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(rename = "minADE")]
    pub min_ade: f64,
    #[serde(rename = "minFDE")]
    pub min_fde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub si_enabled: bool,
    pub per_seed: Vec<SeedResult>,
    #[serde(rename = "median_minADE")]
    pub median_min_ade: f64,
    #[serde(rename = "median_minFDE")]
    pub median_min_fde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub with_si: ArmReport,
    pub without_si: ArmReport,
    /// `with_si / without_si` of the median minADE.
    pub ratio_min_ade: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn arm(si_enabled: bool, per_seed: Vec<SeedResult>) -> ArmReport {
    let ades: Vec<f64> = per_seed.iter().map(|r| r.min_ade).collect();
    let fdes: Vec<f64> = per_seed.iter().map(|r| r.min_fde).collect();
    ArmReport {
        si_enabled,
        median_min_ade: median(&ades),
        median_min_fde: median(&fdes),
        per_seed,
    }
}

/// For each seed, generates a corpus from that seed and trains both arms on
/// it with the same initialization seed; reports validation metrics.
pub fn ablate_si(spec: &SyntheticSpec, cfg: &TrainConfig, seeds: &[u64]) -> Result<AblationReport> {
    if spec.intent_lead_steps == 0 {
        return Err(TrainError::Config("ablation needs intent_lead_steps >= 1".into()));
    }
    let mut with = Vec::new();
    let mut without = Vec::new();
    for &seed in seeds {
        let scenes = generate_synthetic(spec, seed).map_err(|e| TrainError::Config(e.to_string()))?;
        let (_, val) = split_scenes(&scenes, cfg.val_fraction);
        if val.is_empty() {
            return Err(TrainError::Config("validation split is empty".into()));
        }
        for (si, out) in [(true, &mut with), (false, &mut without)] {
            let arm_cfg = TrainConfig {
                si_enabled: si,
                seed,
                ..cfg.clone()
            };
            let trained = train(&arm_cfg, &scenes, None)?;
            let params = trained.checkpoint.registry()?;
            let (min_ade, min_fde) = evaluate_displacement(&params, &arm_cfg.model_config(), &val)?;
            out.push(SeedResult { seed, min_ade, min_fde });
        }
    }
    let (with_si, without_si) = (arm(true, with), arm(false, without));
    Ok(AblationReport {
        ratio_min_ade: with_si.median_min_ade / without_si.median_min_ade,
        with_si,
        without_si,
    })
}
