//! Central finite-difference check of every parameter gradient.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::model::{self, Decoding, LossVariant, ModelConfig, Result, SceneInputs};
use crate::tensor::ParamRegistry;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor for the relative error, so gradients that are
    /// numerically zero compare on an absolute scale.
    pub floor: f64,
    pub decoding: Decoding,
    pub variant: LossVariant,
    /// Tampers with the analytic gradient before comparison; used as a
    /// negative control.
    pub corrupt: Option<fn(&str, &mut [f64])>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            floor: 1e-6,
            decoding: Decoding::TeacherForced,
            variant: LossVariant::PaperL2,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub max_rel_err: f64,
    /// `name[index]` of the worst scalar.
    pub worst: String,
    pub checked: usize,
    pub per_param: BTreeMap<String, f64>,
    pub all_finite: bool,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of the training loss on one scene with
/// central differences, holding the winning modes fixed.
pub fn grad_check(
    cfg: &ModelConfig,
    params: &ParamRegistry<f64>,
    inputs: &SceneInputs,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (loss, mut grads, best) = model::loss_and_grads_given(params, cfg, inputs, opts.decoding, opts.variant, None)?;
    if let Some(corrupt) = opts.corrupt {
        for (name, g) in grads.iter_mut() {
            corrupt(name, g);
        }
    }
    let all_finite = grads.values().all(|g| g.iter().all(|v| v.is_finite()));
    let targets: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |k| (name.to_string(), k)))
        .collect();
    let errors: Vec<f64> = targets
        .par_iter()
        .map_init(
            || params.clone(),
            |reg, (name, k)| -> Result<f64> {
                let set = |reg: &mut ParamRegistry<f64>, v: f64| {
                    if let Some(t) = reg.get_mut(name) {
                        t.data_mut()[*k] = v;
                    }
                };
                let orig = reg.get(name).map_or(0.0, |t| t.data()[*k]);
                set(reg, orig + opts.eps);
                let plus = model::loss_value_given(reg, cfg, inputs, opts.decoding, opts.variant, &best);
                set(reg, orig - opts.eps);
                let minus = model::loss_value_given(reg, cfg, inputs, opts.decoding, opts.variant, &best);
                set(reg, orig);
                let (plus, minus) = (plus?, minus?);
                let numeric = (plus - minus) / (2.0 * opts.eps);
                let analytic = grads.get(name).map_or(0.0, |g| g[*k]);
                Ok(relative_error(analytic, numeric, opts.floor))
            },
        )
        .collect::<Result<_>>()?;

    let mut per_param: BTreeMap<String, f64> = BTreeMap::new();
    let (mut worst, mut max_rel) = (String::new(), 0.0f64);
    for ((name, k), e) in targets.iter().zip(&errors) {
        let slot = per_param.entry(name.clone()).or_insert(0.0);
        *slot = slot.max(*e);
        if *e > max_rel || e.is_nan() {
            max_rel = if e.is_nan() { f64::INFINITY } else { *e };
            worst = format!("{name}[{k}]");
        }
    }
    Ok(GradCheckReport {
        loss,
        max_rel_err: max_rel,
        worst,
        checked: targets.len(),
        per_param,
        all_finite,
    })
}
