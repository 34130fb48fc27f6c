//! Local/global fusion, the multimodal autoregressive decoder, and the
//! training losses.

use serde::{Deserialize, Serialize};

use super::{cast_vec, ModelConfig, ModelError, Result};
use crate::tensor::nn::{causal_mask, layer_norm, linear, mlp_forward, projected_attention};
use crate::tensor::{Graph, ParamRegistry, Real, Tensor, Var};

/// Floor applied to probabilities before the log in the classification loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Decoder output for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet<F> {
    /// `(N, M, T_f, 4)`: `(μx, μy, bx, by)` in the ego frame.
    pub trajectories: Tensor<F>,
    /// `(N, M)`, rows sum to one.
    pub mode_probs: Tensor<F>,
}

impl<F: Real> PredictionSet<F> {
    pub fn num_agents(&self) -> usize {
        self.trajectories.shape()[0]
    }

    pub fn modes(&self) -> usize {
        self.trajectories.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.trajectories.shape()[2]
    }

    /// `(μx, μy, bx, by)` of agent `i`, mode `m`, step `t`.
    pub fn point(&self, i: usize, m: usize, t: usize) -> [F; 4] {
        let k = ((i * self.modes() + m) * self.horizon() + t) * 4;
        let d = &self.trajectories.data()[k..k + 4];
        [d[0], d[1], d[2], d[3]]
    }

    pub fn prob(&self, i: usize, m: usize) -> F {
        self.mode_probs.data()[i * self.modes() + m]
    }

    /// Means only, `(N, M, T_f, 2)` flattened, in f64.
    pub fn means_f64(&self) -> Vec<f64> {
        self.trajectories
            .data()
            .chunks(4)
            .flat_map(|p| [p[0].to_f64().unwrap_or(f64::NAN), p[1].to_f64().unwrap_or(f64::NAN)])
            .collect()
    }
}

/// Regression term of the training loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Summed per-step Euclidean error of the best mode.
    #[default]
    PaperL2,
    /// Laplace negative log-likelihood of the best mode, which also trains
    /// the scale channels.
    LaplaceNll,
}

/// Graph nodes of the three loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub cls: Var,
    pub reg: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values<F: Real>(&self, g: &Graph<'_, F>) -> LossBreakdown {
        let v = |x: Var| g.value(x)[0].to_f64().unwrap_or(f64::NAN);
        LossBreakdown {
            cls: v(self.cls),
            reg: v(self.reg),
            total: v(self.total),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

/// `δ·local + (1−δ)·global` with one sigmoid gate per `(agent, step)`.
pub fn fuse<'a, F: Real>(
    g: &mut Graph<'a, F>,
    params: &'a ParamRegistry<F>,
    local_seq: Var,
    z_glo: Var,
) -> Result<Var> {
    let s = g.shape(local_seq).to_vec();
    let (n, t_h, w) = (s[0], s[1], s[2]);
    let logits = mlp_forward(g, params, "pred.gate", z_glo)?;
    let delta = g.sigmoid(logits);
    let delta = g.reshape(delta, vec![n, t_h, 1])?;
    let neg = g.neg(delta);
    let rest = g.add_scalar(neg, F::one());
    let glo = g.reshape(z_glo, vec![n, 1, w])?;
    let a = g.mul(delta, local_seq)?;
    let b = g.mul(rest, glo)?;
    Ok(g.add(a, b)?)
}

/// Last observed kinematics that decoded offsets are measured from.
#[derive(Debug, Clone, Copy)]
pub struct Anchor<'v> {
    /// `(N, 2)` positions.
    pub position: &'v [f64],
    /// `(N, 2)` velocities, m/s.
    pub velocity: &'v [f64],
    /// Seconds per step.
    pub dt: f64,
}

impl Anchor<'_> {
    /// `(N, 1, T_f, 2)` constant-velocity offsets `v·dt·(t+1)`.
    fn constant_velocity<F: Real>(&self, t_f: usize) -> Vec<F> {
        self.velocity
            .chunks(2)
            .flat_map(|v| (1..=t_f).flat_map(move |t| [v[0] * self.dt * t as f64, v[1] * self.dt * t as f64]))
            .map(F::lit)
            .collect()
    }
}

/// Nodes produced by [`decode`].
#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    pub trajectories: Var,
    pub offsets: Var,
    pub mode_probs: Var,
}

/// One decoder pass over `L` steps given the previous-step offsets
/// `(N, M, L, 2)`. Returns states `(N, M, L, w)`.
fn decoder_pass<'a, F: Real>(
    g: &mut Graph<'a, F>,
    params: &'a ParamRegistry<F>,
    cfg: &ModelConfig,
    memory: Var,
    prev: Var,
) -> Result<Var> {
    let s = g.shape(prev).to_vec();
    let (n, m, len) = (s[0], s[1], s[2]);
    let w = cfg.width();
    let pw = g.param(params, "pred.prev.w")?;
    let pb = g.param(params, "pred.prev.b")?;
    let x = linear(g, prev, pw, Some(pb))?;
    let mq = g.param(params, "pred.mode_q")?;
    let mq = g.reshape(mq, vec![m, 1, w])?;
    let x = g.add(x, mq)?;
    let steps = g.param(params, "pred.step_emb")?;
    let steps = g.slice(steps, 0, 0, len)?;
    let x = g.add(x, steps)?;

    let scale = F::lit(1.0 / ((w / cfg.heads) as f64).sqrt());
    let x = g.reshape(x, vec![n * m, len, w])?;
    let mask = g.constant(vec![len, len], causal_mask(len))?;
    let sa = projected_attention(g, params, "pred.self", x, x, cfg.heads, scale, Some(mask))?;
    let h = g.add(x, sa)?;
    let h = layer_norm(g, params, "pred.ln1", h)?;

    let h = g.reshape(h, vec![n, m * len, w])?;
    let ca = projected_attention(g, params, "pred.cross", h, memory, cfg.heads, scale, None)?;
    let h = g.add(h, ca)?;
    let h = layer_norm(g, params, "pred.ln2", h)?;
    let f = mlp_forward(g, params, "pred.ffn", h)?;
    let h = g.add(h, f)?;
    let h = layer_norm(g, params, "pred.ln3", h)?;
    Ok(g.reshape(h, vec![n, m, len, w])?)
}

/// `(N, M, L, 4)` raw head output.
fn head<'a, F: Real>(g: &mut Graph<'a, F>, params: &'a ParamRegistry<F>, states: Var) -> Result<Var> {
    let w = g.param(params, "pred.head.w")?;
    let b = g.param(params, "pred.head.b")?;
    Ok(linear(g, states, w, Some(b))?)
}

/// Decodes `M` futures per agent. The head predicts a correction to the
/// constant-velocity extrapolation of each agent's last state. With `teacher`
/// (ground-truth offsets `(N, T_f, 2)` from each agent's last position) the
/// previous-step inputs come from the ground truth in a single pass;
/// otherwise each step feeds back the model's own previous mean.
pub fn decode<'a, F: Real>(
    g: &mut Graph<'a, F>,
    params: &'a ParamRegistry<F>,
    cfg: &ModelConfig,
    memory: Var,
    anchor: Anchor<'_>,
    teacher: Option<&[f64]>,
) -> Result<Decoded> {
    let n = g.shape(memory)[0];
    let (m, t_f) = (cfg.modes, cfg.t_f);
    let cv = g.constant(vec![n, 1, t_f, 2], anchor.constant_velocity(t_f))?;
    let (raw, states) = match teacher {
        Some(gt) => {
            if gt.len() != n * t_f * 2 {
                return Err(ModelError::HorizonMismatch {
                    scene: gt.len() / (2 * n.max(1)),
                    model: t_f,
                });
            }
            let mut prev = vec![F::zero(); n * m * t_f * 2];
            for i in 0..n {
                for k in 0..m {
                    for t in 1..t_f {
                        let dst = ((i * m + k) * t_f + t) * 2;
                        let src = (i * t_f + t - 1) * 2;
                        prev[dst] = F::lit(gt[src]);
                        prev[dst + 1] = F::lit(gt[src + 1]);
                    }
                }
            }
            let prev = g.constant(vec![n, m, t_f, 2], prev)?;
            let states = decoder_pass(g, params, cfg, memory, prev)?;
            (head(g, params, states)?, states)
        }
        None => {
            let start = g.constant(vec![n, m, 1, 2], vec![F::zero(); n * m * 2])?;
            let mut prev = start;
            let mut outs = Vec::with_capacity(t_f);
            let mut states = None;
            for len in 1..=t_f {
                let st = decoder_pass(g, params, cfg, memory, prev)?;
                let out = head(g, params, st)?;
                let step = g.slice(out, 2, len - 1, 1)?;
                outs.push(step);
                states = Some(st);
                if len < t_f {
                    let mu = g.slice(step, 3, 0, 2)?;
                    let base = g.slice(cv, 2, len - 1, 1)?;
                    let mu = g.add(mu, base)?;
                    prev = g.concat(&[prev, mu], 2)?;
                }
            }
            let raw = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 2)? };
            (raw, states.expect("t_f >= 1"))
        }
    };

    let offsets = g.slice(raw, 3, 0, 2)?;
    let offsets = g.add(offsets, cv)?;
    let raw_b = g.slice(raw, 3, 2, 2)?;
    let scales = g.softplus(raw_b);
    let origin = g.constant(vec![n, 1, 1, 2], cast_vec(anchor.position))?;
    let means = g.add(offsets, origin)?;
    let trajectories = g.concat(&[means, scales], 3)?;

    let pooled = g.mean_axis(states, 2)?;
    let pw = g.param(params, "pred.prob.w")?;
    let pb = g.param(params, "pred.prob.b")?;
    let logits = linear(g, pooled, pw, Some(pb))?;
    let logits = g.reshape(logits, vec![n, m])?;
    let mode_probs = g.softmax(logits)?;
    Ok(Decoded {
        trajectories,
        offsets,
        mode_probs,
    })
}

/// Per agent, the mode whose final-step mean is closest to the ground truth;
/// ties go to the lowest index. `means` is `(N, M, T_f, C)` with the mean in
/// the first two channels, `gt` is `(N, T_f, 2)`.
pub fn select_best_mode<F: Real>(means: &[F], channels: usize, n: usize, m: usize, t_f: usize, gt: &[f64]) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let g = &gt[(i * t_f + t_f - 1) * 2..][..2];
            let mut best = (0, f64::INFINITY);
            for k in 0..m {
                let p = &means[((i * m + k) * t_f + t_f - 1) * channels..][..2];
                let dx = p[0].to_f64().unwrap_or(f64::NAN) - g[0];
                let dy = p[1].to_f64().unwrap_or(f64::NAN) - g[1];
                let e = dx.hypot(dy);
                if e < best.1 {
                    best = (k, e);
                }
            }
            best.0
        })
        .collect()
}

/// Rows `i·M + best[i]` of a `(N, M, …)` tensor, as `(N, …)`.
fn gather_best<F: Real>(g: &mut Graph<'_, F>, x: Var, best: &[usize]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let m = s[1];
    let mut flat = vec![s[0] * m];
    flat.extend_from_slice(&s[2..]);
    let x = g.reshape(x, flat)?;
    let idx: Vec<usize> = best.iter().enumerate().map(|(i, &b)| i * m + b).collect();
    Ok(g.index_select(x, &idx)?)
}

/// Mean over agents of `−log p(best mode)`.
pub fn loss_cls<F: Real>(g: &mut Graph<'_, F>, mode_probs: Var, best: &[usize]) -> Result<Var> {
    let p = gather_best(g, mode_probs, best)?;
    let p = g.clamp_min(p, F::lit(PROB_FLOOR));
    let lp = g.log(p);
    let m = g.mean(lp);
    Ok(g.neg(m))
}

/// Best-mode error vectors `(N, T_f, 2)` for means `(N, M, T_f, ≥2)`.
fn best_errors<F: Real>(g: &mut Graph<'_, F>, traj: Var, gt: &[f64], best: &[usize]) -> Result<Var> {
    let sel = gather_best(g, traj, best)?;
    let mu = g.slice(sel, 2, 0, 2)?;
    let s = g.shape(mu).to_vec();
    let target = g.constant(s, cast_vec(gt))?;
    Ok(g.sub(mu, target)?)
}

/// Mean over agents of the summed per-step Euclidean error of the best mode.
pub fn loss_reg<F: Real>(g: &mut Graph<'_, F>, traj: Var, gt: &[f64], best: &[usize]) -> Result<Var> {
    let err = best_errors(g, traj, gt, best)?;
    let dist = g.norm_last(err)?;
    let total = g.sum(dist);
    Ok(g.scale(total, F::lit(1.0 / best.len() as f64)))
}

/// Mean over agents of `Σ |d|/b + ln(2b)` for the best mode.
pub fn laplace_nll<F: Real>(g: &mut Graph<'_, F>, traj: Var, gt: &[f64], best: &[usize]) -> Result<Var> {
    let err = best_errors(g, traj, gt, best)?;
    let sel = gather_best(g, traj, best)?;
    let b = g.slice(sel, 2, 2, 2)?;
    let a = g.abs(err);
    let ratio = g.div(a, b)?;
    let b2 = g.scale(b, F::lit(2.0));
    let lb = g.log(b2);
    let terms = g.add(ratio, lb)?;
    let total = g.sum(terms);
    Ok(g.scale(total, F::lit(1.0 / best.len() as f64)))
}

/// Classification plus regression loss against absolute ground truth
/// `(N, T_f, 2)`.
pub fn total_loss<F: Real>(
    g: &mut Graph<'_, F>,
    trajectories: Var,
    mode_probs: Var,
    gt: &[f64],
    variant: LossVariant,
) -> Result<LossVars> {
    let s = g.shape(trajectories).to_vec();
    let best = select_best_mode(g.value(trajectories), 4, s[0], s[1], s[2], gt);
    total_loss_given(g, trajectories, mode_probs, gt, variant, &best)
}

/// [`total_loss`] with the winning modes fixed in advance.
pub fn total_loss_given<F: Real>(
    g: &mut Graph<'_, F>,
    trajectories: Var,
    mode_probs: Var,
    gt: &[f64],
    variant: LossVariant,
    best: &[usize],
) -> Result<LossVars> {
    let cls = loss_cls(g, mode_probs, best)?;
    let reg = match variant {
        LossVariant::PaperL2 => loss_reg(g, trajectories, gt, best)?,
        LossVariant::LaplaceNll => laplace_nll(g, trajectories, gt, best)?,
    };
    let total = g.add(cls, reg)?;
    Ok(LossVars { cls, reg, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::{micro_params, random_values};

    fn probs(g: &mut Graph<'_, f64>, data: Vec<f64>, n: usize, m: usize) -> Var {
        g.constant(vec![n, m], data).unwrap()
    }

    #[test]
    fn cls_loss_values() {
        let mut g = Graph::<f64>::inference();
        let p = probs(&mut g, vec![0.0, 1.0], 1, 2);
        let l = loss_cls(&mut g, p, &[1]).unwrap();
        assert_eq!(g.value(l)[0], 0.0);
        let p = probs(&mut g, vec![0.5, 0.5], 1, 2);
        let l = loss_cls(&mut g, p, &[0]).unwrap();
        assert!((g.value(l)[0] - 0.693147).abs() < 1e-6);
        let p = probs(&mut g, vec![1.0, 0.0, 0.5, 0.5], 2, 2);
        let l = loss_cls(&mut g, p, &[0, 1]).unwrap();
        assert!((g.value(l)[0] - 0.346574).abs() < 1e-6);
    }

    #[test]
    fn cls_loss_floors_zero_probability() {
        let mut g = Graph::<f64>::inference();
        let p = probs(&mut g, vec![1.0, 0.0], 1, 2);
        let l = loss_cls(&mut g, p, &[1]).unwrap();
        assert!((g.value(l)[0] + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    fn traj(g: &mut Graph<'_, f64>, n: usize, m: usize, t_f: usize, f: impl Fn(usize, usize, usize) -> [f64; 2]) -> Var {
        let mut d = Vec::new();
        for i in 0..n {
            for k in 0..m {
                for t in 0..t_f {
                    let p = f(i, k, t);
                    d.extend([p[0], p[1], 1.0, 1.0]);
                }
            }
        }
        g.constant(vec![n, m, t_f, 4], d).unwrap()
    }

    #[test]
    fn reg_loss_values() {
        let mut g = Graph::<f64>::inference();
        let gt = vec![1.0, 1.0, 2.0, 2.0];
        let t = traj(&mut g, 1, 1, 2, |_, _, s| [1.0 + s as f64, 1.0 + s as f64]);
        let l = loss_reg(&mut g, t, &gt, &[0]).unwrap();
        assert_eq!(g.value(l)[0], 0.0);
        let t = traj(&mut g, 1, 1, 2, |_, _, s| [4.0 + s as f64, 5.0 + s as f64]);
        let l = loss_reg(&mut g, t, &gt, &[0]).unwrap();
        assert_eq!(g.value(l)[0], 10.0);
        let gt2 = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let t = traj(&mut g, 2, 1, 2, |i, _, _| if i == 0 { [3.0, 4.0] } else { [0.0, 0.0] });
        let l = loss_reg(&mut g, t, &gt2, &[0, 0]).unwrap();
        assert_eq!(g.value(l)[0], 5.0);
    }

    #[test]
    fn total_loss_sums_terms() {
        let mut g = Graph::<f64>::inference();
        let gt = vec![0.0, 0.0, 0.0, 0.0];
        let t = traj(&mut g, 1, 2, 2, |_, k, _| if k == 0 { [3.0, 4.0] } else { [30.0, 40.0] });
        let p = probs(&mut g, vec![0.5, 0.5], 1, 2);
        let l = total_loss(&mut g, t, p, &gt, LossVariant::PaperL2).unwrap().values(&g);
        assert!((l.total - 10.693147).abs() < 1e-6);
        assert_eq!(l.total, l.cls + l.reg);
        let t = traj(&mut g, 1, 2, 2, |_, k, _| if k == 0 { [0.0, 0.0] } else { [1.0, 0.0] });
        let p = probs(&mut g, vec![1.0, 0.0], 1, 2);
        assert_eq!(total_loss(&mut g, t, p, &gt, LossVariant::PaperL2).unwrap().values(&g).total, 0.0);
    }

    #[test]
    fn best_mode_selection() {
        let gt = vec![0.0, 0.0, 1.0, 1.0];
        let means = |finals: &[[f64; 2]]| -> Vec<f64> {
            finals.iter().flat_map(|f| [0.0, 0.0, f[0], f[1]]).collect()
        };
        let m = means(&[[3.0, 3.0], [1.0, 1.0], [0.0, 0.0]]);
        assert_eq!(select_best_mode(&m, 2, 1, 3, 2, &gt), vec![1]);
        let m = means(&[[2.0, 1.0], [1.0, 2.0]]);
        assert_eq!(select_best_mode(&m, 2, 1, 2, 2, &gt), vec![0]);
    }

    #[test]
    fn best_mode_matches_brute_force_and_scaling() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let (n, m, t_f) = (rng.random_range(1..4), 3, rng.random_range(1..5));
            let means: Vec<f64> = (0..n * m * t_f * 2).map(|_| rng.random_range(-5.0..5.0)).collect();
            let gt: Vec<f64> = (0..n * t_f * 2).map(|_| rng.random_range(-5.0..5.0)).collect();
            let got = select_best_mode(&means, 2, n, m, t_f, &gt);
            for i in 0..n {
                let err = |k: usize| {
                    let p = ((i * m + k) * t_f + t_f - 1) * 2;
                    let q = (i * t_f + t_f - 1) * 2;
                    ((means[p] - gt[q]).powi(2) + (means[p + 1] - gt[q + 1]).powi(2)).sqrt()
                };
                let want = (0..m).fold(0, |b, k| if err(k) < err(b) { k } else { b });
                assert_eq!(got[i], want);
            }
            // scaling every error about the ground truth keeps the argmin
            let c = rng.random_range(0.1..10.0);
            let scaled: Vec<f64> = means
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let (i, t, ch) = (k / (m * t_f * 2), (k / 2) % t_f, k % 2);
                    let g = gt[(i * t_f + t) * 2 + ch];
                    g + c * (v - g)
                })
                .collect();
            assert_eq!(select_best_mode(&scaled, 2, n, m, t_f, &gt), got);
        }
    }

    #[test]
    fn winner_take_all_isolates_gradients() {
        let (n, m, t_f) = (2, 3, 2);
        let data = random_values(n * m * t_f * 4, 3);
        let gt = random_values(n * t_f * 2, 4);
        let mut g = Graph::<f64>::new();
        let t = g.variable(vec![n, m, t_f, 4], data.clone()).unwrap();
        let p = g.variable(vec![n, m], vec![1.0 / 3.0; n * m]).unwrap();
        let l = total_loss(&mut g, t, p, &gt, LossVariant::PaperL2).unwrap();
        let best = select_best_mode(&data, 4, n, m, t_f, &gt);
        let grads = g.backward(l.total).unwrap();
        let gt_grad = grads.get(t).unwrap();
        for i in 0..n {
            for k in 0..m {
                for s in 0..t_f {
                    let base = ((i * m + k) * t_f + s) * 4;
                    assert_eq!(gt_grad[base + 2], 0.0);
                    assert_eq!(gt_grad[base + 3], 0.0);
                    if k != best[i] {
                        assert_eq!(gt_grad[base], 0.0);
                        assert_eq!(gt_grad[base + 1], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn laplace_variant_trains_scales() {
        let (n, m, t_f) = (1, 2, 2);
        let mut data = random_values(n * m * t_f * 4, 5);
        for c in data.chunks_mut(4) {
            c[2] = c[2].abs() + 0.5;
            c[3] = c[3].abs() + 0.5;
        }
        let gt = random_values(n * t_f * 2, 6);
        let mut g = Graph::<f64>::new();
        let t = g.variable(vec![n, m, t_f, 4], data).unwrap();
        let p = g.variable(vec![n, m], vec![0.5, 0.5]).unwrap();
        let l = total_loss(&mut g, t, p, &gt, LossVariant::LaplaceNll).unwrap();
        let grads = g.backward(l.total).unwrap();
        assert!(grads.get(t).unwrap().chunks(4).any(|c| c[2] != 0.0));
    }

    #[test]
    fn gate_extremes_select_one_source() {
        let cfg = ModelConfig::micro();
        let (n, t_h, w) = (2, cfg.t_h, cfg.width());
        let local = random_values(n * t_h * w, 1);
        let glo = random_values(n * w, 2);
        for (bias, want_local) in [(1e3, true), (-1e3, false)] {
            let mut params = micro_params(&cfg, 3);
            params.get_mut("pred.gate.1.w").unwrap().data_mut().fill(0.0);
            params.get_mut("pred.gate.1.b").unwrap().data_mut().fill(bias);
            let mut g = Graph::<f64>::inference();
            let l = g.constant(vec![n, t_h, w], local.clone()).unwrap();
            let z = g.constant(vec![n, w], glo.clone()).unwrap();
            let f = fuse(&mut g, &params, l, z).unwrap();
            let out = g.value(f);
            for i in 0..n {
                for t in 0..t_h {
                    for c in 0..w {
                        let want = if want_local { local[(i * t_h + t) * w + c] } else { glo[i * w + c] };
                        assert_eq!(out[(i * t_h + t) * w + c], want);
                    }
                }
            }
        }
    }

    #[test]
    fn half_gate_is_midpoint() {
        let cfg = ModelConfig::micro();
        let (n, t_h, w) = (2, cfg.t_h, cfg.width());
        let local = random_values(n * t_h * w, 1);
        let glo = random_values(n * w, 2);
        let mut params = micro_params(&cfg, 3);
        params.get_mut("pred.gate.1.w").unwrap().data_mut().fill(0.0);
        params.get_mut("pred.gate.1.b").unwrap().data_mut().fill(0.0);
        let mut g = Graph::<f64>::inference();
        let l = g.constant(vec![n, t_h, w], local.clone()).unwrap();
        let z = g.constant(vec![n, w], glo.clone()).unwrap();
        let f = fuse(&mut g, &params, l, z).unwrap();
        for i in 0..n {
            for t in 0..t_h {
                for c in 0..w {
                    let want = 0.5 * (local[(i * t_h + t) * w + c] + glo[i * w + c]);
                    assert!((g.value(f)[(i * t_h + t) * w + c] - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn free_running_matches_teacher_forcing_on_own_outputs() {
        // feeding the model's own free-running offsets as the "ground truth"
        // must reproduce the free-running decode exactly
        let cfg = ModelConfig::micro();
        let params = micro_params(&cfg, 8);
        let n = 2;
        let mem = random_values(n * cfg.t_h * cfg.width(), 9);
        let last = vec![1.0, 2.0, -3.0, 0.5];
        let vel = vec![4.0, -1.0, 0.0, 2.5];
        let anchor = Anchor {
            position: &last,
            velocity: &vel,
            dt: 0.5,
        };
        let mut g = Graph::<f64>::inference();
        let memory = g.constant(vec![n, cfg.t_h, cfg.width()], mem).unwrap();
        let free = decode(&mut g, &params, &cfg, memory, anchor, None).unwrap();
        let off = g.value(free.offsets).to_vec();
        for k in 1..cfg.modes {
            let mut tf = Vec::new();
            for i in 0..n {
                let base = (i * cfg.modes + k) * cfg.t_f * 2;
                tf.extend_from_slice(&off[base..base + cfg.t_f * 2]);
            }
            let forced = decode(&mut g, &params, &cfg, memory, anchor, Some(&tf)).unwrap();
            let fo = g.value(forced.offsets);
            for i in 0..n {
                let base = (i * cfg.modes + k) * cfg.t_f * 2;
                for j in 0..cfg.t_f * 2 {
                    assert!((fo[base + j] - off[base + j]).abs() < 1e-12);
                }
            }
        }
        assert_eq!(g.shape(free.trajectories), &[n, cfg.modes, cfg.t_f, 4]);
    }

    #[test]
    fn zero_head_extrapolates_constant_velocity() {
        let cfg = ModelConfig::micro();
        let mut params = micro_params(&cfg, 3);
        params.get_mut("pred.head.w").unwrap().data_mut().fill(0.0);
        let n = 2;
        let mem = random_values(n * cfg.t_h * cfg.width(), 4);
        let (pos, vel) = (vec![1.0, 2.0, -3.0, 0.5], vec![4.0, -1.0, 0.0, 2.5]);
        let anchor = Anchor {
            position: &pos,
            velocity: &vel,
            dt: 0.5,
        };
        let mut g = Graph::<f64>::inference();
        let memory = g.constant(vec![n, cfg.t_h, cfg.width()], mem).unwrap();
        let out = decode(&mut g, &params, &cfg, memory, anchor, None).unwrap();
        let traj = g.value(out.trajectories);
        for i in 0..n {
            for k in 0..cfg.modes {
                for t in 0..cfg.t_f {
                    let at = ((i * cfg.modes + k) * cfg.t_f + t) * 4;
                    let s = 0.5 * (t + 1) as f64;
                    assert!((traj[at] - (pos[2 * i] + vel[2 * i] * s)).abs() < 1e-12);
                    assert!((traj[at + 1] - (pos[2 * i + 1] + vel[2 * i + 1] * s)).abs() < 1e-12);
                }
            }
        }
    }
}
