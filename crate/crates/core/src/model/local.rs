//! Per-agent spatiotemporal encoder: trajectory embedding, radius-gated
//! spatial attention per timestep, and a causal temporal block.

use super::{cast_vec, ModelConfig, Result, SceneInputs};
use crate::tensor::nn::{causal_mask, layer_norm, mlp_forward, projected_attention};
use crate::tensor::{Graph, ParamRegistry, Real, Var};

/// For every `(t, i)`, the agents `j ≠ i` within `gamma` of `i` at step `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    n: usize,
    t_h: usize,
    sets: Vec<Vec<usize>>,
}

impl NeighborSets {
    /// `positions` is `(N, T_h, 2)`.
    pub fn from_positions(positions: &[f64], n: usize, t_h: usize, gamma: f64) -> Self {
        let pos = |i: usize, t: usize| {
            let k = 2 * (i * t_h + t);
            (positions[k], positions[k + 1])
        };
        let mut sets = Vec::with_capacity(n * t_h);
        for t in 0..t_h {
            for i in 0..n {
                let (xi, yi) = pos(i, t);
                sets.push(
                    (0..n)
                        .filter(|&j| {
                            let (xj, yj) = pos(j, t);
                            j != i && (xj - xi).hypot(yj - yi) <= gamma
                        })
                        .collect(),
                );
            }
        }
        Self { n, t_h, sets }
    }

    pub fn get(&self, i: usize, t: usize) -> &[usize] {
        &self.sets[t * self.n + i]
    }

    /// Additive mask `(T_h, 1, N, N)`: 0 for neighbors, `-inf` elsewhere.
    fn mask<F: Real>(&self) -> Vec<F> {
        let n = self.n;
        let mut m = vec![F::neg_infinity(); self.t_h * n * n];
        for t in 0..self.t_h {
            for i in 0..n {
                for &j in self.get(i, t) {
                    m[(t * n + i) * n + j] = F::zero();
                }
            }
        }
        m
    }
}

/// `[MLP(node features) ; pose]` of shape `(N, T_h, 2·d_h)`.
pub fn embed_and_concat<'a, F: Real>(
    g: &mut Graph<'a, F>,
    params: &'a ParamRegistry<F>,
    inputs: &SceneInputs,
    pose: Var,
) -> Result<Var> {
    let nodes = g.constant(vec![inputs.n, inputs.t_h, 5], cast_vec(&inputs.node_features))?;
    let z_tra = mlp_forward(g, params, "local.mlp", nodes)?;
    Ok(g.concat(&[z_tra, pose], 2)?)
}

/// Attention over each agent's neighbors at each timestep, blended with the
/// input by `alpha`. Rows without neighbors pass through unchanged.
pub fn spatial_attend<'a, F: Real>(
    g: &mut Graph<'a, F>,
    params: &'a ParamRegistry<F>,
    cfg: &ModelConfig,
    z_con: Var,
    neighbors: &NeighborSets,
) -> Result<Var> {
    let (n, t_h) = (neighbors.n, neighbors.t_h);
    let by_time = g.permute(z_con, &[1, 0, 2])?;
    let mask = g.constant(vec![t_h, 1, n, n], neighbors.mask())?;
    let att = projected_attention(
        g,
        params,
        "local.spa",
        by_time,
        by_time,
        cfg.heads,
        cfg.interaction_scale(),
        Some(mask),
    )?;
    let alpha = F::lit(cfg.alpha);
    let mut w_att = Vec::with_capacity(t_h * n);
    for t in 0..t_h {
        for i in 0..n {
            let has = !neighbors.get(i, t).is_empty();
            w_att.push(if has { F::one() - alpha } else { F::zero() });
        }
    }
    let w_self: Vec<F> = w_att.iter().map(|&w| F::one() - w).collect();
    let w_att = g.constant(vec![t_h, n, 1], w_att)?;
    let w_self = g.constant(vec![t_h, n, 1], w_self)?;
    let keep = g.mul(by_time, w_self)?;
    let mixed = g.mul(att, w_att)?;
    let out = g.add(keep, mixed)?;
    Ok(g.permute(out, &[1, 0, 2])?)
}

/// Positional embedding plus one causally masked transformer block per agent.
pub fn temporal_attend<'a, F: Real>(
    g: &mut Graph<'a, F>,
    params: &'a ParamRegistry<F>,
    cfg: &ModelConfig,
    z_spa: Var,
) -> Result<Var> {
    let t_h = g.shape(z_spa)[1];
    let pos = g.param(params, "local.pos")?;
    let pos = g.slice(pos, 0, 0, t_h)?;
    let x = g.add(z_spa, pos)?;
    let mask = g.constant(vec![t_h, t_h], causal_mask(t_h))?;
    let a = projected_attention(
        g,
        params,
        "local.tem",
        x,
        x,
        cfg.heads,
        cfg.interaction_scale(),
        Some(mask),
    )?;
    let h = g.add(x, a)?;
    let h = layer_norm(g, params, "local.tem.ln1", h)?;
    let f = mlp_forward(g, params, "local.tem.ffn", h)?;
    let h = g.add(h, f)?;
    Ok(layer_norm(g, params, "local.tem.ln2", h)?)
}

/// The last observed step of the local sequence, `(N, 2·d_h)`.
pub fn local_final<F: Real>(g: &mut Graph<'_, F>, local_seq: Var) -> Result<Var> {
    let s = g.shape(local_seq).to_vec();
    let last = g.slice(local_seq, 1, s[1] - 1, 1)?;
    Ok(g.reshape(last, vec![s[0], s[2]])?)
}
