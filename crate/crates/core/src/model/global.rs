//! Scene-level interaction at the last observed step: relative-pose edges and
//! edge-augmented attention over all agent pairs.

use super::{cast_vec, ModelConfig, Result};
use crate::scene::{wrap_angle, Scene};
use crate::tensor::nn::{layer_norm, mlp_forward, multi_head_attention};
use crate::tensor::{Graph, ParamRegistry, Real, Var};

/// `(Δx, Δy, Δvx, Δvy, cos Δθ, sin Δθ)` of `to` relative to `from`.
pub fn edge_feature(from: &crate::scene::AgentState, to: &crate::scene::AgentState) -> [f64; 6] {
    let dth = wrap_angle(to.yaw - from.yaw);
    [to.x - from.x, to.y - from.y, to.vx - from.vx, to.vy - from.vy, dth.cos(), dth.sin()]
}

/// Row-major `(N, N)` edges at the last observed step; entry `(i, j)` is `j`
/// relative to `i`. The diagonal holds the zero relative pose.
pub fn edge_features(scene: &Scene) -> Vec<[f64; 6]> {
    let last: Vec<_> = scene.tracks.iter().map(|t| t.last_state()).collect();
    last.iter()
        .flat_map(|a| last.iter().map(move |b| edge_feature(a, b)))
        .collect()
}

/// `LN(z_loc + attention)` where agent `i` queries every `j ≠ i` with keys and
/// values built from `[z_loc_j ; MLP(e_ij)]`. A single agent passes through.
pub fn global_attend<'a, F: Real>(
    g: &mut Graph<'a, F>,
    params: &'a ParamRegistry<F>,
    cfg: &ModelConfig,
    z_loc: Var,
    edges: &[f64],
) -> Result<Var> {
    let (n, w) = (g.shape(z_loc)[0], g.shape(z_loc)[1]);
    if n == 1 {
        return Ok(z_loc);
    }
    let e = g.constant(vec![n, n, 6], cast_vec(edges))?;
    let e = mlp_forward(g, params, "global.edge", e)?;
    let d_e = g.shape(e)[2];

    let mut kv = Vec::with_capacity(2);
    for name in ["global.wk", "global.wv"] {
        let full = g.param(params, name)?;
        let w_node = g.slice(full, 0, 0, w)?;
        let w_edge = g.slice(full, 0, w, d_e)?;
        let node = g.matmul(z_loc, w_node)?;
        let node = g.reshape(node, vec![1, n, w])?;
        let edge = g.matmul(e, w_edge)?;
        kv.push(g.add(edge, node)?);
    }
    let wq = g.param(params, "global.wq")?;
    let q = g.matmul(z_loc, wq)?;
    let q = g.reshape(q, vec![n, 1, w])?;

    let mut mask = vec![F::zero(); n * n];
    for i in 0..n {
        mask[i * n + i] = F::neg_infinity();
    }
    let mask = g.constant(vec![n, 1, 1, n], mask)?;
    let att = multi_head_attention(g, q, kv[0], kv[1], cfg.heads, cfg.interaction_scale(), Some(mask))?;
    let att = g.reshape(att, vec![n, w])?;
    let h = g.add(z_loc, att)?;
    Ok(layer_norm(g, params, "global.ln", h)?)
}
