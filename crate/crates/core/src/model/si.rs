//! Keypoint intent encoder: one token per keypoint, one transformer block per
//! (agent, timestep), mean-pooled into a `d_h` pose embedding.

use super::{cast_vec, ModelConfig, Result, SceneInputs};
use crate::scene::{KeyPointFrame, NUM_KEYPOINTS};
use crate::tensor::nn::{layer_norm, linear, mlp_forward, projected_attention};
use crate::tensor::{Graph, ParamRegistry, Real, Var};

/// `(kx, ky, visible)` for each of the 9 keypoints.
pub fn frame_tokens(frame: &KeyPointFrame) -> Vec<f64> {
    frame
        .points
        .iter()
        .zip(&frame.visibility)
        .flat_map(|(p, &v)| [p[0], p[1], if v { 1.0 } else { 0.0 }])
        .collect()
}

/// Pose embeddings `(N, T_h, d_h)`.
pub fn encode_pose<'a, F: Real>(
    g: &mut Graph<'a, F>,
    params: &'a ParamRegistry<F>,
    cfg: &ModelConfig,
    inputs: &SceneInputs,
) -> Result<Var> {
    let (n, t_h, d) = (inputs.n, inputs.t_h, cfg.d_h);
    let b = n * t_h;
    let tokens = g.constant(vec![b, NUM_KEYPOINTS, 3], cast_vec(&inputs.pose_tokens))?;
    let tw = g.param(params, "si.tok.w")?;
    let tb = g.param(params, "si.tok.b")?;
    let x = linear(g, tokens, tw, Some(tb))?;
    let idx = g.param(params, "si.idx_emb")?;
    let x = g.add(x, idx)?;

    let cls_table = g.param(params, "si.cls_emb")?;
    let per_row: Vec<usize> = inputs
        .classes
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, t_h))
        .collect();
    let cls = g.index_select(cls_table, &per_row)?;
    let cls = g.reshape(cls, vec![b, 1, d])?;
    let x = g.add(x, cls)?;

    let scale = F::lit(1.0 / ((d / cfg.heads) as f64).sqrt());
    let a = projected_attention(g, params, "si.attn", x, x, cfg.heads, scale, None)?;
    let h = g.add(x, a)?;
    let h = layer_norm(g, params, "si.ln1", h)?;
    let f = mlp_forward(g, params, "si.ffn", h)?;
    let h = g.add(h, f)?;
    let h = layer_norm(g, params, "si.ln2", h)?;
    let pooled = g.mean_axis(h, 1)?;
    Ok(g.reshape(pooled, vec![n, t_h, d])?)
}

/// Learned constant `si.null` broadcast to `(N, T_h, d_h)`.
pub fn si_disabled_embedding<'a, F: Real>(
    g: &mut Graph<'a, F>,
    params: &'a ParamRegistry<F>,
    n: usize,
    t_h: usize,
) -> Result<Var> {
    let null = g.param(params, "si.null")?;
    let d = g.shape(null)[0];
    Ok(g.broadcast_to(null, vec![n, t_h, d])?)
}
