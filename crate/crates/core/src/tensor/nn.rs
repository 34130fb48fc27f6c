//! Layers composed from graph primitives.

use super::{mismatch, Graph, Init, ParamRegistry, ParamSpec, Real, Result, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x · w (+ b)` with `w` laid out `(in, out)`.
pub fn linear<F: Real>(g: &mut Graph<'_, F>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

/// Parameter specs for an MLP `dims[0] → dims[1] → … → dims[last]` stored as
/// `{prefix}.{i}.w` / `{prefix}.{i}.b`.
pub fn mlp_specs(prefix: &str, dims: &[usize]) -> Vec<ParamSpec> {
    dims.windows(2)
        .enumerate()
        .flat_map(|(i, d)| {
            [
                ParamSpec::new(format!("{prefix}.{i}.w"), vec![d[0], d[1]], Init::Xavier),
                ParamSpec::new(format!("{prefix}.{i}.b"), vec![d[1]], Init::Zeros),
            ]
        })
        .collect()
}

/// Affine layers with ReLU between them; the last layer has no activation.
pub fn mlp_forward<'a, F: Real>(
    g: &mut Graph<'a, F>,
    params: &'a ParamRegistry<F>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let depth = (0..)
        .take_while(|i| params.get(&format!("{prefix}.{i}.w")).is_some())
        .count();
    if depth == 0 {
        return Err(TensorError::UnknownParam(format!("{prefix}.0.w")));
    }
    let mut h = x;
    for i in 0..depth {
        let w = g.param(params, &format!("{prefix}.{i}.w"))?;
        let b = g.param(params, &format!("{prefix}.{i}.b"))?;
        h = linear(g, h, w, Some(b))?;
        if i + 1 < depth {
            h = g.relu(h);
        }
    }
    Ok(h)
}

pub fn layer_norm_specs(prefix: &str, width: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.g"), vec![width], Init::Ones),
        ParamSpec::new(format!("{prefix}.b"), vec![width], Init::Zeros),
    ]
}

pub fn layer_norm<'a, F: Real>(
    g: &mut Graph<'a, F>,
    params: &'a ParamRegistry<F>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let n = g.layer_norm(x, F::lit(LAYER_NORM_EPS))?;
    let gain = g.param(params, &format!("{prefix}.g"))?;
    let bias = g.param(params, &format!("{prefix}.b"))?;
    let y = g.mul(n, gain)?;
    g.add(y, bias)
}

/// `softmax(q·kᵀ·scale + mask)·v` for `q (B, Lq, D)`, `k (B, Lk, D)`,
/// `v (B, Lk, Dv)`. The mask must broadcast to `(B, Lq, Lk)` and hold 0 or
/// `-inf`.
pub fn attention<F: Real>(
    g: &mut Graph<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
    scale: F,
) -> Result<Var> {
    multi_head_attention(g, q, k, v, 1, scale, mask)
}

/// Multi-head scaled dot-product attention. Channels are split evenly across
/// heads and re-concatenated; there is no output projection here. With more
/// than one head the mask must broadcast to `(B, H, Lq, Lk)`.
pub fn multi_head_attention<F: Real>(
    g: &mut Graph<'_, F>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale: F,
    mask: Option<Var>,
) -> Result<Var> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
        return Err(mismatch("attention", &sq, &sk));
    }
    let (b, lq, d) = (sq[0], sq[1], sq[2]);
    let (lk, dv) = (sk[1], sv[2]);
    if sk[0] != b || sv[0] != b || sk[2] != d || sv[1] != lk {
        return Err(mismatch("attention", &sq, &sk));
    }
    if heads == 0 || d % heads != 0 || dv % heads != 0 {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: format!("{heads} heads do not divide widths {d}/{dv}"),
        });
    }
    let split = |g: &mut Graph<'_, F>, x: Var, len: usize, width: usize| -> Result<Var> {
        if heads == 1 {
            return g.reshape(x, vec![b, 1, len, width]);
        }
        let r = g.reshape(x, vec![b, len, heads, width / heads])?;
        g.permute(r, &[0, 2, 1, 3])
    };
    let qh = split(g, q, lq, d)?;
    let kh = split(g, k, lk, d)?;
    let vh = split(g, v, lk, dv)?;
    let kt = g.transpose(kh)?;
    let scores = g.matmul(qh, kt)?;
    let mut scores = g.scale(scores, scale);
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let weights = g.softmax(scores)?;
    let out = g.matmul(weights, vh)?;
    let merged = if heads == 1 {
        out
    } else {
        g.permute(out, &[0, 2, 1, 3])?
    };
    g.reshape(merged, vec![b, lq, dv])
}

/// Additive mask of shape `(len, len)`: query `v` may attend key `u` only when
/// `u ≤ v`.
pub fn causal_mask<F: Real>(len: usize) -> Vec<F> {
    let mut m = vec![F::zero(); len * len];
    for v in 0..len {
        for u in v + 1..len {
            m[v * len + u] = F::neg_infinity();
        }
    }
    m
}

/// Specs for bias-free query/key/value(/output) projections.
pub fn projection_specs(prefix: &str, d_in_q: usize, d_in_kv: usize, d_out: usize, with_output: bool) -> Vec<ParamSpec> {
    let mut specs = vec![
        ParamSpec::new(format!("{prefix}.wq"), vec![d_in_q, d_out], Init::Xavier),
        ParamSpec::new(format!("{prefix}.wk"), vec![d_in_kv, d_out], Init::Xavier),
        ParamSpec::new(format!("{prefix}.wv"), vec![d_in_kv, d_out], Init::Xavier),
    ];
    if with_output {
        specs.push(ParamSpec::new(format!("{prefix}.wo"), vec![d_out, d_out], Init::Xavier));
    }
    specs
}

/// Projects `x_q` and `x_kv` with `{prefix}.wq/wk/wv`, attends, and applies
/// `{prefix}.wo` when the registry has it.
#[allow(clippy::too_many_arguments)]
pub fn projected_attention<'a, F: Real>(
    g: &mut Graph<'a, F>,
    params: &'a ParamRegistry<F>,
    prefix: &str,
    x_q: Var,
    x_kv: Var,
    heads: usize,
    scale: F,
    mask: Option<Var>,
) -> Result<Var> {
    let wq = g.param(params, &format!("{prefix}.wq"))?;
    let wk = g.param(params, &format!("{prefix}.wk"))?;
    let wv = g.param(params, &format!("{prefix}.wv"))?;
    let q = g.matmul(x_q, wq)?;
    let k = g.matmul(x_kv, wk)?;
    let v = g.matmul(x_kv, wv)?;
    let out = multi_head_attention(g, q, k, v, heads, scale, mask)?;
    let wo_name = format!("{prefix}.wo");
    if params.get(&wo_name).is_some() {
        let wo = g.param(params, &wo_name)?;
        g.matmul(out, wo)
    } else {
        Ok(out)
    }
}
