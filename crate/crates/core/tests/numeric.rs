use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use silm_core::tensor::nn::{attention, causal_mask, linear, mlp_forward, mlp_specs, multi_head_attention};
use silm_core::tensor::{Graph, ParamRegistry, Tensor, TensorError, Var};

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Central-difference check of `f` at `x0`; returns the max relative error
/// with magnitudes below `floor` compared absolutely.
fn fd_check(shape: &[usize], x0: &[f64], eps: f64, floor: f64, f: impl Fn(&mut Graph<'_, f64>, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let x = g.variable(shape.to_vec(), x0.to_vec()).unwrap();
    let loss = f(&mut g, x);
    let grads = g.backward(loss).unwrap();
    let analytic = grads.get(x).map(<[f64]>::to_vec).unwrap_or(vec![0.0; x0.len()]);
    let eval = |v: &[f64]| {
        let mut g = Graph::new();
        let x = g.variable(shape.to_vec(), v.to_vec()).unwrap();
        let l = f(&mut g, x);
        g.value(l)[0]
    };
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let mut p = x0.to_vec();
        p[i] += eps;
        let mut m = x0.to_vec();
        m[i] -= eps;
        let numeric = (eval(&p) - eval(&m)) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}

/// Weighted sum with fixed pseudo-random weights so every output element
/// contributes a distinct cotangent.
fn probe(g: &mut Graph<'_, f64>, y: Var) -> Var {
    let n = g.value(y).len();
    let shape = g.shape(y).to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 5.0).collect();
    let w = g.constant(shape, w).unwrap();
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

#[test]
fn matmul_identity_and_hand_example() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let a_data = vec![1., 2., 3., 4., 5., 6., 7., 8., 9.];
    let a = g.constant(vec![3, 3], a_data.clone()).unwrap();
    let p = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(p), &a_data[..]);

    let a = g.constant(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
    let b = g.constant(vec![2, 1], vec![0., 1.]).unwrap();
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(p), &[2, 1]);
    assert_eq!(g.value(p), &[2., 4.]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(vec![2, 3], vec![0.; 6]).unwrap();
    let b = g.constant(vec![4, 5], vec![0.; 20]).unwrap();
    assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![2], vec![0., 0.]).unwrap();
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s), &[0.5, 0.5]);

    let x = g.constant(vec![2], vec![1f64.ln(), 3f64.ln()]).unwrap();
    let s = g.softmax(x).unwrap();
    assert!((g.value(s)[0] - 0.25).abs() < 1e-15);
    assert!((g.value(s)[1] - 0.75).abs() < 1e-15);

    let x = g.constant(vec![2], vec![f64::NEG_INFINITY, 0.]).unwrap();
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s), &[0., 1.]);

    let x = g.constant(vec![3], vec![f64::NEG_INFINITY; 3]).unwrap();
    let s = g.softmax(x).unwrap();
    assert_eq!(g.value(s), &[0., 0., 0.]);
}

/// Direct evaluation of softmax(q·kᵀ·scale + mask)·v with plain loops.
fn attention_oracle(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], mask: Option<&[Vec<f64>]>, scale: f64) -> Vec<Vec<f64>> {
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let logits: Vec<f64> = k
                .iter()
                .enumerate()
                .map(|(j, kj)| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale + mask.map_or(0.0, |m| m[i][j]))
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum())
                .collect()
        })
        .collect()
}

fn rows(data: &[f64], width: usize) -> Vec<Vec<f64>> {
    data.chunks(width).map(<[f64]>::to_vec).collect()
}

#[test]
fn attention_singleton_key_returns_value() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(vec![1, 3, 2], vec![0.3, -1.0, 2.0, 0.1, -0.5, 0.7]).unwrap();
    let k = g.constant(vec![1, 1, 2], vec![0.9, 0.2]).unwrap();
    let v = g.constant(vec![1, 1, 3], vec![4.0, -2.0, 0.5]).unwrap();
    let out = attention(&mut g, q, k, v, None, 1.0 / 2f64.sqrt()).unwrap();
    for row in g.value(out).chunks(3) {
        assert_eq!(row, &[4.0, -2.0, 0.5]);
    }
}

#[test]
fn attention_mask_selects_single_column() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(vec![1, 1, 2], vec![0.3, -1.0]).unwrap();
    let k = g.constant(vec![1, 3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let v = g.constant(vec![1, 3, 2], vec![10., 11., 20., 21., 30., 31.]).unwrap();
    let ninf = f64::NEG_INFINITY;
    let m = g.constant(vec![1, 3], vec![ninf, 0.0, ninf]).unwrap();
    let out = attention(&mut g, q, k, v, Some(m), 1.0).unwrap();
    assert_eq!(g.value(out), &[20., 21.]);
}

#[test]
fn attention_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (qd, kd, vd) = (rand_vec(&mut rng, 4), rand_vec(&mut rng, 4), rand_vec(&mut rng, 4));
    let mut g = Graph::<f64>::new();
    let q = g.constant(vec![1, 2, 2], qd.clone()).unwrap();
    let k = g.constant(vec![1, 2, 2], kd.clone()).unwrap();
    let v = g.constant(vec![1, 2, 2], vd.clone()).unwrap();
    let scale = 1.0 / 2f64.sqrt();
    let out = attention(&mut g, q, k, v, None, scale).unwrap();
    let expect = attention_oracle(&rows(&qd, 2), &rows(&kd, 2), &rows(&vd, 2), None, scale);
    for (a, e) in g.value(out).iter().zip(expect.concat()) {
        assert!((a - e).abs() < 1e-14);
    }
}

#[test]
fn multi_head_equals_per_head_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (lq, lk, d, heads) = (3, 4, 6, 3);
    let (qd, kd, vd) = (rand_vec(&mut rng, lq * d), rand_vec(&mut rng, lk * d), rand_vec(&mut rng, lk * d));
    let mut g = Graph::<f64>::new();
    let q = g.constant(vec![1, lq, d], qd.clone()).unwrap();
    let k = g.constant(vec![1, lk, d], kd.clone()).unwrap();
    let v = g.constant(vec![1, lk, d], vd.clone()).unwrap();
    let out = multi_head_attention(&mut g, q, k, v, heads, 0.37, None).unwrap();
    let dh = d / heads;
    for h in 0..heads {
        let pick = |data: &[f64], len: usize| -> Vec<Vec<f64>> {
            (0..len).map(|i| data[i * d + h * dh..i * d + (h + 1) * dh].to_vec()).collect()
        };
        let expect = attention_oracle(&pick(&qd, lq), &pick(&kd, lk), &pick(&vd, lk), None, 0.37);
        for i in 0..lq {
            for c in 0..dh {
                assert!((g.value(out)[i * d + h * dh + c] - expect[i][c]).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn backward_square_sum() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(vec![1], vec![3.0]).unwrap();
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(vec![2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
}

#[test]
fn softmax_cross_entropy_gradient_matches_fd() {
    let err = fd_check(&[2], &[0.3, -1.1], 1e-5, 1e-8, |g, x| {
        let p = g.softmax(x).unwrap();
        let p0 = g.slice(p, 0, 0, 1).unwrap();
        let l = g.log(p0);
        let l = g.neg(l);
        g.sum(l)
    });
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn primitive_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    type Case = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph<'_, f64>, Var) -> Var>);
    let c = |v: Vec<f64>, shape: Vec<usize>| move |g: &mut Graph<'_, f64>| g.constant(shape.clone(), v.clone()).unwrap();
    let w34 = c(rand_vec(&mut rng, 12), vec![3, 4]);
    let b4 = c(rand_vec(&mut rng, 4), vec![4]);
    let bat = c(rand_vec(&mut rng, 2 * 3 * 2), vec![2, 3, 2]);
    let cases: Vec<Case> = vec![
        ("matmul", vec![2, 3], Box::new(move |g, x| { let w = w34(g); g.matmul(x, w).unwrap() })),
        ("matmul_lhs_w", vec![3, 4], Box::new(|g, x| { let a = g.constant(vec![2, 3], vec![0.1, -0.2, 0.3, 0.5, 0.7, -0.9]).unwrap(); g.matmul(a, x).unwrap() })),
        ("bmm", vec![2, 2, 3], Box::new(move |g, x| { let b = bat(g); g.matmul(x, b).unwrap() })),
        ("self_matmul", vec![3, 3], Box::new(|g, x| g.matmul(x, x).unwrap())),
        ("add_bcast", vec![2, 4], Box::new(move |g, x| { let b = b4(g); let y = g.add(x, b).unwrap(); g.mul(y, y).unwrap() })),
        ("bias_grad", vec![4], Box::new(|g, x| { let a = g.constant(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap(); let y = g.add(a, x).unwrap(); g.mul(y, y).unwrap() })),
        ("sub", vec![3], Box::new(|g, x| { let s = g.slice(x, 0, 1, 2).unwrap(); let t = g.slice(x, 0, 0, 2).unwrap(); let d = g.sub(s, t).unwrap(); g.mul(d, d).unwrap() })),
        ("mul_bcast", vec![2, 1], Box::new(|g, x| { let a = g.constant(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap(); g.mul(a, x).unwrap() })),
        ("div", vec![2, 3], Box::new(|g, x| { let d = g.constant(vec![3], vec![1.5, -2.0, 0.7]).unwrap(); let a = g.div(x, d).unwrap(); let e = g.exp(x); let b = g.div(d, e).unwrap(); g.add(a, b).unwrap() })),
        ("sigmoid", vec![5], Box::new(|g, x| g.sigmoid(x))),
        ("softplus", vec![5], Box::new(|g, x| g.softplus(x))),
        ("exp", vec![5], Box::new(|g, x| g.exp(x))),
        ("log", vec![5], Box::new(|g, x| { let y = g.add_scalar(x, 2.0); g.log(y) })),
        ("abs", vec![5], Box::new(|g, x| g.abs(x))),
        ("relu", vec![5], Box::new(|g, x| g.relu(x))),
        ("clamp", vec![5], Box::new(|g, x| g.clamp_min(x, -5.0))),
        ("permute", vec![2, 3, 2], Box::new(|g, x| g.permute(x, &[2, 0, 1]).unwrap())),
        ("broadcast", vec![1, 3], Box::new(|g, x| g.broadcast_to(x, vec![4, 2, 3]).unwrap())),
        ("sum_axis", vec![2, 3, 2], Box::new(|g, x| g.sum_axis(x, 1).unwrap())),
        ("mean_axis", vec![2, 3], Box::new(|g, x| g.mean_axis(x, 0).unwrap())),
        ("softmax", vec![2, 4], Box::new(|g, x| g.softmax(x).unwrap())),
        ("masked_softmax", vec![2, 3], Box::new(|g, x| { let m = g.constant(vec![3], vec![0.0, f64::NEG_INFINITY, 0.0]).unwrap(); let y = g.add(x, m).unwrap(); g.softmax(y).unwrap() })),
        ("layer_norm", vec![3, 5], Box::new(|g, x| g.layer_norm(x, 1e-5).unwrap())),
        ("norm_last", vec![3, 2], Box::new(|g, x| g.norm_last(x).unwrap())),
        ("concat", vec![2, 2], Box::new(|g, x| { let s = g.scale(x, 3.0); let y = g.concat(&[x, s, x], 1).unwrap(); g.mul(y, y).unwrap() })),
        ("slice", vec![3, 4], Box::new(|g, x| g.slice(x, 1, 1, 2).unwrap())),
        ("index_select", vec![3, 2], Box::new(|g, x| { let y = g.index_select(x, &[2, 0, 2]).unwrap(); g.mul(y, y).unwrap() })),
        ("reshape_transpose", vec![2, 3], Box::new(|g, x| { let r = g.reshape(x, vec![3, 2]).unwrap(); g.transpose(r).unwrap() })),
        ("attention", vec![1, 3, 4], Box::new(|g, x| { let mask = g.constant(vec![3, 3], causal_mask(3)).unwrap(); multi_head_attention(g, x, x, x, 2, 0.5, Some(mask)).unwrap() })),
    ];
    for (name, shape, f) in cases {
        let n: usize = shape.iter().product();
        // keep relu/abs/clamp inputs away from their kinks
        let x0: Vec<f64> = rand_vec(&mut rng, n).into_iter().map(|v| if v.abs() < 0.05 { v + 0.2 } else { v }).collect();
        let err = fd_check(&shape, &x0, 1e-5, 1e-3, |g, x| {
            let y = f(g, x);
            probe(g, y)
        });
        assert!(err <= 1e-6, "{name}: rel err {err}");
    }
}

#[test]
fn norm_gradient_is_finite_at_origin() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let n = g.norm_last(x).unwrap();
    let l = g.sum(n);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn mlp_zero_and_identity() {
    let mut reg = ParamRegistry::<f64>::new();
    for s in mlp_specs("z", &[3, 4, 2]) {
        reg.insert(&s.name, Tensor::zeros(s.shape)).unwrap();
    }
    let mut ident = ParamRegistry::<f64>::new();
    ident.insert("id.0.w", Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap()).unwrap();
    ident.insert("id.0.b", Tensor::zeros(vec![2])).unwrap();

    let mut g = Graph::new();
    let x = g.constant(vec![2, 3], vec![1., -2., 3., 0.5, 0.1, 9.]).unwrap();
    let y = mlp_forward(&mut g, &reg, "z", x).unwrap();
    assert_eq!(g.shape(y), &[2, 2]);
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let x = g.constant(vec![1, 2], vec![-1.5, 2.25]).unwrap();
    let y = mlp_forward(&mut g, &ident, "id", x).unwrap();
    assert_eq!(g.value(y), &[-1.5, 2.25]);
}

#[test]
fn mlp_matches_loop_oracle() {
    use rand::SeedableRng;
    let specs = mlp_specs("m", &[5, 64, 64]);
    let reg = ParamRegistry::<f64>::initialize(&specs, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = rand_vec(&mut rng, 5);
    let mut g = Graph::new();
    let x = g.constant(vec![1, 5], x0.clone()).unwrap();
    let y = mlp_forward(&mut g, &reg, "m", x).unwrap();

    let affine = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        (0..dout).map(|o| b.data()[o] + (0..din).map(|i| x[i] * w.data()[i * dout + o]).sum::<f64>()).collect()
    };
    let h: Vec<f64> = affine(&x0, reg.get("m.0.w").unwrap(), reg.get("m.0.b").unwrap()).into_iter().map(|v| v.max(0.0)).collect();
    let out = affine(&h, reg.get("m.1.w").unwrap(), reg.get("m.1.b").unwrap());
    for (a, e) in g.value(y).iter().zip(&out) {
        assert!((a - e).abs() < 1e-13);
    }
}

#[test]
fn linear_without_bias() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let w = g.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
    let y = linear(&mut g, x, w, None).unwrap();
    assert_eq!(g.value(y), &[11.0]);
}

#[test]
fn shared_param_accumulates_gradient() {
    let mut reg = ParamRegistry::<f64>::new();
    reg.insert("w", Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let a = g.param(&reg, "w").unwrap();
    let b = g.param(&reg, "w").unwrap();
    assert_eq!(a, b);
    let p = g.mul(a, b).unwrap();
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    let pg = g.param_grads(&grads);
    assert_eq!(pg["w"], vec![4.0]);
    let mut inference = Graph::inference();
    let w = inference.param(&reg, "w").unwrap();
    let l = inference.sum(w);
    assert!(inference.backward(l).unwrap().get(w).is_none());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 1..24), mask_bits in prop::collection::vec(any::<bool>(), 24)) {
        let n = data.len();
        let masked: Vec<f64> = data.iter().zip(&mask_bits).map(|(&v, &m)| if m { f64::NEG_INFINITY } else { v }).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![n], masked.clone()).unwrap();
        let s = g.softmax(x).unwrap();
        let total: f64 = g.value(s).iter().sum();
        if masked.iter().all(|v| v.is_infinite()) {
            prop_assert_eq!(total, 0.0);
        } else {
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(g.value(s).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn causal_attention_ignores_future(seed in 0u64..1000, len in 2usize..7, pos in 0usize..6) {
        let pos = pos % len;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let base = rand_vec(&mut rng, len * d);
        let run = |data: &[f64]| {
            let mut g = Graph::<f64>::new();
            let x = g.constant(vec![1, len, d], data.to_vec()).unwrap();
            let m = g.constant(vec![len, len], causal_mask(len)).unwrap();
            let y = multi_head_attention(&mut g, x, x, x, 2, 0.5, Some(m)).unwrap();
            g.value(y).to_vec()
        };
        let mut bumped = base.clone();
        for c in 0..d {
            bumped[pos * d + c] += rng.random_range(-3.0..3.0);
        }
        let (a, b) = (run(&base), run(&bumped));
        prop_assert_eq!(&a[..pos * d], &b[..pos * d]);
    }
}
