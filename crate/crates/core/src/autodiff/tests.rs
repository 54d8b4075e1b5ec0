use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::body_model::{build_mini_model, NUM_JOINTS};

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Compares tape gradients of a scalar-valued builder with central differences.
fn check(inputs: Vec<Tensor>, build: &Build, tol: f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward_all(out).unwrap();
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads[vars[k].index()]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let eval = |delta: f64| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == k {
                            t.data_mut()[i] += delta;
                        }
                        g.variable(t)
                    })
                    .collect();
                let out = build(&mut g, &vars);
                g.value(out).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-3);
            assert!(err < tol, "input {k} elem {i}: analytic {a} vs fd {fd}");
        }
    }
}

/// Contracts an arbitrary tensor against fixed pseudo-random weights so every
/// output element carries a distinct gradient.
fn project_scalar(g: &mut Graph, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4));
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

#[test]
fn linear_and_broadcast_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![
        random_tensor(&mut rng, &[2, 3, 4]),
        random_tensor(&mut rng, &[4, 5]),
        random_tensor(&mut rng, &[5]),
        random_tensor(&mut rng, &[3, 5]),
    ];
    check(
        inputs,
        &|g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let y = g.add_broadcast(y, v[3]).unwrap();
            project_scalar(g, y)
        },
        1e-6,
    );
}

#[test]
fn layer_norm_gelu_softplus_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![
        random_tensor(&mut rng, &[3, 6]),
        random_tensor(&mut rng, &[6]),
        random_tensor(&mut rng, &[6]),
    ];
    check(
        inputs,
        &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            let y = g.gelu(y);
            let y = g.softplus(y);
            project_scalar(g, y)
        },
        1e-6,
    );
}

#[test]
fn attention_gradients_and_row_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        random_tensor(&mut rng, &[2, 5, 6]),
        random_tensor(&mut rng, &[2, 5, 6]),
        random_tensor(&mut rng, &[2, 5, 6]),
    ];
    check(
        inputs.clone(),
        &|g, v| {
            let y = g.attention(v[0], v[1], v[2], 3).unwrap();
            project_scalar(g, y)
        },
        1e-6,
    );
    let mut g = Graph::new();
    let v: Vec<Var> = inputs.into_iter().map(|t| g.constant(t)).collect();
    let a = g.attention(v[0], v[1], v[2], 3).unwrap();
    let (probs, heads) = g.attention_probs(a).unwrap();
    assert_eq!(heads, 3);
    for row in probs.chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn shape_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![random_tensor(&mut rng, &[2, 3, 4]), random_tensor(&mut rng, &[2, 1, 4])];
    check(
        inputs,
        &|g, v| {
            let p = g.permute(v[0], &[2, 0, 1]).unwrap();
            let r = g.reshape(p, &[4, 2, 3]).unwrap();
            let back = g.permute(r, &[1, 2, 0]).unwrap();
            let s = g.slice(back, 1, 1, 2).unwrap();
            let c = g.concat(&[s, v[1], s], 1).unwrap();
            let m = g.mul(c, c).unwrap();
            let sc = g.scale(m, 0.5);
            let d = g.sub(sc, c).unwrap();
            let mean = g.mean(d);
            let sum = project_scalar(g, c);
            g.add(mean, sum).unwrap()
        },
        1e-6,
    );
}

#[test]
fn block_linear_and_left_mul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Arc::new(random_tensor(&mut rng, &[2, 4]));
    let inputs = vec![
        random_tensor(&mut rng, &[3, 4, 5]),
        random_tensor(&mut rng, &[4, 5, 2]),
        random_tensor(&mut rng, &[4, 2]),
    ];
    check(
        inputs,
        &move |g, v| {
            let y = g.block_linear(v[0], v[1], v[2]).unwrap();
            let y = g.left_mul_const(a.clone(), y).unwrap();
            project_scalar(g, y)
        },
        1e-6,
    );
}

#[test]
fn rotation_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = vec![random_tensor(&mut rng, &[4, 6]), random_tensor(&mut rng, &[3, 3])];
    check(
        inputs,
        &|g, v| {
            let m = g.sixd_to_mat(v[0]).unwrap();
            let aa = g.mat_to_axis_angle(m).unwrap();
            let m2 = g.axis_angle_to_mat(v[1]).unwrap();
            let s1 = project_scalar(g, aa);
            let s2 = project_scalar(g, m2);
            g.add(s1, s2).unwrap()
        },
        1e-6,
    );
}

#[test]
fn body_project_rms_gradients() {
    let model = Arc::new(build_mini_model(7, 48).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let reg = Arc::new(Tensor::new(vec![NUM_JOINTS, 48], model.joint_regressor.clone()).unwrap());
    let mask = Arc::new(Tensor::from_fn(&[2, 48], |i| if i % 5 == 0 { 0.0 } else { 1.0 }));
    let inputs = vec![
        Tensor::from_fn(&[2, NUM_JOINTS, 3], |_| rng.random_range(-0.6..0.6)),
        random_tensor(&mut rng, &[2, 10]),
        Tensor::from_fn(&[2, 3], |i| if i % 3 == 0 { 0.9 } else { 0.1 * i as f64 }),
    ];
    check(
        inputs,
        &move |g, v| {
            let rot = g.axis_angle_to_mat(v[0]).unwrap();
            let out = g.body(model.clone(), rot, v[1]).unwrap();
            let verts = g.slice(out, 1, 0, 48).unwrap();
            let fk = g.slice(out, 1, 48, NUM_JOINTS).unwrap();
            let j3d = g.left_mul_const(reg.clone(), verts).unwrap();
            let j2d = g.project(j3d, v[2]).unwrap();
            let flat = g.reshape(j2d, &[2, 48]).unwrap();
            let rms = g.masked_rms(flat, mask.clone()).unwrap();
            let a = g.sum(rms);
            let b = project_scalar(g, fk);
            g.add(a, b).unwrap()
        },
        1e-5,
    );
}

#[test]
fn frozen_and_named_params() {
    let mut store = ParamStore::new();
    store.insert("a.w", Tensor::full(&[2], 2.0));
    store.insert("b.w", Tensor::full(&[2], 3.0));
    let mut g = Graph::new();
    g.freeze_prefix("b.");
    let a = g.param(&store, "a.w").unwrap();
    let b = g.param(&store, "b.w").unwrap();
    assert_eq!(g.param(&store, "a.w").unwrap(), a);
    let m = g.mul(a, b).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads[0].0, "a.w");
    assert_eq!(grads[0].1.data(), &[3.0, 3.0]);
    assert!(g.param(&store, "missing").is_err());
}

#[test]
fn masked_rms_of_constant_and_empty_mask() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::new(vec![2, 3], vec![0.5, -0.5, 0.5, 9.0, 9.0, 9.0]).unwrap());
    let mask = Arc::new(Tensor::new(vec![2, 3], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
    let r = g.masked_rms(x, mask).unwrap();
    assert_eq!(g.value(r).data(), &[0.5, 0.0]);
}
