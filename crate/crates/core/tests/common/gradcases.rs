//! Every tape op checked against central differences of an `f64` reference.

use std::rc::Rc;

use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sanerf_core::autodiff::{Tape, Var};
use sanerf_core::grid::FeatureGrid;
use sanerf_core::math::Aabb;
use sanerf_core::tensor::Tensor;

type Build<'a> = dyn Fn(&mut Tape<'_>, &[Var]) -> Var + 'a;
type Reference<'a> = dyn Fn(&[Vec<f64>]) -> Vec<f64> + 'a;

/// Projects the op output onto a fixed random direction, differentiates
/// with the tape, and compares every input gradient against finite
/// differences of the reference.
fn check(name: &str, inputs: &[Tensor], build: &Build<'_>, reference: &Reference<'_>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars);
    let out_shape = tape.value(out).shape().to_vec();
    let proj = rand_tensor(&mut rng, &out_shape, -1.0, 1.0);
    let proj64 = to64(&proj);
    let pv = tape.constant(proj);
    let prod = tape.mul(out, pv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let x64: Vec<Vec<f64>> = inputs.iter().map(to64).collect();
    let f = |xs: &[Vec<f64>]| dot(&reference(xs), &proj64);
    let forward = reference(&x64);
    let tape_out = to64(tape.value(out));
    for (a, b) in forward.iter().zip(&tape_out) {
        assert!((a - b).abs() < 1e-4 * (1.0 + a.abs()), "{name}: forward {a} vs {b}");
    }
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap();
        let numeric = numeric_grad(&f, &x64, i);
        let err = rel_err(analytic.data(), &numeric);
        assert!(err < FD_TOL, "{name}: input {i} relative error {err:e}");
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(5)
}

pub fn matmul_gradient() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[4, 5], -1.0, 1.0);
    check("matmul", &[a, b], &|t, v| t.matmul(v[0], v[1]).unwrap(), &|x| {
        matmul(&x[0], &x[1], 3, 4, 5)
    });
}

pub fn add_row_gradient() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[3], -1.0, 1.0);
    check("add_row", &[a, b], &|t, v| t.add_row(v[0], v[1]).unwrap(), &|x| {
        add_row(&x[0], &x[1])
    });
}

pub fn add_mul_scale_gradients() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
    check(
        "add",
        &[a.clone(), b.clone()],
        &|t, v| t.add(v[0], v[1]).unwrap(),
        &|x| x[0].iter().zip(&x[1]).map(|(p, q)| p + q).collect(),
    );
    check("mul", &[a.clone(), b], &|t, v| t.mul(v[0], v[1]).unwrap(), &|x| {
        x[0].iter().zip(&x[1]).map(|(p, q)| p * q).collect()
    });
    check("scale", &[a], &|t, v| t.scale(v[0], -2.5).unwrap(), &|x| {
        x[0].iter().map(|p| -2.5 * p).collect()
    });
}

pub fn pointwise_nonlinearity_gradients() {
    let mut r = rng();
    let a = rand_away_from_zero(&mut r, &[4, 3], 0.05, 2.0);
    check("relu", std::slice::from_ref(&a), &|t, v| t.relu(v[0]).unwrap(), &|x| {
        relu(&x[0])
    });
    check(
        "sigmoid",
        std::slice::from_ref(&a),
        &|t, v| t.sigmoid(v[0]).unwrap(),
        &|x| sigmoid(&x[0]),
    );
    check("exp", &[a], &|t, v| t.exp(v[0]).unwrap(), &|x| exp(&x[0]));
}

pub fn reduction_gradients() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);
    check("sum", std::slice::from_ref(&a), &|t, v| t.sum(v[0]).unwrap(), &|x| {
        vec![x[0].iter().sum()]
    });
    check("mean", std::slice::from_ref(&a), &|t, v| t.mean(v[0]).unwrap(), &|x| {
        vec![x[0].iter().sum::<f64>() / x[0].len() as f64]
    });
    check("mse", &[a, b], &|t, v| t.mse(v[0], v[1]).unwrap(), &|x| {
        vec![mse(&x[0], &x[1], 4)]
    });
}

pub fn cosine_matrix_gradient() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[3, 5], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[4, 5], -1.0, 1.0);
    check(
        "cosine_matrix",
        &[a, b],
        &|t, v| t.cosine_matrix(v[0], v[1]).unwrap(),
        &|x| cosine_matrix(&x[0], &x[1], 5),
    );
}

pub fn gather_and_reshape_gradients() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[5, 2], -1.0, 1.0);
    let index = [4usize, 0, 4, 2];
    check(
        "gather_rows",
        std::slice::from_ref(&a),
        &|t, v| t.gather_rows(v[0], &index).unwrap(),
        &|x| index.iter().flat_map(|&i| x[0][i * 2..i * 2 + 2].to_vec()).collect(),
    );
    check("reshape", &[a], &|t, v| t.reshape(v[0], &[2, 5]).unwrap(), &|x| {
        x[0].clone()
    });
}

pub fn trilinear_gradient() {
    let mut r = rng();
    let grid = FeatureGrid::uniform([3, 4, 3], 2, Aabb::cube(1.0), 1.0, &mut r).unwrap();
    let points: Vec<[f32; 3]> = (0..6)
        .map(|_| [r.gen_range(-1.2..1.2), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
        .collect();
    let coeffs = Rc::new(grid.coefficients(&points));
    let c2 = coeffs.clone();
    check(
        "trilinear",
        &[grid.values().clone()],
        &move |t, v| t.trilinear(v[0], c2.clone()).unwrap(),
        &move |x| trilinear(&x[0], &coeffs.corners, &coeffs.weights, 2),
    );
}

pub fn composite_gradient() {
    let mut r = rng();
    let per_ray = 5;
    let sigma = rand_tensor(&mut r, &[3 * per_ray], 0.1, 4.0);
    let color = rand_tensor(&mut r, &[3 * per_ray, 3], 0.0, 1.0);
    let deltas: Vec<f32> = (0..3 * per_ray).map(|_| r.gen_range(0.05..0.5)).collect();
    let d64: Vec<f64> = deltas.iter().map(|&d| f64::from(d)).collect();
    let deltas = Rc::new(deltas);
    check(
        "composite",
        &[sigma, color],
        &move |t, v| t.composite(v[0], v[1], deltas.clone(), per_ray).unwrap(),
        &move |x| composite(&x[0], &x[1], &d64, per_ray, 3),
    );
}

pub fn ray_accumulate_gradient() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[6, 4], -1.0, 1.0);
    let weights: Vec<f32> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
    let ray = vec![0u32, 0, 2, 2, 2, 1];
    let (w2, r2) = (Rc::new(weights.clone()), Rc::new(ray.clone()));
    check(
        "ray_accumulate",
        &[x],
        &move |t, v| t.ray_accumulate(v[0], w2.clone(), r2.clone(), 3).unwrap(),
        &move |x| ray_accumulate(&x[0], &weights, &ray, 3, 4),
    );
}

pub fn chained_mlp_gradient() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);
    let w1 = rand_tensor(&mut r, &[3, 5], -1.0, 1.0);
    let b1 = rand_tensor(&mut r, &[5], 0.3, 0.6);
    let w2 = rand_tensor(&mut r, &[5, 2], -1.0, 1.0);
    let b2 = rand_tensor(&mut r, &[2], -0.2, 0.2);
    check(
        "mlp",
        &[x, w1, b1, w2, b2],
        &|t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.add_row(h, v[2]).unwrap();
            let h = t.relu(h).unwrap();
            let o = t.matmul(h, v[3]).unwrap();
            let o = t.add_row(o, v[4]).unwrap();
            t.sigmoid(o).unwrap()
        },
        &|x| {
            let layers = vec![(x[1].clone(), x[2].clone(), true), (x[3].clone(), x[4].clone(), false)];
            sigmoid(&mlp(&x[0], 4, &layers))
        },
    );
}

/// Every op check, by name; each panics on a mismatch.
pub const CASES: &[(&str, fn())] = &[
    ("matmul_gradient", matmul_gradient),
    ("add_row_gradient", add_row_gradient),
    ("add_mul_scale_gradients", add_mul_scale_gradients),
    ("pointwise_nonlinearity_gradients", pointwise_nonlinearity_gradients),
    ("reduction_gradients", reduction_gradients),
    ("cosine_matrix_gradient", cosine_matrix_gradient),
    ("gather_and_reshape_gradients", gather_and_reshape_gradients),
    ("trilinear_gradient", trilinear_gradient),
    ("composite_gradient", composite_gradient),
    ("ray_accumulate_gradient", ray_accumulate_gradient),
    ("chained_mlp_gradient", chained_mlp_gradient),
];
