//! Test-only oracles: straightforward `f64` reference implementations of
//! every differentiable op, and central finite differences over them.

#![allow(dead_code)]

pub mod cachelaw;
pub mod gradcases;
pub mod meshcases;

use rand::Rng;
use sanerf_core::tensor::Tensor;

pub const FD_EPS: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random values with magnitude in `[min_abs, max_abs]` and random sign,
/// keeping finite differences clear of kinks at zero.
pub fn rand_away_from_zero(rng: &mut impl Rng, shape: &[usize], min_abs: f32, max_abs: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(min_abs..max_abs);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

/// Central differences of `f` with respect to input `which`.
pub fn numeric_grad(f: &dyn Fn(&[Vec<f64>]) -> f64, inputs: &[Vec<f64>], which: usize) -> Vec<f64> {
    let mut xs = inputs.to_vec();
    let mut g = vec![0.0; xs[which].len()];
    for i in 0..g.len() {
        let orig = xs[which][i];
        xs[which][i] = orig + FD_EPS;
        let up = f(&xs);
        xs[which][i] = orig - FD_EPS;
        let down = f(&xs);
        xs[which][i] = orig;
        g[i] = (up - down) / (2.0 * FD_EPS);
    }
    g
}

/// Norm-wise relative error `||a - n|| / max(||a||, ||n||)`.
pub fn rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (f64::from(a) - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|&a| f64::from(a).powi(2)).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
        }
    }
    out
}

pub fn add_row(a: &[f64], b: &[f64]) -> Vec<f64> {
    let m = b.len();
    a.iter().enumerate().map(|(i, v)| v + b[i % m]).collect()
}

pub fn relu(a: &[f64]) -> Vec<f64> {
    a.iter().map(|v| v.max(0.0)).collect()
}

pub fn sigmoid(a: &[f64]) -> Vec<f64> {
    a.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
}

pub fn exp(a: &[f64]) -> Vec<f64> {
    a.iter().map(|v| v.exp()).collect()
}

/// `(1/rows) * sum of squared differences`.
pub fn mse(a: &[f64], b: &[f64], rows: usize) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / rows as f64
}

pub fn cosine_matrix(a: &[f64], b: &[f64], c: usize) -> Vec<f64> {
    let n = a.len() / c;
    let m = b.len() / c;
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ai = &a[i * c..(i + 1) * c];
        for j in 0..m {
            let bj = &b[j * c..(j + 1) * c];
            let na = dot(ai, ai).sqrt();
            let nb = dot(bj, bj).sqrt();
            out[i * m + j] = if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot(ai, bj) / (na * nb)
            };
        }
    }
    out
}

/// Quadrature over rays of `per_ray` samples.
pub fn composite(sigma: &[f64], color: &[f64], deltas: &[f64], per_ray: usize, c: usize) -> Vec<f64> {
    let rays = sigma.len() / per_ray;
    let mut out = vec![0.0; rays * c];
    for r in 0..rays {
        let mut trans = 1.0;
        for s in r * per_ray..(r + 1) * per_ray {
            let alpha = 1.0 - (-sigma[s] * deltas[s]).exp();
            for k in 0..c {
                out[r * c + k] += trans * alpha * color[s * c + k];
            }
            trans *= 1.0 - alpha;
        }
    }
    out
}

/// Weighted sum of lattice values at fixed corners and weights.
pub fn trilinear(grid: &[f64], corners: &[[u32; 8]], weights: &[[f32; 8]], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; corners.len() * c];
    for (p, (cs, ws)) in corners.iter().zip(weights).enumerate() {
        for (&v, &w) in cs.iter().zip(ws) {
            for k in 0..c {
                out[p * c + k] += f64::from(w) * grid[v as usize * c + k];
            }
        }
    }
    out
}

pub fn ray_accumulate(x: &[f64], weights: &[f32], ray: &[u32], rays: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; rays * c];
    for (p, (&w, &r)) in weights.iter().zip(ray).enumerate() {
        for k in 0..c {
            out[r as usize * c + k] += f64::from(w) * x[p * c + k];
        }
    }
    out
}

/// Reference MLP forward: layers given as `(weight [in, out], bias, relu)`.
pub fn mlp(x: &[f64], rows: usize, layers: &[(Vec<f64>, Vec<f64>, bool)]) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut k = cur.len() / rows;
    for (w, b, act) in layers {
        let m = b.len();
        cur = add_row(&matmul(&cur, w, rows, k, m), b);
        if *act {
            cur = relu(&cur);
        }
        k = m;
    }
    cur
}
