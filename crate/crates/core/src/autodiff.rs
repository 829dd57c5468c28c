//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! The op set is closed and small: exactly what the radiance and semantic
//! fields need. Parameters are borrowed into the tape (no copy of large
//! grids); intermediate values are owned by it.

use std::ops::Deref;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{contract, Error, Result};
use crate::grid::TrilinearCoeffs;
use crate::tensor::{self, Tensor, NORM_EPS};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Value<'p> {
    Borrowed(&'p Tensor),
    Owned(Tensor),
}

impl Deref for Value<'_> {
    type Target = Tensor;

    fn deref(&self) -> &Tensor {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

enum Op {
    Constant,
    Param,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    Cosine {
        a: usize,
        b: usize,
        a_hat: Vec<f32>,
        a_norm: Vec<f32>,
        b_hat: Vec<f32>,
        b_norm: Vec<f32>,
    },
    GatherRows {
        src: usize,
        index: Vec<usize>,
    },
    Reshape(usize),
    Trilinear {
        grid: usize,
        coeffs: Rc<TrilinearCoeffs>,
    },
    Composite {
        sigma: usize,
        color: usize,
        deltas: Rc<Vec<f32>>,
        per_ray: usize,
    },
    RayAccumulate {
        src: usize,
        weights: Rc<Vec<f32>>,
        ray: Rc<Vec<u32>>,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    id: u64,
    nodes: Vec<Node<'p>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage("variable belongs to a different tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Value<'p>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by tape op");
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn owned(&mut self, t: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.push(Value::Owned(t), op, needs)
    }

    /// A trainable leaf; gradients are reported for it after `backward`.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.push(Value::Borrowed(t), Op::Param, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Constant, false)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor) -> Var {
        self.push(Value::Borrowed(t), Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v).expect("foreign variable")].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&*self.nodes[ia].value, &*self.nodes[ib].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(contract(format!("matmul {:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::new(vec![n, m], tensor::matmul(ta.data(), tb.data(), n, k, m))?;
        Ok(self.owned(out, Op::MatMul(ia, ib), &[ia, ib]))
    }

    /// `[n, m] + [m]`, bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (ta, tb) = (&*self.nodes[ia].value, &*self.nodes[ib].value);
        if ta.cols() != tb.len() {
            return Err(contract(format!("add_row {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let m = tb.len();
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(m) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.owned(out, Op::AddRow(ia, ib), &[ia, ib]))
    }

    fn same_shape(&self, ia: usize, ib: usize, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(contract(format!("{what} {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "add")?;
        let (ta, tb) = (&*self.nodes[ia].value, &*self.nodes[ib].value);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.owned(out, Op::Add(ia, ib), &[ia, ib]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "mul")?;
        let (ta, tb) = (&*self.nodes[ia].value, &*self.nodes[ib].value);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.owned(out, Op::Mul(ia, ib), &[ia, ib]))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &*self.nodes[ia].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect())?;
        Ok(self.owned(out, Op::Scale(ia, s), &[ia]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &*self.nodes[ia].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())?;
        Ok(self.owned(out, op(ia), &[ia]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, tensor::sigmoid, Op::Sigmoid)
    }

    /// `exp` with the input clamped at [`tensor::EXP_CLAMP`]; the backward
    /// pass uses the clamped output as the local derivative.
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, tensor::trunc_exp, Op::Exp)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s: f32 = self.nodes[ia].value.data().iter().sum();
        Ok(self.owned(Tensor::scalar(s), Op::Sum(ia), &[ia]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &*self.nodes[ia].value;
        if t.is_empty() {
            return Err(contract("mean of empty tensor"));
        }
        let s = t.data().iter().sum::<f32>() / t.len() as f32;
        Ok(self.owned(Tensor::scalar(s), Op::Mean(ia), &[ia]))
    }

    /// Squared error summed over the trailing dimensions and averaged over
    /// the leading one: `(1/N) sum_r ||a_r - b_r||^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "mse")?;
        let (ta, tb) = (&*self.nodes[ia].value, &*self.nodes[ib].value);
        if ta.is_empty() {
            return Err(contract("mse of empty tensors"));
        }
        let s: f32 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(s / ta.rows() as f32);
        Ok(self.owned(out, Op::Mse(ia, ib), &[ia, ib]))
    }

    /// Pairwise cosine similarity of the rows of `a` `[n, C]` and `b` `[m, C]`,
    /// giving `[n, m]`. Zero rows have similarity 0.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&*self.nodes[ia].value, &*self.nodes[ib].value);
        if ta.cols() != tb.cols() {
            return Err(contract(format!("cosine_matrix {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let c = ta.cols();
        let (a_hat, a_norm) = normalize_rows(ta.data(), c);
        let (b_hat, b_norm) = normalize_rows(tb.data(), c);
        let (n, m) = (ta.rows(), tb.rows());
        let mut s = tensor::matmul_nt(&a_hat, &b_hat, n, c, m);
        s.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        let out = Tensor::new(vec![n, m], s)?;
        let op = Op::Cosine {
            a: ia,
            b: ib,
            a_hat,
            a_norm,
            b_hat,
            b_norm,
        };
        Ok(self.owned(out, op, &[ia, ib]))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &*self.nodes[ia].value;
        let c = t.cols();
        if let Some(&bad) = index.iter().find(|&&i| i >= t.rows()) {
            return Err(contract(format!("row {bad} out of {}", t.rows())));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![index.len(), c], data)?;
        let op = Op::GatherRows {
            src: ia,
            index: index.to_vec(),
        };
        Ok(self.owned(out, op, &[ia]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.clone().reshape(shape)?;
        Ok(self.owned(out, Op::Reshape(ia), &[ia]))
    }

    /// Trilinear interpolation of a `[Nx, Ny, Nz, C]` grid at precomputed
    /// lattice coefficients, giving `[P, C]`. Backward scatters into the grid.
    pub fn trilinear(&mut self, grid: Var, coeffs: Rc<TrilinearCoeffs>) -> Result<Var> {
        let ig = self.idx(grid)?;
        let t = &*self.nodes[ig].value;
        if t.shape().len() != 4 {
            return Err(contract(format!("trilinear grid shape {:?}", t.shape())));
        }
        let c = t.shape()[3];
        let vertices = t.len() / c;
        if coeffs
            .corners
            .iter()
            .any(|cs| cs.iter().any(|&v| v as usize >= vertices))
        {
            return Err(contract("trilinear corner outside grid"));
        }
        let mut data = vec![0.0f32; coeffs.len() * c];
        for (i, out) in data.chunks_exact_mut(c).enumerate() {
            crate::grid::gather_one(t.data(), c, &coeffs.corners[i], &coeffs.weights[i], out);
        }
        let out = Tensor::new(vec![coeffs.len(), c], data)?;
        Ok(self.owned(out, Op::Trilinear { grid: ig, coeffs }, &[ig]))
    }

    /// Volume-rendering quadrature over rays of `per_ray` consecutive samples:
    /// `out_r = sum_i T_i a_i c_i`, `a_i = 1 - exp(-sigma_i delta_i)`,
    /// `T_i = prod_{j<i} (1 - a_j)`. `sigma` has `P` values, `color` is `[P, C]`.
    pub fn composite(&mut self, sigma: Var, color: Var, deltas: Rc<Vec<f32>>, per_ray: usize) -> Result<Var> {
        let (is, ic) = (self.idx(sigma)?, self.idx(color)?);
        let (ts, tc) = (&*self.nodes[is].value, &*self.nodes[ic].value);
        let p = ts.len();
        if per_ray == 0 || p % per_ray != 0 || tc.rows() != p || deltas.len() != p {
            return Err(contract(format!(
                "composite: {} sigmas, color {:?}, {} deltas, {} per ray",
                p,
                tc.shape(),
                deltas.len(),
                per_ray
            )));
        }
        let c = tc.cols();
        let rays = p / per_ray;
        let mut out = vec![0.0f32; rays * c];
        for r in 0..rays {
            let mut trans = 1.0f32;
            let o = &mut out[r * c..(r + 1) * c];
            for s in r * per_ray..(r + 1) * per_ray {
                let keep = (-ts.data()[s] * deltas[s]).exp();
                let w = trans * (1.0 - keep);
                for (ov, &cv) in o.iter_mut().zip(tc.row(s)) {
                    *ov += w * cv;
                }
                trans *= keep;
            }
        }
        let out = Tensor::new(vec![rays, c], out)?;
        let op = Op::Composite {
            sigma: is,
            color: ic,
            deltas,
            per_ray,
        };
        Ok(self.owned(out, op, &[is, ic]))
    }

    /// Constant-weight segment sum: `out[ray[p]] += weights[p] * x[p]`.
    pub fn ray_accumulate(&mut self, x: Var, weights: Rc<Vec<f32>>, ray: Rc<Vec<u32>>, rays: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = &*self.nodes[ix].value;
        if weights.len() != t.rows() || ray.len() != t.rows() {
            return Err(contract("ray_accumulate: weights/ray index length mismatch"));
        }
        if ray.iter().any(|&r| r as usize >= rays) {
            return Err(contract("ray_accumulate: ray index out of range"));
        }
        let c = t.cols();
        let mut out = vec![0.0f32; rays * c];
        for (p, (&w, &r)) in weights.iter().zip(ray.iter()).enumerate() {
            let o = &mut out[r as usize * c..(r as usize + 1) * c];
            for (ov, &xv) in o.iter_mut().zip(t.row(p)) {
                *ov += w * xv;
            }
        }
        let out = Tensor::new(vec![rays, c], out)?;
        Ok(self.owned(out, Op::RayAccumulate { src: ix, weights, ray }, &[ix]))
    }

    /// Reverse sweep from a scalar loss. Every parameter on the tape gets a
    /// gradient; unreached parameters get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called on an empty tape".into()));
        }
        let li = self.idx(loss)?;
        let lnode = &self.nodes[li];
        if matches!(lnode.op, Op::Constant | Op::Param) {
            return Err(Error::Usage("backward without a recorded forward computation".into()));
        }
        if lnode.value.len() != 1 {
            return Err(contract(format!("loss must be scalar, got {:?}", lnode.value.shape())));
        }
        if !lnode.value.is_finite() {
            return Err(contract("loss is not finite"));
        }

        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }

        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) {
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                out.push((i, t));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn backward_node(&self, node: &Node<'p>, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |i: usize| -> &Tensor { &self.nodes[i].value };
        let needs = |i: usize| self.nodes[i].needs_grad;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(*a) {
                    let ga = tensor::matmul_nt(g, tb.data(), n, m, k);
                    accumulate(grads, *a, ta.len(), |acc| add_into(acc, &ga));
                }
                if needs(*b) {
                    let gb = tensor::matmul_tn(ta.data(), g, n, k, m);
                    accumulate(grads, *b, tb.len(), |acc| add_into(acc, &gb));
                }
            }
            Op::AddRow(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.len(), |acc| add_into(acc, g));
                }
                if needs(*b) {
                    let m = val(*b).len();
                    accumulate(grads, *b, m, |acc| {
                        for row in g.chunks_exact(m) {
                            add_into(acc, row);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for &x in [a, b] {
                    if needs(x) {
                        accumulate(grads, x, g.len(), |acc| add_into(acc, g));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if needs(*a) {
                    accumulate(grads, *a, g.len(), |acc| {
                        for ((o, gv), bv) in acc.iter_mut().zip(g).zip(tb.data()) {
                            *o += gv * bv;
                        }
                    });
                }
                if needs(*b) {
                    accumulate(grads, *b, g.len(), |acc| {
                        for ((o, gv), av) in acc.iter_mut().zip(g).zip(ta.data()) {
                            *o += gv * av;
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                accumulate(grads, *a, g.len(), |acc| {
                    for (o, gv) in acc.iter_mut().zip(g) {
                        *o += gv * s;
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                accumulate(grads, *a, g.len(), |acc| {
                    for ((o, gv), xv) in acc.iter_mut().zip(g).zip(x.data()) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                accumulate(grads, *a, g.len(), |acc| {
                    for ((o, gv), yv) in acc.iter_mut().zip(g).zip(y.data()) {
                        *o += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                accumulate(grads, *a, g.len(), |acc| {
                    for ((o, gv), yv) in acc.iter_mut().zip(g).zip(y.data()) {
                        *o += gv * yv;
                    }
                });
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                accumulate(grads, *a, n, |acc| acc.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let s = g[0] / n as f32;
                accumulate(grads, *a, n, |acc| acc.iter_mut().for_each(|o| *o += s));
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let k = 2.0 * g[0] / ta.rows() as f32;
                for (x, sign) in [(*a, 1.0f32), (*b, -1.0f32)] {
                    if needs(x) {
                        accumulate(grads, x, ta.len(), |acc| {
                            for ((o, av), bv) in acc.iter_mut().zip(ta.data()).zip(tb.data()) {
                                *o += sign * k * (av - bv);
                            }
                        });
                    }
                }
            }
            Op::Cosine {
                a,
                b,
                a_hat,
                a_norm,
                b_hat,
                b_norm,
            } => {
                let c = val(*a).cols();
                let (n, m) = (a_norm.len(), b_norm.len());
                if needs(*a) {
                    // d/d a_hat = G b_hat; project out the radial part.
                    let gh = tensor::matmul(g, b_hat, n, m, c);
                    accumulate(grads, *a, n * c, |acc| {
                        tangent_grad(acc, &gh, a_hat, a_norm, c);
                    });
                }
                if needs(*b) {
                    let gh = tensor::matmul_tn(g, a_hat, n, m, c);
                    accumulate(grads, *b, m * c, |acc| {
                        tangent_grad(acc, &gh, b_hat, b_norm, c);
                    });
                }
            }
            Op::GatherRows { src, index } => {
                let t = val(*src);
                let c = t.cols();
                accumulate(grads, *src, t.len(), |acc| {
                    for (k, &r) in index.iter().enumerate() {
                        add_into(&mut acc[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, g.len(), |acc| add_into(acc, g));
            }
            Op::Trilinear { grid, coeffs } => {
                let t = val(*grid);
                let c = t.shape()[3];
                accumulate(grads, *grid, t.len(), |acc| {
                    for (p, gp) in g.chunks_exact(c).enumerate() {
                        for (&ci, &w) in coeffs.corners[p].iter().zip(&coeffs.weights[p]) {
                            if w == 0.0 {
                                continue;
                            }
                            let base = ci as usize * c;
                            for (o, gv) in acc[base..base + c].iter_mut().zip(gp) {
                                *o += w * gv;
                            }
                        }
                    }
                });
            }
            Op::Composite {
                sigma,
                color,
                deltas,
                per_ray,
            } => {
                let (ts, tc) = (val(*sigma), val(*color));
                let c = tc.cols();
                let p = ts.len();
                let mut gs = vec![0.0f32; p];
                let mut gc = vec![0.0f32; p * c];
                let mut w = vec![0.0f32; *per_ray];
                let mut t_after = vec![0.0f32; *per_ray];
                let mut suffix = vec![0.0f32; c];
                for r in 0..p / per_ray {
                    let base = r * per_ray;
                    let gr = &g[r * c..(r + 1) * c];
                    let mut trans = 1.0f32;
                    for s in 0..*per_ray {
                        let keep = (-ts.data()[base + s] * deltas[base + s]).exp();
                        w[s] = trans * (1.0 - keep);
                        trans *= keep;
                        t_after[s] = trans;
                    }
                    suffix.iter_mut().for_each(|v| *v = 0.0);
                    for s in (0..*per_ray).rev() {
                        let ci = tc.row(base + s);
                        let mut dot = 0.0f32;
                        for k in 0..c {
                            dot += gr[k] * (t_after[s] * ci[k] - suffix[k]);
                            gc[(base + s) * c + k] = w[s] * gr[k];
                        }
                        gs[base + s] = deltas[base + s] * dot;
                        for k in 0..c {
                            suffix[k] += w[s] * ci[k];
                        }
                    }
                }
                if needs(*sigma) {
                    accumulate(grads, *sigma, p, |acc| add_into(acc, &gs));
                }
                if needs(*color) {
                    accumulate(grads, *color, p * c, |acc| add_into(acc, &gc));
                }
            }
            Op::RayAccumulate { src, weights, ray } => {
                let t = val(*src);
                let c = t.cols();
                accumulate(grads, *src, t.len(), |acc| {
                    for (p, (&w, &r)) in weights.iter().zip(ray.iter()).enumerate() {
                        let gr = &g[r as usize * c..(r as usize + 1) * c];
                        for (o, gv) in acc[p * c..(p + 1) * c].iter_mut().zip(gr) {
                            *o += w * gv;
                        }
                    }
                });
            }
        }
    }
}

fn normalize_rows(data: &[f32], c: usize) -> (Vec<f32>, Vec<f32>) {
    let rows = if c == 0 { 0 } else { data.len() / c };
    let mut hat = vec![0.0f32; data.len()];
    let mut norms = vec![0.0f32; rows];
    for r in 0..rows {
        let row = &data[r * c..(r + 1) * c];
        let n = row.iter().map(|x| x * x).sum::<f32>().sqrt();
        norms[r] = n;
        if n > NORM_EPS {
            for (h, x) in hat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *h = x / n;
            }
        }
    }
    (hat, norms)
}

fn tangent_grad(acc: &mut [f32], gh: &[f32], hat: &[f32], norms: &[f32], c: usize) {
    for (r, &n) in norms.iter().enumerate() {
        if n <= NORM_EPS {
            continue;
        }
        let g = &gh[r * c..(r + 1) * c];
        let h = &hat[r * c..(r + 1) * c];
        let radial: f32 = g.iter().zip(h).map(|(x, y)| x * y).sum();
        for k in 0..c {
            acc[r * c + k] += (g[k] - radial * h[k]) / n;
        }
    }
}

fn add_into(acc: &mut [f32], g: &[f32]) {
    for (o, v) in acc.iter_mut().zip(g) {
        *o += v;
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], index: usize, len: usize, f: impl FnOnce(&mut [f32])) {
    let slot = grads[index].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Parameter gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads
            .binary_search_by_key(&v.index, |(i, _)| *i)
            .ok()
            .map(|k| &self.grads[k].1)
    }

    /// Removes and returns the gradient of `v`.
    pub fn take(&mut self, v: Var) -> Result<Tensor> {
        if v.tape != self.tape {
            return Err(Error::Usage("variable belongs to a different tape".into()));
        }
        let k = self
            .grads
            .binary_search_by_key(&v.index, |(i, _)| *i)
            .map_err(|_| Error::Usage("no gradient recorded for a non-parameter".into()))?;
        Ok(std::mem::replace(&mut self.grads[k].1, Tensor::zeros(&[0])))
    }
}
