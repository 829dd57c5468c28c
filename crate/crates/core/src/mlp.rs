//! Small fully-connected decode heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// One affine layer: `y = act(x W + b)` with `W: [in, out]`, `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
}

/// Tape handles for every layer's weight and bias.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl Mlp {
    /// Zero-layer network; forward returns its input.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: Vec::new(),
            input_dim: dim,
            output_dim: dim,
        }
    }

    /// Xavier-uniform weights and zero biases. Hidden layers use ReLU, the
    /// last layer is linear.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(contract(format!("mlp dims {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (k, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            let activation = if k + 2 < dims.len() {
                Activation::Relu
            } else {
                Activation::None
            };
            layers.push(Layer {
                weight: Tensor::new(vec![fan_in, fan_out], data)?,
                bias: Tensor::zeros(&[fan_out]),
                activation,
            });
        }
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(contract("use Mlp::identity for a zero-layer network"));
        };
        let input_dim = first.weight.shape()[0];
        let mut dim = input_dim;
        for (k, l) in layers.iter().enumerate() {
            let ws = l.weight.shape();
            if ws.len() != 2 || ws[0] != dim || l.bias.len() != ws[1] {
                return Err(contract(format!(
                    "layer {k}: weight {ws:?}, bias {:?}, expected input {dim}",
                    l.bias.shape()
                )));
            }
            dim = ws[1];
        }
        Ok(Self {
            layers,
            input_dim,
            output_dim: dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Batched inference, `[batch, in] -> [batch, out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim {
            return Err(contract(format!(
                "mlp expects {} inputs, got shape {:?}",
                self.input_dim,
                x.shape()
            )));
        }
        let n = x.rows();
        let mut cur = x.clone().reshape(&[n, self.input_dim])?;
        for l in &self.layers {
            let (k, m) = (l.weight.shape()[0], l.weight.shape()[1]);
            let mut data = tensor::matmul(cur.data(), l.weight.data(), n, k, m);
            for row in data.chunks_exact_mut(m) {
                for (o, b) in row.iter_mut().zip(l.bias.data()) {
                    *o += b;
                    if l.activation == Activation::Relu {
                        *o = o.max(0.0);
                    }
                }
            }
            cur = Tensor::new(vec![n, m], data)?;
        }
        Ok(cur)
    }

    /// Single-row inference into a caller buffer; `scratch` is reused
    /// between calls to avoid allocation on per-sample paths.
    pub fn forward_row(&self, x: &[f32], scratch: &mut MlpScratch, out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.input_dim);
        debug_assert_eq!(out.len(), self.output_dim);
        if self.layers.is_empty() {
            out.copy_from_slice(x);
            return;
        }
        scratch.a.clear();
        scratch.a.extend_from_slice(x);
        for l in &self.layers {
            let m = l.weight.shape()[1];
            scratch.b.clear();
            scratch.b.extend_from_slice(l.bias.data());
            for (p, &xv) in scratch.a.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &l.weight.data()[p * m..(p + 1) * m];
                for (o, w) in scratch.b.iter_mut().zip(wrow) {
                    *o += xv * w;
                }
            }
            if l.activation == Activation::Relu {
                scratch.b.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut scratch.a, &mut scratch.b);
        }
        out.copy_from_slice(&scratch.a);
    }

    pub fn register<'p>(&'p self, tape: &mut Tape<'p>) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(&l.weight), tape.param(&l.bias)))
                .collect(),
        }
    }

    pub fn forward_tape(&self, tape: &mut Tape<'_>, vars: &MlpVars, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.input_dim {
            return Err(contract(format!("mlp expects {} inputs, got {cols}", self.input_dim)));
        }
        let mut cur = x;
        for (l, &(w, b)) in self.layers.iter().zip(&vars.layers) {
            cur = tape.matmul(cur, w)?;
            cur = tape.add_row(cur, b)?;
            if l.activation == Activation::Relu {
                cur = tape.relu(cur)?;
            }
        }
        Ok(cur)
    }
}

#[derive(Default, Clone, Debug)]
pub struct MlpScratch {
    a: Vec<f32>,
    b: Vec<f32>,
}
