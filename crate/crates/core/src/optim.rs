//! Adam with an exponentially decayed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AdamConfig {
    pub lr_start: f32,
    pub lr_end: f32,
    pub total_steps: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn new(lr_start: f32, lr_end: f32, total_steps: usize) -> Self {
        Self {
            lr_start,
            lr_end,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// `lr_start * (lr_end / lr_start)^(step / total_steps)`, held at
    /// `lr_end` past the end of the schedule.
    pub fn lr_at(&self, step: usize) -> f32 {
        if self.lr_start <= 0.0 || self.total_steps == 0 {
            return self.lr_start;
        }
        let frac = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        let ratio = f64::from(self.lr_end) / f64::from(self.lr_start);
        (f64::from(self.lr_start) * ratio.powf(frac)) as f32
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { config, step: 0, m, v }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f32 {
        self.config.lr_at(self.step)
    }

    /// One bias-corrected update of every parameter; increments the step.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(contract(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(contract(format!(
                    "adam shape mismatch: param {:?}, grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        let lr = self.config.lr_at(self.step);
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let step_size = lr / bc1;
        let inv_bc2 = 1.0 / bc2;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                if gv == 0.0 && *mv == 0.0 && *vv == 0.0 {
                    continue;
                }
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
