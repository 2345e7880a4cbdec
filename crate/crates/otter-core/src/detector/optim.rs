//! SGD-with-momentum and AdamW over a [`ParamSet`].

use crate::error::{Error, Result};
use crate::numkit::tensor::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    SgdMomentum,
    AdamW,
}

impl OptimKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd_momentum" => Ok(OptimKind::SgdMomentum),
            "adamw" => Ok(OptimKind::AdamW),
            other => Err(Error::Config(format!(
                "unknown optimizer '{other}' (sgd_momentum|adamw)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimKind::SgdMomentum => "sgd_momentum",
            OptimKind::AdamW => "adamw",
        }
    }
}

pub struct Optimizer {
    kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: usize,
    /// Per parameter: momentum buffer (SGD) or (m, v) moments (AdamW).
    state: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, lr: f64, weight_decay: f64, params: &ParamSet<f32>) -> Self {
        let state = params
            .iter()
            .map(|(_, p)| {
                (
                    Tensor::zeros(p.value.shape()),
                    Tensor::zeros(p.value.shape()),
                )
            })
            .collect();
        Optimizer {
            kind,
            lr,
            momentum: 0.937,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            state,
        }
    }

    /// Apply accumulated gradients; the caller zeroes them afterwards.
    pub fn step(&mut self, params: &mut ParamSet<f32>) {
        self.steps += 1;
        let lr = self.lr as f32;
        if lr == 0.0 {
            return;
        }
        let wd = self.weight_decay as f32;
        match self.kind {
            OptimKind::SgdMomentum => {
                let mu = self.momentum as f32;
                for i in 0..params.len() {
                    let (buf, _) = &mut self.state[i];
                    let p = params.get_mut(crate::numkit::tensor::ParamId(i));
                    for ((v, &g), w) in buf
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data())
                        .zip(p.value.data_mut())
                    {
                        *v = mu * *v + g + wd * *w;
                        *w -= lr * *v;
                    }
                }
            }
            OptimKind::AdamW => {
                let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
                let eps = self.eps as f32;
                let bias1 = 1.0 - b1.powi(self.steps as i32);
                let bias2 = 1.0 - b2.powi(self.steps as i32);
                for i in 0..params.len() {
                    let (m, v) = &mut self.state[i];
                    let p = params.get_mut(crate::numkit::tensor::ParamId(i));
                    for (((mi, vi), &g), w) in m
                        .data_mut()
                        .iter_mut()
                        .zip(v.data_mut())
                        .zip(p.grad.data())
                        .zip(p.value.data_mut())
                    {
                        *mi = b1 * *mi + (1.0 - b1) * g;
                        *vi = b2 * *vi + (1.0 - b2) * g * g;
                        let m_hat = *mi / bias1;
                        let v_hat = *vi / bias2;
                        *w -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
                    }
                }
            }
        }
    }
}
