use serde::{Deserialize, Serialize};

use super::{ClassifierParams, HeadGrads, TanhGrads, TanhLayer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear ramp `base * (t + 1) / warmup` for `t < warmup`, then cosine decay
    /// to zero at `total`.
    CosineWithWarmup { warmup: usize, total: usize },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, t: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::CosineWithWarmup { warmup, total } => {
                if t < warmup {
                    base * (t + 1) as f64 / warmup as f64
                } else {
                    let span = total.saturating_sub(warmup).max(1) as f64;
                    let progress = ((t - warmup) as f64 / span).min(1.0);
                    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Applied by the loss gradient, not by [`sgd_step`].
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: LrSchedule::Constant,
        }
    }
}

/// Flat views over every trainable tensor, in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
}

impl Parameters for [f64] {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self]
    }
}

impl Parameters for Vec<f64> {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

macro_rules! weights_and_bias {
    ($($t:ty),*) => {$(
        impl Parameters for $t {
            fn tensors(&self) -> Vec<&[f64]> {
                vec![
                    self.weights.as_slice().expect("standard layout"),
                    self.bias.as_slice().expect("standard layout"),
                ]
            }
            fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
                vec![
                    self.weights.as_slice_mut().expect("standard layout"),
                    self.bias.as_slice_mut().expect("standard layout"),
                ]
            }
        }
    )*};
}

weights_and_bias!(ClassifierParams, HeadGrads, TanhLayer, TanhGrads);

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// Zero velocity shaped like `params`.
    pub fn new<P: Parameters + ?Sized>(config: OptimizerConfig, params: &P) -> Self {
        OptimizerState {
            config,
            velocity: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn learning_rate(&self, t: usize) -> f64 {
        self.config.schedule.rate(self.config.learning_rate, t)
    }
}

/// `v <- momentum * v + g; p <- p - lr(t) * v`.
pub fn sgd_step<P, G>(params: &mut P, grads: &G, state: &mut OptimizerState, t: usize)
where
    P: Parameters + ?Sized,
    G: Parameters + ?Sized,
{
    let lr = state.learning_rate(t);
    let momentum = state.config.momentum;
    let grads = grads.tensors();
    let mut params = params.tensors_mut();
    assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count");
    for ((p, g), v) in params.iter_mut().zip(&grads).zip(state.velocity.iter_mut()) {
        assert_eq!(p.len(), g.len(), "parameter/gradient tensor length");
        for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
}
