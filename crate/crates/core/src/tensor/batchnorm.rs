use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

/// Per-channel batch normalization parameters and running statistics.
///
/// Statistics pool over every row (batch and points), the channel axis is the
/// normalized one. Variances are the biased (population) estimate.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::filled(alloc::vec![channels], 1.0),
            beta: Tensor::zeros(alloc::vec![channels]),
            running_mean: alloc::vec![0.0; channels],
            running_var: alloc::vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving average of batch statistics.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var[c];
        }
    }
}

/// Output of the shared forward kernel; `xhat` and `inv_std` are kept for backward.
pub(crate) struct Normalized {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Batch statistics in train mode.
    pub stats: Option<(Vec<f64>, Vec<f64>)>,
}

pub(crate) fn normalize(
    x: &[f64],
    channels: usize,
    gamma: &[f64],
    beta: &[f64],
    state: &BatchNormState,
    mode: Mode,
) -> Result<Normalized> {
    if gamma.len() != channels || beta.len() != channels || state.channels() != channels {
        return Err(Error::Shape(alloc::format!(
            "batch norm over {channels} channels with {} parameters",
            state.channels()
        )));
    }
    let (mean, var) = channel_stats(x, channels, state, mode)?;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut xhat = alloc::vec![0.0; x.len()];
    let mut y = alloc::vec![0.0; x.len()];
    for ((row, hr), yr) in x.chunks_exact(channels).zip(xhat.chunks_exact_mut(channels)).zip(y.chunks_exact_mut(channels)) {
        for (((((x, h), y), m), s), (g, b)) in row.iter().zip(hr).zip(yr).zip(&mean).zip(&inv_std).zip(gamma.iter().zip(beta)) {
            *h = (x - m) * s;
            *y = g * *h + b;
        }
    }
    let stats = (mode == Mode::Train).then_some((mean, var));
    Ok(Normalized { y, xhat, inv_std, stats })
}

/// Per-channel `(mean, variance)`: batch statistics in train mode, the running
/// statistics in eval mode.
pub(crate) fn channel_stats(x: &[f64], channels: usize, state: &BatchNormState, mode: Mode) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows = x.len() / channels;
    match mode {
        Mode::Train => {
            if rows < 2 {
                return Err(Error::BatchTooSmall(rows));
            }
            let mut mean = alloc::vec![0.0; channels];
            for row in x.chunks_exact(channels) {
                add_row(&mut mean, row);
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = alloc::vec![0.0; channels];
            for row in x.chunks_exact(channels) {
                for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            Ok((mean, var))
        }
        Mode::Eval => Ok((state.running_mean.clone(), state.running_var.clone())),
    }
}

fn add_row(acc: &mut [f64], row: &[f64]) {
    for (a, v) in acc.iter_mut().zip(row) {
        *a += v;
    }
}

/// Batch normalization outside of a graph. Train mode updates the running statistics.
pub fn batchnorm_forward(x: &Tensor, state: &mut BatchNormState, mode: Mode) -> Result<Tensor> {
    let out = normalize(x.data(), x.channels(), state.gamma.data(), state.beta.data(), state, mode)?;
    if let Some((mean, var)) = &out.stats {
        state.update_running(mean, var);
    }
    Tensor::new(x.shape().to_vec(), out.y)
}
