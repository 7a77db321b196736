use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average update; `batch.var` is the unbiased estimate.
    pub fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// Per-channel statistics of one training-mode batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as folded into running statistics.
    pub var: Vec<f64>,
}

pub(super) struct Saved {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

pub(super) fn forward(
    shape: &[usize],
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    running: &RunningStats,
    mode: Mode,
) -> Result<(Vec<f64>, Saved, Option<BatchStats>)> {
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = b * hw;
    if mode == Mode::Training && count < 2 {
        return Err(Error::DegenerateBatch { count });
    }
    let channel = |ch: usize| (0..b).flat_map(move |s| (s * c + ch) * hw..(s * c + ch + 1) * hw);

    let mut stats = None;
    let (mean, inv_std): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Training => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let m = channel(ch).map(|i| x[i]).sum::<f64>() / count as f64;
                let v = channel(ch).map(|i| (x[i] - m) * (x[i] - m)).sum::<f64>() / count as f64;
                mean[ch] = m;
                var[ch] = v;
            }
            let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let unbiased = var
                .iter()
                .map(|v| v * count as f64 / (count - 1) as f64)
                .collect();
            stats = Some(BatchStats {
                mean: mean.clone(),
                var: unbiased,
            });
            (mean, inv_std)
        }
        Mode::Inference => (
            running.mean.clone(),
            running.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
        ),
    };

    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for i in channel(ch) {
            let h = (x[i] - mean[ch]) * inv_std[ch];
            xhat[i] = h;
            out[i] = gamma[ch] * h + beta[ch];
        }
    }
    Ok((out, Saved { xhat, inv_std, mode }, stats))
}

pub(super) struct BnGrads {
    pub x: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub(super) fn backward(shape: &[usize], gamma: &[f64], saved: &Saved, dy: &[f64]) -> BnGrads {
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = (b * hw) as f64;
    let channel = |ch: usize| (0..b).flat_map(move |s| (s * c + ch) * hw..(s * c + ch + 1) * hw);
    let mut dx = vec![0.0; dy.len()];
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for i in channel(ch) {
            sum_dy += dy[i];
            sum_dy_xhat += dy[i] * saved.xhat[i];
        }
        d_beta[ch] = sum_dy;
        d_gamma[ch] = sum_dy_xhat;
        let scale = gamma[ch] * saved.inv_std[ch];
        match saved.mode {
            Mode::Training => {
                for i in channel(ch) {
                    dx[i] = scale / count
                        * (count * dy[i] - sum_dy - saved.xhat[i] * sum_dy_xhat);
                }
            }
            Mode::Inference => {
                for i in channel(ch) {
                    dx[i] = scale * dy[i];
                }
            }
        }
    }
    BnGrads {
        x: dx,
        gamma: d_gamma,
        beta: d_beta,
    }
}
