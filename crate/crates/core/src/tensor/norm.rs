//! Batch normalization over the channel axis of `N×C×…` tensors.
//!
//! Works for both feature maps (`N×C×D×H×W`) and dense activations
//! (`N×C`, spatial size 1). Statistics accumulate in f64.

use serde::{Deserialize, Serialize};

use super::{Mode, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Per-channel batch mean and biased variance, plus the element count.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl BatchStats {
    /// Exponential running-average update; the running variance uses the
    /// unbiased batch estimate.
    pub fn update_running(&self, running_mean: &mut Tensor, running_var: &mut Tensor, cfg: &BatchNormConfig) {
        let m = cfg.momentum;
        let unbias = if self.count > 1 {
            self.count as f64 / (self.count - 1) as f64
        } else {
            1.0
        };
        for (c, (rm, rv)) in running_mean
            .data_mut()
            .iter_mut()
            .zip(running_var.data_mut().iter_mut())
            .enumerate()
        {
            *rm = ((1.0 - m) * *rm as f64 + m * self.mean[c]) as f32;
            *rv = ((1.0 - m) * *rv as f64 + m * self.var[c] * unbias) as f32;
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    mode: Mode,
    x_hat: Vec<f32>,
    inv_std: Vec<f64>,
    stats: Option<BatchStats>,
}

impl BatchNormCache {
    /// Batch statistics gathered in train mode.
    pub fn stats(&self) -> Option<&BatchStats> {
        self.stats.as_ref()
    }
}

fn layout(input: &Tensor, gamma: &Tensor) -> Result<(usize, usize, usize)> {
    let shape = input.shape();
    if shape.len() < 2 {
        return shape_err(format!("batchnorm input must be N×C×…, got {:?}", shape));
    }
    let (n, c) = (shape[0], shape[1]);
    if gamma.len() != c {
        return shape_err(format!(
            "batchnorm: {} channels but {} affine parameters",
            c,
            gamma.len()
        ));
    }
    let spatial = shape[2..].iter().product();
    Ok((n, c, spatial))
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: Mode,
    cfg: &BatchNormConfig,
    layer: &str,
) -> Result<(Tensor, BatchNormCache)> {
    let (n, c, s) = layout(input, gamma)?;
    if beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return shape_err(format!("batchnorm {layer}: parameter length mismatch"));
    }
    let x = input.data();
    let (mean, var, stats) = match mode {
        Mode::Train => {
            let count = n * s;
            if count < 2 {
                return Err(Error::DegenerateVariance(layer.to_string()));
            }
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for b in 0..n {
                    sum += x[(b * c + ch) * s..][..s].iter().map(|v| *v as f64).sum::<f64>();
                }
                let mu = sum / count as f64;
                let mut sq = 0.0;
                for b in 0..n {
                    sq += x[(b * c + ch) * s..][..s]
                        .iter()
                        .map(|v| {
                            let d = *v as f64 - mu;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = sq / count as f64;
            }
            let stats = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
                count,
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => (
            running_mean.data().iter().map(|v| *v as f64).collect(),
            running_var.data().iter().map(|v| *v as f64).collect(),
            None,
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect();
    let mut x_hat = vec![0.0f32; x.len()];
    let mut out = vec![0.0f32; x.len()];
    let (g, bt) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                let xh = ((x[i] as f64 - mean[ch]) * inv_std[ch]) as f32;
                x_hat[i] = xh;
                out[i] = g[ch] * xh + bt[ch];
            }
        }
    }
    let out = Tensor::new(input.shape().to_vec(), out)?;
    out.ensure_finite(layer)?;
    Ok((
        out,
        BatchNormCache {
            mode,
            x_hat,
            inv_std,
            stats,
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward(
    cache: &BatchNormCache,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let (n, c, s) = layout(grad_out, gamma)?;
    if cache.x_hat.len() != grad_out.len() {
        return shape_err("batchnorm backward: cache does not match gradient");
    }
    let gy = grad_out.data();
    let xh = &cache.x_hat;
    let g = gamma.data();
    let count = (n * s) as f64;
    let mut gx = vec![0.0f32; gy.len()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                sum_dy += gy[i] as f64;
                sum_dy_xh += gy[i] as f64 * xh[i] as f64;
            }
        }
        dgamma[ch] = sum_dy_xh as f32;
        dbeta[ch] = sum_dy as f32;
        let scale = g[ch] as f64 * cache.inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                gx[i] = match cache.mode {
                    Mode::Train => {
                        (scale / count * (count * gy[i] as f64 - sum_dy - xh[i] as f64 * sum_dy_xh)) as f32
                    }
                    Mode::Eval => (scale * gy[i] as f64) as f32,
                };
            }
        }
    }
    Ok((Tensor::new(grad_out.shape().to_vec(), gx)?, dgamma, dbeta))
}
