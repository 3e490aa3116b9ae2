//! The 3D residual encoder and the bottleneck predictor head.
//!
//! Layer order: a 3×3×3 stem convolution, equal-width bottleneck residual
//! blocks, then alternating max-pool / 3×3×3 convolution stages, global
//! average pooling, a hidden dense layer with batch norm and the output
//! dense layer that emits the representation. Every convolution is followed
//! by batch norm; all but the last convolution of a residual branch also by
//! ReLU.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::rng;
use crate::tensor::{
    batchnorm, batchnorm_backward, conv3d, conv3d_backward, conv_output_extent, dense, dense_backward,
    global_avg_pool, global_avg_pool_backward, maxpool3d, maxpool3d_backward, pool_output_extent, relu,
    relu_backward, BatchNormCache, BatchNormConfig, Mode, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalePreset {
    Paper,
    Desk,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub preset: ScalePreset,
    /// Cube side of the input volume in voxels.
    pub input_extent: usize,
    pub in_channels: usize,
    /// `[stem, residual bottleneck, stage…]`; one max-pool precedes each stage.
    pub widths: Vec<usize>,
    pub residual_blocks: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub hidden_dim: usize,
    pub representation_dim: usize,
    pub predictor_hidden_dim: usize,
    pub batchnorm: BatchNormConfig,
}

impl EncoderConfig {
    /// Full-size network for 96³ single-channel inputs.
    pub fn paper() -> Self {
        Self {
            preset: ScalePreset::Paper,
            input_extent: 96,
            in_channels: 1,
            widths: vec![32, 32, 64, 128, 256],
            residual_blocks: 2,
            pool_kernel: 3,
            pool_stride: 3,
            hidden_dim: 324,
            representation_dim: 256,
            predictor_hidden_dim: 64,
            batchnorm: BatchNormConfig::default(),
        }
    }

    /// Reduced network for 16³ inputs that trains on a CPU in seconds.
    pub fn desk() -> Self {
        Self {
            preset: ScalePreset::Desk,
            input_extent: 16,
            in_channels: 1,
            widths: vec![8, 8, 16, 32, 64],
            residual_blocks: 2,
            pool_kernel: 2,
            pool_stride: 2,
            hidden_dim: 40,
            representation_dim: 32,
            predictor_hidden_dim: 8,
            batchnorm: BatchNormConfig::default(),
        }
    }

    pub fn with_extent(mut self, extent: usize) -> Self {
        self.input_extent = extent;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.representation_dim == 0 || self.hidden_dim == 0 || self.predictor_hidden_dim == 0 {
            return bad("representation, hidden and predictor widths must be positive".into());
        }
        if self.in_channels == 0 {
            return bad("at least one input channel is required".into());
        }
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return bad(format!("need positive stem and residual widths, got {:?}", self.widths));
        }
        self.layer_extents().map(|_| ()).map_err(|e| Error::Config(e.to_string()))
    }

    /// Spatial extent after each named layer for the configured input.
    pub fn layer_extents(&self) -> Result<Vec<(String, usize)>> {
        let mut ext = conv_output_extent(self.input_extent, 3, 1, 1)?;
        let mut out = vec![("conv1".to_string(), ext)];
        for b in 0..self.residual_blocks {
            out.push((format!("residual{}", b + 2), ext));
        }
        for s in 0..self.widths.len() - 2 {
            ext = pool_output_extent(ext, self.pool_kernel, self.pool_stride).map_err(|_| {
                Error::Config(format!(
                    "input extent {} is too small for {} pooling stages of kernel {}",
                    self.input_extent,
                    self.widths.len() - 2,
                    self.pool_kernel
                ))
            })?;
            out.push((format!("maxpool{}", s + 3), ext));
            out.push((format!("conv{}", s + 4), ext));
        }
        out.push(("global_avg_pool".to_string(), 1));
        Ok(out)
    }

    /// Stable hex digest of the configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Batch norm parameters and running statistics of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        }
    }

    fn forward(&self, x: &Tensor, mode: Mode, cfg: &BatchNormConfig, name: &str) -> Result<(Tensor, BatchNormCache)> {
        batchnorm(x, &self.gamma, &self.beta, &self.running_mean, &self.running_var, mode, cfg, name)
    }

    fn backward(&mut self, cache: &BatchNormCache, grad: &Tensor) -> Result<Tensor> {
        let (gx, dg, db) = batchnorm_backward(cache, &self.gamma, grad)?;
        self.gamma.accumulate_grad(&dg)?;
        self.beta.accumulate_grad(&db)?;
        Ok(gx)
    }

    fn absorb(&mut self, cache: &BatchNormCache, cfg: &BatchNormConfig) {
        if let Some(stats) = cache.stats() {
            stats.update_running(&mut self.running_mean, &mut self.running_var, cfg);
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor, bool)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma, true));
        out.push((format!("{prefix}.beta"), &self.beta, true));
        out.push((format!("{prefix}.running_mean"), &self.running_mean, false));
        out.push((format!("{prefix}.running_var"), &self.running_var, false));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor, bool)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma, true));
        out.push((format!("{prefix}.beta"), &mut self.beta, true));
        out.push((format!("{prefix}.running_mean"), &mut self.running_mean, false));
        out.push((format!("{prefix}.running_var"), &mut self.running_var, false));
    }
}

/// Bias-free convolution followed by batch norm and optional ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub weight: Tensor,
    pub bn: BatchNorm,
    pub padding: usize,
    pub relu: bool,
}

#[derive(Debug, Clone)]
pub struct ConvBnTrace {
    input: Tensor,
    bn: BatchNormCache,
    normalized: Tensor,
}

impl ConvBn {
    fn new(cin: usize, cout: usize, kernel: usize, relu: bool, rng: &mut rng::Rng) -> Self {
        Self {
            weight: he_init(&[cout, cin, kernel, kernel, kernel], cin * kernel.pow(3), rng),
            bn: BatchNorm::new(cout),
            padding: kernel / 2,
            relu,
        }
    }

    fn forward(&self, x: Tensor, mode: Mode, cfg: &BatchNormConfig, name: &str) -> Result<(Tensor, ConvBnTrace)> {
        let y = conv3d(&x, &self.weight, 1, self.padding)?;
        y.ensure_finite(name)?;
        let (normalized, bn) = self.bn.forward(&y, mode, cfg, name)?;
        let out = if self.relu { relu(&normalized) } else { normalized.clone() };
        Ok((
            out,
            ConvBnTrace {
                input: x,
                bn,
                normalized,
            },
        ))
    }

    fn backward(&mut self, trace: &ConvBnTrace, grad: &Tensor) -> Result<Tensor> {
        let g = if self.relu {
            relu_backward(&trace.normalized, grad)?
        } else {
            grad.clone()
        };
        let g = self.bn.backward(&trace.bn, &g)?;
        let (gx, gw) = conv3d_backward(&trace.input, &self.weight, &g, 1, self.padding)?;
        self.weight.accumulate_grad(gw.data())?;
        Ok(gx)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor, bool)>) {
        out.push((format!("{prefix}.conv.weight"), &self.weight, true));
        self.bn.collect(&format!("{prefix}.bn"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor, bool)>) {
        out.push((format!("{prefix}.conv.weight"), &mut self.weight, true));
        self.bn.collect_mut(&format!("{prefix}.bn"), out);
    }
}

/// Bottleneck block `relu(x + F(x))` with `F = 1×1 → 3×3 → 1×1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub reduce: ConvBn,
    pub spatial: ConvBn,
    pub expand: ConvBn,
}

#[derive(Debug, Clone)]
pub struct ResBlockTrace {
    reduce: ConvBnTrace,
    spatial: ConvBnTrace,
    expand: ConvBnTrace,
    sum: Tensor,
}

impl ResBlock {
    fn forward(&self, x: Tensor, mode: Mode, cfg: &BatchNormConfig, name: &str) -> Result<(Tensor, ResBlockTrace)> {
        let skip = x.clone();
        let (h, reduce) = self.reduce.forward(x, mode, cfg, name)?;
        let (h, spatial) = self.spatial.forward(h, mode, cfg, name)?;
        let (h, expand) = self.expand.forward(h, mode, cfg, name)?;
        let sum_data = h.data().iter().zip(skip.data()).map(|(a, b)| a + b).collect();
        let sum = Tensor::new(skip.shape().to_vec(), sum_data)?;
        let out = relu(&sum);
        out.ensure_finite(name)?;
        Ok((
            out,
            ResBlockTrace {
                reduce,
                spatial,
                expand,
                sum,
            },
        ))
    }

    fn backward(&mut self, trace: &ResBlockTrace, grad: &Tensor) -> Result<Tensor> {
        let g_sum = relu_backward(&trace.sum, grad)?;
        let g = self.expand.backward(&trace.expand, &g_sum)?;
        let g = self.spatial.backward(&trace.spatial, &g)?;
        let g = self.reduce.backward(&trace.reduce, &g)?;
        let data = g.data().iter().zip(g_sum.data()).map(|(a, b)| a + b).collect();
        Tensor::new(g_sum.shape().to_vec(), data)
    }

    fn absorb(&mut self, trace: &ResBlockTrace, cfg: &BatchNormConfig) {
        self.reduce.bn.absorb(&trace.reduce.bn, cfg);
        self.spatial.bn.absorb(&trace.spatial.bn, cfg);
        self.expand.bn.absorb(&trace.expand.bn, cfg);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn new(fin: usize, fout: usize, rng: &mut rng::Rng) -> Self {
        Self {
            weight: he_init(&[fin, fout], fin, rng),
            bias: Tensor::zeros(&[fout]),
        }
    }

    fn forward(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let y = dense(x, &self.weight, &self.bias)?;
        y.ensure_finite(name)?;
        Ok(y)
    }

    fn backward(&mut self, input: &Tensor, grad: &Tensor) -> Result<Tensor> {
        let (gx, gw, gb) = dense_backward(input, &self.weight, grad)?;
        self.weight.accumulate_grad(gw.data())?;
        self.bias.accumulate_grad(&gb)?;
        Ok(gx)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor, bool)>) {
        out.push((format!("{prefix}.weight"), &self.weight, true));
        out.push((format!("{prefix}.bias"), &self.bias, true));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor, bool)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight, true));
        out.push((format!("{prefix}.bias"), &mut self.bias, true));
    }
}

/// Dense → batch norm → ReLU → dense, with the intermediate values kept
/// for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub hidden: Dense,
    pub bn: BatchNorm,
    pub out: Dense,
}

#[derive(Debug, Clone)]
pub struct MlpTrace {
    input: Tensor,
    bn: BatchNormCache,
    normalized: Tensor,
    activated: Tensor,
}

impl MlpHead {
    fn new(fin: usize, hidden: usize, fout: usize, rng: &mut rng::Rng) -> Self {
        Self {
            hidden: Dense::new(fin, hidden, rng),
            bn: BatchNorm::new(hidden),
            out: Dense::new(hidden, fout, rng),
        }
    }

    fn forward(&self, x: Tensor, mode: Mode, cfg: &BatchNormConfig, name: &str) -> Result<(Tensor, MlpTrace)> {
        let h = self.hidden.forward(&x, name)?;
        let (normalized, bn) = self.bn.forward(&h, mode, cfg, name)?;
        let activated = relu(&normalized);
        let y = self.out.forward(&activated, name)?;
        Ok((
            y,
            MlpTrace {
                input: x,
                bn,
                normalized,
                activated,
            },
        ))
    }

    fn backward(&mut self, trace: &MlpTrace, grad: &Tensor) -> Result<Tensor> {
        let g = self.out.backward(&trace.activated, grad)?;
        let g = relu_backward(&trace.normalized, &g)?;
        let g = self.bn.backward(&trace.bn, &g)?;
        self.hidden.backward(&trace.input, &g)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor, bool)>) {
        self.hidden.collect(&format!("{prefix}.fc1"), out);
        self.bn.collect(&format!("{prefix}.bn"), out);
        self.out.collect(&format!("{prefix}.fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor, bool)>) {
        self.hidden.collect_mut(&format!("{prefix}.fc1"), out);
        self.bn.collect_mut(&format!("{prefix}.bn"), out);
        self.out.collect_mut(&format!("{prefix}.fc2"), out);
    }
}

fn he_init(shape: &[usize], fan_in: usize, rng: &mut rng::Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Learnable parameters and batch-norm statistics of encoder and predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub seed: u64,
    pub stem: ConvBn,
    pub blocks: Vec<ResBlock>,
    pub stages: Vec<ConvBn>,
    /// Hidden dense layer, its batch norm and the representation layer.
    pub projection: MlpHead,
    pub predictor: MlpHead,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    stem: ConvBnTrace,
    blocks: Vec<ResBlockTrace>,
    stages: Vec<(Vec<usize>, Vec<u32>, ConvBnTrace)>,
    pooled_shape: Vec<usize>,
    projection: MlpTrace,
}

/// Deterministic initialization from `seed`.
pub fn build_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderState> {
    config.validate()?;
    let mut rng = rng::stream(seed, rng::STREAM_INIT, &[]);
    // burn one draw so that the init stream differs from any raw use of the seed
    let _: u64 = rng.random();
    let w = &config.widths;
    let stem = ConvBn::new(config.in_channels, w[0], 3, true, &mut rng);
    let blocks = (0..config.residual_blocks)
        .map(|_| ResBlock {
            reduce: ConvBn::new(w[0], w[1], 1, true, &mut rng),
            spatial: ConvBn::new(w[1], w[1], 3, true, &mut rng),
            expand: ConvBn::new(w[1], w[0], 1, false, &mut rng),
        })
        .collect();
    let mut cin = w[0];
    let stages = w[2..]
        .iter()
        .map(|&cout| {
            let layer = ConvBn::new(cin, cout, 3, true, &mut rng);
            cin = cout;
            layer
        })
        .collect();
    let projection = MlpHead::new(cin, config.hidden_dim, config.representation_dim, &mut rng);
    let predictor = MlpHead::new(
        config.representation_dim,
        config.predictor_hidden_dim,
        config.representation_dim,
        &mut rng,
    );
    Ok(EncoderState {
        config: config.clone(),
        seed,
        stem,
        blocks,
        stages,
        projection,
        predictor,
    })
}

impl EncoderState {
    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let [_, c, d, h, w] = batch.dims5("encoder input")?;
        let e = self.config.input_extent;
        if c != self.config.in_channels || d != e || h != e || w != e {
            return shape_err(format!(
                "encoder expects N×{}×{e}×{e}×{e}, got {:?}",
                self.config.in_channels,
                batch.shape()
            ));
        }
        batch.ensure_finite("encoder input")
    }

    /// Forward pass without side effects; train-mode batch statistics are
    /// returned in the trace and applied with [`EncoderState::absorb`].
    pub fn forward(&self, batch: &Tensor, mode: Mode) -> Result<(Tensor, EncoderTrace)> {
        self.check_batch(batch)?;
        let cfg = &self.config.batchnorm;
        let (mut x, stem) = self.stem.forward(batch.clone(), mode, cfg, "conv1")?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, t) = block.forward(x, mode, cfg, &format!("residual{}", i + 2))?;
            blocks.push(t);
            x = y;
        }
        let mut stages = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let shape = x.shape().to_vec();
            let (pooled, argmax) = maxpool3d(&x, self.config.pool_kernel, self.config.pool_stride)?;
            let (y, t) = stage.forward(pooled, mode, cfg, &format!("conv{}", i + 4))?;
            stages.push((shape, argmax, t));
            x = y;
        }
        let pooled_shape = x.shape().to_vec();
        let pooled = global_avg_pool(&x)?;
        let (reps, projection) = self.projection.forward(pooled, mode, cfg, "dense")?;
        Ok((
            reps,
            EncoderTrace {
                stem,
                blocks,
                stages,
                pooled_shape,
                projection,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input batch.
    pub fn backward(&mut self, trace: &EncoderTrace, grad_reps: &Tensor) -> Result<Tensor> {
        let g = self.projection.backward(&trace.projection, grad_reps)?;
        let mut g = global_avg_pool_backward(&trace.pooled_shape, &g)?;
        for (stage, (shape, argmax, t)) in self.stages.iter_mut().zip(&trace.stages).rev() {
            let gp = stage.backward(t, &g)?;
            g = maxpool3d_backward(shape, argmax, &gp)?;
        }
        for (block, t) in self.blocks.iter_mut().zip(&trace.blocks).rev() {
            g = block.backward(t, &g)?;
        }
        self.stem.backward(&trace.stem, &g)
    }

    /// Applies train-mode batch statistics to the running statistics.
    pub fn absorb(&mut self, trace: &EncoderTrace) {
        let cfg = self.config.batchnorm;
        self.stem.bn.absorb(&trace.stem.bn, &cfg);
        for (b, t) in self.blocks.iter_mut().zip(&trace.blocks) {
            b.absorb(t, &cfg);
        }
        for (s, (_, _, t)) in self.stages.iter_mut().zip(&trace.stages) {
            s.bn.absorb(&t.bn, &cfg);
        }
        self.projection.bn.absorb(&trace.projection.bn, &cfg);
    }

    pub fn predict_forward(&self, reps: &Tensor, mode: Mode) -> Result<(Tensor, MlpTrace)> {
        let [_, d] = reps.dims2("predictor input")?;
        if d != self.config.representation_dim {
            return shape_err(format!(
                "predictor expects width {}, got {d}",
                self.config.representation_dim
            ));
        }
        self.predictor.forward(reps.clone(), mode, &self.config.batchnorm, "predictor")
    }

    pub fn predict_backward(&mut self, trace: &MlpTrace, grad: &Tensor) -> Result<Tensor> {
        self.predictor.backward(trace, grad)
    }

    pub fn absorb_predictor(&mut self, trace: &MlpTrace) {
        let cfg = self.config.batchnorm;
        self.predictor.bn.absorb(&trace.bn, &cfg);
    }

    /// Eval-mode representations; no state is touched.
    pub fn encode_eval(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch, Mode::Eval)?.0)
    }

    /// Every tensor in checkpoint order: `(name, tensor, learnable)`.
    pub fn tensors(&self) -> Vec<(String, &Tensor, bool)> {
        let mut out = Vec::new();
        self.stem.collect("conv1", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("residual{}", i + 2);
            b.reduce.collect(&format!("{p}.reduce"), &mut out);
            b.spatial.collect(&format!("{p}.spatial"), &mut out);
            b.expand.collect(&format!("{p}.expand"), &mut out);
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.collect(&format!("conv{}", i + 4), &mut out);
        }
        self.projection.collect("dense", &mut out);
        self.predictor.collect("predictor", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor, bool)> {
        let mut out = Vec::new();
        self.stem.collect_mut("conv1", &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("residual{}", i + 2);
            b.reduce.collect_mut(&format!("{p}.reduce"), &mut out);
            b.spatial.collect_mut(&format!("{p}.spatial"), &mut out);
            b.expand.collect_mut(&format!("{p}.expand"), &mut out);
        }
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.collect_mut(&format!("conv{}", i + 4), &mut out);
        }
        self.projection.collect_mut("dense", &mut out);
        self.predictor.collect_mut("predictor", &mut out);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors_mut()
            .into_iter()
            .filter(|(_, _, learnable)| *learnable)
            .map(|(_, t, _)| t)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    /// Bitwise equality of the learnable parameters.
    pub fn same_parameters(&self, other: &EncoderState) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len()
            && a.iter().zip(&b).filter(|(x, _)| x.2).all(|(x, y)| {
                x.1.shape() == y.1.shape()
                    && x.1.data().iter().zip(y.1.data()).all(|(u, v)| u.to_bits() == v.to_bits())
            })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().filter(|t| t.2).map(|t| t.1.len()).sum()
    }
}

/// Representations of `batch`; train mode also updates the running statistics.
pub fn encode(state: &mut EncoderState, batch: &Tensor, mode: Mode) -> Result<Tensor> {
    let (reps, trace) = state.forward(batch, mode)?;
    if mode == Mode::Train {
        state.absorb(&trace);
    }
    Ok(reps)
}

pub fn predict_head(state: &mut EncoderState, reps: &Tensor, mode: Mode) -> Result<Tensor> {
    let (out, trace) = state.predict_forward(reps, mode)?;
    if mode == Mode::Train {
        state.absorb_predictor(&trace);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{numeric_grad, random_tensor, rel_error, weighted_sum};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            preset: ScalePreset::Custom,
            input_extent: 8,
            in_channels: 1,
            widths: vec![2, 2, 3, 3, 4],
            residual_blocks: 1,
            pool_kernel: 2,
            pool_stride: 2,
            hidden_dim: 5,
            representation_dim: 4,
            predictor_hidden_dim: 3,
            batchnorm: BatchNormConfig::default(),
        }
    }

    #[test]
    fn paper_preset_extents_follow_table() {
        let ext: Vec<usize> = EncoderConfig::paper().layer_extents().unwrap().iter().map(|e| e.1).collect();
        assert_eq!(ext, vec![96, 96, 96, 32, 32, 10, 10, 3, 3, 1]);
    }

    #[test]
    fn paper_preset_builds_with_256_dim_output() {
        let state = build_encoder(&EncoderConfig::paper(), 0).unwrap();
        assert_eq!(state.projection.out.weight.shape(), &[324, 256]);
        assert_eq!(state.predictor.out.weight.shape(), &[64, 256]);
        assert_eq!(state.stages.last().unwrap().weight.shape()[0], 256);
    }

    #[test]
    #[ignore = "a full 96³ forward pass takes minutes on one core"]
    fn paper_preset_forward_emits_256() {
        let state = build_encoder(&EncoderConfig::paper(), 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 96, 96, 96]);
        assert_eq!(state.encode_eval(&x).unwrap().shape(), &[1, 256]);
    }

    #[test]
    fn desk_preset_emits_configured_width() {
        let mut state = build_encoder(&EncoderConfig::desk(), 3).unwrap();
        let x = random_tensor(&[2, 1, 16, 16, 16], 1);
        assert_eq!(encode(&mut state, &x, Mode::Train).unwrap().shape(), &[2, 32]);
    }

    #[test]
    fn incompatible_extent_is_config_error() {
        let cfg = EncoderConfig::paper().with_extent(20);
        assert!(matches!(build_encoder(&cfg, 0), Err(Error::Config(_))));
        let cfg = EncoderConfig {
            representation_dim: 0,
            ..EncoderConfig::desk()
        };
        assert!(matches!(build_encoder(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_encoder(&EncoderConfig::desk(), 11).unwrap();
        let b = build_encoder(&EncoderConfig::desk(), 11).unwrap();
        let c = build_encoder(&EncoderConfig::desk(), 12).unwrap();
        assert!(a.same_parameters(&b));
        assert!(!a.same_parameters(&c));
    }

    #[test]
    fn wrong_batch_shape_errors() {
        let state = build_encoder(&tiny(), 0).unwrap();
        assert!(state.encode_eval(&Tensor::zeros(&[1, 1, 6, 8, 8])).is_err());
        assert!(state.encode_eval(&Tensor::zeros(&[1, 2, 8, 8, 8])).is_err());
    }

    #[test]
    fn zero_input_with_zero_bias_is_finite() {
        let state = build_encoder(&EncoderConfig::desk(), 0).unwrap();
        let reps = state.encode_eval(&Tensor::zeros(&[1, 1, 16, 16, 16])).unwrap();
        assert!(reps.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_mode_rows_are_independent() {
        let state = build_encoder(&tiny(), 5).unwrap();
        let a = random_tensor(&[1, 1, 8, 8, 8], 1);
        let b = random_tensor(&[1, 1, 8, 8, 8], 2);
        let batch = Tensor::stack(&[&a, &b, &a]).unwrap();
        let reps = state.encode_eval(&batch).unwrap();
        assert_eq!(reps.row(0), reps.row(2));
        assert_ne!(reps.row(0), reps.row(1));
    }

    #[test]
    fn eval_differs_from_train_after_warmup() {
        let mut state = build_encoder(&tiny(), 5).unwrap();
        let batch = random_tensor(&[3, 1, 8, 8, 8], 9);
        for _ in 0..3 {
            encode(&mut state, &batch, Mode::Train).unwrap();
        }
        let train = state.forward(&batch, Mode::Train).unwrap().0;
        let eval = state.encode_eval(&batch).unwrap();
        assert_ne!(train.data(), eval.data());
    }

    #[test]
    fn residual_with_zero_final_conv_is_relu() {
        let mut state = build_encoder(&tiny(), 2).unwrap();
        state.blocks[0].expand.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        let x = random_tensor(&[2, 2, 4, 4, 4], 3);
        let cfg = state.config.batchnorm;
        for mode in [Mode::Train, Mode::Eval] {
            let (y, _) = state.blocks[0].forward(x.clone(), mode, &cfg, "block").unwrap();
            assert_eq!(y.data(), relu(&x).data());
        }
    }

    #[test]
    fn forward_is_pure() {
        let state = build_encoder(&tiny(), 4).unwrap();
        let batch = random_tensor(&[2, 1, 8, 8, 8], 5);
        let a = state.forward(&batch, Mode::Train).unwrap().0;
        let b = state.forward(&batch, Mode::Train).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn predictor_preserves_shape_and_zero_weights_give_bias() {
        let mut state = build_encoder(&tiny(), 1).unwrap();
        let reps = random_tensor(&[5, 4], 2);
        assert_eq!(predict_head(&mut state, &reps, Mode::Train).unwrap().shape(), &[5, 4]);
        state.predictor.hidden.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        state.predictor.out.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        state.predictor.out.bias.data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.0]);
        let out = predict_head(&mut state, &reps, Mode::Train).unwrap();
        for i in 0..5 {
            assert_eq!(out.row(i), &[0.5, -1.0, 2.0, 0.0]);
        }
        assert!(state.predict_forward(&random_tensor(&[2, 3], 1), Mode::Eval).is_err());
    }

    #[test]
    fn predictor_gradient_matches_finite_differences() {
        let base = build_encoder(&tiny(), 8).unwrap();
        let reps = random_tensor(&[4, 4], 3);
        let coef = random_tensor(&[4, 4], 4);
        let mut state = base.clone();
        let (_, trace) = state.predict_forward(&reps, Mode::Train).unwrap();
        let grad_in = state.predict_backward(&trace, &coef).unwrap();
        let fd = numeric_grad(&reps, 1e-3, |r| weighted_sum(&base.predict_forward(r, Mode::Train).unwrap().0, &coef));
        assert!(rel_error(grad_in.data(), &fd) < 1e-3);
        let w = &base.predictor.hidden.weight;
        let fd_w = numeric_grad(w, 1e-3, |wp| {
            let mut s = base.clone();
            s.predictor.hidden.weight = wp.clone();
            weighted_sum(&s.predict_forward(&reps, Mode::Train).unwrap().0, &coef)
        });
        assert!(rel_error(state.predictor.hidden.weight.grad().unwrap(), &fd_w) < 1e-3);
    }

    #[test]
    fn encoder_parameter_gradients_match_finite_differences() {
        // two stages keep the deepest batch norm away from two-value batches,
        // whose output barely depends on the input
        let cfg = EncoderConfig {
            widths: vec![2, 2, 3, 4],
            ..tiny()
        };
        let base = build_encoder(&cfg, 21).unwrap();
        let x = random_tensor(&[3, 1, 8, 8, 8], 22);
        let coef = random_tensor(&[3, 4], 23);
        let mut state = base.clone();
        let (_, trace) = state.forward(&x, Mode::Train).unwrap();
        state.backward(&trace, &coef).unwrap();
        let w = &base.projection.out.weight;
        let fd = numeric_grad(w, 1e-3, |wp| {
            let mut s = base.clone();
            s.projection.out.weight = wp.clone();
            weighted_sum(&s.forward(&x, Mode::Train).unwrap().0, &coef)
        });
        assert!(rel_error(state.projection.out.weight.grad().unwrap(), &fd) < 1e-3);
        // max-pool and ReLU kinks below the projection make central
        // differences inexact; the error shrinks with the step
        let w = &base.stages[0].weight;
        let fd = numeric_grad(w, 1e-4, |wp| {
            let mut s = base.clone();
            s.stages[0].weight = wp.clone();
            weighted_sum(&s.forward(&x, Mode::Train).unwrap().0, &coef)
        });
        assert!(rel_error(state.stages[0].weight.grad().unwrap(), &fd) < 1e-2);
    }

    #[test]
    fn fingerprint_tracks_config() {
        assert_eq!(EncoderConfig::desk().fingerprint(), EncoderConfig::desk().fingerprint());
        assert_ne!(EncoderConfig::desk().fingerprint(), EncoderConfig::paper().fingerprint());
    }
}
